/**
 * Masked-sentence construction for (subject, relation, object)
 * candidates. The four strings must match the consuming pipeline's
 * builder byte-for-byte, since they double as embedding-store keys; the
 * shared golden fixture pins the contract.
 */

export const MASK = '[MASK]';

export interface MaskedSentences {
  a: string; // relation masked
  b: string; // object masked
  c: string; // subject masked
  d: string; // no mask
}

export function buildMaskedSentences(subject: string, verbalization: string, object: string): MaskedSentences {
  if (!subject.trim() || !object.trim()) {
    throw new Error('entity surfaces must be non-empty');
  }
  if (!verbalization.trim()) {
    throw new Error('relation verbalization must be non-empty');
  }
  return {
    a: `${subject} ${MASK} ${object}`,
    b: `${subject} ${verbalization} ${MASK}`,
    c: `${MASK} ${verbalization} ${object}`,
    d: `${subject} ${verbalization} ${object}`,
  };
}
