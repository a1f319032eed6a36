import { readFileSync } from 'node:fs';

export interface VocabRow {
  id: string;
  text: string;
}

export interface RelationRow {
  id: string;
  verbalization: string;
}

export interface TripleRow {
  s: string;
  r: string;
  o: string;
}

function parseLines(path: string): unknown[] {
  const out: unknown[] = [];
  const text = readFileSync(path, 'utf-8');
  text.split('\n').forEach((line, idx) => {
    const trimmed = line.trim();
    if (!trimmed) return;
    try {
      out.push(JSON.parse(trimmed));
    } catch (err) {
      throw new Error(`${path}:${idx + 1}: invalid JSON: ${String(err)}`);
    }
  });
  return out;
}

export function readVocab(path: string): VocabRow[] {
  const rows: VocabRow[] = [];
  const seen = new Set<string>();
  for (const obj of parseLines(path) as Record<string, unknown>[]) {
    if (typeof obj.id !== 'string' && typeof obj.id !== 'number') {
      throw new Error(`${path}: vocab rows need an 'id'`);
    }
    const id = String(obj.id);
    if (seen.has(id)) {
      throw new Error(`${path}: duplicate id ${JSON.stringify(id)}`);
    }
    seen.add(id);
    const text = obj.surface ?? obj.text ?? obj.verbalization;
    rows.push({ id, text: typeof text === 'string' ? text : '' });
  }
  return rows;
}

export function readRelations(path: string): RelationRow[] {
  return (parseLines(path) as Record<string, unknown>[]).map((obj) => {
    if (typeof obj.id !== 'string' || typeof obj.verbalization !== 'string') {
      throw new Error(`${path}: relation rows need 'id' and 'verbalization'`);
    }
    return { id: obj.id, verbalization: obj.verbalization };
  });
}

export function readTriples(path: string): TripleRow[] {
  return (parseLines(path) as Record<string, unknown>[]).map((obj) => {
    for (const key of ['s', 'r', 'o']) {
      if (!(key in obj)) {
        throw new Error(`${path}: triple rows need 's', 'r', 'o'`);
      }
    }
    return { s: String(obj.s), r: String(obj.r), o: String(obj.o) };
  });
}
