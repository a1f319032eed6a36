import { mkdtempSync, readFileSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import { describe, expect, it } from 'vitest';

import { run } from '../src/cli.js';
import { decodeKgxe } from '../src/kgxe.js';

function setup(): { dir: string; vocab: string } {
  const dir = mkdtempSync(join(tmpdir(), 'kgxe-cli-'));
  const vocab = join(dir, 'vocab.jsonl');
  writeFileSync(
    vocab,
    [
      JSON.stringify({ id: 'e0', surface: 'alpha' }),
      JSON.stringify({ id: 'e1', surface: 'beta' }),
    ].join('\n') + '\n',
  );
  return { dir, vocab };
}

describe('cli', () => {
  it('exports with the hash backend', async () => {
    const { dir, vocab } = setup();
    const out = join(dir, 'out.kgxe');
    const code = await run(['export', '--vocab', vocab, '--backend', 'hash', '--dim', '16', '--seed', '4', '--out', out]);
    expect(code).toBe(0);
    const store = decodeKgxe(readFileSync(out));
    expect(store.entries.size).toBe(2);
    expect(store.dim).toBe(16);
    const manifest = JSON.parse(readFileSync(out + '.manifest.json', 'utf-8'));
    expect(manifest.pooling).toBe('mean');
    expect(manifest.vocabulary).toBe('vocab.jsonl');
  });

  it('export-quads writes sentence-keyed records', async () => {
    const { dir, vocab } = setup();
    const relations = join(dir, 'relations.jsonl');
    writeFileSync(relations, JSON.stringify({ id: 'r0', verbalization: 'binds' }) + '\n');
    const triples = join(dir, 'triples.jsonl');
    writeFileSync(triples, JSON.stringify({ s: 'e0', r: 'r0', o: 'e1' }) + '\n');
    const out = join(dir, 'quads.kgxe');
    const code = await run([
      'export-quads', '--triples', triples, '--vocab', vocab, '--relations', relations,
      '--backend', 'hash', '--out', out,
    ]);
    expect(code).toBe(0);
    const store = decodeKgxe(readFileSync(out));
    expect([...store.entries.keys()].sort()).toEqual([
      '[MASK] binds beta',
      'alpha [MASK] beta',
      'alpha binds [MASK]',
      'alpha binds beta',
    ]);
  });

  it('unknown command exits 1', async () => {
    expect(await run(['frobnicate'])).toBe(1);
  });

  it('missing --out exits 1', async () => {
    const { vocab } = setup();
    expect(await run(['export', '--vocab', vocab, '--backend', 'hash'])).toBe(1);
  });

  it('transformers backend without --model exits 2', async () => {
    const { dir, vocab } = setup();
    expect(await run(['export', '--vocab', vocab, '--out', join(dir, 'x.kgxe')])).toBe(2);
  });

  it('unknown backend exits 2', async () => {
    const { dir, vocab } = setup();
    expect(await run(['export', '--vocab', vocab, '--backend', 'magic', '--out', join(dir, 'x.kgxe')])).toBe(2);
  });
});
