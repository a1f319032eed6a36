#!/usr/bin/env node
/**
 * gkfusion-export: write language-model embeddings as KGXE files.
 *
 *   export        --vocab v.jsonl --model <name> --out e.kgxe
 *   export-quads  --triples t.jsonl --vocab v.jsonl --relations r.jsonl
 *                 --model <name> --out q.kgxe
 *
 * `--backend hash [--dim N] [--seed S]` selects the deterministic
 * offline backend instead of a pretrained model.
 */

import { parseArgs } from 'node:util';

import { ExportError, loadBackend } from './backends.js';
import { exportQuads, exportVocab } from './export.js';

const OPTIONS = {
  vocab: { type: 'string' as const },
  triples: { type: 'string' as const },
  relations: { type: 'string' as const },
  model: { type: 'string' as const },
  revision: { type: 'string' as const },
  backend: { type: 'string' as const, default: 'transformers' },
  dim: { type: 'string' as const },
  seed: { type: 'string' as const },
  out: { type: 'string' as const },
  help: { type: 'boolean' as const, default: false },
};

const USAGE = `usage:
  gkfusion-export export --vocab v.jsonl --model <name> --out e.kgxe
  gkfusion-export export-quads --triples t.jsonl --vocab v.jsonl --relations r.jsonl --model <name> --out q.kgxe
options:
  --backend transformers|hash   (default transformers)
  --revision <rev>              model revision to pin (default main)
  --dim N --seed S              hash backend parameters
`;

function need(values: Record<string, unknown>, key: string): string {
  const v = values[key];
  if (typeof v !== 'string' || !v) {
    throw new UsageError(`missing required --${key}`);
  }
  return v;
}

class UsageError extends Error {}

export async function run(argv: string[]): Promise<number> {
  let command: string | undefined;
  let values: Record<string, unknown>;
  try {
    const parsed = parseArgs({ args: argv, options: OPTIONS, allowPositionals: true });
    values = parsed.values;
    command = parsed.positionals[0];
    if (values.help || !command) {
      process.stderr.write(USAGE);
      return values.help ? 0 : 1;
    }
    if (command !== 'export' && command !== 'export-quads') {
      throw new UsageError(`unknown command ${JSON.stringify(command)}`);
    }
    const backend = await loadBackend({
      backend: String(values.backend),
      model: values.model as string | undefined,
      revision: values.revision as string | undefined,
      dim: values.dim ? Number(values.dim) : undefined,
      seed: values.seed ? Number(values.seed) : undefined,
    });
    const out = need(values, 'out');
    const result =
      command === 'export'
        ? await exportVocab(backend, need(values, 'vocab'), out, (m) => process.stderr.write(m + '\n'))
        : await exportQuads(
            backend,
            need(values, 'triples'),
            need(values, 'vocab'),
            need(values, 'relations'),
            out,
            (m) => process.stderr.write(m + '\n'),
          );
    process.stdout.write(
      JSON.stringify({ command, records: result.records, dim: result.dim, skipped_empty: result.skippedEmpty }) + '\n',
    );
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      process.stderr.write(`gkfusion-export: ${err.message}\n${USAGE}`);
      return 1;
    }
    if (err instanceof ExportError) {
      process.stderr.write(`gkfusion-export: ${err.message}\n`);
      return 2;
    }
    process.stderr.write(`gkfusion-export: ${String(err instanceof Error ? err.message : err)}\n`);
    return 2;
  }
}

const invokedDirectly = process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop() as string);
if (invokedDirectly) {
  run(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
