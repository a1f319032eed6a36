/**
 * Embedding backends behind one async contract.
 *
 * `transformers` runs a feature-extraction pipeline with mean pooling
 * over final-layer tokens (special tokens excluded by the pipeline's
 * pooling) and passes "[MASK]" through as the model's own mask token.
 * `hash` is a deterministic, dependency-free stand-in for hermetic runs:
 * per-token pseudo-random vectors summed over whitespace tokens, with
 * the mask contributing zero.
 */

import { createHash } from 'node:crypto';

import { MASK } from './sentences.js';

export class ExportError extends Error {}

export interface EmbeddingBackend {
  readonly name: string;
  readonly dim: number;
  readonly revision: string;
  embed(texts: string[]): Promise<Float32Array[]>;
}

export class HashBackend implements EmbeddingBackend {
  readonly name: string;
  readonly revision = 'n/a';

  constructor(readonly dim: number = 32, private seed: number = 0) {
    this.name = `hash-additive-${seed}`;
  }

  private tokenVector(token: string): Float32Array {
    const vec = new Float32Array(this.dim);
    if (token === MASK) return vec;
    let block = 0;
    let offset = 0;
    while (offset < this.dim) {
      const digest = createHash('sha256').update(`${this.seed}|${token}|${block}`).digest();
      for (let i = 0; i + 4 <= digest.length && offset < this.dim; i += 4) {
        const u = digest.readUInt32LE(i);
        vec[offset] = (u / 2147483648 - 1) / Math.sqrt(this.dim);
        offset += 1;
      }
      block += 1;
    }
    return vec;
  }

  async embed(texts: string[]): Promise<Float32Array[]> {
    return texts.map((text) => {
      const tokens = text.split(/\s+/).filter(Boolean);
      if (!tokens.length) {
        throw new ExportError('cannot embed empty text');
      }
      const out = new Float32Array(this.dim);
      for (const token of tokens) {
        const tv = this.tokenVector(token);
        for (let i = 0; i < this.dim; i++) out[i] += tv[i];
      }
      return out;
    });
  }
}

type FeaturePipeline = (texts: string[], opts: { pooling: 'mean'; normalize: boolean }) => Promise<{
  dims: number[];
  data: Float32Array | number[];
}>;

export class TransformersBackend implements EmbeddingBackend {
  readonly revision: string;
  dim = 0;

  private constructor(
    readonly name: string,
    revision: string,
    private pipe: FeaturePipeline,
    private maskToken: string,
  ) {
    this.revision = revision;
  }

  static async load(model: string, revision = 'main'): Promise<TransformersBackend> {
    // non-literal specifier: the package is an optional dependency and
    // may be absent in offline environments
    const moduleName = '@huggingface/transformers';
    let mod: { pipeline: (task: string, model: string, opts: { revision: string }) => Promise<unknown> };
    try {
      mod = await import(moduleName);
    } catch (err) {
      throw new ExportError(`transformers backend unavailable: ${String(err)}`);
    }
    try {
      const pipe = (await mod.pipeline('feature-extraction', model, { revision })) as FeaturePipeline & {
        tokenizer?: { mask_token?: string };
      };
      const maskToken = pipe.tokenizer?.mask_token ?? MASK;
      return new TransformersBackend(model, revision, pipe, maskToken);
    } catch (err) {
      throw new ExportError(`cannot load model ${JSON.stringify(model)}: ${String(err)}`);
    }
  }

  async embed(texts: string[]): Promise<Float32Array[]> {
    // the literal [MASK] in keys maps onto the model's own mask token
    const prepared = texts.map((t) => t.split(MASK).join(this.maskToken));
    const result = await this.pipe(prepared, { pooling: 'mean', normalize: false });
    const [n, dim] = result.dims.length === 2 ? result.dims : [1, result.dims[result.dims.length - 1]];
    if (n !== texts.length) {
      throw new ExportError(`model returned ${n} rows for ${texts.length} inputs`);
    }
    this.dim = dim;
    const flat = result.data instanceof Float32Array ? result.data : Float32Array.from(result.data);
    const out: Float32Array[] = [];
    for (let i = 0; i < n; i++) {
      out.push(flat.slice(i * dim, (i + 1) * dim));
    }
    return out;
  }
}

export async function loadBackend(spec: {
  backend: string;
  model?: string;
  revision?: string;
  dim?: number;
  seed?: number;
}): Promise<EmbeddingBackend> {
  if (spec.backend === 'hash') {
    return new HashBackend(spec.dim ?? 32, spec.seed ?? 0);
  }
  if (spec.backend === 'transformers') {
    if (!spec.model) {
      throw new ExportError('the transformers backend needs --model');
    }
    return TransformersBackend.load(spec.model, spec.revision ?? 'main');
  }
  throw new ExportError(`unknown backend ${JSON.stringify(spec.backend)}`);
}
