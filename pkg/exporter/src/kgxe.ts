/**
 * KGXE v1 binary embedding files.
 *
 * Layout (all integers little-endian): magic "KGXE", u16 version=1,
 * u32 dim, u32 count, length-prefixed UTF-8 JSON metadata, then `count`
 * records of (u32 id byte-length, id UTF-8 bytes, dim float32 values).
 */

export const KGXE_MAGIC = 'KGXE';
export const KGXE_VERSION = 1;

export class FormatError extends Error {}

export interface KgxeStore {
  dim: number;
  metadata: Record<string, unknown>;
  entries: Map<string, Float32Array>;
}

export function encodeKgxe(store: KgxeStore): Buffer {
  const chunks: Buffer[] = [];
  const header = Buffer.alloc(4 + 2 + 4 + 4);
  header.write(KGXE_MAGIC, 0, 'ascii');
  header.writeUInt16LE(KGXE_VERSION, 4);
  header.writeUInt32LE(store.dim, 6);
  header.writeUInt32LE(store.entries.size, 10);
  chunks.push(header);
  chunks.push(lengthPrefixed(Buffer.from(JSON.stringify(store.metadata), 'utf-8')));
  for (const [id, vec] of store.entries) {
    if (vec.length !== store.dim) {
      throw new FormatError(`entry ${JSON.stringify(id)} has dim ${vec.length}, store dim is ${store.dim}`);
    }
    chunks.push(lengthPrefixed(Buffer.from(id, 'utf-8')));
    const payload = Buffer.alloc(4 * store.dim);
    for (let i = 0; i < store.dim; i++) {
      payload.writeFloatLE(vec[i], 4 * i);
    }
    chunks.push(payload);
  }
  return Buffer.concat(chunks);
}

function lengthPrefixed(data: Buffer): Buffer {
  const out = Buffer.alloc(4 + data.length);
  out.writeUInt32LE(data.length, 0);
  data.copy(out, 4);
  return out;
}

class Cursor {
  pos = 0;
  constructor(private buf: Buffer) {}

  take(n: number): Buffer {
    if (n < 0 || this.pos + n > this.buf.length) {
      throw new FormatError('unexpected end of file');
    }
    const out = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }

  u16(): number {
    return this.take(2).readUInt16LE(0);
  }

  u32(): number {
    return this.take(4).readUInt32LE(0);
  }

  string(): string {
    return this.take(this.u32()).toString('utf-8');
  }

  atEnd(): boolean {
    return this.pos === this.buf.length;
  }
}

export function decodeKgxe(data: Buffer): KgxeStore {
  const cur = new Cursor(data);
  const magic = cur.take(4).toString('ascii');
  if (magic !== KGXE_MAGIC) {
    throw new FormatError(`bad magic ${JSON.stringify(magic)}`);
  }
  const version = cur.u16();
  if (version !== KGXE_VERSION) {
    throw new FormatError(`unsupported version ${version}`);
  }
  const dim = cur.u32();
  const count = cur.u32();
  let metadata: Record<string, unknown>;
  try {
    metadata = JSON.parse(cur.string());
  } catch (err) {
    throw new FormatError(`corrupt metadata block: ${String(err)}`);
  }
  const entries = new Map<string, Float32Array>();
  for (let i = 0; i < count; i++) {
    const id = cur.string();
    if (entries.has(id)) {
      throw new FormatError(`duplicate id ${JSON.stringify(id)}`);
    }
    const raw = cur.take(4 * dim);
    const vec = new Float32Array(dim);
    for (let k = 0; k < dim; k++) {
      vec[k] = raw.readFloatLE(4 * k);
    }
    entries.set(id, vec);
  }
  if (!cur.atEnd()) {
    throw new FormatError('trailing bytes after payload');
  }
  return { dim, metadata, entries };
}
