/** EMB1 container encode/decode, byte-compatible with the Python toolkit.
 *
 * Layout (little-endian):
 *   magic "EMB1" | version u32 = 1 | n u64 | d u64 | dtype u8 = 1 | 7 zero bytes
 *   n*d float32 values, row-major
 *   per row: u16 byte length + UTF-8 id bytes
 */

import { promises as fs } from 'node:fs';
import path from 'node:path';

import { CorruptionError, FormatError, ValidationError } from './errors.js';

const MAGIC = 'EMB1';
const VERSION = 1;
const DTYPE_F32 = 1;
const HEADER_SIZE = 32;

export interface EmbeddingMatrix {
  /** row-major n*d values */
  values: Float32Array;
  ids: string[];
  n: number;
  d: number;
}

export function makeMatrix(rows: Float32Array[] | number[][], ids: string[]): EmbeddingMatrix {
  const n = rows.length;
  if (n < 1) throw new ValidationError('matrix needs at least one row');
  const d = rows[0].length;
  if (d < 1) throw new ValidationError('embedding dimension must be >= 1');
  if (ids.length !== n) throw new ValidationError(`${ids.length} ids for ${n} rows`);
  if (new Set(ids).size !== n) throw new ValidationError('duplicate row ids');
  const values = new Float32Array(n * d);
  rows.forEach((row, i) => {
    if (row.length !== d) throw new ValidationError(`row ${i} has width ${row.length}, expected ${d}`);
    values.set(row instanceof Float32Array ? row : Float32Array.from(row), i * d);
  });
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) {
      throw new ValidationError(`non-finite value in row ${Math.floor(i / d)} (${ids[Math.floor(i / d)]})`);
    }
  }
  return { values, ids, n, d };
}

export function encodeEmb(m: EmbeddingMatrix): Buffer {
  const header = Buffer.alloc(HEADER_SIZE);
  header.write(MAGIC, 0, 'ascii');
  header.writeUInt32LE(VERSION, 4);
  header.writeBigUInt64LE(BigInt(m.n), 8);
  header.writeBigUInt64LE(BigInt(m.d), 16);
  header.writeUInt8(DTYPE_F32, 24);

  const payload = Buffer.alloc(m.n * m.d * 4);
  for (let i = 0; i < m.values.length; i++) {
    payload.writeFloatLE(m.values[i], i * 4);
  }

  const idParts: Buffer[] = [];
  for (const id of m.ids) {
    const bytes = Buffer.from(id, 'utf-8');
    if (bytes.length > 0xffff) throw new ValidationError(`id longer than 65535 bytes: ${id.slice(0, 40)}...`);
    const len = Buffer.alloc(2);
    len.writeUInt16LE(bytes.length, 0);
    idParts.push(len, bytes);
  }
  return Buffer.concat([header, payload, ...idParts]);
}

export function decodeEmb(data: Buffer, label = 'buffer'): EmbeddingMatrix {
  if (data.subarray(0, 4).toString('ascii') !== MAGIC) {
    throw new FormatError(`${label}: bad magic`);
  }
  if (data.length < HEADER_SIZE) throw new CorruptionError(`${label}: truncated header`);
  const version = data.readUInt32LE(4);
  if (version !== VERSION) throw new FormatError(`${label}: unsupported version ${version}`);
  const n = Number(data.readBigUInt64LE(8));
  const d = Number(data.readBigUInt64LE(16));
  if (data.readUInt8(24) !== DTYPE_F32) throw new FormatError(`${label}: unsupported dtype`);
  if (n < 1 || d < 1) throw new ValidationError(`${label}: invalid dimensions n=${n}, d=${d}`);

  let offset = HEADER_SIZE;
  const payloadBytes = n * d * 4;
  if (data.length < offset + payloadBytes) throw new CorruptionError(`${label}: payload truncated`);
  const values = new Float32Array(n * d);
  for (let i = 0; i < values.length; i++) {
    values[i] = data.readFloatLE(offset + i * 4);
    if (!Number.isFinite(values[i])) {
      throw new ValidationError(`${label}: non-finite value at row ${Math.floor(i / d)}`);
    }
  }
  offset += payloadBytes;

  const ids: string[] = [];
  for (let i = 0; i < n; i++) {
    if (offset + 2 > data.length) throw new CorruptionError(`${label}: id table truncated at record ${i}`);
    const len = data.readUInt16LE(offset);
    offset += 2;
    if (offset + len > data.length) throw new CorruptionError(`${label}: id ${i} truncated`);
    ids.push(data.subarray(offset, offset + len).toString('utf-8'));
    offset += len;
  }
  if (offset !== data.length) throw new CorruptionError(`${label}: trailing bytes after id table`);
  if (new Set(ids).size !== n) throw new ValidationError(`${label}: duplicate row ids`);
  return { values, ids, n, d };
}

/** Write atomically: temp file in the same directory, then rename. */
export async function writeEmb(m: EmbeddingMatrix, outPath: string): Promise<void> {
  const tmp = path.join(path.dirname(outPath), `.${path.basename(outPath)}.tmp`);
  await fs.writeFile(tmp, encodeEmb(m));
  await fs.rename(tmp, outPath);
}

export async function readEmb(filePath: string): Promise<EmbeddingMatrix> {
  return decodeEmb(await fs.readFile(filePath), filePath);
}

export interface PairLine {
  src: string;
  tgt: string;
  group: string;
}

/** JSONL pair manifest, same shape the Python toolkit consumes. */
export function encodePairs(lines: PairLine[]): string {
  return lines
    .map((e) => JSON.stringify({ src: e.src, tgt: e.tgt, group: e.group }))
    .map((line) => line + '\n')
    .join('');
}

export async function writePairs(lines: PairLine[], outPath: string): Promise<void> {
  const tmp = path.join(path.dirname(outPath), `.${path.basename(outPath)}.tmp`);
  await fs.writeFile(tmp, encodePairs(lines), 'utf-8');
  await fs.rename(tmp, outPath);
}
