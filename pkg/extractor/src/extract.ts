/** Extraction jobs: encode every record of an input manifest and dump the
 * vectors as one EMB1 file, plus a JSONL pair manifest (when the records
 * carry pairing info) and a run manifest describing what happened.
 *
 * Input manifests are JSONL:
 *   text:  {"id": "cap3_0", "text": "a dog runs", "group": "g3", "image": "img3"}
 *   image: {"id": "img3", "path": "images/3.jpg", "group": "g3"}
 *
 * "group"/"image" are optional on text records; when both are present the
 * job also emits {"src": id, "tgt": image, "group": group} pair lines.
 *
 * Per-item failures do not abort a run: empty captions are skipped with a
 * warning, unreadable images produce an error record and the run continues.
 * Output files are written atomically once the whole batch is done.
 */

import { promises as fs } from 'node:fs';
import path from 'node:path';

import { writeEmb, writePairs, makeMatrix, PairLine } from './emb1.js';
import { Encoder, MockOptions, loadImageEncoder, loadTextEncoder } from './encoders.js';
import { pool, PoolingMode } from './pooling.js';
import { DataError, FormatError } from './errors.js';

const BATCH_SIZE = 8;

export interface TextRecord {
  id: string;
  text: string;
  group?: string;
  image?: string;
}

export interface ImageRecord {
  id: string;
  path: string;
  group?: string;
}

export interface SkipRecord {
  id: string;
  reason: string;
}

export interface ErrorRecord {
  id: string;
  path: string;
  error: string;
}

export interface RunManifest {
  kind: 'text' | 'image';
  encoder: string;
  deterministic: boolean;
  determinism_note: string;
  pooling: PoolingMode | null;
  mode: 'pooled' | 'sequence';
  hidden_width: number;
  batch_size: number;
  input: string;
  output: string;
  rows_written: number;
  items_encoded: number;
  skipped: SkipRecord[];
  errors: ErrorRecord[];
  duration_ms: number;
}

export interface TextJob {
  inputPath: string;
  encoder: string;
  pooling: PoolingMode;
  outPath: string;
  pairsOutPath?: string;
  mock?: MockOptions;
}

export interface ImageJob {
  inputPath: string;
  encoder: string;
  mode: 'pooled' | 'sequence';
  pooling: PoolingMode;
  outPath: string;
  mock?: MockOptions;
}

async function readJsonl(filePath: string): Promise<any[]> {
  const text = await fs.readFile(filePath, 'utf-8');
  const records: any[] = [];
  text.split('\n').forEach((line, i) => {
    if (!line.trim()) return;
    try {
      records.push(JSON.parse(line));
    } catch (err) {
      throw new FormatError(`${filePath}:${i + 1}: invalid JSON (${(err as Error).message})`);
    }
  });
  return records;
}

function requireField(record: any, field: string, filePath: string, index: number): string {
  const value = record[field];
  if (typeof value !== 'string' || value.length === 0) {
    if (field === 'text' && typeof value === 'string') return value; // empty text handled by caller
    throw new FormatError(`${filePath}: record ${index} is missing "${field}"`);
  }
  return value;
}

async function mapBatched<T, R>(items: T[], fn: (item: T) => Promise<R>): Promise<R[]> {
  const out: R[] = [];
  for (let start = 0; start < items.length; start += BATCH_SIZE) {
    const chunk = items.slice(start, start + BATCH_SIZE);
    out.push(...(await Promise.all(chunk.map(fn))));
  }
  return out;
}

async function writeRunManifest(manifest: RunManifest, outPath: string): Promise<void> {
  const target = `${outPath}.run.json`;
  const tmp = path.join(path.dirname(target), `.${path.basename(target)}.tmp`);
  await fs.writeFile(tmp, JSON.stringify(manifest, null, 2) + '\n', 'utf-8');
  await fs.rename(tmp, target);
}

function determinismNote(encoder: Encoder): string {
  return encoder.deterministic
    ? 'content-hash encoder: identical inputs give identical files'
    : 'best effort: model inference may vary across hardware/backends';
}

export async function extractText(job: TextJob): Promise<RunManifest> {
  const started = Date.now();
  const encoder = await loadTextEncoder(job.encoder, job.mock ?? {});
  const raw = await readJsonl(job.inputPath);

  const records: TextRecord[] = [];
  const skipped: SkipRecord[] = [];
  raw.forEach((record, i) => {
    const id = requireField(record, 'id', job.inputPath, i);
    const text = requireField(record, 'text', job.inputPath, i);
    if (text.trim().length === 0) {
      skipped.push({ id, reason: 'empty caption' });
      console.error(`warning: skipping ${id}: empty caption`);
      return;
    }
    records.push({ id, text, group: record.group, image: record.image });
  });
  if (records.length === 0) throw new DataError(`${job.inputPath}: no usable captions`);

  const vectors = await mapBatched(records, async (r) => pool(await encoder.encode(r.text), job.pooling));
  const matrix = makeMatrix(vectors, records.map((r) => r.id));
  await writeEmb(matrix, job.outPath);

  const pairs: PairLine[] = records
    .filter((r) => r.group && r.image)
    .map((r) => ({ src: r.id, tgt: r.image as string, group: r.group as string }));
  if (job.pairsOutPath) {
    if (pairs.length === 0) {
      throw new DataError(`${job.inputPath}: --pairs-out given but no records carry both "group" and "image"`);
    }
    await writePairs(pairs, job.pairsOutPath);
  }

  const manifest: RunManifest = {
    kind: 'text',
    encoder: encoder.name,
    deterministic: encoder.deterministic,
    determinism_note: determinismNote(encoder),
    pooling: job.pooling,
    mode: 'pooled',
    hidden_width: matrix.d,
    batch_size: BATCH_SIZE,
    input: job.inputPath,
    output: job.outPath,
    rows_written: matrix.n,
    items_encoded: records.length,
    skipped,
    errors: [],
    duration_ms: Date.now() - started,
  };
  await writeRunManifest(manifest, job.outPath);
  return manifest;
}

export async function extractImage(job: ImageJob): Promise<RunManifest> {
  const started = Date.now();
  const encoder = await loadImageEncoder(job.encoder, job.mock ?? {});
  const raw = await readJsonl(job.inputPath);

  const records: ImageRecord[] = raw.map((record, i) => ({
    id: requireField(record, 'id', job.inputPath, i),
    path: requireField(record, 'path', job.inputPath, i),
    group: record.group,
  }));

  const errors: ErrorRecord[] = [];
  type LoadedImage = { record: ImageRecord; bytes: Buffer };
  const loaded = await mapBatched<ImageRecord, LoadedImage | null>(records, async (r) => {
    try {
      return { record: r, bytes: await fs.readFile(r.path) };
    } catch (err) {
      errors.push({ id: r.id, path: r.path, error: (err as Error).message });
      console.error(`warning: skipping ${r.id}: ${(err as Error).message}`);
      return null;
    }
  });
  const usable = loaded.filter((x): x is LoadedImage => x !== null);
  if (usable.length === 0) throw new DataError(`${job.inputPath}: no readable images`);

  const tokenMatrices = await mapBatched(usable, (x) => encoder.encode(x.bytes));

  const rows: Float32Array[] = [];
  const ids: string[] = [];
  usable.forEach((x, i) => {
    const tokens = tokenMatrices[i];
    if (job.mode === 'pooled') {
      rows.push(pool(tokens, job.pooling));
      ids.push(x.record.id);
    } else {
      for (let t = 0; t < tokens.rows; t++) {
        rows.push(tokens.data.slice(t * tokens.cols, (t + 1) * tokens.cols));
        ids.push(`${x.record.id}#p${String(t).padStart(2, '0')}`);
      }
    }
  });
  const matrix = makeMatrix(rows, ids);
  await writeEmb(matrix, job.outPath);

  const manifest: RunManifest = {
    kind: 'image',
    encoder: encoder.name,
    deterministic: encoder.deterministic,
    determinism_note: determinismNote(encoder),
    pooling: job.mode === 'pooled' ? job.pooling : null,
    mode: job.mode,
    hidden_width: matrix.d,
    batch_size: BATCH_SIZE,
    input: job.inputPath,
    output: job.outPath,
    rows_written: matrix.n,
    items_encoded: usable.length,
    skipped: [],
    errors,
    duration_ms: Date.now() - started,
  };
  await writeRunManifest(manifest, job.outPath);
  return manifest;
}
