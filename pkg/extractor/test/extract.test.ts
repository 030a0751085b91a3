import assert from 'node:assert/strict';
import { test } from 'node:test';
import { promises as fs } from 'node:fs';
import os from 'node:os';
import path from 'node:path';

import { readEmb } from '../src/emb1.js';
import { loadTextEncoder } from '../src/encoders.js';
import { extractImage, extractText } from '../src/extract.js';
import { SetupError } from '../src/errors.js';

async function tmpdir(): Promise<string> {
  return fs.mkdtemp(path.join(os.tmpdir(), 'emb-extract-'));
}

async function writeJsonl(filePath: string, records: object[]): Promise<void> {
  await fs.writeFile(filePath, records.map((r) => JSON.stringify(r) + '\n').join(''), 'utf-8');
}

test('five captions give five rows of the encoder width', async () => {
  const dir = await tmpdir();
  const input = path.join(dir, 'caps.jsonl');
  await writeJsonl(
    input,
    [0, 1, 2, 3, 4].map((i) => ({ id: `cap${i}`, text: `caption number ${i}`, group: 'g0', image: 'img0' })),
  );
  const out = path.join(dir, 'caps.emb');
  const manifest = await extractText({
    inputPath: input,
    encoder: 'mock',
    pooling: 'mean',
    outPath: out,
    pairsOutPath: path.join(dir, 'pairs.jsonl'),
    mock: { hiddenWidth: 12 },
  });
  const m = await readEmb(out);
  assert.equal(m.n, 5);
  assert.equal(m.d, 12);
  assert.deepEqual(m.ids, ['cap0', 'cap1', 'cap2', 'cap3', 'cap4']);
  assert.equal(manifest.rows_written, 5);
  assert.equal(manifest.hidden_width, 12);
  const pairs = (await fs.readFile(path.join(dir, 'pairs.jsonl'), 'utf-8'))
    .trimEnd()
    .split('\n')
    .map((line) => JSON.parse(line));
  assert.equal(pairs.length, 5);
  assert.ok(pairs.every((p) => p.tgt === 'img0' && p.group === 'g0'));
});

test('an empty caption is skipped with a warning record', async () => {
  const dir = await tmpdir();
  const input = path.join(dir, 'caps.jsonl');
  await writeJsonl(input, [
    { id: 'a', text: 'fine' },
    { id: 'b', text: '   ' },
    { id: 'c', text: 'also fine' },
    { id: 'd', text: 'yes' },
    { id: 'e', text: 'sure' },
  ]);
  const out = path.join(dir, 'caps.emb');
  const manifest = await extractText({ inputPath: input, encoder: 'mock', pooling: 'mean', outPath: out });
  assert.equal((await readEmb(out)).n, 4);
  assert.deepEqual(manifest.skipped, [{ id: 'b', reason: 'empty caption' }]);
});

test('identical inputs produce identical files (deterministic mode)', async () => {
  const dir = await tmpdir();
  const input = path.join(dir, 'caps.jsonl');
  await writeJsonl(input, [
    { id: 'x', text: 'the same text' },
    { id: 'y', text: 'another line' },
  ]);
  const outA = path.join(dir, 'a.emb');
  const outB = path.join(dir, 'b.emb');
  const first = await extractText({ inputPath: input, encoder: 'mock', pooling: 'mean', outPath: outA });
  await extractText({ inputPath: input, encoder: 'mock', pooling: 'mean', outPath: outB });
  assert.ok(first.deterministic);
  assert.deepEqual(await fs.readFile(outA), await fs.readFile(outB));
});

test('mean and cls pooling disagree on multi-token text', async () => {
  const dir = await tmpdir();
  const input = path.join(dir, 'caps.jsonl');
  await writeJsonl(input, [{ id: 'x', text: 'several words here to make tokens' }]);
  const mean = path.join(dir, 'mean.emb');
  const cls = path.join(dir, 'cls.emb');
  await extractText({ inputPath: input, encoder: 'mock', pooling: 'mean', outPath: mean });
  await extractText({ inputPath: input, encoder: 'mock', pooling: 'cls', outPath: cls });
  assert.notDeepEqual(await fs.readFile(mean), await fs.readFile(cls));
});

test('pooled image mode writes one row per image', async () => {
  const dir = await tmpdir();
  await fs.writeFile(path.join(dir, 'one.img'), 'pretend-image-bytes-1');
  await fs.writeFile(path.join(dir, 'two.img'), 'pretend-image-bytes-2');
  const input = path.join(dir, 'imgs.jsonl');
  await writeJsonl(input, [
    { id: 'img0', path: path.join(dir, 'one.img') },
    { id: 'img1', path: path.join(dir, 'two.img') },
  ]);
  const out = path.join(dir, 'imgs.emb');
  await extractImage({ inputPath: input, encoder: 'mock', mode: 'pooled', pooling: 'mean', outPath: out, mock: { hiddenWidth: 12 } });
  const m = await readEmb(out);
  assert.equal(m.n, 2);
  assert.deepEqual(m.ids, ['img0', 'img1']);
});

test('sequence mode writes 50 position-tagged rows per image by default', async () => {
  const dir = await tmpdir();
  await fs.writeFile(path.join(dir, 'one.img'), 'pretend-image-bytes');
  const input = path.join(dir, 'imgs.jsonl');
  await writeJsonl(input, [{ id: 'img0', path: path.join(dir, 'one.img') }]);
  const out = path.join(dir, 'imgs.emb');
  await extractImage({ inputPath: input, encoder: 'mock', mode: 'sequence', pooling: 'mean', outPath: out });
  const m = await readEmb(out);
  assert.equal(m.n, 50);
  assert.equal(m.ids[0], 'img0#p00');
  assert.equal(m.ids[49], 'img0#p49');
});

test('an unreadable image becomes an error record and the run continues', async () => {
  const dir = await tmpdir();
  await fs.writeFile(path.join(dir, 'ok.img'), 'readable');
  const input = path.join(dir, 'imgs.jsonl');
  await writeJsonl(input, [
    { id: 'good', path: path.join(dir, 'ok.img') },
    { id: 'bad', path: path.join(dir, 'missing.img') },
  ]);
  const out = path.join(dir, 'imgs.emb');
  const manifest = await extractImage({ inputPath: input, encoder: 'mock', mode: 'pooled', pooling: 'mean', outPath: out });
  assert.equal(manifest.errors.length, 1);
  assert.equal(manifest.errors[0].id, 'bad');
  const m = await readEmb(out);
  assert.deepEqual(m.ids, ['good']);
});

test('run manifest discloses encoder and determinism', async () => {
  const dir = await tmpdir();
  const input = path.join(dir, 'caps.jsonl');
  await writeJsonl(input, [{ id: 'x', text: 'hello' }]);
  const out = path.join(dir, 'x.emb');
  await extractText({ inputPath: input, encoder: 'mock', pooling: 'mean', outPath: out });
  const manifest = JSON.parse(await fs.readFile(`${out}.run.json`, 'utf-8'));
  assert.equal(manifest.kind, 'text');
  assert.equal(manifest.encoder, 'mock-text');
  assert.equal(manifest.deterministic, true);
  assert.ok(manifest.determinism_note.length > 0);
  assert.ok(manifest.duration_ms >= 0);
});

test('non-mock encoders raise a setup error when weights are unavailable', async (t) => {
  let available = true;
  try {
    await import('@xenova/transformers' as string);
  } catch {
    available = false;
  }
  if (available) {
    t.skip('transformers.js is installed here; the setup error path does not apply');
    return;
  }
  await assert.rejects(loadTextEncoder('minilm'), SetupError);
});

test('unknown encoder names are a setup error', async () => {
  await assert.rejects(loadTextEncoder('made-up-encoder'), SetupError);
});
