#!/usr/bin/env node
/** emb-extract: dump encoder outputs into EMB1 + JSONL files.
 *
 *   emb-extract text  --input caps.jsonl --encoder mock --pooling mean \
 *       --out caps.emb [--pairs-out pairs.jsonl]
 *   emb-extract image --input imgs.jsonl --encoder mock --mode sequence \
 *       --out imgs.emb
 *
 * Flags mirror the Python toolkit's style (long-form, machine-readable JSON
 * summary on stdout, logs on stderr). Exit codes: 0 ok, 2 usage, 3 setup
 * (encoder unavailable), 4 data.
 */

import { extractImage, extractText } from './extract.js';
import { UsageError } from './errors.js';
import type { PoolingMode } from './pooling.js';

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith('--') || value === undefined) {
      throw new UsageError(`expected --flag value pairs, got ${argv.slice(i).join(' ')}`);
    }
    flags.set(key.slice(2), value);
  }
  return flags;
}

function need(flags: Map<string, string>, name: string): string {
  const value = flags.get(name);
  if (value === undefined) throw new UsageError(`missing --${name}`);
  return value;
}

function pooling(flags: Map<string, string>): PoolingMode {
  const mode = flags.get('pooling') ?? 'mean';
  if (mode !== 'mean' && mode !== 'cls') throw new UsageError(`--pooling must be mean or cls, got ${mode}`);
  return mode;
}

function mockOptions(flags: Map<string, string>) {
  const opts: { hiddenWidth?: number; seqLen?: number } = {};
  if (flags.has('mock-hidden')) opts.hiddenWidth = Number(flags.get('mock-hidden'));
  if (flags.has('mock-seq')) opts.seqLen = Number(flags.get('mock-seq'));
  return opts;
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === 'text') {
      const flags = parseFlags(rest);
      const manifest = await extractText({
        inputPath: need(flags, 'input'),
        encoder: flags.get('encoder') ?? 'mock',
        pooling: pooling(flags),
        outPath: need(flags, 'out'),
        pairsOutPath: flags.get('pairs-out'),
        mock: mockOptions(flags),
      });
      process.stdout.write(JSON.stringify(manifest, null, 2) + '\n');
      return 0;
    }
    if (command === 'image') {
      const flags = parseFlags(rest);
      const mode = flags.get('mode') ?? 'pooled';
      if (mode !== 'pooled' && mode !== 'sequence') {
        throw new UsageError(`--mode must be pooled or sequence, got ${mode}`);
      }
      const manifest = await extractImage({
        inputPath: need(flags, 'input'),
        encoder: flags.get('encoder') ?? 'mock',
        mode,
        pooling: pooling(flags),
        outPath: need(flags, 'out'),
        mock: mockOptions(flags),
      });
      process.stdout.write(JSON.stringify(manifest, null, 2) + '\n');
      return 0;
    }
    throw new UsageError(`unknown command ${command ?? '(none)'}; use "text" or "image"`);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    const code = (err as { exitCode?: number }).exitCode;
    return code ?? 4;
  }
}

main().then((code) => {
  process.exitCode = code;
});
