/** Encoders turn one item (caption text, image bytes) into a token matrix.
 *
 * Real encoders come from transformers.js and need downloaded weights; they
 * are loaded lazily so the rest of the pipeline (and its tests) work without
 * them. The mock encoder is fully deterministic: token states are derived
 * from a hash of the content, and the image variant applies a fixed rotation
 * to the text variant's states, so mock text/image dumps of identical
 * content are exactly linearly alignable downstream.
 */

import { SetupError } from './errors.js';
import type { TokenMatrix } from './pooling.js';

export interface Encoder {
  readonly name: string;
  readonly hiddenWidth: number;
  /** token count per image (text token counts vary with input) */
  readonly seqLen: number;
  readonly deterministic: boolean;
  encode(content: string | Buffer): Promise<TokenMatrix>;
}

// --- deterministic mock ----------------------------------------------------

function fnv1a(bytes: Buffer): number {
  let h = 0x811c9dc5;
  for (const b of bytes) {
    h ^= b;
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function baseTokens(content: Buffer, rows: number, cols: number): TokenMatrix {
  const data = new Float32Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    const rand = mulberry32(fnv1a(content) ^ Math.imul(r + 1, 0x9e3779b9));
    for (let c = 0; c < cols; c++) data[r * cols + c] = 2 * rand() - 1;
    data[r * cols] += 1.0; // keep pooled rows away from zero
  }
  return { data, rows, cols };
}

/** Two full cycles of fixed plane rotations: orthogonal, content-independent. */
function rotateTokens(tokens: TokenMatrix): TokenMatrix {
  const { rows, cols } = tokens;
  const data = Float32Array.from(tokens.data);
  const c = Math.cos(0.7);
  const s = Math.sin(0.7);
  for (let pass = 0; pass < 2; pass++) {
    for (let i = 0; i < cols; i++) {
      const j = (i + 1) % cols;
      if (i === j) continue;
      for (let r = 0; r < rows; r++) {
        const vi = data[r * cols + i];
        const vj = data[r * cols + j];
        data[r * cols + i] = c * vi - s * vj;
        data[r * cols + j] = s * vi + c * vj;
      }
    }
  }
  return { data, rows, cols };
}

export interface MockOptions {
  hiddenWidth?: number;
  seqLen?: number;
}

export class MockTextEncoder implements Encoder {
  readonly name = 'mock-text';
  readonly hiddenWidth: number;
  readonly seqLen: number;
  readonly deterministic = true;

  constructor(opts: MockOptions = {}) {
    this.hiddenWidth = opts.hiddenWidth ?? 32;
    this.seqLen = opts.seqLen ?? 16;
  }

  async encode(content: string | Buffer): Promise<TokenMatrix> {
    const bytes = typeof content === 'string' ? Buffer.from(content, 'utf-8') : content;
    const words = bytes.toString('utf-8').trim().split(/\s+/).length;
    const rows = Math.max(2, Math.min(this.seqLen, words + 2));
    return baseTokens(bytes, rows, this.hiddenWidth);
  }
}

export class MockImageEncoder implements Encoder {
  readonly name = 'mock-image';
  readonly hiddenWidth: number;
  readonly seqLen: number;
  readonly deterministic = true;

  constructor(opts: MockOptions = {}) {
    this.hiddenWidth = opts.hiddenWidth ?? 32;
    this.seqLen = opts.seqLen ?? 50;
  }

  async encode(content: string | Buffer): Promise<TokenMatrix> {
    const bytes = typeof content === 'string' ? Buffer.from(content, 'utf-8') : content;
    return rotateTokens(baseTokens(bytes, this.seqLen, this.hiddenWidth));
  }
}

// --- transformers.js adapters ------------------------------------------------

const TEXT_MODELS: Record<string, string> = {
  minilm: 'Xenova/all-MiniLM-L6-v2',
  'bert-large': 'Xenova/bert-large-uncased',
  'simcse-roberta': 'Xenova/sup-simcse-roberta-large',
};

const IMAGE_MODELS: Record<string, string> = {
  'vit-base': 'Xenova/vit-base-patch16-224-in21k',
  clip: 'Xenova/clip-vit-base-patch32',
};

async function loadTransformers(): Promise<any> {
  try {
    // optional dependency; the specifier is cast so tsc does not require it
    return await import('@xenova/transformers' as string);
  } catch (err) {
    throw new SetupError(
      'encoder weights unavailable: install @xenova/transformers (and model files) ' +
        `to run non-mock encoders (${(err as Error).message})`,
    );
  }
}

class TransformersTextEncoder implements Encoder {
  readonly deterministic = false;
  hiddenWidth = 0;
  seqLen = 0;

  private pipe: any;

  constructor(readonly name: string, private readonly model: string) {}

  async init(): Promise<void> {
    const { pipeline } = await loadTransformers();
    this.pipe = await pipeline('feature-extraction', this.model);
  }

  async encode(content: string | Buffer): Promise<TokenMatrix> {
    const text = typeof content === 'string' ? content : content.toString('utf-8');
    const output = await this.pipe(text); // token states, no pooling
    const [, rows, cols] = output.dims.length === 3 ? output.dims : [1, ...output.dims];
    this.hiddenWidth = cols;
    return { data: Float32Array.from(output.data), rows, cols };
  }
}

class TransformersImageEncoder implements Encoder {
  readonly deterministic = false;
  hiddenWidth = 0;
  seqLen = 0;

  private pipe: any;

  constructor(readonly name: string, private readonly model: string) {}

  async init(): Promise<void> {
    const { pipeline } = await loadTransformers();
    this.pipe = await pipeline('image-feature-extraction', this.model);
  }

  async encode(content: string | Buffer): Promise<TokenMatrix> {
    const output = await this.pipe(content);
    const [, rows, cols] = output.dims.length === 3 ? output.dims : [1, ...output.dims];
    this.hiddenWidth = cols;
    this.seqLen = rows;
    return { data: Float32Array.from(output.data), rows, cols };
  }
}

export async function loadTextEncoder(name: string, mock: MockOptions = {}): Promise<Encoder> {
  if (name === 'mock') return new MockTextEncoder(mock);
  const model = TEXT_MODELS[name];
  if (!model) throw new SetupError(`unknown text encoder ${name} (have: mock, ${Object.keys(TEXT_MODELS).join(', ')})`);
  const encoder = new TransformersTextEncoder(name, model);
  await encoder.init();
  return encoder;
}

export async function loadImageEncoder(name: string, mock: MockOptions = {}): Promise<Encoder> {
  if (name === 'mock') return new MockImageEncoder(mock);
  const model = IMAGE_MODELS[name];
  if (!model) throw new SetupError(`unknown image encoder ${name} (have: mock, ${Object.keys(IMAGE_MODELS).join(', ')})`);
  const encoder = new TransformersImageEncoder(name, model);
  await encoder.init();
  return encoder;
}
