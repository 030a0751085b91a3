/** Reductions from a token matrix (L tokens x d channels) to one vector. */

import { ValidationError } from './errors.js';

export interface TokenMatrix {
  /** row-major L*d token states */
  data: Float32Array;
  rows: number;
  cols: number;
}

export type PoolingMode = 'mean' | 'cls';

export function meanPool(tokens: TokenMatrix): Float32Array {
  const { data, rows, cols } = tokens;
  const out = new Float32Array(cols);
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) out[c] += data[r * cols + c];
  }
  for (let c = 0; c < cols; c++) out[c] /= rows;
  return out;
}

export function clsPool(tokens: TokenMatrix): Float32Array {
  return tokens.data.slice(0, tokens.cols);
}

export function pool(tokens: TokenMatrix, mode: PoolingMode): Float32Array {
  if (tokens.rows < 1 || tokens.cols < 1) {
    throw new ValidationError(`empty token matrix (${tokens.rows}x${tokens.cols})`);
  }
  return mode === 'mean' ? meanPool(tokens) : clsPool(tokens);
}
