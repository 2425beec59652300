/**
 * Run-length codec for binary masks, row-major, starting with a run of
 * zeros. Bit-exact against the server's codec (shared golden fixtures).
 */

export interface Rle {
  size: [number, number];
  counts: number[];
}

export function decodeRle(rle: Rle): Uint8Array {
  const [h, w] = rle.size;
  if (h <= 0 || w <= 0) throw new Error(`bad RLE size ${rle.size}`);
  const total = h * w;
  const out = new Uint8Array(total);
  let pos = 0;
  let value = 0;
  for (const count of rle.counts) {
    if (count < 0) throw new Error("negative RLE count");
    if (value === 1) out.fill(1, pos, pos + count);
    pos += count;
    value ^= 1;
  }
  if (pos !== total) {
    throw new Error(`RLE counts sum to ${pos}, expected ${total}`);
  }
  return out;
}

export function encodeRle(pixels: Uint8Array, h: number, w: number): Rle {
  if (pixels.length !== h * w) throw new Error("pixel buffer size mismatch");
  const counts: number[] = [];
  let current = 0;
  let run = 0;
  for (const p of pixels) {
    if (p !== 0 && p !== 1) throw new Error("mask entries must be 0 or 1");
    if (p === current) {
      run += 1;
    } else {
      counts.push(run);
      current = p;
      run = 1;
    }
  }
  counts.push(run);
  return { size: [h, w], counts };
}

/** Rebuild an integer label map from per-category RLE masks. */
export function labelMapFromRles(size: [number, number], masks: Rle[]): Int32Array {
  const [h, w] = size;
  const labels = new Int32Array(h * w);
  masks.forEach((rle, k) => {
    const mask = decodeRle(rle);
    for (let i = 0; i < mask.length; i++) {
      if (mask[i] === 1) labels[i] = k;
    }
  });
  return labels;
}
