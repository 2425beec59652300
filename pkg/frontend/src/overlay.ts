/**
 * Pure pixel assembly for overlays: label maps and soft masks to RGBA
 * buffers at a nearest-neighbor zoom, ready for putImageData. The stride-4
 * mask grid of 64x64 desk-scale images needs the zoom to be legible.
 */

import type { Rgb } from "./palette.js";

/** Paint a label map into an RGBA buffer, nearest-upscaled by `scale`. */
export function labelMapToRgba(labels: Int32Array, h: number, w: number,
                               colors: Rgb[], alpha: number,
                               scale: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(4 * h * scale * w * scale));
  const a = Math.round(alpha * 255);
  for (let y = 0; y < h * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < w * scale; x++) {
      const sx = Math.floor(x / scale);
      const label = labels[sy * w + sx]!;
      const rgb = colors[label % colors.length]!;
      const o = 4 * (y * w * scale + x);
      out[o] = rgb[0];
      out[o + 1] = rgb[1];
      out[o + 2] = rgb[2];
      out[o + 3] = a;
    }
  }
  return out;
}

/** Paint a single binary mask as a translucent tint. */
export function maskToRgba(mask: Uint8Array, h: number, w: number, rgb: Rgb,
                           alpha: number, scale: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(4 * h * scale * w * scale));
  const a = Math.round(alpha * 255);
  for (let y = 0; y < h * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < w * scale; x++) {
      const sx = Math.floor(x / scale);
      if (mask[sy * w + sx] === 1) {
        const o = 4 * (y * w * scale + x);
        out[o] = rgb[0];
        out[o + 1] = rgb[1];
        out[o + 2] = rgb[2];
        out[o + 3] = a;
      }
    }
  }
  return out;
}
