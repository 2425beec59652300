/** Fixed 32-color palette keyed by category index; mirrors the server's
 * palette so overlays and exported PNGs agree (golden-tested). */

export type Rgb = [number, number, number];

export const PALETTE: Rgb[] = [
  [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
  [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
  [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
  [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
  [128, 128, 0], [255, 215, 180], [0, 0, 128], [128, 128, 128],
  [255, 255, 255], [0, 0, 0], [233, 150, 122], [46, 139, 87],
  [72, 61, 139], [255, 105, 180], [95, 158, 160], [218, 165, 32],
  [154, 205, 50], [139, 69, 19], [100, 149, 237], [219, 112, 147],
];

export function colorFor(index: number): Rgb {
  return PALETTE[((index % PALETTE.length) + PALETTE.length) % PALETTE.length]!;
}

export function cssColor(rgb: Rgb, alpha = 1): string {
  return `rgba(${rgb[0]}, ${rgb[1]}, ${rgb[2]}, ${alpha})`;
}
