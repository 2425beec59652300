import { describe, expect, it } from "vitest";
import { readFileSync } from "node:fs";
import { join } from "node:path";

import { decodeRle, encodeRle, labelMapFromRles, type Rle } from "../src/rle.js";

interface GoldenCase {
  size: [number, number];
  counts: number[];
  pixels: number[];
}

interface Golden {
  cases: GoldenCase[];
  label_map_case: {
    size: [number, number];
    categories: { counts: number[] }[];
    labels: number[];
  };
}

const golden = JSON.parse(
  readFileSync(join(__dirname, "fixtures", "rle_golden.json"), "utf-8"),
) as Golden;

describe("rle codec", () => {
  it("decodes every golden case pixel-exactly", () => {
    for (const c of golden.cases) {
      const decoded = decodeRle({ size: c.size, counts: c.counts });
      expect(Array.from(decoded)).toEqual(c.pixels);
    }
  });

  it("encodes every golden case to the server's counts", () => {
    for (const c of golden.cases) {
      const rle = encodeRle(Uint8Array.from(c.pixels), c.size[0], c.size[1]);
      expect(rle.counts).toEqual(c.counts);
    }
  });

  it("round-trips random masks", () => {
    for (let trial = 0; trial < 200; trial++) {
      const h = 1 + (trial % 13);
      const w = 1 + ((trial * 7) % 11);
      const pixels = Uint8Array.from({ length: h * w },
        (_, i) => ((i * 2654435761 + trial) >>> 16) & 1);
      const rle = encodeRle(pixels, h, w);
      expect(Array.from(decodeRle(rle))).toEqual(Array.from(pixels));
    }
  });

  it("rebuilds a label map from per-category masks", () => {
    const c = golden.label_map_case;
    const rles: Rle[] = c.categories.map(e => ({ size: c.size, counts: e.counts }));
    const labels = labelMapFromRles(c.size, rles);
    expect(Array.from(labels)).toEqual(c.labels);
  });

  it("rejects inconsistent counts", () => {
    expect(() => decodeRle({ size: [2, 2], counts: [3] })).toThrow(/sum/);
    expect(() => decodeRle({ size: [2, 2], counts: [-1, 5] })).toThrow(/negative/);
  });
});
