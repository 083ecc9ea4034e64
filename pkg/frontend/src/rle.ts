/**
 * Run-length codec for binary masks, row-major pixel order.
 * Mirrors the server wire format: { h, w, runs: [start, length][] }.
 */

export interface RleMask {
  h: number;
  w: number;
  runs: [number, number][];
}

/** Decode into a flat Uint8Array of 0/1, length h*w. */
export function rleDecode(mask: RleMask): Uint8Array {
  const total = mask.h * mask.w;
  const out = new Uint8Array(total);
  for (const [start, length] of mask.runs) {
    if (start < 0 || length < 0 || start + length > total) {
      throw new Error(`run [${start},${length}] exceeds ${total} pixels`);
    }
    out.fill(1, start, start + length);
  }
  return out;
}

/** Encode a flat 0/1 array back into runs (shared test vectors check both ways). */
export function rleEncode(pixels: ArrayLike<number>, h: number, w: number): RleMask {
  if (pixels.length !== h * w) {
    throw new Error(`expected ${h * w} pixels, got ${pixels.length}`);
  }
  const runs: [number, number][] = [];
  let start = -1;
  for (let i = 0; i < pixels.length; i++) {
    const fg = pixels[i] !== 0;
    if (fg && start < 0) {
      start = i;
    } else if (!fg && start >= 0) {
      runs.push([start, i - start]);
      start = -1;
    }
  }
  if (start >= 0) {
    runs.push([start, pixels.length - start]);
  }
  return { h, w, runs };
}
