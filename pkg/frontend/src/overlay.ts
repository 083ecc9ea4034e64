/** Pure helpers for compositing the mask overlay and click markers. */

export interface Rgba {
  r: number;
  g: number;
  b: number;
  a: number; // 0..255
}

export const MASK_COLOR: Rgba = { r: 66, g: 133, b: 244, a: 110 };
export const POSITIVE_COLOR = "#2e7d32";
export const NEGATIVE_COLOR = "#c62828";

/**
 * Build the RGBA byte buffer for a translucent overlay: foreground
 * pixels get the mask color, background stays fully transparent.
 */
export function overlayBytes(mask: Uint8Array, h: number, w: number, color: Rgba = MASK_COLOR): Uint8ClampedArray {
  if (mask.length !== h * w) {
    throw new Error(`mask length ${mask.length} != ${h * w}`);
  }
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const j = i * 4;
      out[j] = color.r;
      out[j + 1] = color.g;
      out[j + 2] = color.b;
      out[j + 3] = color.a;
    }
  }
  return out;
}

/** Map a canvas-space pointer position to image pixel coordinates. */
export function canvasToPixel(
  x: number,
  y: number,
  canvasWidth: number,
  canvasHeight: number,
  w: number,
  h: number,
): { row: number; col: number } {
  return {
    row: Math.floor((y / canvasHeight) * h),
    col: Math.floor((x / canvasWidth) * w),
  };
}
