/** Payload decoding: base64 little-endian float64 arrays from the service. */

export function b64ToFloat64(b64: string): Float64Array {
  const anyGlobal = globalThis as { atob?: (s: string) => string; Buffer?: unknown };
  const bin =
    typeof anyGlobal.atob === "function"
      ? anyGlobal.atob(b64)
      : // node test environment
        (anyGlobal.Buffer as { from(s: string, e: string): { toString(e: string): string } })
          .from(b64, "base64")
          .toString("binary");
  const buf = new ArrayBuffer(bin.length);
  const bytes = new Uint8Array(buf);
  for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
  return new Float64Array(buf);
}

/** RGB row (W*3 floats in [0,1]) -> RGBA bytes for an ImageData row. */
export function rgbRowToRgba(row: Float64Array): Uint8ClampedArray<ArrayBuffer> {
  const w = row.length / 3;
  const out = new Uint8ClampedArray(new ArrayBuffer(w * 4));
  for (let i = 0; i < w; i++) {
    out[i * 4] = Math.round(row[i * 3] * 255);
    out[i * 4 + 1] = Math.round(row[i * 3 + 1] * 255);
    out[i * 4 + 2] = Math.round(row[i * 3 + 2] * 255);
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Density grid -> grayscale RGBA, normalized by its own max. */
export function densityToRgba(d: Float64Array): Uint8ClampedArray<ArrayBuffer> {
  let max = 0;
  for (const v of d) max = Math.max(max, v);
  const out = new Uint8ClampedArray(new ArrayBuffer(d.length * 4));
  for (let i = 0; i < d.length; i++) {
    const v = max > 0 ? Math.min(1, d[i] / max) : 0;
    const g = Math.round(30 + 225 * v);
    out[i * 4] = g;
    out[i * 4 + 1] = g;
    out[i * 4 + 2] = Math.round(40 + 180 * v);
    out[i * 4 + 3] = 255;
  }
  return out;
}
