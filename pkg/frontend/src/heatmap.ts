// Relevancy overlay helpers. The server renders the heatmap itself; the
// client only thresholds scores and colors pixels, so these stay pure and
// run identically in tests and in the browser.

/** Server selection rule: keep indices whose score is strictly above tau. */
export function selectAboveTau(
  activeIndices: number[],
  scores: number[],
  tau: number,
): number[] {
  if (activeIndices.length !== scores.length) {
    throw new Error(
      `indices and scores disagree: ${activeIndices.length} vs ${scores.length}`,
    )
  }
  const out: number[] = []
  for (let i = 0; i < scores.length; i++) {
    if (scores[i] > tau) out.push(activeIndices[i])
  }
  return out
}

export const OVERLAY_RGB: [number, number, number] = [255, 96, 0]

/**
 * RGBA pixels for a score image: fully transparent at or below tau, then
 * opacity ramps linearly up to full at score 1.
 */
export function overlayPixels(
  scores: ArrayLike<number>,
  tau: number,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(scores.length * 4)
  const span = Math.max(1e-9, 1 - tau)
  for (let i = 0; i < scores.length; i++) {
    const s = scores[i]
    if (s <= tau) continue
    const a = Math.round(255 * Math.min(1, (s - tau) / span))
    out[i * 4] = OVERLAY_RGB[0]
    out[i * 4 + 1] = OVERLAY_RGB[1]
    out[i * 4 + 2] = OVERLAY_RGB[2]
    out[i * 4 + 3] = a
  }
  return out
}

/** Grayscale PNG pixels (0..255) back to scores in [0, 1]. */
export function scoresFromGray(gray: ArrayLike<number>): Float32Array {
  const out = new Float32Array(gray.length)
  for (let i = 0; i < gray.length; i++) out[i] = gray[i] / 255
  return out
}
