// Brush editing over a binary mask: circular stamps along a stroke,
// draw or erase. Mutates the mask in place (one Uint8Array per session frame).

export function stampCircle(mask: Uint8Array, width: number, height: number,
                            row: number, col: number, diameter: number,
                            erase = false): void {
  const r = Math.max(0.5, diameter / 2)
  const r2 = r * r
  const lo = Math.floor(-r)
  const hi = Math.ceil(r)
  const value = erase ? 0 : 1
  for (let dr = lo; dr <= hi; dr++) {
    for (let dc = lo; dc <= hi; dc++) {
      if (dr * dr + dc * dc > r2) continue
      const y = Math.round(row + dr)
      const x = Math.round(col + dc)
      if (y < 0 || y >= height || x < 0 || x >= width) continue
      mask[y * width + x] = value
    }
  }
}

// Interpolate stamps so fast strokes leave no gaps.
export function strokeSegment(mask: Uint8Array, width: number, height: number,
                              r0: number, c0: number, r1: number, c1: number,
                              diameter: number, erase = false): void {
  const dist = Math.hypot(r1 - r0, c1 - c0)
  const steps = Math.max(1, Math.ceil(dist / Math.max(1, diameter / 3)))
  for (let i = 0; i <= steps; i++) {
    const t = i / steps
    stampCircle(mask, width, height, r0 + (r1 - r0) * t, c0 + (c1 - c0) * t,
                diameter, erase)
  }
}
