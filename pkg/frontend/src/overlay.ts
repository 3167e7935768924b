// Compositing helpers: grayscale frame bytes + binary mask -> RGBA pixels.
// Pure functions over typed arrays so they are testable without a canvas.

export interface Click {
  row: number
  col: number
  polarity: 'positive' | 'negative'
}

export function grayToRgba(gray: Uint8Array, out?: Uint8ClampedArray): Uint8ClampedArray {
  const rgba = out ?? new Uint8ClampedArray(gray.length * 4)
  for (let i = 0; i < gray.length; i++) {
    const v = gray[i]
    const j = i * 4
    rgba[j] = v
    rgba[j + 1] = v
    rgba[j + 2] = v
    rgba[j + 3] = 255
  }
  return rgba
}

// Blend the mask as a translucent red layer; opacity in [0, 1].
export function composeOverlay(gray: Uint8Array, mask: Uint8Array, opacity: number,
                               out?: Uint8ClampedArray): Uint8ClampedArray {
  const rgba = grayToRgba(gray, out)
  const a = Math.max(0, Math.min(1, opacity))
  for (let i = 0; i < mask.length; i++) {
    if (!mask[i]) continue
    const j = i * 4
    rgba[j] = Math.round(rgba[j] * (1 - a) + 255 * a)
    rgba[j + 1] = Math.round(rgba[j + 1] * (1 - a))
    rgba[j + 2] = Math.round(rgba[j + 2] * (1 - a))
  }
  return rgba
}

export function stampClicks(rgba: Uint8ClampedArray, width: number, height: number,
                            clicks: Click[], radius = 2): void {
  for (const click of clicks) {
    const positive = click.polarity === 'positive'
    for (let dr = -radius; dr <= radius; dr++) {
      for (let dc = -radius; dc <= radius; dc++) {
        if (dr * dr + dc * dc > radius * radius) continue
        const r = click.row + dr
        const c = click.col + dc
        if (r < 0 || r >= height || c < 0 || c >= width) continue
        const j = (r * width + c) * 4
        rgba[j] = positive ? 0 : 255
        rgba[j + 1] = positive ? 255 : 60
        rgba[j + 2] = positive ? 80 : 60
        rgba[j + 3] = 255
      }
    }
  }
}

export function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64)
  const bytes = new Uint8Array(bin.length)
  for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i)
  return bytes
}
