import { describe, expect, it } from 'vitest'
import { composeOverlay, grayToRgba, stampClicks } from '../src/overlay.js'
import { decodeRle } from '../src/rle.js'

describe('overlay compositing', () => {
  it('gray pixels become opaque gray rgba', () => {
    const rgba = grayToRgba(new Uint8Array([0, 128, 255]))
    expect(Array.from(rgba)).toEqual([
      0, 0, 0, 255, 128, 128, 128, 255, 255, 255, 255, 255,
    ])
  })

  it('mask pixels blend toward red by opacity', () => {
    const gray = new Uint8Array([100, 100])
    const mask = new Uint8Array([0, 1])
    const rgba = composeOverlay(gray, mask, 0.5)
    expect(rgba[0]).toBe(100)           // unmasked untouched
    expect(rgba[4]).toBe(178)           // 100*0.5 + 255*0.5
    expect(rgba[5]).toBe(50)
    expect(rgba[7]).toBe(255)
  })

  it('zero opacity leaves the frame as-is', () => {
    const gray = new Uint8Array([10, 20, 30, 40])
    const rgba = composeOverlay(gray, new Uint8Array([1, 1, 1, 1]), 0)
    expect(rgba[0]).toBe(10)
    expect(rgba[12]).toBe(40)
  })

  it('click markers overwrite their disk', () => {
    const rgba = grayToRgba(new Uint8Array(25).fill(7))
    stampClicks(rgba, 5, 5, [{ row: 2, col: 2, polarity: 'positive' }], 1)
    const center = (2 * 5 + 2) * 4
    expect(rgba[center]).toBe(0)
    expect(rgba[center + 1]).toBe(255)
    const corner = 0
    expect(rgba[corner]).toBe(7) // far from the click
  })

  it('overlay of a server prediction renders well under the latency budget', () => {
    const gray = new Uint8Array(96 * 96).fill(80)
    const runs = [2000, 500, 96 * 96 - 2500]
    const t0 = performance.now()
    for (let i = 0; i < 50; i++) {
      composeOverlay(gray, decodeRle(runs, 96, 96), 0.45)
    }
    const perFrame = (performance.now() - t0) / 50
    expect(perFrame).toBeLessThan(200)
  })
})
