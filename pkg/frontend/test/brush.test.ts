import { describe, expect, it } from 'vitest'
import { stampCircle, strokeSegment } from '../src/brush.js'
import { maskArea } from '../src/rle.js'

describe('brush', () => {
  it('stamps a filled disk', () => {
    const mask = new Uint8Array(11 * 11)
    stampCircle(mask, 11, 11, 5, 5, 5)
    expect(mask[5 * 11 + 5]).toBe(1)
    expect(mask[5 * 11 + 7]).toBe(1)   // within radius 2.5
    expect(mask[0]).toBe(0)
    expect(maskArea(mask)).toBeGreaterThan(12)
  })

  it('erase clears painted pixels', () => {
    const mask = new Uint8Array(9 * 9).fill(1)
    stampCircle(mask, 9, 9, 4, 4, 3, true)
    expect(mask[4 * 9 + 4]).toBe(0)
    expect(mask[0]).toBe(1)
  })

  it('clips at the borders', () => {
    const mask = new Uint8Array(6 * 6)
    stampCircle(mask, 6, 6, 0, 0, 7)
    expect(mask[0]).toBe(1)
    expect(maskArea(mask)).toBeLessThan(36)
  })

  it('fast strokes leave no gaps', () => {
    const mask = new Uint8Array(30 * 30)
    strokeSegment(mask, 30, 30, 2, 2, 27, 27, 4)
    // every point on the diagonal is covered
    for (let i = 3; i < 27; i++) {
      expect(mask[i * 30 + i]).toBe(1)
    }
  })
})
