// Run-length mask codec matching the server wire contract: row-major scan,
// alternating background/foreground run lengths, background first (a mask
// that starts with foreground begins with a zero run). Run sum == h * w.

export function decodeRle(runs: number[], height: number, width: number): Uint8Array {
  const total = height * width
  const mask = new Uint8Array(total)
  let pos = 0
  let value = 0
  for (const run of runs) {
    if (run < 0) throw new Error(`negative run length ${run}`)
    if (value) mask.fill(1, pos, pos + run)
    pos += run
    value ^= 1
  }
  if (pos !== total) throw new Error(`runs sum to ${pos}, expected ${total}`)
  return mask
}

export function encodeRle(mask: Uint8Array): number[] {
  const runs: number[] = []
  if (mask.length === 0) return runs
  let value = 0
  let run = 0
  for (let i = 0; i < mask.length; i++) {
    const bit = mask[i] ? 1 : 0
    if (bit === value) {
      run++
    } else {
      runs.push(run)
      value = bit
      run = 1
    }
  }
  runs.push(run)
  return runs
}

export function maskArea(mask: Uint8Array): number {
  let n = 0
  for (let i = 0; i < mask.length; i++) if (mask[i]) n++
  return n
}
