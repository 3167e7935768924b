// Annotator UI: view frames with prediction overlays, click corrections
// (left = positive, right = negative), paint full masks with a brush, accept,
// and watch the adapter's update count and the correction counters evolve.
// All model state lives on the server; reloading and reattaching loses nothing.

import { SessionClient, type FramePayload, type ServerEvent } from './api.js'
import { strokeSegment } from './brush.js'
import { base64ToBytes, composeOverlay, stampClicks, type Click } from './overlay.js'
import { decodeRle, encodeRle } from './rle.js'
import {
  compareSummaries, initialView, onAccept, onAdvance, onClick, onMaskSubmitted,
  summarize, syncFromStatus, type SessionView,
} from './state.js'

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id)
  if (!el) throw new Error(`missing element #${id}`)
  return el as T
}

const canvas = $<HTMLCanvasElement>('frame')
const ctx = canvas.getContext('2d')!
const feed = $<HTMLUListElement>('feed')
const summaryBox = $<HTMLPreElement>('summary')

let client: SessionClient | null = null
let view: SessionView | null = null
let frameBytes: Uint8Array | null = null
let brushMask: Uint8Array | null = null
let brushMode = false
let painting: { erase: boolean; r: number; c: number } | null = null
let ws: WebSocket | null = null
let lastRenderMs = 0

function log(line: string): void {
  const item = document.createElement('li')
  item.textContent = line
  feed.prepend(item)
  while (feed.children.length > 40) feed.removeChild(feed.lastChild!)
}

function setStatusLine(): void {
  if (!view) return
  $('phase').textContent = view.phase
  $('frameno').textContent =
    view.frameIndex < 0 ? '-' : `${view.frameIndex + 1}/${view.frames}`
  $('iou-gauge-fill').style.width = `${Math.round(view.predictedIou * 100)}%`
  $('iou-value').textContent = view.predictedIou.toFixed(2)
  $('counters').textContent =
    `corrections ${view.corrections} · clicks ${view.totalClicks} · ` +
    `masks ${view.masksDrawn} · adapter updates ${view.updateCount} · ` +
    `train ${(view.trainMs / 1000).toFixed(1)}s`
  $('render-ms').textContent = lastRenderMs ? `${lastRenderMs.toFixed(1)} ms` : '-'
  const accepting = view.phase === 'awaiting_review' || view.phase === 'awaiting_correction'
  ;($('advance') as HTMLButtonElement).disabled = view.phase !== 'awaiting_advance'
  ;($('accept') as HTMLButtonElement).disabled = !accepting
  ;($('submit-mask') as HTMLButtonElement).disabled = !(accepting && brushMode)
}

function render(): void {
  if (!view || !frameBytes) return
  const t0 = performance.now()
  const { height, width } = view
  const mask = brushMode && brushMask ? brushMask
    : decodeRle(view.predictionRuns, height, width)
  const opacity = Number(($('opacity') as unknown as HTMLInputElement).value) / 100
  const rgba = composeOverlay(frameBytes, mask, opacity)
  stampClicks(rgba, width, height, view.clicks)
  ctx.putImageData(
    new ImageData(rgba as Uint8ClampedArray<ArrayBuffer>, width, height), 0, 0)
  lastRenderMs = performance.now() - t0
  setStatusLine()
}

function canvasToPixel(event: MouseEvent): { row: number; col: number } {
  const rect = canvas.getBoundingClientRect()
  const col = Math.floor((event.clientX - rect.left) / rect.width * canvas.width)
  const row = Math.floor((event.clientY - rect.top) / rect.height * canvas.height)
  return { row, col }
}

async function createSession(): Promise<void> {
  const base = ($('server') as unknown as HTMLInputElement).value
  const bundle = ($('bundle') as unknown as HTMLInputElement).value
  const variant = ($('variant') as unknown as HTMLSelectElement).value
  client = new SessionClient(base)
  const info = await client.create(bundle, variant)
  view = initialView(info.session_id, bundle, variant, info.frames,
                     info.height, info.width)
  canvas.width = info.width
  canvas.height = info.height
  frameBytes = new Uint8Array(info.width * info.height)
  brushMask = null
  summaryBox.textContent = ''
  log(`session ${info.session_id} on ${bundle} (${variant})`)
  ws?.close()
  ws = client.events(onServerEvent)
  render()
}

function onServerEvent(event: ServerEvent): void {
  // re-render straight from the push so the overlay reflects the server
  // within one message turnaround
  if (!view) return
  if (event.type === 'prediction' || event.type === 'frame') {
    view = {
      ...view,
      predictionRuns: event.prediction_rle as number[],
      predictedIou: event.predicted_iou as number,
    }
    render()
  } else if (event.type === 'training') {
    log(`training epoch ${event.epoch}, loss ${(event.loss as number).toFixed(4)}`)
  } else if (event.type === 'accepted') {
    log(`frame ${(event.frame_index as number) + 1} accepted`
        + (event.corrected ? ' (corrected)' : ''))
  }
  setStatusLine()
}

async function advance(): Promise<void> {
  if (!client || !view) return
  const payload: FramePayload = await client.advance()
  frameBytes = base64ToBytes(payload.image_b64)
  brushMask = null
  view = onAdvance(view, payload)
  render()
}

async function applyClick(event: MouseEvent): Promise<void> {
  if (!client || !view) return
  if (view.phase !== 'awaiting_review' && view.phase !== 'awaiting_correction') return
  const { row, col } = canvasToPixel(event)
  const polarity: Click['polarity'] = event.button === 2 ? 'negative' : 'positive'
  const payload = await client.click(row, col, polarity)
  view = onClick(view, { row, col, polarity }, payload)
  render()
}

async function submitMask(): Promise<void> {
  if (!client || !view || !brushMask) return
  const runs = encodeRle(brushMask)
  const payload = await client.submitMask(runs)
  view = onMaskSubmitted(view, payload.prediction_rle ?? runs, payload.phase)
  brushMode = false
  brushMask = null
  ;($('brush-toggle') as HTMLButtonElement).textContent = 'brush: off'
  render()
}

async function accept(): Promise<void> {
  if (!client || !view) return
  const payload = await client.accept()
  view = onAccept(view, payload)
  if (payload.trained) {
    log(`adapter trained: ${payload.trained.epochs} epochs, `
        + `stop=${payload.trained.stop_reason}`)
  }
  if (view.phase === 'finished') await showSummary()
  render()
}

async function showSummary(): Promise<void> {
  if (!client || !view) return
  const status = await client.status()
  view = syncFromStatus(view, status)
  const current = summarize(view)
  const verdict = await client.verifyReplay()
  let text = `session complete on ${current.bundleId} (${current.variant})\n`
  text += `corrections ${current.corrections}, clicks ${current.clicks}, `
  text += `user ${(current.measuredUserMs / 1000).toFixed(1)}s, `
  text += `training ${(current.trainMs / 1000).toFixed(1)}s\n`
  text += `server replay check: ${verdict.identical ? 'identical' : 'MISMATCH'} `
  text += `over ${verdict.frames_compared} frames\n`
  const key = `liveseg-baseline-${current.bundleId}`
  const prior = localStorage.getItem(key)
  if (prior) {
    const diff = compareSummaries(JSON.parse(prior), current)
    text += `vs previous session on this video: corrections ` +
      `${(diff.correctionsReduction * 100).toFixed(0)}% lower, time ` +
      `${(diff.timeReduction * 100).toFixed(0)}% lower\n`
  }
  localStorage.setItem(key, JSON.stringify(current))
  summaryBox.textContent = text
}

function wireEvents(): void {
  $('create').addEventListener('click', () => void createSession().catch(alertError))
  $('advance').addEventListener('click', () => void advance().catch(alertError))
  $('accept').addEventListener('click', () => void accept().catch(alertError))
  $('submit-mask').addEventListener('click', () => void submitMask().catch(alertError))
  $('brush-toggle').addEventListener('click', () => {
    brushMode = !brushMode
    if (brushMode && view) {
      brushMask = decodeRle(view.predictionRuns, view.height, view.width)
    }
    $('brush-toggle').textContent = `brush: ${brushMode ? 'on' : 'off'}`
    render()
  })
  ;($('opacity') as unknown as HTMLInputElement).addEventListener('input', render)

  canvas.addEventListener('contextmenu', (e) => e.preventDefault())
  canvas.addEventListener('mousedown', (e) => {
    if (brushMode && brushMask && view) {
      const { row, col } = canvasToPixel(e)
      painting = { erase: e.button === 2, r: row, c: col }
      const d = Number(($('brush-size') as unknown as HTMLInputElement).value)
      strokeSegment(brushMask, view.width, view.height, row, col, row, col,
                    d, painting.erase)
      render()
    } else {
      void applyClick(e).catch(alertError)
    }
  })
  canvas.addEventListener('mousemove', (e) => {
    if (!painting || !brushMask || !view) return
    const { row, col } = canvasToPixel(e)
    const d = Number(($('brush-size') as unknown as HTMLInputElement).value)
    strokeSegment(brushMask, view.width, view.height, painting.r, painting.c,
                  row, col, d, painting.erase)
    painting = { ...painting, r: row, c: col }
    render()
  })
  window.addEventListener('mouseup', () => { painting = null })
}

function alertError(err: unknown): void {
  const detail = err instanceof Error ? err.message : String(err)
  log(`error: ${detail}`)
}

wireEvents()
setStatusLine()
