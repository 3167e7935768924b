// Client-side session view state. The server owns all model state; this
// reducer only mirrors what the endpoints and the event stream report, so a
// page reload can reattach to a session with nothing lost.

import type { Click } from './overlay.js'

export type Phase = 'awaiting_advance' | 'awaiting_review' | 'awaiting_correction'
  | 'training' | 'finished'

export interface SessionView {
  sessionId: string
  bundleId: string
  variant: string
  frames: number
  height: number
  width: number
  phase: Phase
  frameIndex: number
  predictionRuns: number[]
  predictedIou: number
  clicks: Click[]
  updateCount: number
  corrections: number
  totalClicks: number
  masksDrawn: number
  framesAccepted: number
  measuredUserMs: number
  trainMs: number
  lastTraining?: { epochs: number; finalLoss: number; stopReason: string }
}

export function initialView(sessionId: string, bundleId: string, variant: string,
                            frames: number, height: number, width: number): SessionView {
  return {
    sessionId, bundleId, variant, frames, height, width,
    phase: 'awaiting_advance', frameIndex: -1,
    predictionRuns: [height * width], predictedIou: 0,
    clicks: [], updateCount: 0, corrections: 0, totalClicks: 0,
    masksDrawn: 0, framesAccepted: 0, measuredUserMs: 0, trainMs: 0,
  }
}

export interface AdvancePayload {
  frame_index: number
  prediction_rle: number[]
  predicted_iou: number
  phase: Phase
}

export function onAdvance(view: SessionView, payload: AdvancePayload): SessionView {
  return {
    ...view,
    frameIndex: payload.frame_index,
    predictionRuns: payload.prediction_rle,
    predictedIou: payload.predicted_iou,
    phase: payload.phase,
    clicks: [],
  }
}

export function onClick(view: SessionView, click: Click,
                        payload: AdvancePayload): SessionView {
  return {
    ...view,
    clicks: [...view.clicks, click],
    totalClicks: view.totalClicks + 1,
    predictionRuns: payload.prediction_rle,
    predictedIou: payload.predicted_iou,
    phase: payload.phase,
  }
}

export function onMaskSubmitted(view: SessionView, runs: number[], phase: Phase): SessionView {
  return {
    ...view,
    masksDrawn: view.masksDrawn + 1,
    predictionRuns: runs,
    phase,
  }
}

export interface AcceptPayload {
  phase: Phase
  corrected: boolean
  update_count: number
  trained: { epochs: number; final_loss: number; stop_reason: string } | null
}

export function onAccept(view: SessionView, payload: AcceptPayload): SessionView {
  return {
    ...view,
    phase: payload.phase,
    corrections: view.corrections + (payload.corrected ? 1 : 0),
    framesAccepted: view.framesAccepted + 1,
    updateCount: payload.update_count,
    clicks: [],
    lastTraining: payload.trained
      ? { epochs: payload.trained.epochs, finalLoss: payload.trained.final_loss,
          stopReason: payload.trained.stop_reason }
      : view.lastTraining,
  }
}

export interface StatusPayload {
  phase: Phase
  frame_index: number
  update_count: number
  corrections: number
  clicks: number
  masks: number
  frames_accepted: number
  measured_user_ms: number
  train_ms: number
}

// Server status is the single source of truth; syncing must be lossless.
export function syncFromStatus(view: SessionView, status: StatusPayload): SessionView {
  return {
    ...view,
    phase: status.phase,
    frameIndex: status.frame_index,
    updateCount: status.update_count,
    corrections: status.corrections,
    totalClicks: status.clicks,
    masksDrawn: status.masks,
    framesAccepted: status.frames_accepted,
    measuredUserMs: status.measured_user_ms,
    trainMs: status.train_ms,
  }
}

export interface SessionSummary {
  bundleId: string
  variant: string
  corrections: number
  clicks: number
  measuredUserMs: number
  trainMs: number
  updateCount: number
}

export function summarize(view: SessionView): SessionSummary {
  return {
    bundleId: view.bundleId,
    variant: view.variant,
    corrections: view.corrections,
    clicks: view.totalClicks,
    measuredUserMs: view.measuredUserMs,
    trainMs: view.trainMs,
    updateCount: view.updateCount,
  }
}

// Compare against a prior session on the same video (e.g. original vs
// adaptive): positive reduction means the new session needed less.
export function compareSummaries(prior: SessionSummary, current: SessionSummary) {
  const reduction = (a: number, b: number) => (a === 0 ? 0 : (a - b) / a)
  return {
    correctionsReduction: reduction(prior.corrections, current.corrections),
    clicksReduction: reduction(prior.clicks, current.clicks),
    timeReduction: reduction(prior.measuredUserMs, current.measuredUserMs + current.trainMs),
  }
}
