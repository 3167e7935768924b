import { describe, expect, it } from 'vitest'
import {
  compareSummaries, initialView, onAccept, onAdvance, onClick, onMaskSubmitted,
  summarize, syncFromStatus,
} from '../src/state.js'

const start = () => initialView('abc', 'camouflage-00501', 'lit_lora', 5, 96, 96)

describe('session view reducer', () => {
  it('tracks the advance -> click -> accept cycle', () => {
    let view = start()
    view = onAdvance(view, {
      frame_index: 0, prediction_rle: [9216], predicted_iou: 0.4,
      phase: 'awaiting_review',
    })
    expect(view.frameIndex).toBe(0)
    expect(view.phase).toBe('awaiting_review')

    view = onClick(view, { row: 3, col: 4, polarity: 'positive' }, {
      frame_index: 0, prediction_rle: [0, 10, 9206], predicted_iou: 0.6,
      phase: 'awaiting_correction',
    })
    expect(view.clicks).toHaveLength(1)
    expect(view.totalClicks).toBe(1)
    expect(view.predictionRuns).toEqual([0, 10, 9206])

    view = onAccept(view, {
      phase: 'awaiting_advance', corrected: true, update_count: 1,
      trained: { epochs: 4, final_loss: 0.01, stop_reason: 'iou_target' },
    })
    expect(view.corrections).toBe(1)
    expect(view.updateCount).toBe(1)
    expect(view.clicks).toHaveLength(0)
    expect(view.lastTraining?.epochs).toBe(4)
  })

  it('accept without corrections only advances counters it should', () => {
    let view = start()
    view = onAdvance(view, {
      frame_index: 0, prediction_rle: [9216], predicted_iou: 0.9,
      phase: 'awaiting_review',
    })
    view = onAccept(view, {
      phase: 'awaiting_advance', corrected: false, update_count: 0, trained: null,
    })
    expect(view.corrections).toBe(0)
    expect(view.framesAccepted).toBe(1)
  })

  it('mask submission marks a correction-to-be', () => {
    let view = start()
    view = onAdvance(view, {
      frame_index: 0, prediction_rle: [9216], predicted_iou: 0.1,
      phase: 'awaiting_review',
    })
    view = onMaskSubmitted(view, [0, 9216], 'awaiting_correction')
    expect(view.masksDrawn).toBe(1)
    expect(view.phase).toBe('awaiting_correction')
  })

  it('status sync is the single source of truth', () => {
    const synced = syncFromStatus(start(), {
      phase: 'finished', frame_index: 4, update_count: 3, corrections: 2,
      clicks: 5, masks: 1, frames_accepted: 5, measured_user_ms: 12000,
      train_ms: 900,
    })
    expect(summarize(synced)).toEqual({
      bundleId: 'camouflage-00501', variant: 'lit_lora', corrections: 2,
      clicks: 5, measuredUserMs: 12000, trainMs: 900, updateCount: 3,
    })
  })

  it('summary comparison computes reductions', () => {
    const prior = { bundleId: 'x', variant: 'original', corrections: 10,
                    clicks: 20, measuredUserMs: 100000, trainMs: 0, updateCount: 0 }
    const current = { bundleId: 'x', variant: 'lit_lora', corrections: 4,
                      clicks: 8, measuredUserMs: 50000, trainMs: 5000, updateCount: 4 }
    const diff = compareSummaries(prior, current)
    expect(diff.correctionsReduction).toBeCloseTo(0.6)
    expect(diff.timeReduction).toBeCloseTo(0.45)
  })
})
