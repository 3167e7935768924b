// Thin typed client over the session endpoints. Every user action in the UI
// maps 1:1 onto one of these calls.

import type { AcceptPayload, AdvancePayload, Phase, StatusPayload } from './state.js'

export interface SessionInfo {
  session_id: string
  frames: number
  height: number
  width: number
  variant: string
}

export interface FramePayload extends AdvancePayload {
  image_b64: string
  height: number
  width: number
}

export interface ServerEvent {
  type: 'frame' | 'prediction' | 'phase' | 'training' | 'accepted'
  [key: string]: unknown
}

export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(`api error ${status}: ${JSON.stringify(detail)}`)
  }
}

async function post<T>(url: string, body?: unknown): Promise<T> {
  const response = await fetch(url, {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: body === undefined ? undefined : JSON.stringify(body),
  })
  const payload = await response.json()
  if (!response.ok) throw new ApiError(response.status, payload.detail ?? payload)
  return payload as T
}

export class SessionClient {
  constructor(private baseUrl: string, public sessionId = '') {}

  async create(bundleId: string, variant: string, frames?: number,
               seed = 0): Promise<SessionInfo> {
    const info = await post<SessionInfo>(`${this.baseUrl}/sessions`, {
      bundle_id: bundleId, variant, frames, seed,
    })
    this.sessionId = info.session_id
    return info
  }

  advance(): Promise<FramePayload> {
    return post(`${this.baseUrl}/sessions/${this.sessionId}/advance`)
  }

  click(row: number, col: number, polarity: 'positive' | 'negative'): Promise<AdvancePayload> {
    return post(`${this.baseUrl}/sessions/${this.sessionId}/click`, { row, col, polarity })
  }

  submitMask(rle: number[]): Promise<{ phase: Phase; prediction_rle: number[] }> {
    return post(`${this.baseUrl}/sessions/${this.sessionId}/mask`, { rle })
  }

  accept(): Promise<AcceptPayload> {
    return post(`${this.baseUrl}/sessions/${this.sessionId}/accept`)
  }

  async status(): Promise<StatusPayload> {
    const response = await fetch(`${this.baseUrl}/sessions/${this.sessionId}/status`)
    if (!response.ok) throw new ApiError(response.status, await response.json())
    return response.json()
  }

  verifyReplay(): Promise<{ identical: boolean; frames_compared: number }> {
    return post(`${this.baseUrl}/sessions/${this.sessionId}/verify-replay`)
  }

  events(onEvent: (event: ServerEvent) => void): WebSocket {
    const ws = new WebSocket(
      `${this.baseUrl.replace(/^http/, 'ws')}/sessions/${this.sessionId}/events`)
    ws.onmessage = (msg) => {
      try {
        onEvent(JSON.parse(msg.data))
      } catch {
        // non-JSON frames are ignored
      }
    }
    return ws
  }
}
