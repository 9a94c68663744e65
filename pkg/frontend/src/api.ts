// Typed HTTP client for the scene service. Every method maps onto one
// endpoint; errors carry the HTTP status so callers can branch on 409.

import type {
  CameraJson,
  EditOpJson,
  RenderResult,
  SelectionJson,
  StatusInfo,
  TextQueryResult,
  TrainingConfig,
} from './types'

export class ApiError extends Error {
  status: number
  detail: string

  constructor(status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`)
    this.name = 'ApiError'
    this.status = status
    this.detail = detail
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>

export class SplatClient {
  readonly baseUrl: string
  private fetcher: FetchLike

  constructor(baseUrl: string, fetcher: FetchLike = (...a) => fetch(...a)) {
    this.baseUrl = baseUrl.replace(/\/$/, '')
    this.fetcher = fetcher
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetcher(this.baseUrl + path, init)
    if (!resp.ok) {
      let detail = resp.statusText
      try {
        const body = await resp.json()
        if (typeof body?.detail === 'string') detail = body.detail
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail)
    }
    return resp
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.request(path, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    })
    return resp.json() as Promise<T>
  }

  async createSession(
    imagePngBase64: string,
    camera: CameraJson,
    config?: TrainingConfig,
  ): Promise<string> {
    const out = await this.post<{ session_id: string }>('/session', {
      image_png: imagePngBase64,
      camera,
      config,
    })
    return out.session_id
  }

  async status(sessionId: string): Promise<StatusInfo> {
    const resp = await this.request(`/session/${sessionId}/status`)
    return resp.json()
  }

  async render(
    sessionId: string,
    body: { camera?: CameraJson; heatmap_text?: string } = {},
  ): Promise<RenderResult> {
    return this.post(`/session/${sessionId}/render`, body)
  }

  async queryText(
    sessionId: string,
    text: string,
    tau: number,
  ): Promise<TextQueryResult> {
    return this.post(`/session/${sessionId}/query/text`, { text, tau })
  }

  async queryBbox(
    sessionId: string,
    rect: [number, number, number, number],
    camera?: CameraJson,
  ): Promise<SelectionJson> {
    return this.post(`/session/${sessionId}/query/bbox`, { rect, camera })
  }

  async edit(sessionId: string, op: EditOpJson): Promise<{ revision: number }> {
    return this.post(`/session/${sessionId}/edit`, op)
  }

  async undo(sessionId: string): Promise<{ revision: number }> {
    return this.post(`/session/${sessionId}/undo`, {})
  }

  async exportScene(sessionId: string): Promise<ArrayBuffer> {
    const resp = await this.request(`/session/${sessionId}/export`)
    return resp.arrayBuffer()
  }

  streamUrl(sessionId: string): string {
    const ws = this.baseUrl.replace(/^http/, 'ws')
    return `${ws}/session/${sessionId}/stream`
  }
}
