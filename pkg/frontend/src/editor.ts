// Editing state machine. The server is the single source of truth: the
// revision and selection held here only ever change when a server response
// says so, at most one edit is in flight, and a stale-revision conflict is
// resolved by re-running the query that produced the selection and
// replaying the user's intent on the fresh result.

import { ApiError } from './api'
import { orbitToCamera, type Intrinsics } from './camera'
import { selectAboveTau } from './heatmap'
import type {
  CameraJson,
  EditOpJson,
  GizmoIntent,
  OrbitState,
  QueryIntent,
  RenderResult,
  SelectionJson,
  TextQueryResult,
  ViewState,
} from './types'

/** The slice of the HTTP client the editor needs; tests fake this. */
export interface EditorApi {
  queryText(id: string, text: string, tau: number): Promise<TextQueryResult>
  queryBbox(
    id: string,
    rect: [number, number, number, number],
    camera?: CameraJson,
  ): Promise<SelectionJson>
  edit(id: string, op: EditOpJson): Promise<{ revision: number }>
  undo(id: string): Promise<{ revision: number }>
  render(
    id: string,
    body?: { camera?: CameraJson; heatmap_text?: string },
  ): Promise<RenderResult>
}

export interface OverlayState {
  activeIndices: number[]
  scores: number[]
  tau: number
  selected: number[]
}

export interface EditorOptions {
  /** Minimum spacing between render requests; 100 ms = 10 Hz. */
  renderIntervalMs?: number
  /** Conflict retries before giving up; each retry re-queries first. */
  maxConflictRetries?: number
  onFrame?: (pngBase64: string, revision: number) => void
  onOverlay?: (overlay: OverlayState | null) => void
  onSelection?: (selection: SelectionJson | null) => void
  onError?: (err: unknown) => void
}

export function opFromIntent(
  intent: GizmoIntent,
  selection: SelectionJson,
): EditOpJson {
  switch (intent.kind) {
    case 'translate':
      return { kind: 'translate', selection, translation: [...intent.translation] }
    case 'rotate':
      return { kind: 'rotate', selection, rotation: [...intent.rotation] }
    case 'resize':
      return { kind: 'resize', selection, scale: intent.scale }
    case 'remove':
      return { kind: 'remove', selection }
  }
}

export class EditorSession {
  readonly state: ViewState
  overlay: OverlayState | null = null
  queryIntent: QueryIntent | null = null

  private api: EditorApi
  private intrinsics: Intrinsics
  private renderIntervalMs: number
  private maxConflictRetries: number
  private opts: EditorOptions
  private editInFlight = false
  private renderTimer: ReturnType<typeof setTimeout> | null = null
  private lastRenderAt = Number.NEGATIVE_INFINITY

  constructor(
    api: EditorApi,
    sessionId: string,
    camera: CameraJson,
    orbit: OrbitState,
    opts: EditorOptions = {},
  ) {
    this.api = api
    this.intrinsics = {
      fx: camera.fx, fy: camera.fy, cx: camera.cx, cy: camera.cy,
      width: camera.width, height: camera.height,
      z_near: camera.z_near, z_far: camera.z_far,
    }
    this.renderIntervalMs = opts.renderIntervalMs ?? 100
    this.maxConflictRetries = opts.maxConflictRetries ?? 3
    this.opts = opts
    this.state = {
      sessionId,
      orbit,
      selection: null,
      gizmo: null,
      revision: 0,
    }
  }

  get editPending(): boolean {
    return this.editInFlight
  }

  orbitCamera(): CameraJson {
    return orbitToCamera(this.state.orbit, this.intrinsics)
  }

  setOrbit(orbit: OrbitState): void {
    if (!(orbit.radius > 0)) throw new Error('orbit radius must be positive')
    this.state.orbit = orbit
    this.requestRender()
  }

  /** Text query; empty text clears the overlay and selection locally. */
  async queryAndHighlight(text: string, tau: number): Promise<void> {
    const trimmed = text.trim()
    if (!trimmed) {
      this.queryIntent = null
      this.setSelection(null)
      this.setOverlay(null)
      return
    }
    const res = await this.api.queryText(this.state.sessionId, trimmed, tau)
    this.queryIntent = { kind: 'text', text: trimmed, tau }
    this.state.revision = res.revision
    this.setSelection({ indices: res.indices, revision: res.revision, origin: res.origin })
    this.setOverlay({
      activeIndices: res.active_indices,
      scores: res.scores,
      tau,
      selected: res.indices,
    })
  }

  /**
   * Move the threshold slider. Re-filters the scores the server already
   * sent with the same strict rule the server applies, so the selection
   * stays equal to what a fresh query at this tau would return.
   */
  setTau(tau: number): void {
    if (!this.overlay || !this.state.selection) return
    const selected = selectAboveTau(this.overlay.activeIndices, this.overlay.scores, tau)
    this.setOverlay({ ...this.overlay, tau, selected })
    this.setSelection({ ...this.state.selection, indices: selected })
    if (this.queryIntent?.kind === 'text') this.queryIntent.tau = tau
  }

  async selectBbox(rect: [number, number, number, number]): Promise<void> {
    const res = await this.api.queryBbox(this.state.sessionId, rect, this.orbitCamera())
    this.queryIntent = { kind: 'bbox', rect }
    this.state.revision = res.revision
    this.setSelection(res)
    this.setOverlay(null)
  }

  /** Stage an edit; a selection must exist to attach it to. */
  beginGizmo(intent: GizmoIntent): void {
    if (!this.state.selection || this.state.selection.indices.length === 0) {
      throw new Error('no selection to edit')
    }
    this.state.gizmo = intent
  }

  /**
   * Send the staged edit. On a stale-revision conflict the selection is
   * re-fetched via its original query and the same intent is replayed;
   * other conflicts (still training, nothing staged) surface as errors.
   */
  async commitEdit(): Promise<number> {
    const intent = this.state.gizmo
    if (!intent) throw new Error('no edit staged')
    if (this.editInFlight) throw new Error('an edit is already in flight')
    this.editInFlight = true
    try {
      for (let attempt = 0; ; attempt++) {
        const selection = this.state.selection
        if (!selection || selection.indices.length === 0) {
          throw new Error('selection became empty; nothing to edit')
        }
        try {
          const { revision } = await this.api.edit(
            this.state.sessionId,
            opFromIntent(intent, selection),
          )
          this.state.revision = revision
          this.setSelection({ ...selection, revision })
          this.state.gizmo = null
          this.requestRender()
          return revision
        } catch (err) {
          const stale =
            err instanceof ApiError &&
            err.status === 409 &&
            err.detail.includes('stale')
          if (!stale || attempt >= this.maxConflictRetries) throw err
          await this.refetchSelection()
        }
      }
    } finally {
      this.editInFlight = false
    }
  }

  async undoLast(): Promise<number> {
    const { revision } = await this.api.undo(this.state.sessionId)
    this.state.revision = revision
    if (this.queryIntent) {
      await this.refetchSelection()
    } else {
      this.setSelection(null)
      this.setOverlay(null)
    }
    this.requestRender()
    return revision
  }

  /** Coalesce render requests to at most one per interval. */
  requestRender(): void {
    if (this.renderTimer !== null) return
    const wait = Math.max(0, this.renderIntervalMs - (Date.now() - this.lastRenderAt))
    this.renderTimer = setTimeout(() => {
      this.renderTimer = null
      this.lastRenderAt = Date.now()
      this.api
        .render(this.state.sessionId, { camera: this.orbitCamera() })
        .then((res) => this.opts.onFrame?.(res.render_png, res.revision))
        .catch((err) => this.opts.onError?.(err))
    }, wait)
  }

  dispose(): void {
    if (this.renderTimer !== null) {
      clearTimeout(this.renderTimer)
      this.renderTimer = null
    }
  }

  private async refetchSelection(): Promise<void> {
    const intent = this.queryIntent
    if (!intent) throw new Error('selection origin unknown; cannot re-query')
    if (intent.kind === 'text') {
      const res = await this.api.queryText(this.state.sessionId, intent.text, intent.tau)
      this.state.revision = res.revision
      this.setSelection({ indices: res.indices, revision: res.revision, origin: res.origin })
      this.setOverlay({
        activeIndices: res.active_indices,
        scores: res.scores,
        tau: intent.tau,
        selected: res.indices,
      })
    } else {
      const res = await this.api.queryBbox(this.state.sessionId, intent.rect, this.orbitCamera())
      this.state.revision = res.revision
      this.setSelection(res)
    }
  }

  private setSelection(selection: SelectionJson | null): void {
    this.state.selection = selection
    this.opts.onSelection?.(selection)
  }

  private setOverlay(overlay: OverlayState | null): void {
    this.overlay = overlay
    this.opts.onOverlay?.(overlay)
  }
}
