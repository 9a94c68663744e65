// JSON shapes exchanged with the scene service. Field names mirror the
// server exactly; keep snake_case where the wire format uses it.

export interface CameraJson {
  fx: number
  fy: number
  cx: number
  cy: number
  width: number
  height: number
  z_near: number
  z_far: number
  /** World-to-camera transform, 16 floats row-major, last row 0 0 0 1. */
  T: number[]
}

export type SessionState = 'lifting' | 'training' | 'ready' | 'failed'

export interface StatusInfo {
  state: SessionState
  step: number
  steps: number
  losses: Record<string, number> | null
  psnr: number[] | null
  revision: number | null
  gaussians: number | null
  error: string | null
}

export interface SelectionJson {
  indices: number[]
  revision: number
  origin: string
}

export interface TextQueryResult extends SelectionJson {
  /** Every currently active Gaussian, parallel to scores. */
  active_indices: number[]
  scores: number[]
}

export interface RenderResult {
  revision: number
  render_png: string
  heatmap_png: string | null
}

export type EditKind = 'translate' | 'rotate' | 'resize' | 'remove'

export interface EditOpJson {
  kind: EditKind
  selection: SelectionJson
  translation?: number[]
  rotation?: number[]
  pivot?: number[]
  scale?: number
}

export interface TrainingConfig {
  steps?: number
  prompt?: string
  seed?: number
  lambda_sds?: number
  lambda_distill?: number
  interp_samples?: number
}

/** Frames pushed over the session WebSocket. */
export type StreamFrame =
  | ({ kind: 'hello' } & StatusInfo)
  | {
      kind: 'lifted' | 'train' | 'ready' | 'edit'
      step: number
      revision: number
      png: string
    }

/** The client's picture of one editing session; server is authoritative. */
export interface ViewState {
  sessionId: string
  orbit: OrbitState
  selection: SelectionJson | null
  gizmo: GizmoIntent | null
  revision: number
}

/** Orbit camera parameters; angles in radians. */
export interface OrbitState {
  azimuth: number
  elevation: number
  radius: number
  target: [number, number, number]
}

/** A pending edit the user is composing, before the server accepts it. */
export type GizmoIntent =
  | { kind: 'translate'; translation: [number, number, number] }
  | { kind: 'rotate'; rotation: [number, number, number, number] }
  | { kind: 'resize'; scale: number }
  | { kind: 'remove' }

/** How the current selection was obtained, so it can be re-fetched. */
export type QueryIntent =
  | { kind: 'text'; text: string; tau: number }
  | { kind: 'bbox'; rect: [number, number, number, number] }
