// Browser entry point: wires the DOM to the editor state machine. All
// scene math happens server-side; this file only moves pixels and events.

import { SplatClient } from './api'
import { stepAzimuth } from './camera'
import { EditorSession } from './editor'
import { overlayPixels, scoresFromGray } from './heatmap'
import type { CameraJson, StreamFrame } from './types'

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id)
  if (!el) throw new Error(`missing #${id}`)
  return el as T
}

const fileInput = $<HTMLInputElement>('file')
const startBtn = $<HTMLButtonElement>('start')
const statusEl = $<HTMLElement>('status')
const viewCanvas = $<HTMLCanvasElement>('view')
const overlayCanvas = $<HTMLCanvasElement>('overlay')
const queryInput = $<HTMLInputElement>('query')
const queryBtn = $<HTMLButtonElement>('run-query')
const tauSlider = $<HTMLInputElement>('tau')
const tauLabel = $<HTMLElement>('tau-value')
const removeBtn = $<HTMLButtonElement>('remove')
const undoBtn = $<HTMLButtonElement>('undo')
const exportBtn = $<HTMLButtonElement>('export')
const stepsInput = $<HTMLInputElement>('steps')

const client = new SplatClient(location.origin)

let editor: EditorSession | null = null
let sessionId = ''
let baseCamera: CameraJson | null = null
let heatmapGray: Float32Array | null = null

function setStatus(text: string) {
  statusEl.textContent = text
}

function drawPng(canvas: HTMLCanvasElement, pngBase64: string) {
  const img = new Image()
  img.onload = () => {
    canvas.width = img.width
    canvas.height = img.height
    canvas.getContext('2d')!.drawImage(img, 0, 0)
  }
  img.src = `data:image/png;base64,${pngBase64}`
}

function repaintOverlay() {
  const ctx = overlayCanvas.getContext('2d')!
  ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height)
  if (!heatmapGray || !editor?.overlay) return
  const tau = Number(tauSlider.value)
  const rgba = overlayPixels(heatmapGray, tau)
  ctx.putImageData(
    new ImageData(new Uint8ClampedArray(rgba), overlayCanvas.width, overlayCanvas.height),
    0,
    0,
  )
}

function grayFromPng(pngBase64: string): Promise<Float32Array> {
  return new Promise((resolve, reject) => {
    const img = new Image()
    img.onload = () => {
      const scratch = document.createElement('canvas')
      scratch.width = img.width
      scratch.height = img.height
      const ctx = scratch.getContext('2d')!
      ctx.drawImage(img, 0, 0)
      const { data } = ctx.getImageData(0, 0, img.width, img.height)
      const gray = new Uint8Array(img.width * img.height)
      for (let i = 0; i < gray.length; i++) gray[i] = data[i * 4]
      resolve(scoresFromGray(gray))
    }
    img.onerror = reject
    img.src = `data:image/png;base64,${pngBase64}`
  })
}

async function fileToPngBase64(file: File): Promise<{ b64: string; w: number; h: number }> {
  const buf = await file.arrayBuffer()
  let b64 = ''
  const bytes = new Uint8Array(buf)
  for (let i = 0; i < bytes.length; i += 0x8000) {
    b64 += String.fromCharCode(...bytes.subarray(i, i + 0x8000))
  }
  const encoded = btoa(b64)
  const img = new Image()
  const dims = new Promise<{ w: number; h: number }>((resolve, reject) => {
    img.onload = () => resolve({ w: img.naturalWidth, h: img.naturalHeight })
    img.onerror = reject
  })
  img.src = `data:image/png;base64,${encoded}`
  const { w, h } = await dims
  return { b64: encoded, w, h }
}

function defaultCamera(w: number, h: number): CameraJson {
  const f = Math.max(w, h)
  const T = [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]
  return {
    fx: f, fy: f, cx: (w - 1) / 2, cy: (h - 1) / 2,
    width: w, height: h, z_near: 0.5, z_far: 10.0, T,
  }
}

function connectStream() {
  const ws = new WebSocket(client.streamUrl(sessionId))
  ws.onmessage = (event) => {
    const frame = JSON.parse(event.data) as StreamFrame
    if (frame.kind === 'hello') {
      setStatus(`session ${sessionId}: ${frame.state}`)
      return
    }
    drawPng(viewCanvas, frame.png)
    if (editor) editor.state.revision = Math.max(editor.state.revision, frame.revision)
    setStatus(
      frame.kind === 'train'
        ? `training, step ${frame.step}`
        : `${frame.kind}, revision ${frame.revision}`,
    )
  }
  ws.onclose = () => setStatus('stream closed')
}

startBtn.onclick = async () => {
  const file = fileInput.files?.[0]
  if (!file) return setStatus('choose an image first')
  try {
    const { b64, w, h } = await fileToPngBase64(file)
    baseCamera = defaultCamera(w, h)
    const steps = Number(stepsInput.value) || 0
    sessionId = await client.createSession(b64, baseCamera, { steps })
    editor = new EditorSession(client, sessionId, baseCamera, {
      azimuth: 0,
      elevation: 0,
      radius: 2.5,
      target: [0, 0, 2.5],
    }, {
      onFrame: (png) => drawPng(viewCanvas, png),
      onOverlay: () => repaintOverlay(),
      onError: (err) => setStatus(String(err)),
    })
    overlayCanvas.width = w
    overlayCanvas.height = h
    connectStream()
    setStatus('lifting...')
  } catch (err) {
    setStatus(String(err))
  }
}

queryBtn.onclick = async () => {
  if (!editor) return
  const text = queryInput.value
  const tau = Number(tauSlider.value)
  try {
    await editor.queryAndHighlight(text, tau)
    if (!text.trim()) {
      heatmapGray = null
      repaintOverlay()
      return
    }
    const res = await client.render(sessionId, { heatmap_text: text })
    if (res.heatmap_png) {
      heatmapGray = await grayFromPng(res.heatmap_png)
      repaintOverlay()
    }
    setStatus(`selected ${editor.state.selection?.indices.length ?? 0} Gaussians`)
  } catch (err) {
    setStatus(String(err))
  }
}

tauSlider.oninput = () => {
  tauLabel.textContent = tauSlider.value
  editor?.setTau(Number(tauSlider.value))
  repaintOverlay()
}

removeBtn.onclick = async () => {
  if (!editor) return
  try {
    editor.beginGizmo({ kind: 'remove' })
    await editor.commitEdit()
    setStatus(`removed; revision ${editor.state.revision}`)
  } catch (err) {
    setStatus(String(err))
  }
}

undoBtn.onclick = async () => {
  if (!editor) return
  try {
    await editor.undoLast()
    setStatus(`undone; revision ${editor.state.revision}`)
  } catch (err) {
    setStatus(String(err))
  }
}

exportBtn.onclick = async () => {
  if (!sessionId) return
  const data = await client.exportScene(sessionId)
  const url = URL.createObjectURL(new Blob([data], { type: 'application/octet-stream' }))
  const a = document.createElement('a')
  a.href = url
  a.download = `${sessionId}.gsed`
  a.click()
  URL.revokeObjectURL(url)
}

// Drag on the view: with a selection, translate it in the view plane;
// without one, orbit. One edit per drag, committed on release.
let dragStart: { x: number; y: number } | null = null
let dragMode: 'orbit' | 'translate' = 'orbit'

viewCanvas.onpointerdown = (ev) => {
  dragStart = { x: ev.offsetX, y: ev.offsetY }
  dragMode =
    editor?.state.selection && editor.state.selection.indices.length > 0 && !ev.shiftKey
      ? 'translate'
      : 'orbit'
  viewCanvas.setPointerCapture(ev.pointerId)
}

viewCanvas.onpointermove = (ev) => {
  if (!dragStart || !editor) return
  if (dragMode === 'orbit') {
    const dx = ev.offsetX - dragStart.x
    const dy = ev.offsetY - dragStart.y
    dragStart = { x: ev.offsetX, y: ev.offsetY }
    const orbit = editor.state.orbit
    editor.setOrbit({
      ...orbit,
      azimuth: stepAzimuth(orbit.azimuth, -dx * 0.01),
      elevation: Math.min(1.4, Math.max(-1.4, orbit.elevation + dy * 0.01)),
    })
  }
}

viewCanvas.onpointerup = async (ev) => {
  if (!dragStart || !editor) return
  const dx = ev.offsetX - dragStart.x
  const dy = ev.offsetY - dragStart.y
  dragStart = null
  if (dragMode !== 'translate' || (dx === 0 && dy === 0) || !baseCamera) return
  // screen pixels to world units at the orbit sphere's depth
  const s = editor.state.orbit.radius / baseCamera.fx
  try {
    editor.beginGizmo({ kind: 'translate', translation: [dx * s, dy * s, 0] })
    await editor.commitEdit()
    setStatus(`moved; revision ${editor.state.revision}`)
  } catch (err) {
    setStatus(String(err))
  }
}
