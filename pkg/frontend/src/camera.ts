// Orbit-to-pinhole camera construction. The scene convention (inherited
// from the lifted input view) is +x right, +y down, +z away from the
// viewer, so "up" in world space is -y and azimuth spins around the y axis.

import type { CameraJson, OrbitState } from './types'

export interface Intrinsics {
  fx: number
  fy: number
  cx: number
  cy: number
  width: number
  height: number
  z_near: number
  z_far: number
}

type Vec3 = [number, number, number]

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ]
}

function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2])
  if (n < 1e-12) throw new Error('cannot normalize a zero vector')
  return [a[0] / n, a[1] / n, a[2] / n]
}

/** Camera position for an orbit state; radius scales a unit direction, so
 *  the view direction depends only on the angles. */
export function orbitPosition(orbit: OrbitState): Vec3 {
  const { azimuth: az, elevation: el, radius, target } = orbit
  const d: Vec3 = [
    Math.sin(az) * Math.cos(el),
    -Math.sin(el),
    -Math.cos(az) * Math.cos(el),
  ]
  return [
    target[0] + radius * d[0],
    target[1] + radius * d[1],
    target[2] + radius * d[2],
  ]
}

/**
 * Build the camera JSON for an orbit state: the camera sits on a sphere
 * around the target and looks straight at it. Azimuth 0 / elevation 0
 * places it on the target's -z axis looking along +z.
 */
export function orbitToCamera(orbit: OrbitState, base: Intrinsics): CameraJson {
  if (!(orbit.radius > 0)) {
    throw new Error(`orbit radius must be positive, got ${orbit.radius}`)
  }
  if (Math.abs(orbit.elevation) >= Math.PI / 2) {
    throw new Error('orbit elevation must stay within (-90, 90) degrees')
  }
  const p = orbitPosition(orbit)
  const zc = normalize(sub(orbit.target, p))
  // world "down" is +y; right = down x forward keeps det(R) = +1
  const xc = normalize(cross([0, 1, 0], zc))
  const yc = cross(zc, xc)
  const T = [
    xc[0], xc[1], xc[2], -dot(xc, p),
    yc[0], yc[1], yc[2], -dot(yc, p),
    zc[0], zc[1], zc[2], -dot(zc, p),
    0, 0, 0, 1,
  ]
  return {
    fx: base.fx, fy: base.fy, cx: base.cx, cy: base.cy,
    width: base.width, height: base.height,
    z_near: base.z_near, z_far: base.z_far,
    T,
  }
}

/** Wrap an azimuth increment, keeping the angle in [0, 2pi). */
export function stepAzimuth(azimuth: number, delta: number): number {
  const two = 2 * Math.PI
  return ((azimuth + delta) % two + two) % two
}
