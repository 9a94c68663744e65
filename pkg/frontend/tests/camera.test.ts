import { describe, expect, it } from 'vitest'

import { orbitPosition, orbitToCamera, stepAzimuth, type Intrinsics } from '../src/camera'
import type { OrbitState } from '../src/types'

const BASE: Intrinsics = {
  fx: 60, fy: 60, cx: 31.5, cy: 31.5,
  width: 64, height: 64, z_near: 0.5, z_far: 10,
}

/** Apply a flat 4x4 world-to-camera transform to a point. */
function toCameraSpace(T: number[], p: [number, number, number]): number[] {
  const out = []
  for (let r = 0; r < 3; r++) {
    out.push(T[r * 4] * p[0] + T[r * 4 + 1] * p[1] + T[r * 4 + 2] * p[2] + T[r * 4 + 3])
  }
  return out
}

function expectClose(got: ArrayLike<number>, want: ArrayLike<number>, tol: number) {
  expect(got.length).toBe(want.length)
  for (let i = 0; i < got.length; i++) {
    expect(Math.abs(got[i] - want[i])).toBeLessThanOrEqual(tol)
  }
}

describe('orbitToCamera', () => {
  it('azimuth 0 / elevation 0 sits on the target -z axis looking at it', () => {
    const orbit: OrbitState = { azimuth: 0, elevation: 0, radius: 2, target: [0.5, -0.25, 3] }
    const p = orbitPosition(orbit)
    expectClose(p, [0.5, -0.25, 1], 1e-12)

    const cam = orbitToCamera(orbit, BASE)
    // the camera maps its own position to the origin
    expectClose(toCameraSpace(cam.T, p as [number, number, number]), [0, 0, 0], 1e-12)
    // and the target straight ahead at distance radius
    expectClose(toCameraSpace(cam.T, [0.5, -0.25, 3]), [0, 0, 2], 1e-12)
    // no rotation in this pose: T is a pure translation
    expectClose(cam.T.slice(0, 3), [1, 0, 0], 1e-12)
    expectClose(cam.T.slice(4, 7), [0, 1, 0], 1e-12)
    expectClose(cam.T.slice(8, 11), [0, 0, 1], 1e-12)
  })

  it('scaling the radius leaves the view direction fixed', () => {
    const angles = { azimuth: 0.8, elevation: -0.3, target: [1, 0.5, 4] as [number, number, number] }
    const near = orbitToCamera({ ...angles, radius: 0.5 }, BASE)
    const far = orbitToCamera({ ...angles, radius: 7 }, BASE)
    // rotation block depends only on the angles
    for (const i of [0, 1, 2, 4, 5, 6, 8, 9, 10]) {
      expect(Math.abs(near.T[i] - far.T[i])).toBeLessThanOrEqual(1e-12)
    }
    // the target stays centered, at each orbit's own distance
    expectClose(toCameraSpace(near.T, angles.target), [0, 0, 0.5], 1e-12)
    expectClose(toCameraSpace(far.T, angles.target), [0, 0, 7], 1e-12)
  })

  it('a full 360 degree azimuth sweep returns to the start pose within 1e-6', () => {
    const start: OrbitState = { azimuth: 0.3, elevation: 0.2, radius: 2.5, target: [0, 0.5, 2] }
    const before = orbitToCamera(start, BASE)
    let azimuth = start.azimuth
    for (let i = 0; i < 12; i++) azimuth = stepAzimuth(azimuth, (2 * Math.PI) / 12)
    const after = orbitToCamera({ ...start, azimuth }, BASE)
    expectClose(after.T, before.T, 1e-6)
    expectClose(orbitPosition({ ...start, azimuth }), orbitPosition(start), 1e-6)
  })

  it('carries the base intrinsics through unchanged', () => {
    const cam = orbitToCamera({ azimuth: 1, elevation: 0.4, radius: 3, target: [0, 0, 2] }, BASE)
    expect(cam.fx).toBe(60)
    expect(cam.cy).toBe(31.5)
    expect(cam.width).toBe(64)
    expect(cam.z_far).toBe(10)
    expect(cam.T.slice(12)).toEqual([0, 0, 0, 1])
  })

  it('keeps the rotation orthonormal with determinant +1 at odd angles', () => {
    const cam = orbitToCamera({ azimuth: 2.4, elevation: 1.1, radius: 1.3, target: [2, -1, 5] }, BASE)
    const r = (i: number, j: number) => cam.T[i * 4 + j]
    for (let a = 0; a < 3; a++) {
      for (let b = 0; b < 3; b++) {
        const dot = r(a, 0) * r(b, 0) + r(a, 1) * r(b, 1) + r(a, 2) * r(b, 2)
        expect(Math.abs(dot - (a === b ? 1 : 0))).toBeLessThanOrEqual(1e-12)
      }
    }
    const det =
      r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) -
      r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0)) +
      r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0))
    expect(Math.abs(det - 1)).toBeLessThanOrEqual(1e-12)
  })

  it('rejects a nonpositive radius and poles', () => {
    const orbit: OrbitState = { azimuth: 0, elevation: 0, radius: 0, target: [0, 0, 2] }
    expect(() => orbitToCamera(orbit, BASE)).toThrow(/radius/)
    expect(() =>
      orbitToCamera({ ...orbit, radius: 1, elevation: Math.PI / 2 }, BASE),
    ).toThrow(/elevation/)
  })
})

describe('stepAzimuth', () => {
  it('wraps into [0, 2pi)', () => {
    expect(stepAzimuth(6.2, 0.2)).toBeCloseTo(6.4 - 2 * Math.PI, 12)
    expect(stepAzimuth(0.1, -0.3)).toBeCloseTo(2 * Math.PI - 0.2, 12)
  })
})
