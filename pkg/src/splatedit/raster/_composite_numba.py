"""Numba per-pixel compositing kernels.

Front-to-back alpha blending per pixel: a_i = min(0.99, opa_i * exp(-q2/2)),
entries with q2 > 9 or a < 1/255 are skipped, and a pixel stops accepting
contributions once its transmittance drops below 1e-6 (so fully occluded
splats receive exactly zero gradient).  Serial loops keep the output
bit-stable run to run.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .prepare import ALPHA_CLAMP, CUTOFF_Q2, MIN_ALPHA, T_STOP


@njit(cache=True)
def forward_kernel(mean2d, conic, z, opa, color, feat, entry_splat, tile_ranges,
                   tile, height, width, rgb, sz, tfin, featimg, last_pos):
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_ranges.shape[0] - 1
    d = feat.shape[1]
    for t_idx in range(n_tiles):
        lo = tile_ranges[t_idx]
        hi = tile_ranges[t_idx + 1]
        if hi == lo:
            continue
        ty = t_idx // tiles_x
        tx = t_idx - ty * tiles_x
        y1 = min((ty + 1) * tile, height)
        x1 = min((tx + 1) * tile, width)
        for py in range(ty * tile, y1):
            for px in range(tx * tile, x1):
                T = 1.0
                last = -1
                cr = 0.0
                cg = 0.0
                cb = 0.0
                zacc = 0.0
                for e in range(lo, hi):
                    if T < T_STOP:
                        break
                    j = entry_splat[e]
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    q2 = (conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy
                          + conic[j, 2] * dy * dy)
                    if q2 > CUTOFF_Q2 or q2 < 0.0:
                        continue
                    a = opa[j] * np.exp(-0.5 * q2)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < MIN_ALPHA:
                        continue
                    w = a * T
                    cr += color[j, 0] * w
                    cg += color[j, 1] * w
                    cb += color[j, 2] * w
                    zacc += z[j] * w
                    for k in range(d):
                        featimg[py, px, k] += feat[j, k] * w
                    T *= 1.0 - a
                    last = j
                rgb[py, px, 0] = cr
                rgb[py, px, 1] = cg
                rgb[py, px, 2] = cb
                sz[py, px] = zacc
                tfin[py, px] = T
                last_pos[py, px] = last


@njit(cache=True)
def backward_kernel(mean2d, conic, z, opa, color, feat, entry_splat, tile_ranges,
                    tile, height, width, g_rgb, g_feat_up, dldsz, dldtfin, tfin,
                    last_pos, gm2, gconic, gz, gopa, gcol, gfeat):
    tiles_x = (width + tile - 1) // tile
    n_tiles = tile_ranges.shape[0] - 1
    d = feat.shape[1]
    sfeat = np.zeros(d)
    for t_idx in range(n_tiles):
        lo = tile_ranges[t_idx]
        hi = tile_ranges[t_idx + 1]
        if hi == lo:
            continue
        ty = t_idx // tiles_x
        tx = t_idx - ty * tiles_x
        y1 = min((ty + 1) * tile, height)
        x1 = min((tx + 1) * tile, width)
        for py in range(ty * tile, y1):
            for px in range(tx * tile, x1):
                last = last_pos[py, px]
                if last < 0:
                    continue
                t_final = tfin[py, px]
                t_after = t_final
                sr = 0.0
                sg = 0.0
                sb = 0.0
                ssz = 0.0
                for k in range(d):
                    sfeat[k] = 0.0
                ur = g_rgb[py, px, 0]
                ug = g_rgb[py, px, 1]
                ub = g_rgb[py, px, 2]
                usz = dldsz[py, px]
                utf = dldtfin[py, px]
                for e in range(hi - 1, lo - 1, -1):
                    j = entry_splat[e]
                    if j > last:
                        continue
                    dx = px - mean2d[j, 0]
                    dy = py - mean2d[j, 1]
                    q2 = (conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy
                          + conic[j, 2] * dy * dy)
                    if q2 > CUTOFF_Q2 or q2 < 0.0:
                        continue
                    gw = np.exp(-0.5 * q2)
                    a = opa[j] * gw
                    clamped = a > ALPHA_CLAMP
                    if clamped:
                        a = ALPHA_CLAMP
                    if a < MIN_ALPHA:
                        continue
                    one_m = 1.0 - a
                    t_here = t_after / one_m
                    w = a * t_here
                    gcol[j, 0] += ur * w
                    gcol[j, 1] += ug * w
                    gcol[j, 2] += ub * w
                    gz[j] += usz * w
                    dlda = (ur * (t_here * color[j, 0] - sr / one_m)
                            + ug * (t_here * color[j, 1] - sg / one_m)
                            + ub * (t_here * color[j, 2] - sb / one_m)
                            + usz * (t_here * z[j] - ssz / one_m)
                            + utf * (-t_final / one_m))
                    for k in range(d):
                        guk = g_feat_up[py, px, k]
                        gfeat[j, k] += guk * w
                        dlda += guk * (t_here * feat[j, k] - sfeat[k] / one_m)
                    if not clamped:
                        gopa[j] += dlda * gw
                        dldq2 = dlda * opa[j] * (-0.5) * gw
                        ddx = dldq2 * (2.0 * conic[j, 0] * dx + 2.0 * conic[j, 1] * dy)
                        ddy = dldq2 * (2.0 * conic[j, 1] * dx + 2.0 * conic[j, 2] * dy)
                        gm2[j, 0] -= ddx
                        gm2[j, 1] -= ddy
                        gconic[j, 0] += dldq2 * dx * dx
                        gconic[j, 1] += dldq2 * 2.0 * dx * dy
                        gconic[j, 2] += dldq2 * dy * dy
                    sr += color[j, 0] * w
                    sg += color[j, 1] * w
                    sb += color[j, 2] * w
                    ssz += z[j] * w
                    for k in range(d):
                        sfeat[k] += feat[j, k] * w
                    t_after = t_here
