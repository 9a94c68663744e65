"""Vectorized numpy compositing, the fallback when numba is unavailable.

Same math as the numba kernels.  The per-pixel early stop at transmittance
1e-6 becomes an aliveness mask: transmittance only ever decreases, so masking
T >= 1e-6 per splat is exactly the sequential break.  Splats are walked in
global front-to-back order touching only their bounding boxes, which yields
the same contribution set as the tile walk.
"""
from __future__ import annotations

import numpy as np

from .prepare import ALPHA_CLAMP, CUTOFF_Q2, MIN_ALPHA, T_STOP


def forward_kernel(mean2d, conic, z, opa, color, feat, bbox, height, width,
                   rgb, sz, tfin, featimg, last_pos):
    m = mean2d.shape[0]
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    for j in range(m):
        x0, x1, y0, y1 = bbox[j]
        if x1 < x0 or y1 < y0:
            continue
        sl = np.s_[y0:y1 + 1, x0:x1 + 1]
        Ts = tfin[sl]
        dx = xs[x0:x1 + 1][None, :] - mean2d[j, 0]
        dy = ys[y0:y1 + 1][:, None] - mean2d[j, 1]
        q2 = (conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy
              + conic[j, 2] * dy * dy)
        a = np.minimum(opa[j] * np.exp(-0.5 * q2), ALPHA_CLAMP)
        valid = (Ts >= T_STOP) & (q2 <= CUTOFF_Q2) & (q2 >= 0.0) & (a >= MIN_ALPHA)
        if not valid.any():
            continue
        w = np.where(valid, a * Ts, 0.0)
        rgb[sl] += color[j] * w[:, :, None]
        sz[sl] += z[j] * w
        featimg[sl] += feat[j] * w[:, :, None]
        tfin[sl] = np.where(valid, Ts * (1.0 - a), Ts)
        last_pos[sl][valid] = j


def backward_kernel(mean2d, conic, z, opa, color, feat, bbox, height, width,
                    g_rgb, g_feat_up, dldsz, dldtfin, tfin, last_pos,
                    gm2, gconic, gz, gopa, gcol, gfeat):
    m = mean2d.shape[0]
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    t_after = tfin.copy()
    sfx_rgb = np.zeros_like(g_rgb)
    sfx_z = np.zeros((height, width))
    sfx_feat = np.zeros_like(g_feat_up)
    for j in range(m - 1, -1, -1):
        x0, x1, y0, y1 = bbox[j]
        if x1 < x0 or y1 < y0:
            continue
        sl = np.s_[y0:y1 + 1, x0:x1 + 1]
        dx = xs[x0:x1 + 1][None, :] - mean2d[j, 0]
        dy = ys[y0:y1 + 1][:, None] - mean2d[j, 1]
        q2 = (conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy
              + conic[j, 2] * dy * dy)
        gw = np.exp(-0.5 * q2)
        a_raw = opa[j] * gw
        clamped = a_raw > ALPHA_CLAMP
        a = np.minimum(a_raw, ALPHA_CLAMP)
        valid = (last_pos[sl] >= j) & (q2 <= CUTOFF_Q2) & (q2 >= 0.0) \
            & (a >= MIN_ALPHA)
        if not valid.any():
            continue
        one_m = 1.0 - a
        t_here = np.where(valid, t_after[sl] / one_m, t_after[sl])
        w = np.where(valid, a * t_here, 0.0)

        gcol[j] += np.einsum("yxc,yx->c", g_rgb[sl], w)
        gz[j] += float(np.sum(dldsz[sl] * w))
        gfeat[j] += np.einsum("yxk,yx->k", g_feat_up[sl], w)

        dlda = np.einsum(
            "yxc,yxc->yx", g_rgb[sl],
            t_here[:, :, None] * color[j] - sfx_rgb[sl] / one_m[:, :, None])
        dlda += dldsz[sl] * (t_here * z[j] - sfx_z[sl] / one_m)
        dlda += dldtfin[sl] * (-tfin[sl] / one_m)
        dlda += np.einsum(
            "yxk,yxk->yx", g_feat_up[sl],
            t_here[:, :, None] * feat[j] - sfx_feat[sl] / one_m[:, :, None])

        live = valid & ~clamped
        gopa[j] += float(np.sum(np.where(live, dlda * gw, 0.0)))
        dldq2 = np.where(live, dlda * opa[j] * (-0.5) * gw, 0.0)
        gm2[j, 0] -= float(np.sum(dldq2 * (2.0 * conic[j, 0] * dx
                                           + 2.0 * conic[j, 1] * dy)))
        gm2[j, 1] -= float(np.sum(dldq2 * (2.0 * conic[j, 1] * dx
                                           + 2.0 * conic[j, 2] * dy)))
        gconic[j, 0] += float(np.sum(dldq2 * dx * dx))
        gconic[j, 1] += float(np.sum(dldq2 * 2.0 * dx * dy))
        gconic[j, 2] += float(np.sum(dldq2 * dy * dy))

        sfx_rgb[sl] += color[j] * w[:, :, None]
        sfx_z[sl] += z[j] * w
        sfx_feat[sl] += feat[j] * w[:, :, None]
        t_after[sl] = np.where(valid, t_here, t_after[sl])
