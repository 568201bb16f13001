"""Numba kernels for per-pixel alpha compositing (forward and backward).

The kernels run sequentially (deterministic accumulation order) and do all
arithmetic in float64 regardless of the input array dtype, so the tiled
production path, the naive reference path, and the gradient tests share
bit-identical per-pair math. Compositing follows the front-to-back rule:
alpha clamped to `alpha_clamp`, accumulation stops for a pixel once its
transmittance drops below `t_cutoff`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(px, py, mean2d, conic, opacity, rgb, bg, alpha_clamp, t_cutoff, out):
    """Composite `S` depth-ordered splats over `P` pixels into out (P, 3)."""
    n_pix = px.shape[0]
    n_splat = mean2d.shape[0]
    for p in range(n_pix):
        x = np.float64(px[p])
        y = np.float64(py[p])
        trans = 1.0
        r = 0.0
        g = 0.0
        b = 0.0
        for s in range(n_splat):
            if trans < t_cutoff:
                break
            d0 = x - np.float64(mean2d[s, 0])
            d1 = y - np.float64(mean2d[s, 1])
            ca = np.float64(conic[s, 0])
            cb = np.float64(conic[s, 1])
            cc = np.float64(conic[s, 2])
            power = -0.5 * (ca * d0 * d0 + cc * d1 * d1) - cb * d0 * d1
            alpha = np.float64(opacity[s]) * math.exp(power)
            if alpha > alpha_clamp:
                alpha = alpha_clamp
            w = alpha * trans
            r += w * np.float64(rgb[s, 0])
            g += w * np.float64(rgb[s, 1])
            b += w * np.float64(rgb[s, 2])
            trans *= 1.0 - alpha
        out[p, 0] = r + trans * bg[0]
        out[p, 1] = g + trans * bg[1]
        out[p, 2] = b + trans * bg[2]


@njit(cache=True)
def composite_backward(
    px,
    py,
    mean2d,
    conic,
    opacity,
    rgb,
    bg,
    alpha_clamp,
    t_cutoff,
    splat_ids,
    gpix,
    g_rgb,
    g_opacity,
    g_conic,
    g_mean2d,
):
    """Accumulate gradients for one tile into the global per-splat arrays.

    splat_ids maps the tile's depth-ordered splat rows to model indices.
    gpix is (P, 3): dL/d(pixel color).
    """
    n_pix = px.shape[0]
    n_splat = mean2d.shape[0]
    for p in range(n_pix):
        x = np.float64(px[p])
        y = np.float64(py[p])
        gp0 = np.float64(gpix[p, 0])
        gp1 = np.float64(gpix[p, 1])
        gp2 = np.float64(gpix[p, 2])
        if gp0 == 0.0 and gp1 == 0.0 and gp2 == 0.0:
            continue

        # forward sweep: find the first non-composited splat and T_final
        trans = 1.0
        n_inc = 0
        for s in range(n_splat):
            if trans < t_cutoff:
                break
            d0 = x - np.float64(mean2d[s, 0])
            d1 = y - np.float64(mean2d[s, 1])
            ca = np.float64(conic[s, 0])
            cb = np.float64(conic[s, 1])
            cc = np.float64(conic[s, 2])
            power = -0.5 * (ca * d0 * d0 + cc * d1 * d1) - cb * d0 * d1
            alpha = np.float64(opacity[s]) * math.exp(power)
            if alpha > alpha_clamp:
                alpha = alpha_clamp
            trans *= 1.0 - alpha
            n_inc += 1

        # reverse sweep with suffix color sums
        s0 = trans * bg[0]
        s1 = trans * bg[1]
        s2 = trans * bg[2]
        t_run = trans
        for s in range(n_inc - 1, -1, -1):
            d0 = x - np.float64(mean2d[s, 0])
            d1 = y - np.float64(mean2d[s, 1])
            ca = np.float64(conic[s, 0])
            cb = np.float64(conic[s, 1])
            cc = np.float64(conic[s, 2])
            power = -0.5 * (ca * d0 * d0 + cc * d1 * d1) - cb * d0 * d1
            gauss = math.exp(power)
            alpha = np.float64(opacity[s]) * gauss
            clamped = alpha > alpha_clamp
            if clamped:
                alpha = alpha_clamp
            t_prev = t_run / (1.0 - alpha)
            t_run = t_prev
            w = alpha * t_prev
            c0 = np.float64(rgb[s, 0])
            c1 = np.float64(rgb[s, 1])
            c2 = np.float64(rgb[s, 2])
            sid = splat_ids[s]
            g_rgb[sid, 0] += w * gp0
            g_rgb[sid, 1] += w * gp1
            g_rgb[sid, 2] += w * gp2
            if not clamped:
                inv_om = 1.0 / (1.0 - alpha)
                d_alpha = (
                    gp0 * (c0 * t_prev - s0 * inv_om)
                    + gp1 * (c1 * t_prev - s1 * inv_om)
                    + gp2 * (c2 * t_prev - s2 * inv_om)
                )
                g_opacity[sid] += d_alpha * gauss
                dg = d_alpha * np.float64(opacity[s]) * gauss
                g_conic[sid, 0] += dg * (-0.5 * d0 * d0)
                g_conic[sid, 1] += dg * (-d0 * d1)
                g_conic[sid, 2] += dg * (-0.5 * d1 * d1)
                g_mean2d[sid, 0] += dg * (ca * d0 + cb * d1)
                g_mean2d[sid, 1] += dg * (cb * d0 + cc * d1)
            s0 += w * c0
            s1 += w * c1
            s2 += w * c2
