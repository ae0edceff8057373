"""Scalar tile-compositing kernels (JIT-compiled, float64, GIL-free).

One call processes a contiguous range of tiles; callers parallelize over
disjoint tile ranges, so outputs are bit-identical for any worker count.
The backward kernel recomputes each pixel's blending instead of storing
contributor lists: a front-to-back scan finds totals and the early-exit
cut, then a back-to-front scan recovers transmittances by division and
carries suffix sums for the weight gradients.
"""

from __future__ import annotations

import numpy as np
from numba import njit

F8 = np.float64

MODE_VOL = 0
MODE_PEAK = 1
MODE_LINEAR = 2


@njit(cache=True, nogil=True, fastmath=False)
def forward_tiles(lo, hi, tile_list, bounds, pair_splat,
                  means2d, conics, depths, alphas, feats, bg,
                  early_exit, w_min, w_max, t_exit,
                  width, height, tile_size,
                  out, out_alpha, out_wsum, out_dsum, out_peak,
                  out_count, out_dmin, out_dmax):
    ntx = (width + tile_size - 1) // tile_size
    n_ch = feats.shape[1]
    for ti in range(lo, hi):
        tile_id = tile_list[ti]
        s = bounds[ti]
        e = bounds[ti + 1]
        ty = tile_id // ntx
        tx = tile_id - ty * ntx
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * width + px
                fx = F8(px)
                fy = F8(py)
                trans = 1.0
                alpha_acc = 0.0
                dsum = 0.0
                peak_w = -1.0
                peak_d = 0.0
                cnt = 0
                dmin = np.inf
                dmax = -np.inf
                for c in range(n_ch):
                    out[pix, c] = 0.0
                for k in range(s, e):
                    if early_exit and trans < t_exit:
                        break
                    g_idx = pair_splat[k]
                    dx = fx - means2d[g_idx, 0]
                    dy = fy - means2d[g_idx, 1]
                    sig = (0.5 * (conics[g_idx, 0] * dx * dx
                                  + conics[g_idx, 2] * dy * dy)
                           + conics[g_idx, 1] * dx * dy)
                    if sig < 0.0:
                        sig = 0.0
                    w = alphas[g_idx] * np.exp(-sig)
                    if w > w_max:
                        w = w_max
                    if w < w_min:
                        continue
                    wt = trans * w
                    for c in range(n_ch):
                        out[pix, c] += wt * feats[g_idx, c]
                    alpha_acc += wt
                    d = depths[g_idx]
                    dsum += wt * d
                    if wt > peak_w:
                        peak_w = wt
                        peak_d = d
                    if d < dmin:
                        dmin = d
                    if d > dmax:
                        dmax = d
                    cnt += 1
                    trans *= (1.0 - w)
                for c in range(n_ch):
                    out[pix, c] += trans * bg[c]
                out_alpha[pix] = alpha_acc
                out_wsum[pix] = alpha_acc
                out_dsum[pix] = dsum
                out_peak[pix] = peak_d if peak_w > 0.0 else -1.0
                out_count[pix] = cnt
                out_dmin[pix] = dmin
                out_dmax[pix] = dmax


@njit(cache=True, nogil=True, fastmath=False)
def backward_tiles(lo, hi, tile_list, bounds, pair_splat,
                   means2d, conics, depths, alphas, feats, bg,
                   early_exit, w_min, w_max, t_exit, coverage_min,
                   width, height, tile_size, mode, couple,
                   u_feats, u_alpha, u_depth,
                   g_mu, g_conic, g_alpha, g_depth, g_feat):
    ntx = (width + tile_size - 1) // tile_size
    n_ch = feats.shape[1]
    any_bg = False
    for c in range(n_ch):
        if bg[c] != 0.0:
            any_bg = True
    for ti in range(lo, hi):
        tile_id = tile_list[ti]
        s = bounds[ti]
        e = bounds[ti + 1]
        ty = tile_id // ntx
        tx = tile_id - ty * ntx
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        for py in range(y0, y1):
            for px in range(x0, x1):
                pix = py * width + px
                fx = F8(px)
                fy = F8(py)

                # pass 1: totals, early-exit cut, peak index
                trans = 1.0
                wsum = 0.0
                dsum = 0.0
                peak_w = -1.0
                peak_k = -1
                cut = e
                for k in range(s, e):
                    if early_exit and trans < t_exit:
                        cut = k
                        break
                    g_idx = pair_splat[k]
                    dx = fx - means2d[g_idx, 0]
                    dy = fy - means2d[g_idx, 1]
                    sig = (0.5 * (conics[g_idx, 0] * dx * dx
                                  + conics[g_idx, 2] * dy * dy)
                           + conics[g_idx, 1] * dx * dy)
                    if sig < 0.0:
                        sig = 0.0
                    w = alphas[g_idx] * np.exp(-sig)
                    if w > w_max:
                        w = w_max
                    if w < w_min:
                        continue
                    wt = trans * w
                    wsum += wt
                    dsum += wt * depths[g_idx]
                    if wt > peak_w:
                        peak_w = wt
                        peak_k = k
                    trans *= (1.0 - w)
                t_fin = trans
                covered = wsum >= coverage_min

                ud = u_depth[pix]
                u_dvol = 0.0
                u_dlin = 0.0
                u_wlin = 0.0
                if covered and ud != 0.0:
                    if mode == MODE_VOL:
                        u_dvol = ud
                    elif mode == MODE_LINEAR:
                        safe = wsum if wsum > coverage_min else coverage_min
                        u_dlin = ud / safe
                        u_wlin = -ud * dsum / (safe * safe)
                ua = u_alpha[pix] + u_wlin

                ub = 0.0
                if any_bg:
                    for c in range(n_ch):
                        ub += u_feats[pix, c] * bg[c]

                # pass 2: back to front with suffix accumulators
                suf_z = 0.0
                suf_w = 0.0
                suf_d = 0.0
                t_after = t_fin
                for k in range(cut - 1, s - 1, -1):
                    g_idx = pair_splat[k]
                    dx = fx - means2d[g_idx, 0]
                    dy = fy - means2d[g_idx, 1]
                    a = conics[g_idx, 0]
                    b = conics[g_idx, 1]
                    cc = conics[g_idx, 2]
                    sig = 0.5 * (a * dx * dx + cc * dy * dy) + b * dx * dy
                    if sig < 0.0:
                        sig = 0.0
                    g_val = np.exp(-sig)
                    w_unc = alphas[g_idx] * g_val
                    clamped = w_unc > w_max
                    w = w_max if clamped else w_unc
                    if w < w_min:
                        continue
                    one_m = 1.0 - w
                    t_before = t_after / one_m
                    wt = t_before * w
                    d = depths[g_idx]

                    fu = 0.0
                    for c in range(n_ch):
                        uc = u_feats[pix, c]
                        if uc != 0.0:
                            if couple[c]:
                                fu += feats[g_idx, c] * uc
                            g_feat[k, c] += wt * uc
                    gw = t_before * fu - suf_z / one_m
                    gw += ua * (t_before - suf_w / one_m)
                    u_dd = u_dvol + u_dlin
                    if u_dd != 0.0:
                        gw += u_dd * (t_before * d - suf_d / one_m)
                        g_depth[k] += u_dd * wt
                    if any_bg:
                        gw += ub * (-t_fin / one_m)
                    if k == peak_k and mode == MODE_PEAK and covered:
                        g_depth[k] += ud

                    if not clamped:
                        galpha = gw * g_val
                        gg = gw * alphas[g_idx]
                        gsig = -g_val * gg
                        g_alpha[k] += galpha
                        g_mu[k, 0] += -gsig * (a * dx + b * dy)
                        g_mu[k, 1] += -gsig * (cc * dy + b * dx)
                        g_conic[k, 0] += gsig * 0.5 * dx * dx
                        g_conic[k, 1] += gsig * dx * dy
                        g_conic[k, 2] += gsig * 0.5 * dy * dy

                    suf_z += wt * fu
                    suf_w += wt
                    suf_d += wt * d
                    t_after = t_before
