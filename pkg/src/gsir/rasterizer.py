"""Tile-based forward-mapping splat renderer with an analytic backward pass.

Splats are projected, globally sorted by depth (ties broken by index), and
binned to 16x16 pixel tiles by their 3-sigma footprint. Each tile composites
its candidates front to back:

    out = sum_i T_i w_i f_i,   w_i = min(alpha_i g_i, 0.99),
    T_i = prod_{j<i} (1 - w_j)

where g_i is the 2D Gaussian falloff at the pixel. Contributions with
w < 1/255 are dropped, and compositing stops once T falls below 1e-4 (the
early exit is a toggle). Any per-splat feature vector can ride through the
same weights: color, normals, material channels, or caller-supplied values.

Depth is accumulated in three modes: ``vol_accum`` (sum of T_i w_i d_i),
``peak`` (depth of the largest-weight contributor), and ``linear`` (weights
renormalized to sum to one, which keeps the result inside the contributor
depth range).

The backward pass recomputes each pixel's blending with running suffix sums
instead of storing per-pixel contributor lists. Forward output is
bit-identical for any worker count because tiles own disjoint pixels;
backward gradients are written per (tile, splat) pair and reduced in a fixed
order afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _tilekernels
from . import gaussians as gm
from .cameras import Camera
from .errors import InvalidParameterError
from .parallel import run_chunks

TILE = 16
W_MAX = 0.99        # per-splat weight cap; keeps 1 - w bounded away from 0
W_MIN = 1.0 / 255.0  # contribution skip threshold
T_EXIT = 1e-4        # transmittance early-exit threshold
COVERAGE_MIN = 1e-6  # below this accumulated weight a pixel has no depth/normal

DEPTH_MODES = ("vol_accum", "peak", "linear")

BUILTIN_CHANNELS = {"color": 3, "normal": 3, "albedo": 3, "roughness": 1, "metallic": 1}


@dataclass
class FrameBuffers:
    """Per-pixel outputs of one forward pass."""

    width: int
    height: int
    channels: dict
    alpha: np.ndarray
    depth: np.ndarray
    depth_mode: str
    coverage: np.ndarray
    contrib_count: np.ndarray
    depth_min: np.ndarray
    depth_max: np.ndarray

    @property
    def color(self) -> np.ndarray:
        return self.channels["color"]

    @property
    def normal_raw(self) -> np.ndarray:
        """Linearly composited normals (the differentiable path)."""
        return self.channels["normal"]

    @property
    def normal(self) -> np.ndarray:
        """Composited normals renormalized wherever the pixel has coverage."""
        raw = self.channels["normal"]
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        ok = (self.alpha[..., None] > COVERAGE_MIN) & (norms > 1e-12)
        return np.where(ok, raw / np.maximum(norms, 1e-12), 0.0)


@dataclass
class RenderCache:
    """Everything the backward pass needs to replay the forward compositing."""

    cloud: gm.GaussianCloud
    cam: Camera
    proj: gm.ProjectedSplats
    order: np.ndarray
    means2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    alphas: np.ndarray
    feats: np.ndarray
    channel_names: tuple
    channel_offsets: dict
    color_cache: object
    custom_dims: dict
    pair_splat: np.ndarray
    tile_ids: np.ndarray
    tile_starts: np.ndarray
    tile_list: np.ndarray
    depth_mode: str
    early_exit: bool
    background: np.ndarray
    workers: int | None = None


def _bin_splats(means2d, radii, width, height):
    """Return (pair_splat, tile_ids, tile_starts, tile_list) with pairs grouped
    by tile and depth-ordered within each tile."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    x0 = np.clip(np.floor((means2d[:, 0] - radii) / TILE), 0, ntx - 1).astype(np.int64)
    x1 = np.clip(np.floor((means2d[:, 0] + radii) / TILE), 0, ntx - 1).astype(np.int64)
    y0 = np.clip(np.floor((means2d[:, 1] - radii) / TILE), 0, nty - 1).astype(np.int64)
    y1 = np.clip(np.floor((means2d[:, 1] + radii) / TILE), 0, nty - 1).astype(np.int64)
    off = (means2d[:, 0] + radii < 0) | (means2d[:, 0] - radii > width - 1) | \
          (means2d[:, 1] + radii < 0) | (means2d[:, 1] - radii > height - 1)
    nx = np.where(off, 0, x1 - x0 + 1)
    ny = np.where(off, 0, y1 - y0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty(0, np.int64), np.empty(0, np.int64))
    rep = np.repeat(np.arange(len(means2d)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    lx = local % np.maximum(nx[rep], 1)
    ly = local // np.maximum(nx[rep], 1)
    tiles = (y0[rep] + ly) * ntx + (x0[rep] + lx)
    order = np.lexsort((rep, tiles))
    pair_splat = rep[order]
    tile_ids = tiles[order]
    tile_list, tile_starts = np.unique(tile_ids, return_index=True)
    return pair_splat, tile_ids, tile_starts, tile_list


def _gather_features(cloud, proj, channels, custom):
    idx = proj.indices
    blocks, offsets, color_cache, custom_dims = [], {}, None, {}
    pos = 0
    for name in channels:
        if name == "color":
            vals, color_cache = gm.eval_colors(cloud, proj.cam.center, idx)
        elif name == "normal":
            vals = cloud.normals[idx]
        elif name == "albedo":
            vals = cloud.albedo[idx]
        elif name == "roughness":
            vals = cloud.roughness[idx][:, None]
        elif name == "metallic":
            vals = cloud.metallic[idx][:, None]
        elif custom is not None and name in custom:
            arr = np.asarray(custom[name], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[:, None]
            if len(arr) != len(cloud):
                raise InvalidParameterError(
                    f"custom channel '{name}' has {len(arr)} rows, expected {len(cloud)}")
            vals = arr[idx]
            custom_dims[name] = arr.shape[1]
        else:
            raise InvalidParameterError(f"unknown channel '{name}'")
        offsets[name] = (pos, pos + vals.shape[1])
        pos += vals.shape[1]
        blocks.append(vals)
    feats = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(idx), 0))
    return feats, offsets, color_cache, custom_dims


def rasterize_forward(cloud: gm.GaussianCloud, cam: Camera,
                      channels=("color",), depth_mode: str = "linear",
                      custom: dict | None = None, background=None,
                      early_exit: bool = True, workers: int | None = None):
    """Composite the cloud into per-pixel buffers.

    Returns (FrameBuffers, RenderCache); the cache feeds rasterize_backward.
    """
    if depth_mode not in DEPTH_MODES:
        raise InvalidParameterError(f"depth_mode must be one of {DEPTH_MODES}")
    h, w = cam.height, cam.width
    proj = gm.project_cloud(cloud, cam)
    order = np.argsort(proj.depths, kind="stable")

    feats_u, offsets, color_cache, custom_dims = _gather_features(cloud, proj, channels, custom)
    means2d = proj.means2d[order]
    conics = proj.conics[order]
    depths = proj.depths[order]
    alphas = cloud.opacities[proj.indices][order]
    feats = feats_u[order]

    n_ch = feats.shape[1]
    bg = np.zeros(n_ch) if background is None else np.asarray(background, dtype=np.float64)
    if bg.shape != (n_ch,):
        raise InvalidParameterError(f"background must have {n_ch} entries")

    pair_splat, tile_ids, tile_starts, tile_list = _bin_splats(means2d, proj.radii[order], w, h)

    out = np.empty((h * w, n_ch))
    out[:] = bg
    alpha_img = np.zeros(h * w)
    wsum_img = np.zeros(h * w)
    dsum_img = np.zeros(h * w)
    peak_img = np.full(h * w, -1.0)
    dmin_img = np.full(h * w, np.inf)
    dmax_img = np.full(h * w, -np.inf)
    count_img = np.zeros(h * w, dtype=np.int64)

    n_tiles = len(tile_list)
    bounds = np.concatenate([tile_starts, [len(pair_splat)]])

    def work(lo, hi):
        _tilekernels.forward_tiles(
            lo, hi, tile_list, bounds, pair_splat, means2d, conics, depths,
            alphas, feats, bg, early_exit, W_MIN, W_MAX, T_EXIT, w, h, TILE,
            out, alpha_img, wsum_img, dsum_img, peak_img, count_img,
            dmin_img, dmax_img)

    run_chunks(work, n_tiles, workers)

    out = out.reshape(h, w, n_ch)
    alpha_img = alpha_img.reshape(h, w)
    wsum_img = wsum_img.reshape(h, w)
    dsum_img = dsum_img.reshape(h, w)
    peak_img = peak_img.reshape(h, w)
    dmin_img = dmin_img.reshape(h, w)
    dmax_img = dmax_img.reshape(h, w)
    count_img = count_img.reshape(h, w).astype(np.int32)

    coverage = wsum_img >= COVERAGE_MIN
    if depth_mode == "vol_accum":
        depth = np.where(coverage, dsum_img, cam.far)
    elif depth_mode == "peak":
        depth = np.where(coverage, peak_img, cam.far)
    else:
        depth = np.where(coverage, dsum_img / np.maximum(wsum_img, COVERAGE_MIN), cam.far)

    chan_out = {name: out[:, :, o0:o1] for name, (o0, o1) in offsets.items()}
    bufs = FrameBuffers(width=w, height=h, channels=chan_out, alpha=alpha_img,
                        depth=depth, depth_mode=depth_mode, coverage=coverage,
                        contrib_count=count_img,
                        depth_min=np.where(coverage, dmin_img, cam.far),
                        depth_max=np.where(coverage, dmax_img, cam.far))
    cache = RenderCache(cloud=cloud, cam=cam, proj=proj, order=order,
                        means2d=means2d, conics=conics, depths=depths,
                        alphas=alphas, feats=feats, channel_names=tuple(channels),
                        channel_offsets=offsets, color_cache=color_cache,
                        custom_dims=custom_dims, pair_splat=pair_splat,
                        tile_ids=tile_ids, tile_starts=tile_starts,
                        tile_list=tile_list, depth_mode=depth_mode,
                        early_exit=early_exit, background=bg, workers=workers)
    return bufs, cache


def render_depth(cloud: gm.GaussianCloud, cam: Camera, mode: str = "linear",
                 **kw) -> np.ndarray:
    """Depth-only forward pass in the requested accumulation mode."""
    bufs, _ = rasterize_forward(cloud, cam, channels=(), depth_mode=mode, **kw)
    return bufs.depth


def rasterize_backward(cache: RenderCache, d_channels: dict | None = None,
                       d_alpha: np.ndarray | None = None,
                       d_depth: np.ndarray | None = None,
                       weight_detached: tuple = ()):
    """Analytic gradients of the forward outputs wrt cloud parameters.

    Args:
        cache: RenderCache from rasterize_forward.
        d_channels: upstream dL/d(channel image), keyed like ``channels``.
        d_alpha: upstream dL/d(alpha image), optional.
        d_depth: upstream dL/d(depth image) in the forward's depth mode.
        weight_detached: channel names whose upstream reaches only the
            per-splat feature values, with the compositing weights treated
            as constants (supervision that must not reshape geometry).

    Returns:
        (grads, extras): ``grads`` maps raw cloud parameter names to arrays
        shaped like the parameters (zeros where nothing flows). ``extras``
        carries ``custom`` per-splat feature gradients and the
        activated-opacity gradient.
    """
    cloud, cam = cache.cloud, cache.cam
    h, w = cam.height, cam.width
    d_channels = d_channels or {}
    n_ch = cache.feats.shape[1]
    m = len(cache.order)

    u_feats = np.zeros((h, w, n_ch))
    for name, (o0, o1) in cache.channel_offsets.items():
        if name in d_channels and d_channels[name] is not None:
            up = np.asarray(d_channels[name], dtype=np.float64)
            u_feats[:, :, o0:o1] = up.reshape(h, w, o1 - o0)
    u_alpha = np.zeros((h, w)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    u_depth = np.zeros((h, w)) if d_depth is None else np.asarray(d_depth, dtype=np.float64)

    npairs = len(cache.pair_splat)
    g_mu = np.zeros((npairs, 2))
    g_conic = np.zeros((npairs, 3))
    g_alpha = np.zeros(npairs)
    g_depthv = np.zeros(npairs)
    g_feat = np.zeros((npairs, n_ch))

    bounds = np.concatenate([cache.tile_starts, [npairs]])
    mode = {"vol_accum": _tilekernels.MODE_VOL, "peak": _tilekernels.MODE_PEAK,
            "linear": _tilekernels.MODE_LINEAR}[cache.depth_mode]
    bg = cache.background
    couple = np.ones(n_ch, dtype=np.uint8)
    for name in weight_detached:
        if name in cache.channel_offsets:
            o0, o1 = cache.channel_offsets[name]
            couple[o0:o1] = 0
    u_feats_flat = np.ascontiguousarray(u_feats.reshape(h * w, n_ch))
    u_alpha_flat = np.ascontiguousarray(u_alpha.reshape(h * w))
    u_depth_flat = np.ascontiguousarray(u_depth.reshape(h * w))

    def work(lo, hi):
        _tilekernels.backward_tiles(
            lo, hi, cache.tile_list, bounds, cache.pair_splat, cache.means2d,
            cache.conics, cache.depths, cache.alphas, cache.feats, bg,
            cache.early_exit, W_MIN, W_MAX, T_EXIT, COVERAGE_MIN, w, h, TILE,
            mode, couple, u_feats_flat, u_alpha_flat, u_depth_flat,
            g_mu, g_conic, g_alpha, g_depthv, g_feat)

    run_chunks(work, len(cache.tile_list), cache.workers)

    # Reduce pairs -> sorted splats (np.add.at is sequential, order-fixed).
    gs_mu = np.zeros((m, 2))
    gs_conic = np.zeros((m, 3))
    gs_alpha = np.zeros(m)
    gs_depth = np.zeros(m)
    gs_feat = np.zeros((m, n_ch))
    np.add.at(gs_mu, cache.pair_splat, g_mu)
    np.add.at(gs_conic, cache.pair_splat, g_conic)
    np.add.at(gs_alpha, cache.pair_splat, g_alpha)
    np.add.at(gs_depth, cache.pair_splat, g_depthv)
    np.add.at(gs_feat, cache.pair_splat, g_feat)

    # Sorted -> projection order (a bijection).
    inv = np.empty(m, dtype=np.int64)
    inv[cache.order] = np.arange(m)
    gp_mu = gs_mu[inv]
    gp_conic = gs_conic[inv]
    gp_alpha = gs_alpha[inv]
    gp_depth = gs_depth[inv]
    gp_feat = gs_feat[inv]

    grads = gm.zero_grads(cloud)
    gm.project_backward(cloud, cache.proj, gp_mu, gp_conic, gp_depth, grads)

    idx = cache.proj.indices
    opa_act = np.zeros(len(cloud))
    np.add.at(opa_act, idx, gp_alpha)
    grads["opacities_raw"] += opa_act * gm.sigmoid_grad(cloud.opacities_raw)

    extras = {"opacity_act": opa_act, "custom": {}}
    for name, (o0, o1) in cache.channel_offsets.items():
        block = gp_feat[:, o0:o1]
        if name == "color":
            gm.eval_colors_backward(cloud, cache.color_cache, block, grads)
        elif name == "normal":
            np.add.at(grads["normals"], idx, block)
        elif name == "albedo":
            acc = np.zeros((len(cloud), 3))
            np.add.at(acc, idx, block)
            grads["albedo_raw"] += acc * gm.sigmoid_grad(cloud.albedo_raw)
        elif name == "roughness":
            acc = np.zeros(len(cloud))
            np.add.at(acc, idx, block[:, 0])
            grads["roughness_raw"] += acc * gm.sigmoid_grad(cloud.roughness_raw)
        elif name == "metallic":
            acc = np.zeros(len(cloud))
            np.add.at(acc, idx, block[:, 0])
            grads["metallic_raw"] += acc * gm.sigmoid_grad(cloud.metallic_raw)
        else:
            acc = np.zeros((len(cloud), o1 - o0))
            np.add.at(acc, idx, block)
            extras["custom"][name] = acc
    return grads, extras
