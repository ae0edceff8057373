"""Occlusion and indirect-illumination volume baking.

A regular grid of probe cells covers the scene. Each cell renders six
90-degree depth/radiance faces from its center with the frozen splat cloud,
thresholds depth into a binary occlusion cubemap, and projects both cubemaps
onto a spherical-harmonics basis with exact per-texel solid angles. Queries
interpolate the eight surrounding cells; occlusion uses masked trilinear
weights (cells behind the shading point's tangent plane are dropped and the
rest renormalized), indirect irradiance uses plain trilinear interpolation
followed by the clamped-cosine convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formats, sh
from .cameras import camera_from_rows
from .errors import InvalidParameterError, PreconditionError
from .parallel import run_chunks
from .rasterizer import rasterize_forward

# Face order: +X, -X, +Y, -Y, +Z, -Z. Rows are (u axis, v axis, forward);
# u crosses v to give forward, so each face camera is a proper rotation.
FACE_AXES = np.array([
    [[0, 0, -1], [0, 1, 0], [1, 0, 0]],
    [[0, 0, 1], [0, 1, 0], [-1, 0, 0]],
    [[1, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[1, 0, 0], [0, 0, 1], [0, -1, 0]],
    [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    [[-1, 0, 0], [0, 1, 0], [0, 0, -1]],
], dtype=np.float64)

DEFAULT_DEG = 2
DEFAULT_FACE_RES = 64


def cube_dirs(face_res: int) -> np.ndarray:
    """(6, F, F, 3) unit directions at texel centers."""
    f = face_res
    grid = (2.0 * (np.arange(f) + 0.5) / f) - 1.0
    a = grid[None, :].repeat(f, axis=0)
    b = grid[:, None].repeat(f, axis=1)
    dirs = np.empty((6, f, f, 3))
    for i, (u, v, d) in enumerate(FACE_AXES):
        vec = a[..., None] * u + b[..., None] * v + d
        dirs[i] = vec / np.linalg.norm(vec, axis=-1, keepdims=True)
    return dirs


def _area_term(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))


def cube_solid_angles(face_res: int) -> np.ndarray:
    """(6, F, F) exact texel solid angles; sums to 4*pi over all faces."""
    f = face_res
    edges = 2.0 * np.arange(f + 1) / f - 1.0
    x0, x1 = edges[:-1][None, :], edges[1:][None, :]
    y0, y1 = edges[:-1][:, None], edges[1:][:, None]
    omega = (_area_term(x1, y1) - _area_term(x0, y1)
             - _area_term(x1, y0) + _area_term(x0, y0))
    return np.broadcast_to(omega, (6, f, f)).copy()


def direction_to_texel(d: np.ndarray, face_res: int):
    """Map a unit direction to (face, row, col); the mapping partitions the
    sphere (major-axis rule with fixed x/y/z tie priority)."""
    d = np.asarray(d, dtype=np.float64)
    ax = np.abs(d)
    face_axis = int(np.argmax(ax))            # first max wins ties
    face = face_axis * 2 + (0 if d[face_axis] > 0 else 1)
    u_ax, v_ax, fwd = FACE_AXES[face]
    denom = float(d @ fwd)
    a = float(d @ u_ax) / denom
    b = float(d @ v_ax) / denom
    col = min(int((a + 1.0) * 0.5 * face_res), face_res - 1)
    row = min(int((b + 1.0) * 0.5 * face_res), face_res - 1)
    return face, row, col


def face_camera(center, face: int, face_res: int, near: float, far: float):
    return camera_from_rows(FACE_AXES[face], center,
                            fx=face_res / 2.0, fy=face_res / 2.0,
                            cx=(face_res - 1) / 2.0, cy=(face_res - 1) / 2.0,
                            width=face_res, height=face_res, near=near, far=far)


def render_cell_cubemaps(cloud, center, face_res: int = DEFAULT_FACE_RES,
                         near: float = 1e-4, far: float = 1e3):
    """Six linear-mode depth faces and six radiance faces from one probe.

    Returns (depth (6, F, F), radiance (6, F, F, 3), coverage (6, F, F)).
    Both cubemaps come out of the same rendering passes.
    """
    depth = np.empty((6, face_res, face_res))
    radiance = np.empty((6, face_res, face_res, 3))
    coverage = np.empty((6, face_res, face_res), dtype=bool)
    for f in range(6):
        cam = face_camera(center, f, face_res, near, far)
        bufs, _ = rasterize_forward(cloud, cam, channels=("color",),
                                    depth_mode="linear", workers=1)
        depth[f] = bufs.depth
        radiance[f] = bufs.color
        coverage[f] = bufs.coverage
    return depth, radiance, coverage


def occlusion_from_depth(depth: np.ndarray, tau: float,
                         coverage: np.ndarray | None = None) -> np.ndarray:
    """Binary occlusion: 1 where geometry is closer than ``tau``.

    Uncovered texels (open sky, sentinel depth) are unoccluded.
    """
    if tau <= 0:
        raise InvalidParameterError("distance threshold must be positive")
    occ = (np.asarray(depth) < tau).astype(np.float64)
    if coverage is not None:
        occ = np.where(coverage, occ, 0.0)
    return occ


def sh_project_cubemap(values: np.ndarray, deg: int = DEFAULT_DEG) -> np.ndarray:
    """Project cubemap texels onto the SH basis with exact solid angles.

    ``values`` is (6, F, F) or (6, F, F, C); returns ((deg+1)^2,) or
    ((deg+1)^2, C).
    """
    values = np.asarray(values, dtype=np.float64)
    scalar = values.ndim == 3
    if scalar:
        values = values[..., None]
    face_res = values.shape[1]
    dirs = cube_dirs(face_res).reshape(-1, 3)
    omega = cube_solid_angles(face_res).reshape(-1)
    basis = sh._sh_eval_unchecked(deg, dirs)          # (T, K)
    flat = values.reshape(-1, values.shape[-1])       # (T, C)
    coeffs = basis.T @ (flat * omega[:, None])
    return coeffs[:, 0] if scalar else coeffs


@dataclass
class VolumeGrid:
    """Regular grid of per-cell SH coefficient vectors."""

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    coeffs: np.ndarray       # (gx, gy, gz, channels, (deg+1)^2)

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if np.any(self.bounds_max <= self.bounds_min):
            raise InvalidParameterError("grid bounds are empty")

    @property
    def dims(self):
        return self.coeffs.shape[:3]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[3]

    @property
    def deg(self) -> int:
        return int(np.sqrt(self.coeffs.shape[4])) - 1

    @property
    def cell_size(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / np.asarray(self.dims)

    def cell_centers(self) -> np.ndarray:
        axes = [self.bounds_min[i] + (np.arange(self.dims[i]) + 0.5) * self.cell_size[i]
                for i in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    @classmethod
    def empty(cls, dims, bounds_min, bounds_max, channels, deg):
        gx, gy, gz = dims
        return cls(bounds_min, bounds_max,
                   np.zeros((gx, gy, gz, channels, (deg + 1) ** 2)))


_CORNER_BITS = np.array([[bx, by, bz] for bx in (0, 1) for by in (0, 1) for bz in (0, 1)])


def corner_cells_batch(grid: VolumeGrid, xs: np.ndarray):
    """Eight surrounding cell indices, trilinear weights, and centers for a
    batch of points. Returns (idx (N, 8, 3), wts (N, 8), centers (N, 8, 3))."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    dims = np.asarray(grid.dims)
    u = (xs - grid.bounds_min) / grid.cell_size - 0.5
    u = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
    frac = np.where(dims > 1, u - i0, 0.0)
    i1 = np.minimum(i0 + 1, dims - 1)

    bits = _CORNER_BITS[None, :, :]                      # (1, 8, 3)
    idx = np.where(bits == 0, i0[:, None, :], i1[:, None, :])
    w_axis = np.where(bits == 0, (1.0 - frac)[:, None, :], frac[:, None, :])
    wts = w_axis.prod(axis=2)
    centers = grid.bounds_min + (idx + 0.5) * grid.cell_size
    return idx, wts, centers


def masked_weights_batch(grid: VolumeGrid, xs: np.ndarray, ns: np.ndarray):
    """Trilinear weights with cells behind each point's tangent plane zeroed
    and the remainder renormalized (plain trilinear when all are masked)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ns = np.atleast_2d(np.asarray(ns, dtype=np.float64))
    idx, wts, centers = corner_cells_batch(grid, xs)
    keep = np.einsum("nkd,nd->nk", centers - xs[:, None, :], ns) > 0.0
    masked = np.where(keep, wts, 0.0)
    total = masked.sum(axis=1, keepdims=True)
    fallback = total <= 0.0
    masked = np.where(fallback, wts, masked)
    total = np.where(fallback, wts.sum(axis=1, keepdims=True), total)
    return idx, masked / total


def _corner_cells(grid: VolumeGrid, x):
    """Scalar wrapper around corner_cells_batch."""
    idx, wts, centers = corner_cells_batch(grid, np.asarray(x)[None])
    return idx[0], wts[0], centers[0]


def masked_trilinear_coeffs(grid: VolumeGrid, x, n):
    """Interpolate cell coefficients, zeroing cells behind the tangent plane
    of (x, n) and renormalizing. Falls back to plain trilinear when every
    corner is masked out."""
    idx, wts, centers = _corner_cells(grid, x)
    keep = ((centers - np.asarray(x, dtype=np.float64)) @ np.asarray(n, dtype=np.float64)) > 0.0
    masked = np.where(keep, wts, 0.0)
    total = masked.sum()
    if total <= 0.0:
        masked = wts
        total = wts.sum()
    w = masked / total
    vals = grid.coeffs[idx[:, 0], idx[:, 1], idx[:, 2]]  # (8, C, K)
    return np.einsum("k,kcj->cj", w, vals)


def trilinear_coeffs(grid: VolumeGrid, x):
    """Plain trilinear interpolation of cell coefficients.

    Returns (coeffs (C, K), cell indices (8, 3), weights (8,)) so callers can
    route gradients back to the cells.
    """
    idx, wts, _ = _corner_cells(grid, x)
    vals = grid.coeffs[idx[:, 0], idx[:, 1], idx[:, 2]]
    return np.einsum("k,kcj->cj", wts, vals), idx, wts


def query_occlusion(grid: VolumeGrid, x, n, direction) -> float:
    """Directional occlusion in [0, 1] at point ``x`` looking along
    ``direction``, using masked trilinear interpolation about normal ``n``."""
    coeffs = masked_trilinear_coeffs(grid, x, n)[0]
    basis = sh._sh_eval_unchecked(grid.deg, np.asarray(direction, dtype=np.float64))
    return float(np.clip(coeffs @ basis, 0.0, 1.0))


def query_ambient_occlusion(grid: VolumeGrid, x, n) -> float:
    """Hemisphere occlusion fraction about ``n``: the clamped-cosine
    convolution of the reconstructed occlusion, normalized by pi."""
    coeffs = masked_trilinear_coeffs(grid, x, n)[0]
    aw = sh.band_weights(grid.deg, sh.LAMBERT_BAND)
    basis = sh._sh_eval_unchecked(grid.deg, np.asarray(n, dtype=np.float64))
    return float(np.clip((coeffs * aw) @ basis / np.pi, 0.0, 1.0))


def query_indirect_irradiance(grid: VolumeGrid, x, n) -> np.ndarray:
    """RGB cosine-convolved irradiance about ``n`` from the radiance grid
    (plain trilinear interpolation), clamped at zero."""
    coeffs, _, _ = trilinear_coeffs(grid, x)
    aw = sh.band_weights(grid.deg, sh.LAMBERT_BAND)
    basis = sh._sh_eval_unchecked(grid.deg, np.asarray(n, dtype=np.float64))
    return np.maximum((coeffs * aw) @ basis, 0.0)


def ambient_occlusion_batch(grid: VolumeGrid, xs: np.ndarray, ns: np.ndarray) -> np.ndarray:
    """Hemisphere occlusion fractions in [0, 1] for a batch of (x, n)."""
    idx, w = masked_weights_batch(grid, xs, ns)
    vals = grid.coeffs[idx[..., 0], idx[..., 1], idx[..., 2], 0, :]   # (N, 8, K)
    coeffs = np.einsum("nk,nkj->nj", w, vals)
    aw = sh.band_weights(grid.deg, sh.LAMBERT_BAND)
    basis = sh._sh_eval_unchecked(grid.deg, np.atleast_2d(ns))
    return np.clip(np.einsum("nj,nj->n", coeffs * aw, basis) / np.pi, 0.0, 1.0)


def indirect_irradiance_batch(grid: VolumeGrid, xs: np.ndarray, ns: np.ndarray):
    """Batched indirect irradiance with the gradient cache.

    Returns (irradiance (N, 3), cache); the cache lets a caller push an
    upstream RGB gradient back to the grid's SH coefficients.
    """
    idx, wts, _ = corner_cells_batch(grid, xs)
    vals = grid.coeffs[idx[..., 0], idx[..., 1], idx[..., 2]]          # (N, 8, 3, K)
    coeffs = np.einsum("nk,nkcj->ncj", wts, vals)
    aw = sh.band_weights(grid.deg, sh.LAMBERT_BAND)
    basis = sh._sh_eval_unchecked(grid.deg, np.atleast_2d(ns))          # (N, K)
    awy = aw[None, :] * basis                                           # (N, K)
    pre = np.einsum("ncj,nj->nc", coeffs, awy)
    out = np.maximum(pre, 0.0)
    cache = (idx, wts, awy, pre > 0.0)
    return out, cache


def indirect_irradiance_backward(grid: VolumeGrid, cache, d_out: np.ndarray) -> np.ndarray:
    """Gradient of indirect_irradiance_batch wrt the grid coefficients."""
    idx, wts, awy, active = cache
    d_pre = np.where(active, d_out, 0.0)                                # (N, 3)
    contrib = np.einsum("nk,nc,nj->nkcj", wts, d_pre, awy)              # (N, 8, 3, K)
    grad = np.zeros_like(grid.coeffs)
    np.add.at(grad, (idx[..., 0], idx[..., 1], idx[..., 2]), contrib)
    return grad


@dataclass
class BakeConfig:
    dims: tuple = (16, 16, 16)
    tau: float | None = None       # default: 0.1 * scene diagonal
    face_res: int = DEFAULT_FACE_RES
    deg: int = DEFAULT_DEG
    bounds_min: np.ndarray | None = None
    bounds_max: np.ndarray | None = None
    margin: float = 0.05           # bounding-box inflation when auto-sized
    near: float = 1e-4
    far: float = 1e3


def scene_bounds(cloud, margin: float = 0.05):
    if len(cloud) == 0:
        return np.full(3, -1.0), np.full(3, 1.0)
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return lo - margin * span, hi + margin * span


def bake_volumes(cloud, config: BakeConfig | None = None):
    """Bake occlusion and indirect-illumination grids from a frozen cloud.

    Returns (occlusion VolumeGrid (1 channel), illumination VolumeGrid
    (3 channels)); cells are processed independently.
    """
    config = config or BakeConfig()
    bmin, bmax = config.bounds_min, config.bounds_max
    if bmin is None or bmax is None:
        bmin, bmax = scene_bounds(cloud, config.margin)
    bmin = np.asarray(bmin, dtype=np.float64)
    bmax = np.asarray(bmax, dtype=np.float64)
    tau = config.tau
    if tau is None:
        tau = 0.1 * float(np.linalg.norm(bmax - bmin))

    occl = VolumeGrid.empty(config.dims, bmin, bmax, 1, config.deg)
    illu = VolumeGrid.empty(config.dims, bmin, bmax, 3, config.deg)
    centers = occl.cell_centers().reshape(-1, 3)
    dims = occl.dims

    def work(lo, hi):
        for flat in range(lo, hi):
            ix, iy, iz = np.unravel_index(flat, dims)
            depth, radiance, coverage = render_cell_cubemaps(
                cloud, centers[flat], config.face_res, config.near, config.far)
            occ_cm = occlusion_from_depth(depth, tau, coverage)
            occl.coeffs[ix, iy, iz, 0] = sh_project_cubemap(occ_cm, config.deg)
            illu.coeffs[ix, iy, iz] = sh_project_cubemap(radiance, config.deg).T

    run_chunks(work, len(centers))
    return occl, illu


# --------------------------------------------------------------------------
# Serialization


def save_volumes(path, occlusion: VolumeGrid, illumination: VolumeGrid) -> None:
    formats.write_volume_container(path, {
        "occlusion": {"dims": occlusion.dims, "bounds_min": occlusion.bounds_min,
                      "bounds_max": occlusion.bounds_max, "deg": occlusion.deg,
                      "coeffs": occlusion.coeffs},
        "illumination": {"dims": illumination.dims, "bounds_min": illumination.bounds_min,
                         "bounds_max": illumination.bounds_max, "deg": illumination.deg,
                         "coeffs": illumination.coeffs},
    })


def load_volumes(path):
    grids = formats.read_volume_container(path)
    if "occlusion" not in grids or "illumination" not in grids:
        raise PreconditionError(f"{path} lacks occlusion/illumination grids")
    out = []
    for name in ("occlusion", "illumination"):
        g = grids[name]
        out.append(VolumeGrid(g["bounds_min"], g["bounds_max"], g["coeffs"]))
    return tuple(out)
