"""Geometry-stage losses: color reconstruction, depth-derived pseudo normals,
the normal penalty, and total-variation smoothing.

Pseudo normals come from back-projecting the rendered depth map and crossing
central-difference tangents; they act as fixed supervision targets for the
per-splat normals (no gradient flows back through the depth). Every loss
returns its value together with the analytic gradient wrt its first input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssim as ssim_mod
from .cameras import Camera
from .errors import InvalidParameterError

TV_EPS = 1e-8          # guards the gradient denominator at zero difference
LAMBDA_SSIM = 0.2


@dataclass
class LossBreakdown:
    total: float
    color: float
    normal_penalty: float
    normal_tv: float

    def as_dict(self) -> dict:
        return {"total": self.total, "color": self.color,
                "normal_penalty": self.normal_penalty, "normal_tv": self.normal_tv}


def depth_to_pseudo_normal(depth: np.ndarray, cam: Camera,
                           mask: np.ndarray | None = None):
    """Camera-space unit normals from the screen-space depth gradient.

    Each pixel is back-projected to a camera-space point; tangents are
    central differences of neighboring points and the normal is their cross
    product, oriented toward the camera. Pixels whose neighborhood leaves the
    mask (or whose tangents degenerate) get a zero vector and are excluded.

    Returns (normals (H, W, 3), valid (H, W) bool).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if mask is None:
        mask = np.isfinite(depth)
    else:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(depth)

    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    px = np.empty((h, w, 3))
    px[:, :, 0] = (cols[None, :] - cam.cx) / cam.fx * depth
    px[:, :, 1] = (rows[:, None] - cam.cy) / cam.fy * depth
    px[:, :, 2] = depth

    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return normals, valid

    inner = np.zeros((h, w), dtype=bool)
    inner[1:-1, 1:-1] = (mask[1:-1, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
                         & mask[:-2, 1:-1] & mask[2:, 1:-1])

    tu = np.zeros((h, w, 3))
    tv = np.zeros((h, w, 3))
    tu[:, 1:-1] = px[:, 2:] - px[:, :-2]
    tv[1:-1, :] = px[2:] - px[:-2]
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1)
    ok = inner & (norm > 1e-12)
    n = np.divide(n, norm[..., None], out=np.zeros_like(n), where=norm[..., None] > 1e-12)

    # orient toward the camera: n . (p/|p|) must be negative
    flip = np.sum(n * px, axis=-1) > 0.0
    n[flip] = -n[flip]

    normals[ok] = n[ok]
    valid = ok
    return normals, valid


def pseudo_normal_world(depth: np.ndarray, cam: Camera,
                        mask: np.ndarray | None = None):
    """Pseudo normals expressed in world coordinates."""
    n_cam, valid = depth_to_pseudo_normal(depth, cam, mask)
    n_world = n_cam @ cam.rotation  # R^T applied row-wise
    n_world[~valid] = 0.0
    return n_world, valid


def loss_normal_penalty_grad(rendered: np.ndarray, target: np.ndarray,
                             mask: np.ndarray | None = None):
    """Mean per-pixel L1 norm of (rendered - target) over masked pixels.

    Returns (value, grad wrt rendered); the target is a fixed supervision
    map and receives no gradient.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidParameterError("normal maps must share a shape")
    if mask is None:
        mask = np.ones(rendered.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    grad = np.zeros_like(rendered)
    if count == 0:
        return 0.0, grad
    diff = rendered - target
    val = float(np.abs(diff[mask]).sum() / count)
    grad[mask] = np.sign(diff[mask]) / count
    return val, grad


def loss_normal_penalty(rendered, target, mask=None) -> float:
    return loss_normal_penalty_grad(rendered, target, mask)[0]


def loss_tv_grad(field: np.ndarray, mask: np.ndarray | None = None):
    """Isotropic total variation: sum over pixels of the root of squared
    forward differences (right and down), channels summed inside the root.

    A difference participates only when both of its pixels are masked in.
    Returns (value, grad wrt field).
    """
    field = np.asarray(field, dtype=np.float64)
    squeeze = field.ndim == 2
    if squeeze:
        field = field[:, :, None]
    h, w, c = field.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    mask = np.asarray(mask, dtype=bool)

    dr = np.zeros((h, w, c))
    dd = np.zeros((h, w, c))
    vr = np.zeros((h, w), dtype=bool)
    vd = np.zeros((h, w), dtype=bool)
    dr[:, :-1] = field[:, 1:] - field[:, :-1]
    dd[:-1, :] = field[1:] - field[:-1]
    vr[:, :-1] = mask[:, :-1] & mask[:, 1:]
    vd[:-1, :] = mask[:-1] & mask[1:]
    dr[~vr] = 0.0
    dd[~vd] = 0.0

    energy = (dr ** 2).sum(axis=-1) + (dd ** 2).sum(axis=-1)
    root = np.sqrt(energy)
    value = float(root.sum())

    coef = np.zeros((h, w))
    nz = energy > 0.0
    coef[nz] = 1.0 / np.sqrt(energy[nz] + TV_EPS)
    gr = dr * coef[:, :, None]
    gd = dd * coef[:, :, None]
    grad = np.zeros_like(field)
    grad[:, 1:] += gr[:, :-1]
    grad[:, :-1] -= gr[:, :-1]
    grad[1:, :] += gd[:-1, :]
    grad[:-1, :] -= gd[:-1, :]
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def loss_tv(field, mask=None) -> float:
    return loss_tv_grad(field, mask)[0]


def loss_color_grad(rendered: np.ndarray, target: np.ndarray,
                    lambda_ssim: float = LAMBDA_SSIM):
    """(1 - lambda) L1 + lambda (1 - SSIM), with gradient wrt rendered."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise InvalidParameterError("images must share a shape")
    diff = rendered - target
    n = diff.size
    l1 = float(np.abs(diff).mean())
    g = np.sign(diff) / n * (1.0 - lambda_ssim)
    if lambda_ssim > 0.0:
        s, ds = ssim_mod.ssim_with_grad(rendered, target)
        value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
        g = g - lambda_ssim * ds
    else:
        value = l1
    return value, g


def loss_color(rendered, target, lambda_ssim: float = LAMBDA_SSIM) -> float:
    return loss_color_grad(rendered, target, lambda_ssim)[0]
