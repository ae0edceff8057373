"""Brute-force reference implementations used only by tests.

These paths re-derive every quantity from first principles (no tiling, no
early exit, extended-precision accumulation) and deliberately share no code
with the production renderer. They are slow by design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cameras import Camera
from .errors import InvalidParameterError

_ORACLE_W_MAX = 0.99
_ORACLE_W_MIN = 1.0 / 255.0


def _oracle_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.longdouble)))


def _oracle_rotmat(q):
    q = np.asarray(q, dtype=np.longdouble)
    q = q / math.sqrt(float(np.sum(q * q)))
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ], dtype=np.longdouble)


def oracle_composite(cloud, cam: Camera, pixel, colors=None):
    """Exact compositing at one pixel: full sort, no tiling, no early exit.

    Args:
        cloud: GaussianCloud (N <= 64 enforced; this path is slow on purpose).
        cam: Camera.
        pixel: (row, col) integer pixel.
        colors: optional (N, 3) per-splat colors; defaults to the DC color of
            each splat's coefficients plus the +0.5 offset, clamped at zero
            (view-independent so the oracle stays self-contained).

    Returns:
        dict with color (3,), alpha, depth_vol, depth_peak, depth_linear,
        contributor list (indices in compositing order).
    """
    n = len(cloud.positions)
    if n > 64:
        raise InvalidParameterError("oracle_composite is limited to 64 Gaussians")
    row, col = pixel
    rot = np.asarray(cam.rotation, dtype=np.longdouble)
    trans = np.asarray(cam.translation, dtype=np.longdouble)

    if colors is None:
        c0 = np.longdouble(0.28209479177387814)
        colors = np.maximum(np.asarray(cloud.sh_coeffs[:, 0, :], dtype=np.longdouble) * c0 + 0.5, 0.0)
    else:
        colors = np.asarray(colors, dtype=np.longdouble)

    recs = []
    for i in range(n):
        t = rot @ np.asarray(cloud.positions[i], dtype=np.longdouble) + trans
        if not (t[2] > cam.near and t[2] < cam.far):
            continue
        mu = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy],
                      dtype=np.longdouble)
        r3 = _oracle_rotmat(cloud.rotations[i])
        s = np.exp(np.asarray(cloud.log_scales[i], dtype=np.longdouble))
        msc = r3 * s[None, :]
        sigma = msc @ msc.T
        sig_cam = rot @ sigma @ rot.T
        j = np.array([
            [cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
            [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2],
        ], dtype=np.longdouble)
        cov2 = j @ sig_cam @ j.T
        cov2[0, 0] += 0.3
        cov2[1, 1] += 0.3
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] * cov2[1, 0]
        inv = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[1, 0], cov2[0, 0]]],
                       dtype=np.longdouble) / det
        d = np.array([col - mu[0], row - mu[1]], dtype=np.longdouble)
        power = 0.5 * (d @ inv @ d)
        g = np.exp(-power)
        recs.append((float(t[2]), i, g))

    recs.sort(key=lambda r: (r[0], r[1]))
    opac = _oracle_sigmoid(cloud.opacities_raw)

    color = np.zeros(3, dtype=np.longdouble)
    alpha = np.longdouble(0.0)
    d_vol = np.longdouble(0.0)
    trans_acc = np.longdouble(1.0)
    best_w = np.longdouble(-1.0)
    d_peak = np.longdouble(cam.far)
    contributors = []
    for depth, i, g in recs:
        wv = min(g * opac[i], np.longdouble(_ORACLE_W_MAX))
        if wv < _ORACLE_W_MIN:
            continue
        contributed = trans_acc * wv
        color += contributed * colors[i]
        alpha += contributed
        d_vol += contributed * depth
        if contributed > best_w:
            best_w = contributed
            d_peak = np.longdouble(depth)
        contributors.append(i)
        trans_acc *= (1.0 - wv)

    covered = alpha >= 1e-6
    d_lin = d_vol / alpha if covered else np.longdouble(cam.far)
    if not covered:
        d_vol = np.longdouble(cam.far)
        d_peak = np.longdouble(cam.far)
    return {
        "color": np.asarray(color, dtype=np.float64),
        "alpha": float(alpha),
        "depth_vol": float(d_vol),
        "depth_peak": float(d_peak),
        "depth_linear": float(d_lin),
        "contributors": contributors,
    }


@dataclass
class McEstimate:
    value: np.ndarray
    stderr: np.ndarray
    samples: int


def oracle_hemisphere_mc(integrand, normal, samples: int, seed: int) -> McEstimate:
    """Cosine-weighted Monte Carlo estimate of a hemisphere integral.

    Estimates integral over the upper hemisphere of ``integrand(l) * (l . n)``
    using cosine importance sampling (pdf = cos/pi), i.e. the returned value
    is ``pi * mean(integrand(l_k))``.

    ``integrand`` maps an (S, 3) array of unit directions to (S,) or (S, C).
    """
    if samples < 1024:
        raise InvalidParameterError("use at least 1024 samples")
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    rng = np.random.default_rng(seed)
    u = rng.random((samples, 2))

    # Concentric disk mapping (signed radius form), then lift to the hemisphere.
    a = 2.0 * u[:, 0] - 1.0
    b = 2.0 * u[:, 1] - 1.0
    first = np.abs(a) > np.abs(b)
    r = np.where(first, a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(
            first,
            (np.pi / 4.0) * np.divide(b, a, out=np.zeros_like(a), where=a != 0.0),
            (np.pi / 2.0) - (np.pi / 4.0) * np.divide(a, b, out=np.zeros_like(b), where=b != 0.0),
        )
    degenerate = (a == 0.0) & (b == 0.0)
    phi = np.where(degenerate, 0.0, phi)
    r = np.where(degenerate, 0.0, r)
    dx = r * np.cos(phi)
    dy = r * np.sin(phi)
    z = np.sqrt(np.clip(1.0 - dx * dx - dy * dy, 0.0, 1.0))

    up = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.999 else np.array([1.0, 0.0, 0.0])
    tang = np.cross(up, normal)
    tang = tang / np.linalg.norm(tang)
    bitang = np.cross(normal, tang)
    dirs = dx[:, None] * tang[None] + dy[:, None] * bitang[None] + z[:, None] * normal[None]

    vals = np.asarray(integrand(dirs), dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    scaled = np.pi * vals.astype(np.longdouble)
    mean = scaled.mean(axis=0)
    var = scaled.var(axis=0, ddof=1) if samples > 1 else np.zeros(vals.shape[1])
    stderr = np.sqrt(var / samples)
    return McEstimate(value=np.asarray(mean, dtype=np.float64),
                      stderr=np.asarray(stderr, dtype=np.float64),
                      samples=samples)


def finite_diff_grad(loss_fn, params: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time.

    Non-finite probe values flag the entry as NaN so callers can exclude it.
    """
    if not (1e-6 <= h <= 1e-2):
        raise InvalidParameterError("h must lie in [1e-6, 1e-2]")
    params = np.asarray(params, dtype=np.float64)
    flat = params.ravel().copy()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(flat.reshape(params.shape)))
        flat[i] = orig - h
        fm = float(loss_fn(flat.reshape(params.shape)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            out[i] = np.nan
        else:
            out[i] = (np.longdouble(fp) - np.longdouble(fm)) / (2.0 * np.longdouble(h))
    return out.reshape(params.shape)
