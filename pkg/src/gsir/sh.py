"""Real spherical harmonics up to degree 3.

Basis ordering is band-major: index ``l*(l+1)+m`` for band ``l`` and order
``m``. The polynomials follow the real-basis convention common in splatting
code (sign phase folded into the constants), which is orthonormal on the
unit sphere.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3

# Per-band weights of the clamped-cosine kernel; multiplying a radiance
# coefficient vector by these and re-evaluating yields irradiance.
LAMBERT_BAND = (np.pi, 2.0 * np.pi / 3.0, np.pi / 4.0, 0.0)


def basis_size(deg: int) -> int:
    return (deg + 1) ** 2


def _check_deg(deg: int) -> None:
    if not (0 <= deg <= MAX_DEGREE):
        raise InvalidParameterError(f"SH degree must be in [0, {MAX_DEGREE}], got {deg}")


def band_weights(deg: int, per_band) -> np.ndarray:
    """Expand per-band values into a per-coefficient vector."""
    _check_deg(deg)
    out = np.empty(basis_size(deg))
    for l in range(deg + 1):
        out[l * l : (l + 1) * (l + 1)] = per_band[l]
    return out


def sh_eval(deg: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the basis at unit directions.

    Args:
        deg: band limit, 0..3.
        dirs: (..., 3) unit vectors (checked to 1e-6).

    Returns:
        (..., (deg+1)**2) basis values.
    """
    _check_deg(deg)
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1)
    if not np.all(np.isfinite(dirs)):
        raise InvalidParameterError("direction contains non-finite values")
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidParameterError("directions must be unit length within 1e-6")
    return _sh_eval_unchecked(deg, dirs)


def _sh_eval_unchecked(deg: int, dirs: np.ndarray) -> np.ndarray:
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (basis_size(deg),))
    out[..., 0] = C0
    if deg >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if deg >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_eval_grad(deg: int, dirs: np.ndarray) -> np.ndarray:
    """Jacobian of the basis wrt the (raw, unnormalized) direction components.

    Returns (..., (deg+1)**2, 3).
    """
    _check_deg(deg)
    dirs = np.asarray(dirs, dtype=np.float64)
    x = dirs[..., 0]
    y = dirs[..., 1]
    z = dirs[..., 2]
    n = basis_size(deg)
    g = np.zeros(dirs.shape[:-1] + (n, 3))
    if deg >= 1:
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if deg >= 2:
        g[..., 4, 0] = C2[0] * y
        g[..., 4, 1] = C2[0] * x
        g[..., 5, 1] = C2[1] * z
        g[..., 5, 2] = C2[1] * y
        g[..., 6, 0] = -2.0 * C2[2] * x
        g[..., 6, 1] = -2.0 * C2[2] * y
        g[..., 6, 2] = 4.0 * C2[2] * z
        g[..., 7, 0] = C2[3] * z
        g[..., 7, 2] = C2[3] * x
        g[..., 8, 0] = 2.0 * C2[4] * x
        g[..., 8, 1] = -2.0 * C2[4] * y
    if deg >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = C3[0] * 6.0 * x * y
        g[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = C3[1] * y * z
        g[..., 10, 1] = C3[1] * x * z
        g[..., 10, 2] = C3[1] * x * y
        g[..., 11, 0] = -2.0 * C3[2] * x * y
        g[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = 8.0 * C3[2] * y * z
        g[..., 12, 0] = -6.0 * C3[3] * x * z
        g[..., 12, 1] = -6.0 * C3[3] * y * z
        g[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = -2.0 * C3[4] * x * y
        g[..., 13, 2] = 8.0 * C3[4] * x * z
        g[..., 14, 0] = 2.0 * C3[5] * x * z
        g[..., 14, 1] = -2.0 * C3[5] * y * z
        g[..., 14, 2] = C3[5] * (xx - yy)
        g[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = -6.0 * C3[6] * x * y
    return g


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient that reproduces ``rgb`` under the +0.5 color offset."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * C0 + 0.5
