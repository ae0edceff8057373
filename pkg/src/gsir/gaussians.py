"""3D Gaussian data model and screen-space projection.

A cloud stores raw parameters in unconstrained space (log scales, logit
opacity/materials) and applies activations at read time. The projection
math produces, per visible splat, a pixel-space mean, a 2x2 covariance
(with a small isotropic dilation acting as a low-pass filter), and the
camera-space depth; every step has a matching analytic backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sh
from .cameras import Camera
from .errors import InvalidParameterError

# Low-pass dilation added to the diagonal of every projected covariance, in
# pixel^2. Keeps footprints at least ~a pixel wide so nothing slips between
# sample points.
COV2D_DILATION = 0.3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def logit(p, eps=1e-6):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for N Gaussians (raw parameter space).

    positions   (N, 3) world-space means
    log_scales  (N, 3) log of per-axis extents
    rotations   (N, 4) quaternions (w, x, y, z); kept ~unit by the optimizer
    normals     (N, 3) unit surface normals (raw, renormalized after steps)
    opacities_raw (N,) logit opacity
    sh_coeffs   (N, K, 3) color coefficients, DC first, K = (deg+1)^2
    albedo_raw  (N, 3) logit albedo
    roughness_raw (N,) logit roughness
    metallic_raw  (N,) logit metallic
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    normals: np.ndarray
    opacities_raw: np.ndarray
    sh_coeffs: np.ndarray
    albedo_raw: np.ndarray
    roughness_raw: np.ndarray
    metallic_raw: np.ndarray

    # Raw arrays that participate in optimization, in a fixed order.
    PARAM_NAMES = (
        "positions", "log_scales", "rotations", "normals", "opacities_raw",
        "sh_coeffs", "albedo_raw", "roughness_raw", "metallic_raw",
    )
    GEOMETRY_APPEARANCE = (
        "positions", "log_scales", "rotations", "normals", "opacities_raw",
        "sh_coeffs",
    )
    MATERIAL = ("albedo_raw", "roughness_raw", "metallic_raw")

    def __post_init__(self):
        n = len(self.positions)
        for name in self.PARAM_NAMES:
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float64))
            if len(arr) != n:
                raise InvalidParameterError(f"{name} has {len(arr)} rows, expected {n}")
            setattr(self, name, arr)
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[2] != 3:
            raise InvalidParameterError("sh_coeffs must have shape (N, K, 3)")
        k = self.sh_coeffs.shape[1]
        if int(np.sqrt(k)) ** 2 != k or k > sh.basis_size(sh.MAX_DEGREE):
            raise InvalidParameterError(f"sh_coeffs coefficient count {k} is not a valid basis size")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def color_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    # Activated views -----------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacities_raw)

    @property
    def albedo(self) -> np.ndarray:
        return sigmoid(self.albedo_raw)

    @property
    def roughness(self) -> np.ndarray:
        return sigmoid(self.roughness_raw)

    @property
    def metallic(self) -> np.ndarray:
        return sigmoid(self.metallic_raw)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: getattr(self, k).copy() for k in self.PARAM_NAMES})

    def renormalize(self) -> None:
        """Restore the unit-norm invariants on quaternions and normals."""
        qn = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, np.maximum(qn, 1e-12), out=self.rotations)
        nn = np.linalg.norm(self.normals, axis=1, keepdims=True)
        np.divide(self.normals, np.maximum(nn, 1e-12), out=self.normals)

    def param_arrays(self, names=None) -> dict:
        names = names or self.PARAM_NAMES
        return {k: getattr(self, k) for k in names}


def zero_grads(cloud: GaussianCloud, names=None) -> dict:
    names = names or GaussianCloud.PARAM_NAMES
    return {k: np.zeros_like(getattr(cloud, k)) for k in names}


# --------------------------------------------------------------------------
# Rotation / covariance


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (..., 4) in (w, x, y, z) order.

    Quaternions are normalized internally, so the map is well defined for
    any nonzero input.
    """
    q = np.asarray(q, dtype=np.float64)
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_grad_unit(qn: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions, shape (..., 4, 3, 3)."""
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = np.zeros(qn.shape[:-1] + (4, 3, 3))
    zero = np.zeros_like(w)
    # dR/dw
    g[..., 0, :, :] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)
    # dR/dx
    g[..., 1, :, :] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1),
    ], axis=-2)
    # dR/dy
    g[..., 2, :, :] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1),
    ], axis=-2)
    # dR/dz
    g[..., 3, :, :] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1),
    ], axis=-2)
    return g


def rotmat_backward(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """Chain an upstream dL/dR back to raw quaternion components."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    g_unit = _rotmat_grad_unit(qn)  # (..., 4, 3, 3)
    d_qn = np.einsum("...kij,...ij->...k", g_unit, d_r)
    # through the normalization q -> q/|q|
    proj = d_qn - np.sum(d_qn * qn, axis=-1, keepdims=True) * qn
    return proj / norm


def covariance_3d(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """World covariance R diag(s)^2 R^T for scales ``s`` and quaternions ``q``.

    Accepts single vectors or batches. Eigenvalues of the result are the
    squared scales.
    """
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(q))):
        raise InvalidParameterError("covariance inputs must be finite")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def covariance_3d_backward(s, q, d_cov):
    """Gradients of covariance_3d wrt the activated scales and raw quaternion.

    ``d_cov`` is dL/dSigma (..., 3, 3); returns (d_s, d_q).
    """
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r = quat_to_rotmat(q)
    m = r * s[..., None, :]
    sym = d_cov + np.swapaxes(d_cov, -1, -2)
    d_m = sym @ m  # dL/dM for Sigma = M M^T
    d_s = np.einsum("...ik,...ik->...k", d_m, r)
    d_r = d_m * s[..., None, :]
    d_q = rotmat_backward(q, d_r)
    return d_s, d_q


# --------------------------------------------------------------------------
# Projection


@dataclass
class ProjectedSplats:
    """Screen-space records for the visible subset of a cloud, plus the
    cached intermediates the backward pass needs."""

    indices: np.ndarray      # (M,) into the cloud
    means2d: np.ndarray      # (M, 2) pixels
    cov2d: np.ndarray        # (M, 2, 2) with dilation applied
    conics: np.ndarray       # (M, 3) inverse covariance (a, b, c)
    depths: np.ndarray       # (M,) camera-space z
    radii: np.ndarray        # (M,) 3-sigma pixel radius
    cam: Camera
    t_cam: np.ndarray = field(repr=False, default=None)   # (M, 3)
    j: np.ndarray = field(repr=False, default=None)       # (M, 2, 3)
    sigma_cam: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.indices)


def project_cloud(cloud: GaussianCloud, cam: Camera) -> ProjectedSplats:
    """Project all Gaussians, culling those outside (near, far) in depth."""
    t_all = cloud.positions @ cam.rotation.T + cam.translation
    vis = (t_all[:, 2] > cam.near) & (t_all[:, 2] < cam.far)
    idx = np.nonzero(vis)[0]
    t = t_all[idx]
    tz = t[:, 2]

    means2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx,
                        cam.fy * t[:, 1] / tz + cam.cy], axis=1)

    m = len(idx)
    j = np.zeros((m, 2, 3))
    j[:, 0, 0] = cam.fx / tz
    j[:, 0, 2] = -cam.fx * t[:, 0] / tz ** 2
    j[:, 1, 1] = cam.fy / tz
    j[:, 1, 2] = -cam.fy * t[:, 1] / tz ** 2

    sigma = covariance_3d(cloud.scales[idx], cloud.rotations[idx])
    sigma_cam = np.einsum("ij,njk,lk->nil", cam.rotation, sigma, cam.rotation)
    cov2d = np.einsum("nij,njk,nlk->nil", j, sigma_cam, j)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    det = np.maximum(det, 1e-12)
    conics = np.stack([cov2d[:, 1, 1] / det,
                       -cov2d[:, 0, 1] / det,
                       cov2d[:, 0, 0] / det], axis=1)

    eig_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
        np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2, 0.0))
    radii = np.ceil(3.0 * np.sqrt(np.maximum(eig_max, 0.0)))

    return ProjectedSplats(indices=idx, means2d=means2d, cov2d=cov2d,
                           conics=conics, depths=tz.copy(), radii=radii,
                           cam=cam, t_cam=t, j=j, sigma_cam=sigma_cam)


def project_backward(cloud: GaussianCloud, proj: ProjectedSplats,
                     d_means2d, d_conics, d_depths, grads: dict) -> None:
    """Accumulate projection gradients into raw-parameter grad arrays.

    d_means2d (M, 2), d_conics (M, 3) wrt (a, b, c), d_depths (M,).
    """
    cam = proj.cam
    idx = proj.indices
    m = len(idx)
    if m == 0:
        return
    t = proj.t_cam
    tz = t[:, 2]
    j = proj.j

    # conic -> cov2d (dQ = -Q dS Q for Q = S^-1)
    q = np.empty((m, 2, 2))
    q[:, 0, 0] = proj.conics[:, 0]
    q[:, 0, 1] = q[:, 1, 0] = proj.conics[:, 1]
    q[:, 1, 1] = proj.conics[:, 2]
    gq = np.empty((m, 2, 2))
    gq[:, 0, 0] = d_conics[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * d_conics[:, 1]
    gq[:, 1, 1] = d_conics[:, 2]
    d_cov2d = -np.einsum("nij,njk,nkl->nil", q, gq, q)

    # cov2d = J A J^T (dilation is additive, drops out)
    a = proj.sigma_cam
    sym = d_cov2d + np.swapaxes(d_cov2d, -1, -2)
    d_j = np.einsum("nij,njk,nkl->nil", sym, j, a)
    d_a = np.einsum("nji,njk,nkl->nil", j, d_cov2d, j)
    d_sigma = np.einsum("ji,njk,kl->nil", cam.rotation, d_a, cam.rotation)

    d_s_act, d_q_raw = covariance_3d_backward(cloud.scales[idx], cloud.rotations[idx], d_sigma)

    # camera-space point gradients: projection of the mean ...
    d_t = np.zeros((m, 3))
    d_t[:, 0] += d_means2d[:, 0] * cam.fx / tz
    d_t[:, 1] += d_means2d[:, 1] * cam.fy / tz
    d_t[:, 2] += (-d_means2d[:, 0] * cam.fx * t[:, 0]
                  - d_means2d[:, 1] * cam.fy * t[:, 1]) / tz ** 2
    # ... the Jacobian's own dependence on t ...
    d_t[:, 0] += d_j[:, 0, 2] * (-cam.fx / tz ** 2)
    d_t[:, 1] += d_j[:, 1, 2] * (-cam.fy / tz ** 2)
    d_t[:, 2] += (d_j[:, 0, 0] * (-cam.fx / tz ** 2)
                  + d_j[:, 1, 1] * (-cam.fy / tz ** 2)
                  + d_j[:, 0, 2] * (2.0 * cam.fx * t[:, 0] / tz ** 3)
                  + d_j[:, 1, 2] * (2.0 * cam.fy * t[:, 1] / tz ** 3))
    # ... and depth.
    d_t[:, 2] += d_depths

    d_p = d_t @ cam.rotation

    np.add.at(grads["positions"], idx, d_p)
    np.add.at(grads["log_scales"], idx, d_s_act * cloud.scales[idx])
    np.add.at(grads["rotations"], idx, d_q_raw)


# --------------------------------------------------------------------------
# View-dependent color


def eval_colors(cloud: GaussianCloud, cam_center: np.ndarray,
                indices: np.ndarray | None = None):
    """Per-Gaussian RGB from SH coefficients for a given eye point.

    Returns (colors (M, 3), cache) where colors are offset by +0.5 and
    clamped below at zero.
    """
    if indices is None:
        indices = np.arange(len(cloud))
    deg = cloud.color_degree
    diff = cloud.positions[indices] - np.asarray(cam_center, dtype=np.float64)
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    dirs = diff / np.maximum(dist, 1e-12)
    basis = sh._sh_eval_unchecked(deg, dirs)  # (M, K)
    raw = np.einsum("mk,mkc->mc", basis, cloud.sh_coeffs[indices]) + 0.5
    colors = np.maximum(raw, 0.0)
    cache = (indices, deg, dirs, dist, basis, raw >= 0.0)
    return colors, cache


def eval_colors_backward(cloud: GaussianCloud, cache, d_colors, grads: dict) -> None:
    indices, deg, dirs, dist, basis, active = cache
    d_raw = np.where(active, d_colors, 0.0)  # clamp subgradient
    d_sh = basis[:, :, None] * d_raw[:, None, :]
    np.add.at(grads["sh_coeffs"], indices, d_sh)
    if deg > 0:
        d_basis = np.einsum("mkc,mc->mk", cloud.sh_coeffs[indices], d_raw)
        jac = sh.sh_eval_grad(deg, dirs)  # (M, K, 3)
        d_dir = np.einsum("mk,mkd->md", d_basis, jac)
        # through dir = diff / |diff|
        d_diff = (d_dir - np.sum(d_dir * dirs, axis=1, keepdims=True) * dirs) / np.maximum(dist, 1e-12)
        np.add.at(grads["positions"], indices, d_diff)


# --------------------------------------------------------------------------
# Single-splat convenience wrappers (the batched paths above are the ones
# the renderer uses)


def project_gaussian(position, scale, quat, cam: Camera):
    """Project one Gaussian; returns None when the center is culled."""
    tmp = GaussianCloud(
        positions=np.asarray(position, dtype=np.float64)[None],
        log_scales=np.log(np.asarray(scale, dtype=np.float64))[None],
        rotations=np.asarray(quat, dtype=np.float64)[None],
        normals=np.array([[0.0, 0.0, 1.0]]),
        opacities_raw=np.zeros(1),
        sh_coeffs=np.zeros((1, 1, 3)),
        albedo_raw=np.zeros((1, 3)),
        roughness_raw=np.zeros(1),
        metallic_raw=np.zeros(1),
    )
    proj = project_cloud(tmp, cam)
    if len(proj) == 0:
        return None
    return {"mean2d": proj.means2d[0], "cov2d": proj.cov2d[0], "depth": proj.depths[0]}
