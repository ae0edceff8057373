"""Physically-based shading with image-based lighting.

The specular half of the rendering equation is split into two precomputed
factors: a 2D environment-BRDF table over (n.v, roughness) storing the scale
and bias applied to F0, and a roughness-indexed chain of environment maps
convolved with the matching specular lobe. Diffuse lighting blends direct
irradiance (a spherical-harmonics projection of the environment) with the
baked indirect irradiance, weighted by baked ambient occlusion. Shading is
evaluated per splat and composited by the rasterizer; materials, environment
texels, and (optionally) the illumination volumes all receive analytic
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import baking, formats, sh
from .errors import InvalidParameterError

LUT_RESOLUTION = 64
LUT_SAMPLES = 1024
PREFILTER_LEVELS = 5
PREFILTER_SAMPLES = 96
ENV_DEFAULT_SHAPE = (16, 32)
F0_DIELECTRIC = 0.04
_GRAZING_EPS = 1e-4


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def softplus_grad(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inv_softplus(y, floor=1e-6):
    y = np.maximum(np.asarray(y, dtype=np.float64), floor)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, floor))))


# --------------------------------------------------------------------------
# Lat-long parameterization (z-up): rows sweep the polar angle from +z,
# columns the azimuth.


def latlong_dirs(h: int, w: int) -> np.ndarray:
    theta = (np.arange(h) + 0.5) / h * np.pi
    phi = (np.arange(w) + 0.5) / w * 2.0 * np.pi - np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)


def latlong_solid_angles(h: int, w: int) -> np.ndarray:
    edges = np.cos(np.arange(h + 1) / h * np.pi)
    band = (edges[:-1] - edges[1:]) * (2.0 * np.pi / w)
    return np.repeat(band[:, None], w, axis=1)


def latlong_taps(dirs: np.ndarray, h: int, w: int):
    """Bilinear taps for unit directions: flat texel ids (N, 4) and weights
    (N, 4). Azimuth wraps, polar clamps."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    fr = np.clip(theta / np.pi * h - 0.5, 0.0, h - 1.0)
    r0 = np.minimum(np.floor(fr).astype(np.int64), h - 2) if h > 1 else np.zeros(len(fr), np.int64)
    ar = fr - r0 if h > 1 else np.zeros_like(fr)
    r1 = np.minimum(r0 + 1, h - 1)
    fc = (phi + np.pi) / (2.0 * np.pi) * w - 0.5
    c0 = np.floor(fc).astype(np.int64)
    ac = fc - c0
    c0m = np.mod(c0, w)
    c1m = np.mod(c0 + 1, w)
    idx = np.stack([r0 * w + c0m, r0 * w + c1m, r1 * w + c0m, r1 * w + c1m], axis=1)
    wts = np.stack([(1 - ar) * (1 - ac), (1 - ar) * ac, ar * (1 - ac), ar * ac], axis=1)
    return idx, wts


@dataclass
class EnvironmentMap:
    """Trainable lat-long radiance grid; raw texels pass through a softplus
    so reconstructed radiance stays nonnegative."""

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 3 or self.raw.shape[2] != 3:
            raise InvalidParameterError("environment map must be (H, W, 3)")
        if not np.all(np.isfinite(self.raw)):
            raise InvalidParameterError("environment map contains non-finite values")

    @property
    def shape(self):
        return self.raw.shape[:2]

    @property
    def radiance(self) -> np.ndarray:
        return softplus(self.raw)

    @classmethod
    def from_radiance(cls, values) -> "EnvironmentMap":
        return cls(inv_softplus(values))

    @classmethod
    def constant(cls, value, shape=ENV_DEFAULT_SHAPE) -> "EnvironmentMap":
        return cls.from_radiance(np.full(shape + (3,), float(value)))

    def save_pfm(self, path) -> None:
        formats.write_pfm(path, self.radiance)

    @classmethod
    def load_pfm(cls, path) -> "EnvironmentMap":
        img = formats.read_pfm(path)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        return cls.from_radiance(img)


def env_sh_projection_matrix(h: int, w: int, deg: int = 2) -> np.ndarray:
    """((deg+1)^2, H*W) linear operator taking texel radiance to SH."""
    dirs = latlong_dirs(h, w).reshape(-1, 3)
    omega = latlong_solid_angles(h, w).reshape(-1)
    basis = sh._sh_eval_unchecked(deg, dirs)
    return basis.T * omega[None, :]


# --------------------------------------------------------------------------
# Microfacet pieces (GGX distribution, Schlick fresnel, height-correlated
# Smith visibility)


def ggx_d(noh, alpha):
    a2 = alpha * alpha
    denom = noh * noh * (a2 - 1.0) + 1.0
    return a2 / np.maximum(np.pi * denom * denom, 1e-12)


def smith_lambda_terms(nov, nol, alpha):
    a2 = alpha * alpha
    lv = nol * np.sqrt(np.maximum(nov * nov * (1.0 - a2) + a2, 1e-16))
    ll = nov * np.sqrt(np.maximum(nol * nol * (1.0 - a2) + a2, 1e-16))
    return lv, ll


def smith_g_height_correlated(nov, nol, alpha):
    lv, ll = smith_lambda_terms(nov, nol, alpha)
    return 2.0 * nol * nov / np.maximum(lv + ll, 1e-12)


def fresnel_schlick(f0, cos_theta):
    fc = (1.0 - cos_theta) ** 5
    return f0 + (1.0 - f0) * fc


def brdf_eval(n, v, l, albedo, roughness, metallic) -> np.ndarray:
    """Cook-Torrance BRDF value for unit vectors with n.v > 0 and n.l > 0.

    Diffuse (1 - metallic) * albedo / pi plus GGX specular with Schlick
    fresnel (F0 = mix(0.04, albedo, metallic)) and height-correlated Smith
    shadowing; grazing denominators are clamped.
    """
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    albedo = np.asarray(albedo, dtype=np.float64)
    nov = max(float(n @ v), _GRAZING_EPS)
    nol = max(float(n @ l), _GRAZING_EPS)
    h = v + l
    h = h / np.linalg.norm(h)
    noh = np.clip(float(n @ h), 0.0, 1.0)
    voh = np.clip(float(v @ h), 0.0, 1.0)
    alpha = float(roughness) ** 2
    d = ggx_d(noh, alpha)
    g = smith_g_height_correlated(nov, nol, alpha)
    f0 = F0_DIELECTRIC * (1.0 - metallic) + albedo * metallic
    f = fresnel_schlick(f0, voh)
    spec = d * g * f / max(4.0 * nol * nov, _GRAZING_EPS)
    diff = (1.0 - metallic) * albedo / np.pi
    return diff + spec


# --------------------------------------------------------------------------
# Environment-BRDF lookup table


def _hammersley(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return np.stack([i / n, bits * 2.3283064365386963e-10], axis=1)


def _ggx_sample_h(xi: np.ndarray, alpha: float) -> np.ndarray:
    """Half vectors around +z distributed per GGX (alpha = roughness^2)."""
    phi = 2.0 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (alpha * alpha - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t ** 2, 0.0))
    return np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=1)


@dataclass
class BrdfLut:
    """(scale, bias) applied to F0 over the (n.v, roughness) square."""

    table: np.ndarray  # (R, R, 2); axis 0 = n.v, axis 1 = roughness

    def __post_init__(self):
        # Loose physical envelope: scale and bias are each bounded by the
        # white-fresnel limit and together cannot exceed unit reflectance
        # (bias legitimately approaches 1 at grazing incidence, where the
        # fresnel term saturates regardless of F0).
        self.table = np.asarray(self.table, dtype=np.float64)
        r = self.table.shape[0]
        if self.table.shape != (r, r, 2):
            raise InvalidParameterError("LUT must be square with 2 channels")
        scale, bias = self.table[..., 0], self.table[..., 1]
        if scale.min() < 0.0 or scale.max() > 1.05:
            raise InvalidParameterError("LUT scale escaped [0, 1.05]")
        if bias.min() < 0.0 or bias.max() > 1.0:
            raise InvalidParameterError("LUT bias escaped [0, 1]")
        if (scale + bias).max() > 1.05:
            raise InvalidParameterError("LUT scale + bias escaped the energy envelope")

    @property
    def resolution(self) -> int:
        return self.table.shape[0]

    def sample(self, nov, rough):
        """Bilinear (scale, bias) with the derivative wrt roughness.

        Returns (scale, bias, d_scale/d_rough, d_bias/d_rough) as arrays.
        """
        r = self.resolution
        nov = np.clip(np.asarray(nov, dtype=np.float64), 0.0, 1.0)
        rough = np.clip(np.asarray(rough, dtype=np.float64), 0.0, 1.0)
        fu = np.clip(nov * r - 0.5, 0.0, r - 1.0)
        fv = np.clip(rough * r - 0.5, 0.0, r - 1.0)
        u0 = np.minimum(np.floor(fu).astype(np.int64), r - 2)
        v0 = np.minimum(np.floor(fv).astype(np.int64), r - 2)
        au = fu - u0
        av = fv - v0
        t = self.table
        t00 = t[u0, v0]
        t01 = t[u0, v0 + 1]
        t10 = t[u0 + 1, v0]
        t11 = t[u0 + 1, v0 + 1]
        au_ = au[..., None]
        av_ = av[..., None]
        val = (t00 * (1 - au_) * (1 - av_) + t10 * au_ * (1 - av_)
               + t01 * (1 - au_) * av_ + t11 * au_ * av_)
        # d/d(rough) through av; the clamp at the border zeroes it
        interior = (rough * r - 0.5 > 0.0) & (rough * r - 0.5 < r - 1.0)
        dval = ((t01 - t00) * (1 - au_) + (t11 - t10) * au_) * r
        dval = np.where(interior[..., None], dval, 0.0)
        return val[..., 0], val[..., 1], dval[..., 0], dval[..., 1]


def integrate_env_brdf(nov: float, rough: float, samples: int, seed) -> np.ndarray:
    """Split-sum environment BRDF (scale, bias) by GGX importance sampling."""
    rng = np.random.default_rng(seed)
    xi = _hammersley(samples)
    # decorrelate entries with a seeded Cranley-Patterson rotation
    xi = np.mod(xi + rng.random(2)[None, :], 1.0)
    alpha = rough * rough
    v = np.array([np.sqrt(max(1.0 - nov * nov, 0.0)), 0.0, nov])
    hvec = _ggx_sample_h(xi, alpha)
    voh = hvec @ v
    l = 2.0 * voh[:, None] * hvec - v[None, :]
    nol = l[:, 2]
    noh = hvec[:, 2]
    ok = nol > 0.0
    voh_c = np.clip(voh, 0.0, 1.0)
    g = smith_g_height_correlated(max(nov, _GRAZING_EPS), np.maximum(nol, _GRAZING_EPS), alpha)
    g_vis = g * voh_c / np.maximum(noh * max(nov, _GRAZING_EPS), 1e-8)
    fc = (1.0 - voh_c) ** 5
    a = np.where(ok, (1.0 - fc) * g_vis, 0.0).mean()
    b = np.where(ok, fc * g_vis, 0.0).mean()
    return np.array([a, b])


def precompute_env_brdf_lut(samples: int = LUT_SAMPLES,
                            resolution: int = LUT_RESOLUTION,
                            seed: int = 0) -> BrdfLut:
    """Tabulate the environment BRDF at entry centers; deterministic per seed
    (each entry draws from its own seed-derived stream)."""
    if resolution < 16:
        raise InvalidParameterError("LUT resolution must be at least 16")
    table = np.empty((resolution, resolution, 2))
    for i in range(resolution):
        nov = (i + 0.5) / resolution
        for j in range(resolution):
            rough = (j + 0.5) / resolution
            table[i, j] = integrate_env_brdf(nov, rough, samples, (seed, i, j))
    table[..., 0] = np.clip(table[..., 0], 0.0, 1.05)
    table[..., 1] = np.clip(table[..., 1], 0.0, 1.0)
    return BrdfLut(table)


# --------------------------------------------------------------------------
# Prefiltered environment chain


@dataclass
class PrefilteredEnv:
    """Specular-lobe-convolved copies of the environment, one per roughness
    level (level 0 is the unfiltered map). Levels share the source
    resolution; each level is a row-stochastic linear image of the source
    texels, which keeps a constant environment exactly constant and makes
    gradients a matrix product."""

    operators: list          # level -> (T, T) or None for identity
    values: np.ndarray       # (L, H, W, 3) filtered radiance
    shape: tuple

    @property
    def levels(self) -> int:
        return len(self.operators)

    def roughness_of_level(self, level: int) -> float:
        return level / (self.levels - 1)

    def refresh(self, radiance: np.ndarray) -> None:
        """Recompute all levels for new source radiance."""
        h, w = self.shape
        flat = radiance.reshape(-1, 3)
        for lv, op in enumerate(self.operators):
            self.values[lv] = (flat if op is None else op @ flat).reshape(h, w, 3)

    def sample(self, dirs: np.ndarray, rough: np.ndarray):
        """Radiance at (direction, roughness) with bilinear texel and linear
        level interpolation. Returns (value (N, 3), cache)."""
        h, w = self.shape
        dirs = np.atleast_2d(dirs)
        rough = np.atleast_1d(np.asarray(rough, dtype=np.float64))
        lf = np.clip(rough, 0.0, 1.0) * (self.levels - 1)
        l0 = np.minimum(np.floor(lf).astype(np.int64), self.levels - 2)
        lam = lf - l0
        idx, wts = latlong_taps(dirs, h, w)
        flat = self.values.reshape(self.levels, -1, 3)
        v0 = np.einsum("nk,nkc->nc", wts, flat[l0[:, None], idx])
        v1 = np.einsum("nk,nkc->nc", wts, flat[l0[:, None] + 1, idx])
        val = (1.0 - lam)[:, None] * v0 + lam[:, None] * v1
        interior = (rough > 0.0) & (rough < 1.0)
        dval_drough = np.where(interior[:, None], (v1 - v0) * (self.levels - 1), 0.0)
        cache = (idx, wts, l0, lam)
        return val, dval_drough, cache

    def sample_backward(self, cache, d_val: np.ndarray) -> np.ndarray:
        """Push upstream (N, 3) gradients back to source texel radiance."""
        idx, wts, l0, lam = cache
        h, w = self.shape
        t = h * w
        per_level = np.zeros((self.levels, t, 3))
        low = (1.0 - lam)[:, None, None] * wts[:, :, None] * d_val[:, None, :]
        high = lam[:, None, None] * wts[:, :, None] * d_val[:, None, :]
        for lv in range(self.levels - 1):
            sel = l0 == lv
            if sel.any():
                np.add.at(per_level[lv], idx[sel].ravel(), low[sel].reshape(-1, 3))
                np.add.at(per_level[lv + 1], idx[sel].ravel(), high[sel].reshape(-1, 3))
        grad = np.zeros((t, 3))
        for lv, op in enumerate(self.operators):
            if not np.any(per_level[lv]):
                continue
            grad += per_level[lv] if op is None else op.T @ per_level[lv]
        return grad.reshape(h, w, 3)


def _prefilter_operator(h: int, w: int, rough: float, samples: int) -> np.ndarray:
    """Row-stochastic (T, T) operator convolving the environment with the
    specular lobe at the given roughness (filter direction = view =
    reflection, the usual isotropic approximation)."""
    t = h * w
    dirs = latlong_dirs(h, w).reshape(-1, 3)
    xi = _hammersley(samples)
    hloc = _ggx_sample_h(xi, rough * rough)       # around +z
    up = np.where(np.abs(dirs[:, 2:3]) < 0.999,
                  np.tile([0.0, 0.0, 1.0], (t, 1)), np.tile([1.0, 0.0, 0.0], (t, 1)))
    tang = np.cross(up, dirs)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    bitang = np.cross(dirs, tang)
    # world half vectors for all (texel, sample) pairs
    hw = (hloc[None, :, 0, None] * tang[:, None, :]
          + hloc[None, :, 1, None] * bitang[:, None, :]
          + hloc[None, :, 2, None] * dirs[:, None, :])
    voh = np.einsum("tsd,td->ts", hw, dirs)
    l = 2.0 * voh[..., None] * hw - dirs[:, None, :]
    nol = np.einsum("tsd,td->ts", l, dirs)
    wgt = np.maximum(nol, 0.0)
    idx, taps = latlong_taps(l.reshape(-1, 3), h, w)
    taps = taps * wgt.reshape(-1)[:, None]
    op = np.zeros((t, t))
    rows = np.repeat(np.arange(t), samples * 4)
    np.add.at(op, (rows, idx.reshape(t, -1).ravel()), taps.reshape(t, -1).ravel())
    norm = op.sum(axis=1, keepdims=True)
    return op / np.maximum(norm, 1e-12)


def prefilter_environment(env: EnvironmentMap, levels: int = PREFILTER_LEVELS,
                          samples: int = PREFILTER_SAMPLES) -> PrefilteredEnv:
    """Build the roughness chain for an environment map (level 0 = copy)."""
    if levels < 2:
        raise InvalidParameterError("need at least 2 prefilter levels")
    h, w = env.shape
    ops = [None]
    for lv in range(1, levels):
        ops.append(_prefilter_operator(h, w, lv / (levels - 1), samples))
    pre = PrefilteredEnv(operators=ops, values=np.zeros((levels, h, w, 3)), shape=(h, w))
    pre.refresh(env.radiance)
    return pre


# --------------------------------------------------------------------------
# Shading


@dataclass
class ShadingAssets:
    """Everything stage-3 shading reads besides the cloud itself."""

    env: EnvironmentMap
    lut: BrdfLut
    prefiltered: PrefilteredEnv
    occlusion: baking.VolumeGrid | None = None
    illumination: baking.VolumeGrid | None = None
    env_deg: int = 2
    _proj: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        h, w = self.env.shape
        self._proj = env_sh_projection_matrix(h, w, self.env_deg)

    def refresh(self) -> None:
        """Re-derive filtered copies after the environment changed."""
        self.prefiltered.refresh(self.env.radiance)

    def env_sh(self) -> np.ndarray:
        """((deg+1)^2, 3) SH radiance coefficients of the environment."""
        return self._proj @ self.env.radiance.reshape(-1, 3)

    def direct_irradiance(self, ns: np.ndarray) -> np.ndarray:
        """Cosine-convolved irradiance of the environment at normals (N, 3)."""
        coeffs = self.env_sh()
        aw = sh.band_weights(self.env_deg, sh.LAMBERT_BAND)
        basis = sh._sh_eval_unchecked(self.env_deg, np.atleast_2d(ns))
        return np.maximum(basis @ (coeffs * aw[:, None]), 0.0)


def diffuse_irradiance(assets: ShadingAssets, x, n) -> np.ndarray:
    """Blend of direct and baked indirect irradiance at a point (Lambert
    kernel, occlusion-weighted)."""
    n = np.asarray(n, dtype=np.float64)
    i_dir = assets.direct_irradiance(n[None])[0]
    if assets.occlusion is None:
        return i_dir
    occ = baking.ambient_occlusion_batch(assets.occlusion, np.asarray(x)[None], n[None])[0]
    i_ind = np.zeros(3)
    if assets.illumination is not None:
        i_ind = baking.query_indirect_irradiance(assets.illumination, x, n)
    return (1.0 - occ) * i_dir + occ * i_ind


def shade_points(assets: ShadingAssets, xs, normals, view_dirs,
                 albedo, roughness, metallic):
    """Outgoing radiance for a batch of surface points.

    Args:
        xs (N, 3): positions; normals (N, 3): unit normals; view_dirs (N, 3):
        unit directions from point toward the eye; albedo (N, 3); roughness,
        metallic (N,) in [0, 1].

    Returns (radiance (N, 3), cache) where the cache drives
    shade_points_backward. Specular is zeroed where n.v <= 0.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    view_dirs = np.atleast_2d(np.asarray(view_dirs, dtype=np.float64))
    albedo = np.atleast_2d(np.asarray(albedo, dtype=np.float64))
    roughness = np.atleast_1d(np.asarray(roughness, dtype=np.float64))
    metallic = np.atleast_1d(np.asarray(metallic, dtype=np.float64))
    n = len(xs)

    # diffuse: I_d = (1 - O) I_dir + O I_indir
    i_dir_pre = assets.direct_irradiance(normals)
    if assets.occlusion is not None:
        occ = baking.ambient_occlusion_batch(assets.occlusion, xs, normals)
    else:
        occ = np.zeros(n)
    if assets.illumination is not None:
        i_ind, ind_cache = baking.indirect_irradiance_batch(assets.illumination, xs, normals)
    else:
        i_ind, ind_cache = np.zeros((n, 3)), None
    i_d = (1.0 - occ)[:, None] * i_dir_pre + occ[:, None] * i_ind
    kd = (1.0 - metallic)[:, None] * albedo / np.pi
    l_diff = kd * i_d

    # specular split sum
    nv = np.einsum("nd,nd->n", normals, view_dirs)
    spec_on = nv > 0.0
    nv_c = np.clip(nv, _GRAZING_EPS, 1.0)
    refl = 2.0 * nv[:, None] * normals - view_dirs
    refl = refl / np.maximum(np.linalg.norm(refl, axis=1, keepdims=True), 1e-12)
    scale, bias, d_scale, d_bias = assets.lut.sample(nv_c, roughness)
    f0 = F0_DIELECTRIC * (1.0 - metallic)[:, None] + albedo * metallic[:, None]
    i_s, d_is_drough, pre_cache = assets.prefiltered.sample(refl, roughness)
    env_brdf = f0 * scale[:, None] + bias[:, None]
    l_spec = np.where(spec_on[:, None], env_brdf * i_s, 0.0)

    pre = l_diff + l_spec
    out = np.maximum(pre, 0.0)
    cache = dict(xs=xs, normals=normals, albedo=albedo, roughness=roughness,
                 metallic=metallic, occ=occ, i_dir_pre=i_dir_pre, i_ind=i_ind,
                 ind_cache=ind_cache, i_d=i_d, nv_c=nv_c, spec_on=spec_on,
                 scale=scale, bias=bias, d_scale=d_scale, d_bias=d_bias,
                 f0=f0, i_s=i_s, d_is_drough=d_is_drough, pre_cache=pre_cache,
                 active=pre > 0.0, diffuse=l_diff,
                 specular=np.where(spec_on[:, None], env_brdf * i_s, 0.0))
    return out, cache


def shade_points_backward(assets: ShadingAssets, cache, d_out: np.ndarray,
                          train_illumination: bool = False):
    """Gradients of shade_points wrt activated materials, raw environment
    texels, and (optionally) illumination SH coefficients.

    Baked occlusion is a constant. Returns a dict with d_albedo (N, 3),
    d_roughness (N,), d_metallic (N,), d_env_raw (H, W, 3), and d_illum
    (grid-shaped or None).
    """
    u = np.where(cache["active"], np.asarray(d_out, dtype=np.float64), 0.0)
    albedo = cache["albedo"]
    metallic = cache["metallic"]
    occ = cache["occ"]
    i_d = cache["i_d"]

    # diffuse
    kd_scalar = (1.0 - metallic) / np.pi
    d_albedo = u * kd_scalar[:, None] * i_d
    d_metallic = -np.einsum("nc,nc->n", u, albedo * i_d) / np.pi
    d_id = u * kd_scalar[:, None] * albedo
    d_idir = d_id * (1.0 - occ)[:, None] * (cache["i_dir_pre"] > 0.0)
    d_iind = d_id * occ[:, None]

    # direct irradiance -> env texels (linear through the SH projection)
    aw = sh.band_weights(assets.env_deg, sh.LAMBERT_BAND)
    basis = sh._sh_eval_unchecked(assets.env_deg, cache["normals"])
    d_env_sh = (basis * aw[None, :]).T @ d_idir                  # (K, 3)
    d_env_act = (assets._proj.T @ d_env_sh)                      # (T, 3)

    d_illum = None
    if train_illumination and cache["ind_cache"] is not None:
        d_illum = baking.indirect_irradiance_backward(
            assets.illumination, cache["ind_cache"], d_iind)

    # specular
    spec = cache["spec_on"][:, None]
    us = np.where(spec, u, 0.0)
    i_s = cache["i_s"]
    scale = cache["scale"]
    d_f0 = us * scale[:, None] * i_s
    d_albedo += d_f0 * metallic[:, None]
    d_metallic += np.einsum("nc,nc->n", d_f0, albedo - F0_DIELECTRIC)
    d_scale_up = np.einsum("nc,nc->n", us, cache["f0"] * i_s)
    d_bias_up = np.einsum("nc,nc->n", us, i_s)
    d_rough = d_scale_up * cache["d_scale"] + d_bias_up * cache["d_bias"]
    d_is = us * (cache["f0"] * scale[:, None] + cache["bias"][:, None])
    d_rough += np.einsum("nc,nc->n", d_is, cache["d_is_drough"])
    d_env_act += assets.prefiltered.sample_backward(cache["pre_cache"], d_is).reshape(-1, 3)

    d_env_raw = (d_env_act.reshape(assets.env.raw.shape)
                 * softplus_grad(assets.env.raw))
    return {"d_albedo": d_albedo, "d_roughness": d_rough, "d_metallic": d_metallic,
            "d_env_raw": d_env_raw, "d_illum": d_illum}


def shade_cloud(assets: ShadingAssets, cloud, cam_center):
    """Per-splat radiance for compositing: positions as shading points,
    stored normals, view directions toward the camera center."""
    xs = cloud.positions
    v = np.asarray(cam_center, dtype=np.float64)[None, :] - xs
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return shade_points(assets, xs, cloud.normals, v,
                        cloud.albedo, cloud.roughness, cloud.metallic)


def shade_point(assets: ShadingAssets, x, normal, view_dir, albedo,
                roughness, metallic) -> np.ndarray:
    """Single-point convenience wrapper around shade_points."""
    out, _ = shade_points(assets, np.asarray(x)[None], np.asarray(normal)[None],
                          np.asarray(view_dir)[None], np.asarray(albedo)[None],
                          np.atleast_1d(roughness), np.atleast_1d(metallic))
    return out[0]


def ambient_occlusion_values(assets: ShadingAssets, cloud) -> np.ndarray:
    """Per-splat hemisphere occlusion, for the AO visualization channel."""
    if assets.occlusion is None:
        return np.zeros(len(cloud))
    return baking.ambient_occlusion_batch(assets.occlusion, cloud.positions, cloud.normals)


# --------------------------------------------------------------------------
# Serialization


def save_shading_tables(path, lut: BrdfLut, prefiltered: PrefilteredEnv) -> None:
    arrays = {"brdf_lut": lut.table,
              "pre_levels": np.array([prefiltered.levels], dtype=np.float32)}
    for lv in range(prefiltered.levels):
        arrays[f"pre_{lv}"] = prefiltered.values[lv]
    formats.write_lut_container(path, arrays)


def load_shading_tables(path):
    arrays = formats.read_lut_container(path)
    lut = BrdfLut(arrays["brdf_lut"])
    levels = int(arrays["pre_levels"][0])
    vals = np.stack([arrays[f"pre_{lv}"] for lv in range(levels)])
    h, w = vals.shape[1:3]
    pre = PrefilteredEnv(operators=[None] * levels, values=vals, shape=(h, w))
    return lut, pre
