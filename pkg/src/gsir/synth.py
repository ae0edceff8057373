"""Synthetic scenes with analytic ground truth.

Three generators: a sphere seen from an orbit of outside cameras, a box, and
a (partial) shell seen from inside. Each returns a splat cloud whose
positions/normals/materials follow closed-form functions of position, plus
analytic per-ray depth and normal oracles for evaluation, and a smooth
low-frequency environment map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .cameras import Camera, look_at
from .errors import InvalidParameterError
from .gaussians import GaussianCloud, logit
from .pbr import EnvironmentMap, latlong_dirs

SYNTH_KINDS = ("sphere", "box", "shell")


def fibonacci_sphere(n: int, z_lo: float = -1.0) -> np.ndarray:
    """Near-uniform points on the unit sphere band z in [z_lo, 1]."""
    idx = np.arange(n) + 0.5
    z = 1.0 - (idx / n) * (1.0 - z_lo)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * idx
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def quat_from_z_to(dirs: np.ndarray) -> np.ndarray:
    """Shortest-arc quaternions rotating +z onto each direction."""
    dirs = np.asarray(dirs, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    c = dirs[:, 2]
    axis = np.cross(np.tile(z, (len(dirs), 1)), dirs)
    s = np.linalg.norm(axis, axis=1)
    quats = np.zeros((len(dirs), 4))
    ok = s > 1e-9
    half = np.arccos(np.clip(c[ok], -1.0, 1.0)) / 2.0
    quats[ok, 0] = np.cos(half)
    quats[ok, 1:] = np.sin(half)[:, None] * axis[ok] / s[ok, None]
    quats[~ok & (c > 0)] = [1.0, 0.0, 0.0, 0.0]
    quats[~ok & (c <= 0)] = [0.0, 1.0, 0.0, 0.0]
    return quats


def albedo_pattern(pts: np.ndarray) -> np.ndarray:
    """Smooth closed-form albedo in [0.15, 0.85]^3 as a function of position."""
    p = np.asarray(pts, dtype=np.float64)
    r = 0.5 + 0.35 * np.sin(3.0 * p[:, 2])
    g = 0.5 + 0.35 * np.sin(2.0 * p[:, 0] + 1.0)
    b = 0.5 + 0.35 * np.cos(2.5 * p[:, 1] - 0.5)
    return np.stack([r, g, b], axis=1)


def roughness_pattern(pts: np.ndarray) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    return 0.5 + 0.3 * np.cos(2.0 * p[:, 0] + 1.5 * p[:, 1])


def metallic_pattern(pts: np.ndarray) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    return 0.25 + 0.2 * np.sin(2.0 * p[:, 1] + p[:, 2])


def smooth_environment(seed: int, shape=(16, 32), base: float = 0.35) -> EnvironmentMap:
    """Low-frequency positive environment: a few random diffuse lobes."""
    rng = np.random.default_rng(seed)
    dirs = latlong_dirs(*shape)
    rad = np.full(shape + (3,), base)
    for _ in range(3):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        color = rng.uniform(0.3, 1.4, 3)
        rad += color * np.maximum(dirs @ axis, 0.0)[..., None] ** 2
    return EnvironmentMap.from_radiance(rad)


@dataclass
class SynthScene:
    kind: str
    cloud: GaussianCloud
    env: EnvironmentMap
    params: dict

    # analytic oracles -----------------------------------------------------

    def ray_hit(self, origins: np.ndarray, dirs: np.ndarray):
        """First-hit distance t (inf where missed) and world normals."""
        if self.kind in ("sphere", "shell"):
            r = self.params["radius"]
            inside = self.kind == "shell"
            oc = origins
            b = -np.einsum("nd,nd->n", dirs, oc)
            disc = b ** 2 - (np.einsum("nd,nd->n", oc, oc) - r * r)
            ok = disc > 0
            sq = np.sqrt(np.maximum(disc, 0.0))
            t = b + sq if inside else b - sq
            ok &= t > 0
            pts = origins + t[:, None] * dirs
            normals = pts / r
            if inside:
                normals = -normals
                cap = pts[:, 2] / r >= self.params["z_lo"] - 1e-9
                ok &= cap
            t = np.where(ok, t, np.inf)
            return t, normals
        if self.kind == "box":
            half = self.params["half_extent"]
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
            t1 = (-half - origins) * inv
            t2 = (half - origins) * inv
            tmin = np.minimum(t1, t2).max(axis=1)
            tmax = np.maximum(t1, t2).min(axis=1)
            ok = (tmax > np.maximum(tmin, 0.0))
            t = np.where(tmin > 0, tmin, tmax)
            ok &= t > 0
            pts = origins + t[:, None] * dirs
            ax = np.argmax(np.abs(pts) / half, axis=1)
            normals = np.zeros_like(pts)
            normals[np.arange(len(pts)), ax] = np.sign(pts[np.arange(len(pts)), ax])
            t = np.where(ok, t, np.inf)
            return t, normals
        raise InvalidParameterError(f"unknown kind {self.kind}")

    def analytic_maps(self, cam: Camera):
        """Ground-truth depth/normal/albedo maps for a camera.

        Returns dict with depth (camera z), normal (world), albedo, mask.
        """
        rays_cam = cam.pixel_rays().reshape(-1, 3)
        rays_world = rays_cam @ cam.rotation
        origin = np.tile(cam.center, (len(rays_world), 1))
        t, normals = self.ray_hit(origin, rays_world)
        hit = np.isfinite(t)
        pts = origin + np.where(hit, t, 0.0)[:, None] * rays_world
        depth = np.where(hit, t * rays_cam[:, 2], cam.far)
        h, w = cam.height, cam.width
        alb = albedo_pattern(pts)
        alb[~hit] = 0.0
        normals = np.where(hit[:, None], normals, 0.0)
        return {
            "depth": depth.reshape(h, w),
            "normal": normals.reshape(h, w, 3),
            "albedo": alb.reshape(h, w, 3),
            "mask": hit.reshape(h, w),
        }

    def cameras(self, n_views: int, width: int, height: int,
                fov_deg: float = 50.0, ring_radius: float | None = None,
                near: float = 0.02, far: float = 50.0, seed: int = 0):
        """Deterministic camera orbit appropriate for the scene kind."""
        fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        cams = []
        rng = np.random.default_rng(seed)
        if self.kind == "shell":
            r_cam = 0.25 * self.params["radius"]
            targets = fibonacci_sphere(n_views, z_lo=-0.4)
            for i in range(n_views):
                eye = r_cam * 0.4 * rng.normal(size=3)
                eye = np.clip(eye, -r_cam, r_cam)
                w2c = look_at(eye, eye + targets[i] * self.params["radius"])
                cams.append(Camera(fx=fx, fy=fx, cx=width / 2, cy=height / 2,
                                   width=width, height=height, world_to_cam=w2c,
                                   near=near, far=far))
            return cams
        dist = ring_radius if ring_radius is not None else 3.0 * self.params.get("radius", 1.0)
        eyes = fibonacci_sphere(n_views, z_lo=-0.6) * dist
        for eye in eyes:
            w2c = look_at(eye, np.zeros(3))
            cams.append(Camera(fx=fx, fy=fx, cx=width / 2, cy=height / 2,
                               width=width, height=height, world_to_cam=w2c,
                               near=near, far=far))
        return cams


def synth_scene(kind: str, params: dict | None = None, seed: int = 0) -> SynthScene:
    """Build a synthetic scene cloud with analytic ground truth.

    sphere: n, radius, opacity; splat centers lie exactly on the sphere and
    normals are radial. box: n, half_extent. shell: n, radius, coverage
    (fraction of the sphere carrying splats), normals point inward.
    """
    params = dict(params or {})
    if kind not in SYNTH_KINDS:
        raise InvalidParameterError(f"kind must be one of {SYNTH_KINDS}")
    n = int(params.setdefault("n", 500))
    if n < 8:
        raise InvalidParameterError("need at least 8 Gaussians")
    opacity = float(params.setdefault("opacity", 0.95))
    rng = np.random.default_rng(seed)

    if kind in ("sphere", "shell"):
        radius = float(params.setdefault("radius", 1.0))
        coverage = float(params.setdefault("coverage", 1.0 if kind == "sphere" else 0.75))
        z_lo = 1.0 - 2.0 * coverage
        params["z_lo"] = z_lo
        unit = fibonacci_sphere(n, z_lo=z_lo)
        pts = unit * radius
        outward = unit
        normals = outward if kind == "sphere" else -outward
        quats = quat_from_z_to(outward)
        area = 4.0 * np.pi * radius ** 2 * coverage / n
        tang = 1.5 * math.sqrt(area)
        scales = np.tile([tang, tang, 0.1 * tang], (n, 1))
    else:
        half = float(params.setdefault("half_extent", 1.0))
        per_face = n // 6
        rest = n - 5 * per_face
        pts_list, nrm_list = [], []
        for axis in range(3):
            for sign in (1.0, -1.0):
                cnt = rest if (axis, sign) == (2, -1.0) else per_face
                uv = rng.uniform(-half, half, (cnt, 2))
                p = np.zeros((cnt, 3))
                others = [a for a in range(3) if a != axis]
                p[:, others[0]] = uv[:, 0]
                p[:, others[1]] = uv[:, 1]
                p[:, axis] = sign * half
                nrm = np.zeros((cnt, 3))
                nrm[:, axis] = sign
                pts_list.append(p)
                nrm_list.append(nrm)
        pts = np.concatenate(pts_list)
        normals = np.concatenate(nrm_list)
        quats = quat_from_z_to(normals)
        area = 6.0 * (2 * half) ** 2 / n
        tang = 1.5 * math.sqrt(area)
        scales = np.tile([tang, tang, 0.1 * tang], (n, 1))

    alb = albedo_pattern(pts)
    coeffs = np.zeros((n, 1, 3))
    coeffs[:, 0, :] = sh.rgb_to_dc(alb)

    cloud = GaussianCloud(
        positions=pts,
        log_scales=np.log(scales),
        rotations=quats,
        normals=normals,
        opacities_raw=logit(np.full(n, opacity)),
        sh_coeffs=coeffs,
        albedo_raw=logit(alb),
        roughness_raw=logit(np.clip(roughness_pattern(pts), 1e-3, 1 - 1e-3)),
        metallic_raw=logit(np.clip(metallic_pattern(pts), 1e-3, 1 - 1e-3)),
    )
    env = smooth_environment(seed, base=0.35)
    return SynthScene(kind=kind, cloud=cloud, env=env, params=params)


def random_init_cloud(n: int, bounds_min, bounds_max, seed: int = 1,
                      color_degree: int = 1, opacity: float = 0.5,
                      scale: float | None = None) -> GaussianCloud:
    """Agnostic fitting start: uniform positions, random normals, gray color."""
    if n < 8:
        raise InvalidParameterError("need at least 8 Gaussians")
    rng = np.random.default_rng(seed)
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    pts = rng.uniform(bounds_min, bounds_max, (n, 3))
    if scale is None:
        vol = float(np.prod(bounds_max - bounds_min))
        scale = 0.8 * (vol / n) ** (1.0 / 3.0)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    k = (color_degree + 1) ** 2
    coeffs = np.zeros((n, k, 3))
    cloud = GaussianCloud(
        positions=pts,
        log_scales=np.log(np.full((n, 3), scale)),
        rotations=quats,
        normals=normals,
        opacities_raw=logit(np.full(n, opacity)),
        sh_coeffs=coeffs,
        albedo_raw=logit(np.full((n, 3), 0.5)),
        roughness_raw=logit(np.full(n, 0.9)),
        metallic_raw=logit(np.full(n, 1e-2)),
    )
    return cloud
