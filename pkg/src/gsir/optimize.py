"""Stage orchestration and the Adam optimizer.

Stage 1 fits geometry and appearance (positions, scales, rotations, normals,
opacity, color coefficients) against posed images with the color loss plus
the pseudo-normal penalty and normal smoothing. Stage 3 freezes those and
fits materials, the environment map, and (optionally) the baked illumination
coefficients against the same images through the shading path. Both loops
cycle full views in a seeded shuffled order and append one JSON line of loss
terms per iteration.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import baking, geometry, pbr
from .errors import GsirError, InvalidParameterError, PreconditionError
from .gaussians import GaussianCloud, sigmoid_grad
from .rasterizer import rasterize_backward, rasterize_forward


@dataclass
class AdamState:
    m: dict
    v: dict
    step_count: int = 0
    skipped: int = 0


class Adam:
    """Bias-corrected Adam over named parameter arrays (updated in place).

    Entries whose gradient is non-finite are skipped for that step (moments
    untouched) and counted in ``state.skipped``.
    """

    def __init__(self, params: dict, lrs: dict, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        missing = set(params) - set(lrs)
        if missing:
            raise InvalidParameterError(f"missing learning rates for {sorted(missing)}")
        self.params = params
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()})

    def step(self, grads: dict) -> None:
        st = self.state
        st.step_count += 1
        bc1 = 1.0 - self.beta1 ** st.step_count
        bc2 = 1.0 - self.beta2 ** st.step_count
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g)
            ok = np.isfinite(g)
            n_bad = int(g.size - ok.sum())
            if n_bad:
                st.skipped += n_bad
                g = np.where(ok, g, 0.0)
            m = st.m[name]
            v = st.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= np.where(ok, update, 0.0)


def adam_step(opt: Adam, grads: dict) -> dict:
    """One optimizer step; returns the (in-place updated) parameter dict."""
    opt.step(grads)
    return opt.params


# --------------------------------------------------------------------------
# Schedules


STAGE1_LRS = {
    "positions": 2e-3,
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "normals": 8e-3,
    "opacities_raw": 5e-2,
    "sh_coeffs": 5e-3,
}

STAGE3_LRS = {
    "albedo_raw": 3e-2,
    "roughness_raw": 3e-2,
    "metallic_raw": 3e-2,
    "env_raw": 2e-2,
    "illumination": 2e-3,
}


@dataclass
class StageSchedule:
    """Iteration counts, loss weights, and per-group learning rates."""

    stage1_iters: int = 2000
    stage3_iters: int = 1500
    lambda_normal_tv: float = 0.01
    lambda_material: float = 0.01
    lambda_env: float = 0.01
    depth_mode: str = "linear"
    seed: int = 0
    train_illumination: bool = True
    stage1_lrs: dict = field(default_factory=lambda: dict(STAGE1_LRS))
    stage3_lrs: dict = field(default_factory=lambda: dict(STAGE3_LRS))

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage3_iters < 0:
            raise InvalidParameterError("iteration counts must be nonnegative")
        for lam in (self.lambda_normal_tv, self.lambda_material, self.lambda_env):
            if lam < 0:
                raise InvalidParameterError("loss weights must be nonnegative")

    @classmethod
    def desk(cls, **kw) -> "StageSchedule":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "StageSchedule":
        kw.setdefault("stage1_iters", 30000)
        kw.setdefault("stage3_iters", 10000)
        return cls(**kw)


class _LossLog:
    def __init__(self, path=None):
        self.path = path
        self.rows = []
        self._fh = open(path, "w") if path else None
        self._nonfinite_streak = 0

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()
        if not np.isfinite(row["total"]):
            self._nonfinite_streak += 1
            if self._nonfinite_streak >= 2:
                self.close()
                raise GsirError(
                    f"total loss non-finite twice in a row at iteration {row['iteration']}")
        else:
            self._nonfinite_streak = 0

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _view_cycle(n_views: int, iters: int, seed: int):
    """Yield view indices: each epoch is a fresh seeded permutation."""
    rng = np.random.default_rng(seed)
    emitted = 0
    while emitted < iters:
        for idx in rng.permutation(n_views):
            if emitted >= iters:
                return
            yield int(idx)
            emitted += 1


# --------------------------------------------------------------------------
# Stage 1: geometry and appearance


def run_stage1(views, cloud: GaussianCloud, schedule: StageSchedule,
               log_path=None, progress=None):
    """Fit geometry/appearance parameters; material fields are untouched.

    ``views`` is a sequence of (Camera, target image (H, W, 3) in linear
    [0, 1]) pairs. Returns (cloud, history list of per-iteration loss dicts).
    """
    views = list(views)
    if not views:
        raise InvalidParameterError("stage 1 needs at least one posed view")
    opt = Adam(cloud.param_arrays(GaussianCloud.GEOMETRY_APPEARANCE),
               schedule.stage1_lrs)
    log = _LossLog(log_path)
    t0 = time.perf_counter()
    try:
        for it, vi in enumerate(_view_cycle(len(views), schedule.stage1_iters, schedule.seed)):
            cam, target = views[vi]
            bufs, cache = rasterize_forward(cloud, cam, channels=("color", "normal"),
                                            depth_mode=schedule.depth_mode)
            pseudo, pvalid = geometry.pseudo_normal_world(bufs.depth, cam, bufs.coverage)
            nmask = pvalid & bufs.coverage

            l_color, d_color = geometry.loss_color_grad(bufs.color, target)
            l_np, d_np = geometry.loss_normal_penalty_grad(bufs.normal_raw, pseudo, nmask)
            if schedule.lambda_normal_tv > 0.0:
                l_tv, d_tv = geometry.loss_tv_grad(bufs.normal_raw, bufs.coverage)
                d_normal = d_np + schedule.lambda_normal_tv * d_tv
            else:
                l_tv = 0.0
                d_normal = d_np
            total = l_color + l_np + schedule.lambda_normal_tv * l_tv

            # Normal supervision reaches the stored normal vectors only; the
            # compositing weights stay owned by the color objective.
            grads, _ = rasterize_backward(cache, {"color": d_color, "normal": d_normal},
                                          weight_detached=("normal",))
            opt.step({k: grads[k] for k in GaussianCloud.GEOMETRY_APPEARANCE})
            cloud.renormalize()

            log.append({"iteration": it, "total": float(total),
                        "color": float(l_color), "normal_penalty": float(l_np),
                        "normal_tv": float(l_tv),
                        "wall_time": time.perf_counter() - t0})
            if progress:
                progress(it, log.rows[-1])
    finally:
        log.close()
    return cloud, log.rows


# --------------------------------------------------------------------------
# Stage 3: materials, environment, illumination volumes


def run_stage3(views, cloud: GaussianCloud, occlusion: baking.VolumeGrid,
               illumination: baking.VolumeGrid, env: pbr.EnvironmentMap,
               schedule: StageSchedule, lut: pbr.BrdfLut | None = None,
               log_path=None, progress=None):
    """Decompose materials and lighting against shaded renders.

    Geometry and appearance stay bit-frozen; only albedo/roughness/metallic,
    environment texels, and (if enabled) illumination SH coefficients move.
    Returns (cloud, env, illumination, history).
    """
    views = list(views)
    if not views:
        raise InvalidParameterError("stage 3 needs at least one posed view")
    if occlusion is None or illumination is None:
        raise PreconditionError("stage 3 requires baked occlusion/illumination volumes")
    if lut is None:
        lut = pbr.precompute_env_brdf_lut()
    prefiltered = pbr.prefilter_environment(env)
    assets = pbr.ShadingAssets(env=env, lut=lut, prefiltered=prefiltered,
                               occlusion=occlusion, illumination=illumination)

    frozen = {k: getattr(cloud, k).copy() for k in GaussianCloud.GEOMETRY_APPEARANCE}

    params = {"albedo_raw": cloud.albedo_raw, "roughness_raw": cloud.roughness_raw,
              "metallic_raw": cloud.metallic_raw, "env_raw": env.raw}
    lrs = dict(schedule.stage3_lrs)
    if schedule.train_illumination:
        params["illumination"] = illumination.coeffs
    opt = Adam(params, lrs)

    material_channels = ("albedo", "roughness", "metallic")
    log = _LossLog(log_path)
    t0 = time.perf_counter()
    try:
        for it, vi in enumerate(_view_cycle(len(views), schedule.stage3_iters, schedule.seed)):
            cam, target = views[vi]
            radiance, shade_cache = pbr.shade_cloud(assets, cloud, cam.center)
            bufs, cache = rasterize_forward(
                cloud, cam, channels=("pbr",) + material_channels,
                custom={"pbr": radiance}, depth_mode=schedule.depth_mode)

            diff = bufs.channels["pbr"] - target
            l_shade = float(np.abs(diff).mean())
            d_shade = np.sign(diff) / diff.size

            upstream = {"pbr": d_shade}
            l_mat = 0.0
            if schedule.lambda_material > 0.0:
                mat_map = np.concatenate([bufs.channels[c] for c in material_channels], axis=2)
                l_mat, d_mat = geometry.loss_tv_grad(mat_map, bufs.coverage)
                upstream["albedo"] = schedule.lambda_material * d_mat[:, :, 0:3]
                upstream["roughness"] = schedule.lambda_material * d_mat[:, :, 3:4]
                upstream["metallic"] = schedule.lambda_material * d_mat[:, :, 4:5]
            l_env = 0.0
            d_env_raw_tv = 0.0
            if schedule.lambda_env > 0.0:
                l_env, d_env_act = geometry.loss_tv_grad(env.radiance)
                d_env_raw_tv = schedule.lambda_env * d_env_act * pbr.softplus_grad(env.raw)

            total = l_shade + schedule.lambda_material * l_mat + schedule.lambda_env * l_env

            grads, extras = rasterize_backward(cache, upstream)
            sgrads = pbr.shade_points_backward(assets, shade_cache,
                                               extras["custom"]["pbr"],
                                               train_illumination=schedule.train_illumination)
            step_grads = {
                "albedo_raw": grads["albedo_raw"]
                    + sgrads["d_albedo"] * sigmoid_grad(cloud.albedo_raw),
                "roughness_raw": grads["roughness_raw"]
                    + sgrads["d_roughness"] * sigmoid_grad(cloud.roughness_raw),
                "metallic_raw": grads["metallic_raw"]
                    + sgrads["d_metallic"] * sigmoid_grad(cloud.metallic_raw),
                "env_raw": sgrads["d_env_raw"] + d_env_raw_tv,
            }
            if schedule.train_illumination:
                step_grads["illumination"] = sgrads["d_illum"]
            opt.step(step_grads)
            assets.refresh()

            log.append({"iteration": it, "total": float(total),
                        "shade": l_shade, "material_tv": float(l_mat),
                        "light_tv": float(l_env),
                        "wall_time": time.perf_counter() - t0})
            if progress:
                progress(it, log.rows[-1])
    finally:
        log.close()

    for k, ref in frozen.items():
        if not np.array_equal(ref, getattr(cloud, k)):
            raise GsirError(f"frozen parameter '{k}' changed during stage 3")
    return cloud, env, illumination, log.rows
