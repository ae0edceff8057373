import numpy as np
import pytest

from gsir.cameras import Camera, look_at
from gsir.gaussians import GaussianCloud, logit


def make_cloud(rng, n, deg=1, spread=0.6, z_range=(1.5, 3.0),
               alpha_range=(0.2, 0.65), scale_range=(0.05, 0.35)):
    """Random cloud in front of a z-forward camera at the origin."""
    pos = np.empty((n, 3))
    pos[:, 0] = rng.uniform(-spread, spread, n)
    pos[:, 1] = rng.uniform(-spread, spread, n)
    pos[:, 2] = rng.uniform(*z_range, n)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    k = (deg + 1) ** 2
    sh = 0.3 * rng.normal(size=(n, k, 3))
    return GaussianCloud(
        positions=pos,
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        rotations=q,
        normals=nrm,
        opacities_raw=logit(rng.uniform(*alpha_range, n)),
        sh_coeffs=sh,
        albedo_raw=logit(rng.uniform(0.2, 0.8, (n, 3))),
        roughness_raw=logit(rng.uniform(0.2, 0.8, n)),
        metallic_raw=logit(rng.uniform(0.1, 0.9, n)),
    )


def make_camera(width=32, height=32, f=24.0, near=0.1, far=50.0,
                cx=None, cy=None):
    return Camera(fx=f, fy=f,
                  cx=width / 2.0 if cx is None else cx,
                  cy=height / 2.0 if cy is None else cy,
                  width=width, height=height, world_to_cam=np.eye(4),
                  near=near, far=far)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
