"""Pinhole cameras and pose conventions.

Internal convention: camera space is x-right, y-down, z-forward (points with
z > 0 are in front of the camera); pixel (row, col) samples the image plane
at (x=col, y=row). External pose files use the y-up/z-backward convention of
common synthetic datasets and are converted on load (see ``sceneio``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # 4x4, row-major
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidParameterError("require 0 < near < far")
        w2c = np.asarray(self.world_to_cam, dtype=np.float64)
        if w2c.shape != (4, 4) or not np.all(np.isfinite(w2c)):
            raise InvalidParameterError("world_to_cam must be a finite 4x4 matrix")
        r = w2c[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise InvalidParameterError("rotation block is not orthonormal within 1e-6")
        object.__setattr__(self, "world_to_cam", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def intrinsics(self) -> np.ndarray:
        k = np.eye(3)
        k[0, 0], k[1, 1] = self.fx, self.fy
        k[0, 2], k[1, 2] = self.cx, self.cy
        return k

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) unit ray directions in camera space, one per pixel."""
        cols = np.arange(self.width, dtype=np.float64)
        rows = np.arange(self.height, dtype=np.float64)
        xs = (cols[None, :] - self.cx) / self.fx
        ys = (rows[:, None] - self.cy) / self.fy
        d = np.stack([np.broadcast_to(xs, (self.height, self.width)),
                      np.broadcast_to(ys, (self.height, self.width)),
                      np.ones((self.height, self.width))], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def look_at(eye, target, up=(0.0, 0.0, 1.0), **kw) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise InvalidParameterError("eye and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)  # y axis points down in camera space
    r = np.stack([right, down, fwd], axis=0)
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ eye
    return w2c


def camera_from_rows(rows: np.ndarray, eye, fx, fy, cx, cy, width, height,
                     near=0.01, far=100.0) -> Camera:
    """Build a camera from explicit camera-axis rows (x, y, z as world vectors)."""
    w2c = np.eye(4)
    w2c[:3, :3] = rows
    w2c[:3, 3] = -np.asarray(rows) @ np.asarray(eye, dtype=np.float64)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  world_to_cam=w2c, near=near, far=far)


# Conversion between the y-up/z-backward pose convention of synthetic
# dataset files and the internal y-down/z-forward one: flip the camera's
# local y and z axes.
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def cam_to_world_gl_to_w2c(c2w_gl: np.ndarray) -> np.ndarray:
    """Convert a camera-to-world pose (y-up/z-backward) to internal world-to-camera."""
    c2w = np.asarray(c2w_gl, dtype=np.float64) @ GL_TO_CV
    r = c2w[:3, :3]
    t = c2w[:3, 3]
    w2c = np.eye(4)
    w2c[:3, :3] = r.T
    w2c[:3, 3] = -r.T @ t
    return w2c


def w2c_to_cam_to_world_gl(w2c: np.ndarray) -> np.ndarray:
    w2c = np.asarray(w2c, dtype=np.float64)
    r = w2c[:3, :3]
    t = w2c[:3, 3]
    c2w = np.eye(4)
    c2w[:3, :3] = r.T
    c2w[:3, 3] = -r.T @ t
    return c2w @ GL_TO_CV
