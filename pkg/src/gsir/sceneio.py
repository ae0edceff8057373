"""Dataset and asset ingestion/egress: splat PLY files, camera JSON, PNG
images (sRGB 8-bit), and scene datasets.

PLY schema (binary little-endian, one vertex element): x, y, z,
scale_0..2 (log space), rot_0..3 (w, x, y, z), opacity (logit),
f_dc_0..2, f_rest_* (channel-major: all coefficients of R, then G, then B),
nx, ny, nz, albedo_0..2 (logit), roughness (logit), metallic (logit).
Files from plain splatting tools (no materials, zero normals) load with
documented defaults. Byte layouts live in docs/formats.md.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, cam_to_world_gl_to_w2c, w2c_to_cam_to_world_gl
from .errors import InvalidParameterError, SchemaError
from .gaussians import GaussianCloud, logit, quat_to_rotmat

DEFAULT_ALBEDO = 0.5
DEFAULT_ROUGHNESS = 0.9
DEFAULT_METALLIC = 0.0
_MATERIAL_PROPS = ("albedo_0", "albedo_1", "albedo_2", "roughness", "metallic")


# --------------------------------------------------------------------------
# PLY


def _ply_property_names(cloud: GaussianCloud):
    k_rest = cloud.sh_coeffs.shape[1] - 1
    names = ["x", "y", "z"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += ["opacity"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * k_rest)]
    names += ["nx", "ny", "nz"]
    names += [f"albedo_{i}" for i in range(3)]
    names += ["roughness", "metallic"]
    return names


def save_gaussian_ply(path, cloud: GaussianCloud) -> None:
    n = len(cloud)
    k_rest = cloud.sh_coeffs.shape[1] - 1
    cols = [cloud.positions, np.asarray(cloud.log_scales), cloud.rotations,
            cloud.opacities_raw[:, None], cloud.sh_coeffs[:, 0, :],
            cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * k_rest),
            cloud.normals, cloud.albedo_raw, cloud.roughness_raw[:, None],
            cloud.metallic_raw[:, None]]
    data = np.concatenate(cols, axis=1).astype("<f4")
    names = _ply_property_names(cloud)
    if data.shape[1] != len(names):
        raise SchemaError("property layout mismatch")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def _parse_ply_header(f):
    line = f.readline().strip()
    if line != b"ply":
        raise SchemaError("not a PLY file")
    fmt = None
    count = None
    props = []
    in_vertex = False
    while True:
        line = f.readline()
        if not line:
            raise SchemaError("PLY header truncated")
        parts = line.decode("ascii", "replace").strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise SchemaError(f"unsupported property type {parts[1]}")
            props.append(parts[2])
        elif parts[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise SchemaError(f"unsupported PLY format {fmt}")
    if count is None:
        raise SchemaError("PLY lacks a vertex element")
    return count, props


def load_gaussian_ply(path) -> GaussianCloud:
    """Load a splat cloud; tolerate files without normals/materials.

    Absent normals (or all-zero ones) are initialized to the rotated axis of
    the smallest scale; absent material blocks get documented defaults. A
    partially present material block is a schema error naming the missing
    properties.
    """
    with open(path, "rb") as f:
        count, props = _parse_ply_header(f)
        raw = np.frombuffer(f.read(count * len(props) * 4), dtype="<f4")
    if raw.size != count * len(props):
        raise SchemaError(f"{path}: vertex payload truncated")
    table = raw.reshape(count, len(props)).astype(np.float64)
    col = {name: i for i, name in enumerate(props)}

    def need(names):
        missing = [nm for nm in names if nm not in col]
        if missing:
            raise SchemaError(f"{path}: missing properties {missing}")
        return np.stack([table[:, col[nm]] for nm in names], axis=1)

    pos = need(["x", "y", "z"])
    scales = need(["scale_0", "scale_1", "scale_2"])
    rots = need(["rot_0", "rot_1", "rot_2", "rot_3"])
    opac = need(["opacity"])[:, 0]
    f_dc = need(["f_dc_0", "f_dc_1", "f_dc_2"])
    rest_names = sorted((nm for nm in props if nm.startswith("f_rest_")),
                        key=lambda s: int(s.split("_")[-1]))
    k_rest3 = len(rest_names)
    if k_rest3 % 3 != 0:
        raise SchemaError(f"{path}: f_rest count {k_rest3} is not divisible by 3")
    k_rest = k_rest3 // 3
    k_total = k_rest + 1
    deg = int(math.isqrt(k_total)) - 1
    if (deg + 1) ** 2 != k_total:
        raise SchemaError(f"{path}: {k_total} SH coefficients is not a full degree")
    coeffs = np.zeros((count, k_total, 3))
    coeffs[:, 0, :] = f_dc
    if k_rest:
        rest = np.stack([table[:, col[nm]] for nm in rest_names], axis=1)
        coeffs[:, 1:, :] = rest.reshape(count, 3, k_rest).transpose(0, 2, 1)

    for nm in props:
        ci = col[nm]
        bad = ~np.isfinite(table[:, ci])
        if bad.any():
            row = int(np.argmax(bad))
            raise SchemaError(f"{path}: non-finite value in '{nm}' at vertex {row}")

    have_normals = all(nm in col for nm in ("nx", "ny", "nz"))
    if have_normals:
        normals = need(["nx", "ny", "nz"])
        if not np.any(np.abs(normals) > 1e-12):
            have_normals = False
    if not have_normals:
        # flattest-direction rule: the rotated axis of the smallest scale
        r = quat_to_rotmat(rots)
        flat_axis = np.argmin(scales, axis=1)
        normals = r[np.arange(count), :, flat_axis]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(norms, 1e-12)

    present = [nm for nm in _MATERIAL_PROPS if nm in col]
    if not present:
        albedo_raw = np.full((count, 3), logit(DEFAULT_ALBEDO))
        rough_raw = np.full(count, logit(DEFAULT_ROUGHNESS))
        metal_raw = np.full(count, logit(np.maximum(DEFAULT_METALLIC, 1e-4)))
    elif len(present) != len(_MATERIAL_PROPS):
        missing = [nm for nm in _MATERIAL_PROPS if nm not in col]
        raise SchemaError(f"{path}: partial material block, missing {missing}")
    else:
        albedo_raw = need(["albedo_0", "albedo_1", "albedo_2"])
        rough_raw = need(["roughness"])[:, 0]
        metal_raw = need(["metallic"])[:, 0]

    return GaussianCloud(
        positions=pos, log_scales=scales, rotations=rots, normals=normals,
        opacities_raw=opac, sh_coeffs=coeffs, albedo_raw=albedo_raw,
        roughness_raw=rough_raw, metallic_raw=metal_raw)


# --------------------------------------------------------------------------
# Camera JSON (synthetic-dataset layout: camera_angle_x + per-frame
# camera-to-world matrices in the y-up/z-backward convention)


def save_cameras(path, cams: list, file_paths: list | None = None) -> None:
    if not cams:
        raise InvalidParameterError("no cameras to save")
    first = cams[0]
    fov_x = 2.0 * math.atan(first.width / (2.0 * first.fx))
    frames = []
    for i, cam in enumerate(cams):
        frames.append({
            "file_path": file_paths[i] if file_paths else f"./r_{i}",
            "transform_matrix": w2c_to_cam_to_world_gl(cam.world_to_cam).tolist(),
            "fl_x": cam.fx, "fl_y": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "w": cam.width, "h": cam.height,
        })
    payload = {"camera_angle_x": fov_x, "near": first.near, "far": first.far,
               "frames": frames}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_cameras(path, width: int | None = None, height: int | None = None,
                 near: float | None = None, far: float | None = None):
    """Parse a camera file; returns (cameras, file_paths) in file order."""
    with open(path) as f:
        payload = json.load(f)
    if "frames" not in payload:
        raise SchemaError(f"{path}: no frames array")
    g_near = near if near is not None else float(payload.get("near", 0.01))
    g_far = far if far is not None else float(payload.get("far", 100.0))
    cams, paths = [], []
    for i, fr in enumerate(payload["frames"]):
        try:
            mat = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"{path}: frame {i} has no parseable transform") from exc
        if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
            raise SchemaError(f"{path}: frame {i} transform is not a finite 4x4")
        if abs(np.linalg.det(mat[:3, :3])) < 1e-9:
            raise SchemaError(f"{path}: frame {i} transform is not invertible")
        w = int(fr.get("w", width or 0))
        h = int(fr.get("h", height or 0))
        if w <= 0 or h <= 0:
            raise SchemaError(f"{path}: frame {i} lacks image dimensions")
        if "fl_x" in fr:
            fx = float(fr["fl_x"])
            fy = float(fr.get("fl_y", fx))
            cx = float(fr.get("cx", w / 2.0))
            cy = float(fr.get("cy", h / 2.0))
        elif "camera_angle_x" in payload:
            fx = fy = w / (2.0 * math.tan(float(payload["camera_angle_x"]) / 2.0))
            cx, cy = w / 2.0, h / 2.0
        else:
            raise SchemaError(f"{path}: frame {i} has no intrinsics")
        cams.append(Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                           world_to_cam=cam_to_world_gl_to_w2c(mat),
                           near=g_near, far=g_far))
        paths.append(fr.get("file_path", f"./r_{i}"))
    return cams, paths


# --------------------------------------------------------------------------
# Images: 8-bit PNG carries sRGB, floating formats are linear


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(encoded, dtype=np.float64), 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def save_png(path, linear: np.ndarray) -> None:
    img = srgb_encode(linear)
    arr = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(arr)


# --------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class SceneDataset:
    """Posed views plus optional per-view ground truth maps."""

    root: Path
    cameras: tuple
    image_paths: tuple

    def __len__(self):
        return len(self.cameras)

    def view(self, i: int):
        cam = self.cameras[i]
        img = load_png(self.image_paths[i])
        if img.shape[:2] != (cam.height, cam.width):
            raise SchemaError(
                f"{self.image_paths[i]}: image is {img.shape[:2]}, camera expects "
                f"{(cam.height, cam.width)}")
        return cam, img

    def views(self):
        return [self.view(i) for i in range(len(self))]

    def gt_path(self, i: int, channel: str):
        p = self.root / "gt" / f"{channel}_{i:03d}.pfm"
        return p if p.exists() else None


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    tj = root / "transforms.json"
    if not tj.exists():
        raise SchemaError(f"{root} has no transforms.json")
    cams, rels = load_cameras(tj)
    img_paths = []
    for rel in rels:
        p = root / rel
        if p.suffix == "":
            p = p.with_suffix(".png")
        if not p.exists():
            raise SchemaError(f"dataset image missing: {p}")
        img_paths.append(p)
    return SceneDataset(root=root, cameras=tuple(cams), image_paths=tuple(img_paths))
