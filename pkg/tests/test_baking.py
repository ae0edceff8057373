import numpy as np
import pytest

from gsir import sh
from gsir.baking import (BakeConfig, VolumeGrid, bake_volumes, cube_dirs,
                         cube_solid_angles, direction_to_texel,
                         masked_trilinear_coeffs, occlusion_from_depth,
                         query_ambient_occlusion, query_indirect_irradiance,
                         query_occlusion, render_cell_cubemaps,
                         sh_project_cubemap, trilinear_coeffs)
from gsir.gaussians import GaussianCloud, logit


def empty_cloud():
    return GaussianCloud(
        positions=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)), normals=np.zeros((0, 3)),
        opacities_raw=np.zeros(0), sh_coeffs=np.zeros((0, 1, 3)),
        albedo_raw=np.zeros((0, 3)), roughness_raw=np.zeros(0),
        metallic_raw=np.zeros(0))


def shell_cloud(radius=1.0, n=600, opacity=0.995, color=(0.8, 0.6, 0.4), seed=3,
                coverage=1.0):
    """Splats tiling (part of) a sphere, oriented tangent to the surface."""
    rng = np.random.default_rng(seed)
    idx = np.arange(n) + 0.5
    z_lo = 1.0 - 2.0 * coverage
    z = 1.0 - (idx / n) * (1.0 - z_lo)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * idx
    r_xy = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    pts = np.stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z], axis=1)
    normals = -pts  # inward
    # quaternion rotating +z to the outward radial direction
    quats = np.empty((n, 4))
    for i, d in enumerate(pts):
        axis = np.cross([0.0, 0.0, 1.0], d)
        s = np.linalg.norm(axis)
        c = d[2]
        if s < 1e-9:
            quats[i] = [1.0, 0, 0, 0] if c > 0 else [0.0, 1.0, 0, 0]
        else:
            half = np.arccos(np.clip(c, -1, 1)) / 2.0
            quats[i] = np.concatenate([[np.cos(half)], np.sin(half) * axis / s])
    # tangential footprint sized to overlap neighbors, thin radially
    area = 4.0 * np.pi * radius ** 2 * coverage / n
    tang = 1.6 * np.sqrt(area)
    scales = np.tile([tang, tang, tang * 0.1], (n, 1))
    coeffs = np.zeros((n, 1, 3))
    coeffs[:, 0, :] = sh.rgb_to_dc(np.asarray(color))
    return GaussianCloud(
        positions=pts * radius, log_scales=np.log(scales), rotations=quats,
        normals=normals, opacities_raw=logit(np.full(n, opacity)),
        sh_coeffs=coeffs, albedo_raw=logit(np.full((n, 3), 0.5)),
        roughness_raw=logit(np.full(n, 0.5)), metallic_raw=logit(np.full(n, 0.1)))


class TestCubemapGeometry:
    def test_solid_angles_sum_to_4pi(self):
        for res in (16, 32, 64):
            total = cube_solid_angles(res).sum()
            assert total == pytest.approx(4.0 * np.pi, abs=1e-4)

    def test_direction_partition(self, rng):
        # every random direction maps to exactly one texel, and the texel's
        # center direction maps back to the same texel
        res = 16
        dirs = cube_dirs(res)
        for _ in range(200):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            face, row, col = direction_to_texel(d, res)
            center = dirs[face, row, col]
            f2, r2, c2 = direction_to_texel(center, res)
            assert (face, row, col) == (f2, r2, c2)

    def test_plus_x_maps_to_plus_x_face_center(self):
        res = 17  # odd so the face has an exact central texel
        face, row, col = direction_to_texel(np.array([1.0, 0.0, 0.0]), res)
        assert face == 0
        assert row == res // 2 and col == res // 2

    def test_texel_dirs_unit(self):
        d = cube_dirs(8)
        np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)


class TestShProjection:
    def test_constant_cubemap_dc(self):
        cm = np.ones((6, 32, 32))
        coeffs = sh_project_cubemap(cm, deg=2)
        assert coeffs[0] == pytest.approx(2.0 * np.sqrt(np.pi), abs=1e-3)
        assert np.abs(coeffs[1:]).max() < 1e-3

    def test_clamped_cosine_reconstruction(self, rng):
        res = 64
        dirs = cube_dirs(res)
        cm = np.maximum(dirs[..., 2], 0.0)
        coeffs = sh_project_cubemap(cm, deg=2)
        probe = rng.normal(size=(1000, 3))
        probe /= np.linalg.norm(probe, axis=1, keepdims=True)
        recon = sh._sh_eval_unchecked(2, probe) @ coeffs
        ref = np.maximum(probe[:, 2], 0.0)
        rms = np.sqrt(np.mean((recon - ref) ** 2))
        assert rms < 0.05

    def test_basis_function_projects_to_unit_coefficient(self):
        res = 64
        dirs = cube_dirs(res)
        y10 = sh._sh_eval_unchecked(1, dirs.reshape(-1, 3))[:, 2].reshape(6, res, res)
        coeffs = sh_project_cubemap(y10, deg=2)
        assert coeffs[2] == pytest.approx(1.0, abs=1e-2)
        others = np.delete(coeffs, 2)
        assert np.abs(others).max() < 1e-2

    def test_rgb_cubemap_shape(self):
        cm = np.random.default_rng(0).random((6, 8, 8, 3))
        coeffs = sh_project_cubemap(cm, deg=1)
        assert coeffs.shape == (4, 3)


class TestCellRendering:
    def test_empty_cloud_sentinel(self):
        depth, radiance, coverage = render_cell_cubemaps(empty_cloud(), np.zeros(3),
                                                         face_res=8, far=100.0)
        assert np.all(depth == 100.0)
        assert np.all(radiance == 0.0)
        assert not coverage.any()

    def test_single_wall_along_plus_x(self):
        from gsir import sh as shm
        coeffs = np.zeros((1, 1, 3))
        coeffs[0, 0] = shm.rgb_to_dc(np.array([1.0, 0.2, 0.2]))
        cloud = GaussianCloud(
            positions=np.array([[2.0, 0.0, 0.0]]),
            log_scales=np.log([[0.02, 3.0, 3.0]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            normals=np.array([[-1.0, 0, 0]]),
            opacities_raw=logit(np.array([0.999])),
            sh_coeffs=coeffs,
            albedo_raw=np.zeros((1, 3)), roughness_raw=np.zeros(1),
            metallic_raw=np.zeros(1))
        res = 17
        depth, radiance, coverage = render_cell_cubemaps(cloud, np.zeros(3),
                                                         face_res=res, far=100.0)
        c = res // 2
        assert depth[0, c, c] == pytest.approx(2.0, rel=1e-3)
        assert coverage[0, c, c]
        assert not coverage[1, c, c]          # -X face sees nothing
        assert depth[1, c, c] == 100.0

    def test_occlusion_threshold(self):
        depth = np.array([[[0.5, 5.0]]])
        occ = occlusion_from_depth(depth, tau=1.0)
        np.testing.assert_array_equal(occ, [[[1.0, 0.0]]])
        cov = np.array([[[False, True]]])
        occ2 = occlusion_from_depth(np.array([[[0.5, 0.5]]]), 1.0, cov)
        np.testing.assert_array_equal(occ2, [[[0.0, 1.0]]])


class TestBakeVolumes:
    def test_empty_cloud_zero_occlusion(self):
        occl, illu = bake_volumes(empty_cloud(), BakeConfig(
            dims=(2, 2, 2), bounds_min=-np.ones(3), bounds_max=np.ones(3),
            tau=0.5, face_res=8))
        assert np.all(occl.coeffs == 0.0)
        assert np.all(illu.coeffs == 0.0)

    def test_cell_inside_shell_fully_occluded(self, rng):
        cloud = shell_cloud(radius=1.0, n=500)
        occl, _ = bake_volumes(cloud, BakeConfig(
            dims=(1, 1, 1), bounds_min=-0.1 * np.ones(3),
            bounds_max=0.1 * np.ones(3), tau=2.0, face_res=32))
        dirs = rng.normal(size=(500, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        vals = sh._sh_eval_unchecked(2, dirs) @ occl.coeffs[0, 0, 0, 0]
        assert np.clip(vals, 0, 1).mean() > 0.9

    def test_inside_outside_ordering(self):
        # wall at x = 0 separates an occluded cell from an open one
        cloud = GaussianCloud(
            positions=np.array([[0.0, 0.0, 0.0]]),
            log_scales=np.log([[0.02, 5.0, 5.0]]),
            rotations=np.array([[1.0, 0, 0, 0]]),
            normals=np.array([[1.0, 0, 0]]),
            opacities_raw=logit(np.array([0.999])),
            sh_coeffs=np.zeros((1, 1, 3)),
            albedo_raw=np.zeros((1, 3)), roughness_raw=np.zeros(1),
            metallic_raw=np.zeros(1))
        occl, _ = bake_volumes(cloud, BakeConfig(
            dims=(2, 1, 1), bounds_min=np.array([-0.4, -0.2, -0.2]),
            bounds_max=np.array([0.4, 0.2, 0.2]), tau=1.0, face_res=16))
        mean_near = occl.coeffs[0, 0, 0, 0, 0]  # DC tracks mean occlusion
        mean_far = occl.coeffs[1, 0, 0, 0, 0]
        assert mean_near > 0 and mean_far > 0
        # both cells see the wall on one side; equal here by symmetry, so
        # instead compare against a cell displaced away from the wall
        occl2, _ = bake_volumes(cloud, BakeConfig(
            dims=(1, 1, 1), bounds_min=np.array([0.5, -0.2, -0.2]),
            bounds_max=np.array([0.9, 0.2, 0.2]), tau=0.3, face_res=16))
        assert occl2.coeffs[0, 0, 0, 0, 0] < mean_near


class TestQueries:
    def grid_random(self, rng, channels=1):
        coeffs = rng.normal(size=(3, 3, 3, channels, 9))
        return VolumeGrid(-np.ones(3), np.ones(3), coeffs)

    def test_masked_weights_symmetry(self, rng):
        grid = self.grid_random(rng)
        x = grid.cell_centers()[1, 1, 1]
        # with +z normal, only the four upper cells keep weight; at a cell
        # center the corner weights collapse onto the i0 block, so probe a
        # point midway between centers instead
        x_mid = x + 0.5 * grid.cell_size
        from gsir.baking import _corner_cells
        idx, wts, centers = _corner_cells(grid, x_mid)
        keep = ((centers - x_mid) @ np.array([0.0, 0.0, 1.0])) > 0
        masked = np.where(keep, wts, 0.0)
        masked /= masked.sum()
        assert keep.sum() == 4
        np.testing.assert_allclose(masked[keep], 0.25, atol=1e-12)

    def test_uniform_grid_matches_single_cell(self, rng):
        coeffs = np.tile(rng.normal(size=(1, 9)), (3, 3, 3, 1, 1))
        grid = VolumeGrid(-np.ones(3), np.ones(3), coeffs)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        for _ in range(5):
            x = rng.uniform(-1, 1, 3)
            val = query_occlusion(grid, x, n, d)
            direct = float(np.clip(coeffs[0, 0, 0, 0] @ sh._sh_eval_unchecked(2, d), 0, 1))
            assert val == pytest.approx(direct, abs=1e-12)

    def test_all_pass_equals_plain_trilinear(self, rng):
        grid = self.grid_random(rng)
        x = rng.uniform(-0.4, 0.4, 3)
        # a normal pointing at no cell center exactly; choose x so that all
        # 8 corners are on the positive side: impossible geometrically, so
        # instead verify the masked result with a normal that keeps all
        # corners of the far octant and compare against a naive loop
        n = np.array([1.0, 1.0, 1.0])
        n /= np.linalg.norm(n)
        from gsir.baking import _corner_cells
        idx, wts, centers = _corner_cells(grid, x)
        keep = ((centers - x) @ n) > 0
        ref_w = np.where(keep, wts, 0.0)
        if ref_w.sum() == 0:
            ref_w = wts
        ref_w = ref_w / ref_w.sum()
        ref = np.einsum("k,kcj->cj", ref_w, grid.coeffs[idx[:, 0], idx[:, 1], idx[:, 2]])
        got = masked_trilinear_coeffs(grid, x, n)
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_masked_weights_nonnegative_sum_one(self, rng):
        grid = self.grid_random(rng)
        from gsir.baking import _corner_cells
        for _ in range(50):
            x = rng.uniform(-1.2, 1.2, 3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            idx, wts, centers = _corner_cells(grid, x)
            assert np.all(wts >= -1e-12)
            assert wts.sum() == pytest.approx(1.0, abs=1e-9)

    def test_query_occlusion_in_unit_interval(self, rng):
        grid = self.grid_random(rng)
        for _ in range(50):
            x = rng.uniform(-1.5, 1.5, 3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            assert 0.0 <= query_occlusion(grid, x, n, d) <= 1.0

    def test_indirect_irradiance_zero_grid(self):
        grid = VolumeGrid(-np.ones(3), np.ones(3), np.zeros((2, 2, 2, 3, 9)))
        out = query_indirect_irradiance(grid, np.zeros(3), np.array([0.0, 0, 1]))
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_constant_radiance_gives_pi(self):
        cm = np.ones((6, 32, 32, 3))
        coeffs = sh_project_cubemap(cm, deg=2)  # (9, 3)
        grid = VolumeGrid(-np.ones(3), np.ones(3),
                          np.tile(coeffs.T[None, None, None], (2, 2, 2, 1, 1)))
        out = query_indirect_irradiance(grid, np.zeros(3), np.array([0.0, 0, 1]))
        np.testing.assert_allclose(out, np.pi, rtol=0.02)

    def test_two_cell_gradient_midpoint(self, rng):
        # positive radiance everywhere (strong DC) keeps the zero clamp
        # inactive, so interpolation is exactly linear between the two cells
        coeffs = np.zeros((2, 1, 1, 3, 9))
        coeffs[:, :, :, :, 0] = 3.0
        coeffs[:, :, :, :, 1:] += 0.2 * rng.normal(size=(2, 1, 1, 3, 8))
        grid = VolumeGrid(np.array([-1.0, -0.5, -0.5]), np.array([1.0, 0.5, 0.5]), coeffs)
        centers = grid.cell_centers()
        n = np.array([0.0, 0.0, 1.0])
        a = query_indirect_irradiance(grid, centers[0, 0, 0], n)
        b = query_indirect_irradiance(grid, centers[1, 0, 0], n)
        mid = query_indirect_irradiance(grid, 0.5 * (centers[0, 0, 0] + centers[1, 0, 0]), n)
        np.testing.assert_allclose(mid, 0.5 * (a + b), atol=1e-9)

    def test_ambient_occlusion_bounds(self, rng):
        grid = self.grid_random(rng)
        for _ in range(20):
            x = rng.uniform(-1, 1, 3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            assert 0.0 <= query_ambient_occlusion(grid, x, n) <= 1.0


class TestVolumeIo:
    def test_round_trip(self, tmp_path, rng):
        from gsir.baking import load_volumes, save_volumes
        occl = VolumeGrid(-np.ones(3), np.ones(3),
                          rng.normal(size=(2, 3, 4, 1, 9)).astype(np.float32).astype(np.float64))
        illu = VolumeGrid(-np.ones(3), np.ones(3),
                          rng.normal(size=(2, 3, 4, 3, 9)).astype(np.float32).astype(np.float64))
        p = tmp_path / "vol.gsirvol"
        save_volumes(p, occl, illu)
        o2, i2 = load_volumes(p)
        np.testing.assert_array_equal(o2.coeffs, occl.coeffs)
        np.testing.assert_array_equal(i2.coeffs, illu.coeffs)
        np.testing.assert_allclose(o2.bounds_min, occl.bounds_min)

    def test_nan_rejected(self, tmp_path):
        from gsir.errors import SchemaError
        from gsir.formats import read_volume_container, write_volume_container
        coeffs = np.zeros((1, 1, 1, 1, 4))
        write_volume_container(tmp_path / "x.gsirvol", {
            "occlusion": {"dims": (1, 1, 1), "bounds_min": -np.ones(3),
                          "bounds_max": np.ones(3), "deg": 1, "coeffs": coeffs}})
        raw = (tmp_path / "x.gsirvol").read_bytes()
        # corrupt one float with NaN
        nan = np.array([np.nan], dtype="<f4").tobytes()
        stream = bytearray(raw)
        stream[-8:-4] = nan
        (tmp_path / "bad.gsirvol").write_bytes(bytes(stream))
        with pytest.raises(SchemaError, match="non-finite"):
            read_volume_container(tmp_path / "bad.gsirvol")
