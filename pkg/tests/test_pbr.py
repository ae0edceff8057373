import numpy as np
import pytest

from gsir import pbr, sh
from gsir.baking import VolumeGrid, sh_project_cubemap
from gsir.oracle import finite_diff_grad, oracle_hemisphere_mc


@pytest.fixture(scope="module")
def lut():
    return pbr.precompute_env_brdf_lut(samples=1024, resolution=32, seed=0)


@pytest.fixture(scope="module")
def flat_assets(lut):
    env = pbr.EnvironmentMap.constant(1.0, (8, 16))
    pre = pbr.prefilter_environment(env, levels=4, samples=64)
    return pbr.ShadingAssets(env=env, lut=lut, prefiltered=pre)


class TestBrdfEval:
    def test_ggx_peak_at_full_roughness(self):
        n = v = l = np.array([0.0, 0.0, 1.0])
        val = pbr.brdf_eval(n, v, l, albedo=np.zeros(3), roughness=1.0, metallic=1.0)
        # diffuse vanishes (metallic), D = 1/pi at alpha = 1 and h = n,
        # G/(4 nl nv) = 1/4 at normal incidence with F = F0
        f0 = 1.0 * np.zeros(3) + 0.04 * 0.0  # metallic albedo zero -> F0 = 0
        np.testing.assert_allclose(val, (1.0 / np.pi) * 0.5 * 0.0 + f0, atol=1e-12)

    def test_d_value_alone(self):
        assert pbr.ggx_d(1.0, 1.0) == pytest.approx(1.0 / np.pi, abs=1e-12)

    def test_normal_incidence_fresnel_equals_f0(self):
        n = v = l = np.array([0.0, 0.0, 1.0])
        albedo = np.array([0.8, 0.5, 0.2])
        m = 0.7
        f0 = 0.04 * (1 - m) + albedo * m
        val = pbr.brdf_eval(n, v, l, albedo, roughness=0.5, metallic=m)
        diff = (1 - m) * albedo / np.pi
        spec = val - diff
        d = pbr.ggx_d(1.0, 0.25)
        g = pbr.smith_g_height_correlated(1.0, 1.0, 0.25)
        np.testing.assert_allclose(spec, d * g * f0 / 4.0, rtol=1e-12)

    def test_metallic_kills_diffuse(self):
        n = np.array([0.0, 0.0, 1.0])
        v = np.array([0.3, 0.1, 0.95])
        v = v / np.linalg.norm(v)
        l = np.array([-0.2, 0.4, 0.9])
        l = l / np.linalg.norm(l)
        a = np.array([0.9, 0.9, 0.9])
        full = pbr.brdf_eval(n, v, l, a, 0.4, 1.0)
        zero_albedo_spec = pbr.brdf_eval(n, v, l, a, 0.4, 1.0) - full
        np.testing.assert_allclose(zero_albedo_spec, 0.0, atol=1e-15)
        # diffuse term absent: value equals pure specular with F0 = albedo
        assert np.all(full >= 0.0)

    def test_nonnegative_and_reciprocal(self, rng):
        n = np.array([0.0, 0.0, 1.0])
        for _ in range(50):
            v = rng.normal(size=3)
            v[2] = abs(v[2]) + 0.2
            v /= np.linalg.norm(v)
            l = rng.normal(size=3)
            l[2] = abs(l[2]) + 0.2
            l /= np.linalg.norm(l)
            a = rng.uniform(0.05, 0.95, 3)
            rough = rng.uniform(0.1, 1.0)
            m = rng.uniform(0.0, 1.0)
            f_vl = pbr.brdf_eval(n, v, l, a, rough, m)
            f_lv = pbr.brdf_eval(n, l, v, a, rough, m)
            assert np.all(f_vl >= 0.0)
            np.testing.assert_allclose(f_vl, f_lv, rtol=1e-6)


class TestBrdfLut:
    def test_mirror_limit(self, lut):
        scale, bias, _, _ = lut.sample(np.array([1.0]), np.array([0.0]))
        assert scale[0] == pytest.approx(1.0, abs=0.02)
        assert bias[0] == pytest.approx(0.0, abs=0.02)

    def test_deterministic_per_seed(self):
        a = pbr.integrate_env_brdf(0.7, 0.4, 512, (3, 1, 2))
        b = pbr.integrate_env_brdf(0.7, 0.4, 512, (3, 1, 2))
        np.testing.assert_array_equal(a, b)
        c = pbr.integrate_env_brdf(0.7, 0.4, 512, (4, 1, 2))
        assert not np.array_equal(a, c)

    def test_entries_match_independent_mc(self, lut, rng):
        # cross-check bilinear samples at entry centers against a separate
        # uniform-hemisphere Monte Carlo estimate of the same integral; the
        # uniform sampler only converges once the lobe is reasonably wide,
        # so draw entries at moderate roughness (the mirror-limit test
        # covers the sharp end)
        for _ in range(4):
            i = int(rng.integers(4, 28))
            j = int(rng.integers(14, 31))
            nov = (i + 0.5) / 32
            rough = (j + 0.5) / 32
            scale, bias, _, _ = lut.sample(np.array([nov]), np.array([rough]))
            ref = _uniform_hemisphere_env_brdf(nov, rough, 400_000, seed=i * 100 + j)
            assert scale[0] == pytest.approx(ref[0], abs=0.01)
            assert bias[0] == pytest.approx(ref[1], abs=0.01)

    def test_envelope_asserted(self):
        bad = np.zeros((16, 16, 2))
        bad[..., 0] = 1.2
        with pytest.raises(Exception):
            pbr.BrdfLut(bad)


def _uniform_hemisphere_env_brdf(nov, rough, samples, seed):
    """Uniform-direction MC of the split-sum environment BRDF (test-local)."""
    rng = np.random.default_rng(seed)
    v = np.array([np.sqrt(1 - nov ** 2), 0.0, nov])
    n = np.array([0.0, 0.0, 1.0])
    z = rng.random(samples)
    phi = rng.random(samples) * 2 * np.pi
    s = np.sqrt(1 - z ** 2)
    l = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    h = l + v[None]
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    noh = np.clip(h[:, 2], 0, 1)
    voh = np.clip(h @ v, 0, 1)
    nol = l[:, 2]
    alpha = rough ** 2
    d = pbr.ggx_d(noh, alpha)
    g = pbr.smith_g_height_correlated(nov, np.maximum(nol, 1e-4), alpha)
    base = d * g / np.maximum(4 * nol * nov, 1e-8) * nol
    fc = (1 - voh) ** 5
    # pdf = 1/(2 pi) over the hemisphere
    a = (base * (1 - fc)).mean() * 2 * np.pi
    b = (base * fc).mean() * 2 * np.pi
    return a, b


class TestPrefilter:
    def test_constant_env_all_levels_constant(self):
        env = pbr.EnvironmentMap.constant(0.75, (8, 16))
        pre = pbr.prefilter_environment(env, levels=4, samples=48)
        for lv in range(4):
            np.testing.assert_allclose(pre.values[lv], 0.75, atol=1e-9)

    def test_level_zero_is_source(self, rng):
        env = pbr.EnvironmentMap.from_radiance(rng.uniform(0.1, 2.0, (8, 16, 3)))
        pre = pbr.prefilter_environment(env, levels=3, samples=48)
        np.testing.assert_allclose(pre.values[0], env.radiance, atol=1e-12)

    def test_bright_texel_spreads_monotonically(self):
        rad = np.full((8, 16, 3), 0.05)
        rad[4, 8] = 20.0
        env = pbr.EnvironmentMap.from_radiance(rad)
        pre = pbr.prefilter_environment(env, levels=5, samples=96)
        peaks = [pre.values[lv].max() for lv in range(5)]
        for a, b in zip(peaks[:-1], peaks[1:]):
            assert b < a

    def test_energy_preserved_within_5_percent(self, rng):
        env = pbr.EnvironmentMap.from_radiance(rng.uniform(0.05, 2.0, (16, 32, 3)))
        pre = pbr.prefilter_environment(env, levels=4, samples=96)
        omega = pbr.latlong_solid_angles(16, 32)[:, :, None]
        e0 = (pre.values[0] * omega).sum()
        for lv in range(1, 4):
            e = (pre.values[lv] * omega).sum()
            assert abs(e - e0) / e0 < 0.05

    def test_rough_level_vs_mc_oracle(self, rng):
        env = pbr.EnvironmentMap.from_radiance(rng.uniform(0.1, 1.5, (16, 32, 3)))
        pre = pbr.prefilter_environment(env, levels=5, samples=128)
        rad = env.radiance
        lvl = 2  # roughness 0.5
        rough = pre.roughness_of_level(lvl)
        alpha = rough ** 2
        errs = []
        dirs = rng.normal(size=(60, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        idx, wts = pbr.latlong_taps(dirs, 16, 32)
        got = np.einsum("nk,nkc->nc", wts, pre.values[lvl].reshape(-1, 3)[idx])
        for d, g in zip(dirs, got):
            ref = _ggx_filtered_reference(rad, d, alpha, 4096, seed=11)
            errs.append(np.abs(g - ref))
        rms = np.sqrt(np.mean(np.square(errs)))
        assert rms < 0.05 * rad.mean()


def _ggx_filtered_reference(radiance, n, alpha, samples, seed):
    """Direct GGX-lobe-weighted average of the environment (test-local)."""
    rng = np.random.default_rng(seed)
    xi = rng.random((samples, 2))
    phi = 2 * np.pi * xi[:, 0]
    ct = np.sqrt((1 - xi[:, 1]) / (1 + (alpha ** 2 - 1) * xi[:, 1]))
    st = np.sqrt(1 - ct ** 2)
    hl = np.stack([np.cos(phi) * st, np.sin(phi) * st, ct], axis=1)
    up = np.array([0.0, 0, 1]) if abs(n[2]) < 0.999 else np.array([1.0, 0, 0])
    t = np.cross(up, n)
    t /= np.linalg.norm(t)
    b = np.cross(n, t)
    h = hl[:, 0:1] * t + hl[:, 1:2] * b + hl[:, 2:3] * n
    l = 2 * (h @ n)[:, None] * h - n
    nol = l @ n
    keep = nol > 0
    hgt, wdt = radiance.shape[:2]
    idx, wts = pbr.latlong_taps(l[keep], hgt, wdt)
    vals = np.einsum("nk,nkc->nc", wts, radiance.reshape(-1, 3)[idx])
    w = nol[keep]
    return (vals * w[:, None]).sum(axis=0) / w.sum()


class TestDiffuseIrradiance:
    def test_constant_env_gives_pi(self, flat_assets):
        n = np.array([0.0, 0.0, 1.0])
        out = pbr.diffuse_irradiance(flat_assets, np.zeros(3), n)
        np.testing.assert_allclose(out, np.pi, rtol=0.02)

    def test_fully_occluded_dark(self, lut):
        env = pbr.EnvironmentMap.constant(1.0, (8, 16))
        pre = pbr.prefilter_environment(env, levels=3, samples=48)
        occl = VolumeGrid(-np.ones(3), np.ones(3), np.zeros((2, 2, 2, 1, 9)))
        occl.coeffs[:, :, :, 0, 0] = 2.0 * np.sqrt(np.pi)  # occlusion = 1 everywhere
        illu = VolumeGrid(-np.ones(3), np.ones(3), np.zeros((2, 2, 2, 3, 9)))
        assets = pbr.ShadingAssets(env=env, lut=lut, prefiltered=pre,
                                   occlusion=occl, illumination=illu)
        out = pbr.diffuse_irradiance(assets, np.zeros(3), np.array([0.0, 0, 1]))
        np.testing.assert_allclose(out, 0.0, atol=5e-3)

    def test_convex_blend(self, lut):
        env = pbr.EnvironmentMap.constant(1.0, (8, 16))
        pre = pbr.prefilter_environment(env, levels=3, samples=48)
        occl = VolumeGrid(-np.ones(3), np.ones(3), np.zeros((2, 2, 2, 1, 9)))
        occl.coeffs[:, :, :, 0, 0] = 0.5 * 2.0 * np.sqrt(np.pi)  # occlusion = 0.5
        illu = VolumeGrid(-np.ones(3), np.ones(3), np.zeros((2, 2, 2, 3, 9)))
        illu.coeffs[:, :, :, :, 0] = 1.0 / np.pi * 2.0 * np.sqrt(np.pi)  # irradiance 1
        assets = pbr.ShadingAssets(env=env, lut=lut, prefiltered=pre,
                                   occlusion=occl, illumination=illu)
        out = pbr.diffuse_irradiance(assets, np.zeros(3), np.array([0.0, 0, 1]))
        np.testing.assert_allclose(out, 0.5 * np.pi + 0.5, rtol=0.03)


class TestShade:
    def test_lambert_under_constant_light(self, flat_assets):
        n = np.array([0.0, 0.0, 1.0])
        out = pbr.shade_point(flat_assets, np.zeros(3), n, n,
                              albedo=np.ones(3), roughness=1.0, metallic=0.0)
        # diffuse = (1/pi) * pi = 1 plus a small rough specular residue
        assert np.all(out >= 0.99)
        assert np.all(out <= 1.35)

    def test_black_diffuse_pure_specular(self, flat_assets):
        n = np.array([0.0, 0.0, 1.0])
        out = pbr.shade_point(flat_assets, np.zeros(3), n, n,
                              albedo=np.zeros(3), roughness=0.3, metallic=0.0)
        scale, bias, _, _ = flat_assets.lut.sample(np.array([1.0]), np.array([0.3]))
        expect = (0.04 * scale[0] + bias[0]) * 1.0
        np.testing.assert_allclose(out, expect, rtol=0.03)

    def test_backfacing_view_keeps_diffuse(self, flat_assets):
        n = np.array([0.0, 0.0, 1.0])
        v = np.array([0.0, 0.0, -1.0])
        out = pbr.shade_point(flat_assets, np.zeros(3), n, v,
                              albedo=np.ones(3) * 0.5, roughness=0.4, metallic=0.0)
        np.testing.assert_allclose(out, 0.5, rtol=0.03)

    def test_split_sum_vs_mc_oracle(self, flat_assets, rng):
        # full-integral reference with the same BRDF under constant light
        worst = 0.0
        for trial in range(12):
            n = np.array([0.0, 0.0, 1.0])
            v = rng.normal(size=3)
            v[2] = abs(v[2]) + 0.4
            v /= np.linalg.norm(v)
            albedo = rng.uniform(0.1, 0.9, 3)
            rough = rng.uniform(0.15, 0.95)
            metal = rng.uniform(0.0, 1.0)
            got = pbr.shade_point(flat_assets, np.zeros(3), n, v, albedo, rough, metal)

            def integrand(l):
                vals = np.empty((len(l), 3))
                for i, li in enumerate(l):
                    vals[i] = pbr.brdf_eval(n, v, li, albedo, rough, metal)
                return vals
            ref = oracle_hemisphere_mc(integrand, n, samples=16384, seed=trial).value
            rel = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-3)
            worst = max(worst, rel.max())
        assert worst < 0.08

    def test_shade_gradients_match_fd(self, lut, rng):
        env = pbr.EnvironmentMap(rng.normal(size=(6, 12, 3)))
        pre = pbr.prefilter_environment(env, levels=4, samples=48)
        occl = VolumeGrid(-np.ones(3) * 2, np.ones(3) * 2,
                          np.abs(rng.normal(size=(2, 2, 2, 1, 9))) * 0.2)
        illu = VolumeGrid(-np.ones(3) * 2, np.ones(3) * 2,
                          np.abs(rng.normal(size=(2, 2, 2, 3, 9))) * 0.5)
        assets = pbr.ShadingAssets(env=env, lut=lut, prefiltered=pre,
                                   occlusion=occl, illumination=illu)
        npts = 4
        xs = rng.uniform(-1, 1, (npts, 3))
        normals = rng.normal(size=(npts, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        views = normals + 0.3 * rng.normal(size=(npts, 3))
        views /= np.linalg.norm(views, axis=1, keepdims=True)
        albedo = rng.uniform(0.2, 0.8, (npts, 3))
        rough = rng.uniform(0.2, 0.8, npts)
        metal = rng.uniform(0.2, 0.8, npts)
        upstream = rng.normal(size=(npts, 3))

        out, cache = pbr.shade_points(assets, xs, normals, views, albedo, rough, metal)
        grads = pbr.shade_points_backward(assets, cache, upstream, train_illumination=True)

        def run(albedo_=None, rough_=None, metal_=None, env_raw_=None, illu_=None):
            env2 = pbr.EnvironmentMap(env.raw if env_raw_ is None else env_raw_)
            pre2 = pbr.PrefilteredEnv(operators=pre.operators,
                                      values=np.zeros_like(pre.values), shape=pre.shape)
            pre2.refresh(env2.radiance)
            illu2 = illu if illu_ is None else VolumeGrid(illu.bounds_min, illu.bounds_max, illu_)
            assets2 = pbr.ShadingAssets(env=env2, lut=lut, prefiltered=pre2,
                                        occlusion=occl, illumination=illu2)
            o, _ = pbr.shade_points(assets2, xs, normals, views,
                                    albedo if albedo_ is None else albedo_,
                                    rough if rough_ is None else rough_,
                                    metal if metal_ is None else metal_)
            return float(np.sum(o * upstream))

        checks = [
            ("d_albedo", albedo, lambda arr: run(albedo_=arr)),
            ("d_roughness", rough, lambda arr: run(rough_=arr)),
            ("d_metallic", metal, lambda arr: run(metal_=arr)),
            ("d_env_raw", env.raw, lambda arr: run(env_raw_=arr)),
            ("d_illum", illu.coeffs, lambda arr: run(illu_=arr)),
        ]
        for name, base, fn in checks:
            fd = finite_diff_grad(fn, base, h=1e-5)
            an = grads[name]
            sel = np.abs(an) > 1e-6
            if not sel.any():
                continue
            rel = np.abs(an[sel] - fd[sel]) / np.maximum(np.abs(fd[sel]), np.abs(an[sel]))
            assert rel.max() < 1e-3, f"{name}: {rel.max():.3e}"


class TestTablesIo:
    def test_round_trip(self, tmp_path, lut, rng):
        env = pbr.EnvironmentMap.from_radiance(rng.uniform(0.1, 2.0, (8, 16, 3)))
        pre = pbr.prefilter_environment(env, levels=3, samples=48)
        p = tmp_path / "tables.gsirlut"
        pbr.save_shading_tables(p, lut, pre)
        lut2, pre2 = pbr.load_shading_tables(p)
        np.testing.assert_allclose(lut2.table, lut.table, atol=1e-7)
        np.testing.assert_allclose(pre2.values, pre.values, atol=1e-6)

    def test_env_pfm_round_trip(self, tmp_path, rng):
        env = pbr.EnvironmentMap.from_radiance(rng.uniform(0.1, 2.0, (8, 16, 3)).astype(np.float32).astype(np.float64))
        p = tmp_path / "env.pfm"
        env.save_pfm(p)
        env2 = pbr.EnvironmentMap.load_pfm(p)
        np.testing.assert_allclose(env2.radiance, env.radiance, rtol=1e-6)
