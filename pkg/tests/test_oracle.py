import numpy as np
import pytest

from idivsplat import oracle as O
from idivsplat.oracle import LightField

N = np.array([0.0, 0.0, 1.0])


def test_directional_light_is_exact():
    d = np.array([0.3, 0.2, 0.9])
    d /= np.linalg.norm(d)
    light = LightField.directional(d, [2.0, 1.0, 0.5])
    k = np.array([0.5, 0.7, 0.9])
    est = O.mc_diffuse_integral(light, N, k, 1000, seed=1)
    np.testing.assert_allclose(est.value, k * np.array([2.0, 1.0, 0.5]) * d[2], rtol=1e-15)
    np.testing.assert_array_equal(est.stderr, 0.0)
    li = O.mc_idiv(light, N, 1000, seed=1)
    np.testing.assert_allclose(li.value, np.outer([2.0, 1.0, 0.5], d), rtol=1e-15)


def test_light_below_horizon_contributes_nothing():
    light = LightField.directional([0, 0, -1.0], [1.0, 1.0, 1.0])
    assert not O.mc_diffuse_integral(light, N, np.ones(3), 100).value.any()
    assert not O.mc_idiv(light, N, 100).value.any()


def test_zero_light():
    est = O.mc_diffuse_integral(LightField(), N, np.ones(3), 1000)
    assert not est.value.any()


def test_uniform_light_cosine_integral_is_pi():
    L0 = np.array([0.5, 1.0, 2.0])
    k = np.array([0.2, 0.4, 0.8])
    est = O.mc_diffuse_integral(LightField.uniform(L0), N, k, 100_000, seed=3)
    assert np.all(np.abs(est.value - k * np.pi * L0) <= 3 * est.stderr)


def test_uniform_light_idiv_is_pi_n():
    L0 = np.array([1.0, 0.5, 0.25])
    n = np.array([0.3, -0.4, 0.5])
    n /= np.linalg.norm(n)
    est = O.mc_idiv(LightField.uniform(L0), n, 100_000, seed=4)
    want = np.pi * np.outer(L0, n)
    assert np.all(np.abs(est.value - want) <= 3 * est.stderr + 1e-12)


def test_exact_lobe_integrals_against_monte_carlo():
    rng = np.random.default_rng(5)
    light = LightField.random(rng, n_directional=0, n_lobes=2)
    n = np.array([0.2, 0.1, 1.0])
    n /= np.linalg.norm(n)
    est = O.mc_diffuse_integral(light, n, np.ones(3), 200_000, seed=6)
    assert np.all(np.abs(est.value - light.irradiance(n)) <= 4 * est.stderr)
    via = sum(O.lobe_idiv(n, a, lam)[None] * amp[:, None] for a, lam, amp in
              zip(light.lobe_axes, light.lobe_sharpness, light.lobe_amplitude))
    np.testing.assert_allclose(via @ n, light.irradiance(n), rtol=1e-8)


def test_lobe_irradiance_limits():
    # zero sharpness is uniform unit radiance
    assert O.lobe_irradiance(np.array(0.3), 0.0) == pytest.approx(np.pi)
    # a very sharp lobe behaves like a delta of solid angle 2 pi / lambda
    lam = 5000.0
    assert O.lobe_irradiance(np.array(0.6), lam) * lam / (2 * np.pi) == pytest.approx(0.6, rel=1e-3)


def test_stderr_shrinks_with_samples():
    light = LightField(lobe_axes=[[0, 0, 1.0]], lobe_sharpness=[3.0], lobe_amplitude=[[1, 1, 1.0]])
    ratios = []
    for s in range(20):
        a = O.mc_diffuse_integral(light, N, np.ones(3), 5_000, seed=s).stderr
        b = O.mc_diffuse_integral(light, N, np.ones(3), 20_000, seed=s + 100).stderr
        ratios.append(b / a)
    assert np.all(np.array(ratios) <= 0.6)


def test_mc_is_seed_deterministic():
    light = LightField.random(np.random.default_rng(0))
    a = O.mc_idiv(light, N, 70_000, seed=9)
    b = O.mc_idiv(light, N, 70_000, seed=9)
    assert np.array_equal(a.value, b.value) and np.array_equal(a.covariance, b.covariance)


def test_light_field_validation():
    with pytest.raises(ValueError):
        LightField(directions=[[0, 0, 2.0]], radiance=[[1, 1, 1.0]])
    with pytest.raises(ValueError):
        LightField.directional([0, 0, 1.0], [-1.0, 0, 0])
    with pytest.raises(ValueError):
        O.mc_diffuse_integral(LightField(), N, np.ones(3), 0)


def test_light_field_dict_round_trip():
    light = O.default_light()
    back = LightField.from_dict(light.to_dict())
    np.testing.assert_array_equal(back.lobe_amplitude, light.lobe_amplitude)


@pytest.fixture(scope="module")
def white_sphere_scene():
    from idivsplat.oracle import Sphere

    light = LightField.directional([0.3, -0.5, 0.8], [0.9, 0.9, 0.9])
    surfaces = [Sphere(np.zeros(3), 0.8, np.ones(3))]
    cam = O.camera_ring(1, 48)[0]
    return light, surfaces, cam


def test_lambert_law_on_white_sphere(white_sphere_scene):
    light, surfaces, cam = white_sphere_scene
    color, depth, normal, mask = O._render_truth(cam, surfaces, light, None, supersample=1)
    d = light.directions[0]
    want = 0.9 * np.maximum(normal @ d, 0.0)
    np.testing.assert_allclose(color[mask], np.repeat(want[mask][:, None], 3, axis=1), atol=1e-12)
    assert np.allclose(np.linalg.norm(normal[mask], axis=-1), 1.0)


def test_generate_scene_properties():
    a = O.generate_scene("textured-plane", n_views=3, resolution=24, seed=2, n_seed_points=50)
    b = O.generate_scene("textured-plane", n_views=3, resolution=24, seed=2, n_seed_points=50)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.seed_points, b.seed_points)
    assert a.images.min() >= 0 and a.images.max() <= 1
    m = a.masks
    np.testing.assert_allclose(np.linalg.norm(a.normals[m], axis=-1), 1.0)
    assert not a.normals[~m].any()
    with pytest.raises(ValueError):
        O.generate_scene("teapot", n_views=1, resolution=8)


def test_generated_depth_matches_camera_z():
    sc = O.generate_scene("lambertian-spheres", n_views=2, resolution=32, n_seed_points=30)
    cam = sc.cameras[1]
    rays = cam.pixel_rays()
    # unit ray length to the hit point divided by the ray's camera z component
    z_per_unit = (rays @ cam.R.T)[..., 2]
    hit = cam.center + (sc.depths[1] / z_per_unit)[..., None] * rays
    for s in sc.surfaces:
        r = np.linalg.norm(hit - s.center, axis=-1)
        on = np.abs(r - s.radius) < 1e-9
        assert on.any()
    assert np.all(sc.depths[1][sc.masks[1]] > 0)


def test_normal_mae_examples():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(10, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    perp = np.cross(n, [0.3, 0.4, 0.5])
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    assert O.normal_mae(n, n) == pytest.approx(0.0, abs=1e-6)
    assert O.normal_mae(n, perp) == pytest.approx(90.0)
    assert O.normal_mae(n, -n) == pytest.approx(180.0)
    assert np.isnan(O.normal_mae(n, n, np.zeros(10, bool)))


def test_gradcheck_linear_function():
    # dyadic values and a power-of-two step keep every operation exact
    rng = np.random.default_rng(1)
    w = rng.integers(-40, 40, (4, 5)) / 8.0
    x = rng.integers(-40, 40, (4, 5)) / 8.0
    rep = O.gradcheck(lambda p: float(np.sum(w * p)), x, w, eps=2.0**-17, tolerance=1e-10)
    assert rep.passed and rep.max_rel_error <= 1e-10 and rep.checked == 20


def test_gradcheck_reports_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = O.gradcheck(lambda p: float(np.sum(p ** 2)), x, np.array([2.0, 5.0]))
    assert not rep.passed and [f[1] for f in rep.failing] == [1]


def test_gradcheck_skips_kinks_through_signature():
    x = np.array([0.0, 1.0])

    def f(p):
        return float(np.abs(p).sum()), (p > 0).tobytes()

    rep = O.gradcheck(f, x, np.array([1.0, 1.0]), eps=1e-5)
    assert rep.non_smooth == [("x", 0)] and rep.passed


def test_gradcheck_diffuse_normal():
    from idivsplat.shading import diffuse_color, diffuse_gradient_wrt_normal

    rng = np.random.default_rng(2)
    k = rng.uniform(0.2, 1, 3)
    l = np.abs(rng.normal(size=(3, 3)))  # positive entries keep n . l away from the clamp
    n = np.array([0.2, 0.3, 0.9])
    up = np.ones(3)
    rep = O.gradcheck(lambda p: float(up @ diffuse_color(k, l, p)[0]), n.copy(),
                      diffuse_gradient_wrt_normal(k, l, n, up), eps=1e-6, tolerance=1e-6)
    assert rep.passed, rep.summary()
