import numpy as np
import pytest

from idivsplat import sh

SQRT = np.sqrt
PI = np.pi


def slow_real_sh(d, degree):
    """Closed forms of the real spherical harmonics up to band 4, without the Condon-Shortley phase."""
    x, y, z = d
    vals = [
        0.5 * SQRT(1 / PI),
        SQRT(3 / (4 * PI)) * y, SQRT(3 / (4 * PI)) * z, SQRT(3 / (4 * PI)) * x,
        0.5 * SQRT(15 / PI) * x * y, 0.5 * SQRT(15 / PI) * y * z,
        0.25 * SQRT(5 / PI) * (3 * z * z - 1),
        0.5 * SQRT(15 / PI) * x * z, 0.25 * SQRT(15 / PI) * (x * x - y * y),
        0.25 * SQRT(35 / (2 * PI)) * y * (3 * x * x - y * y),
        0.5 * SQRT(105 / PI) * x * y * z,
        0.25 * SQRT(21 / (2 * PI)) * y * (5 * z * z - 1),
        0.25 * SQRT(7 / PI) * z * (5 * z * z - 3),
        0.25 * SQRT(21 / (2 * PI)) * x * (5 * z * z - 1),
        0.25 * SQRT(105 / PI) * z * (x * x - y * y),
        0.25 * SQRT(35 / (2 * PI)) * x * (x * x - 3 * y * y),
        0.75 * SQRT(35 / PI) * x * y * (x * x - y * y),
        0.75 * SQRT(35 / (2 * PI)) * y * z * (3 * x * x - y * y),
        0.75 * SQRT(5 / PI) * x * y * (7 * z * z - 1),
        0.75 * SQRT(5 / (2 * PI)) * y * z * (7 * z * z - 3),
        3 / 16 * SQRT(1 / PI) * (35 * z**4 - 30 * z * z + 3),
        0.75 * SQRT(5 / (2 * PI)) * x * z * (7 * z * z - 3),
        3 / 8 * SQRT(5 / PI) * (x * x - y * y) * (7 * z * z - 1),
        0.75 * SQRT(35 / (2 * PI)) * x * z * (x * x - 3 * y * y),
        3 / 16 * SQRT(35 / PI) * (x**4 - 6 * x * x * y * y + y**4),
    ]
    return np.array(vals[:(degree + 1) ** 2])


def random_dirs(n, seed=0):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_degree_zero_constant():
    for d in random_dirs(5):
        np.testing.assert_allclose(sh.eval_sh_basis(d, 0), [0.28209479177], atol=1e-11)


def test_band_one_on_z_axis():
    np.testing.assert_allclose(sh.eval_sh_basis([0, 0, 1.0], 1), [0.28209479177, 0, 0.4886025119, 0],
                               atol=1e-10)


def test_basis_matches_closed_forms():
    dirs = random_dirs(1000, 1)
    got = sh.eval_sh_basis(dirs, 4)
    want = np.array([slow_real_sh(d, 4) for d in dirs])
    assert np.max(np.abs(got - want)) <= 1e-10


def test_basis_is_orthonormal_on_sphere():
    # quadrature: Gauss-Legendre in cos(theta) times uniform phi
    ct, w = np.polynomial.legendre.leggauss(30)
    phi = np.linspace(0, 2 * PI, 60, endpoint=False)
    C, P = np.meshgrid(ct, phi, indexing="ij")
    S = np.sqrt(1 - C * C)
    d = np.stack([S * np.cos(P), S * np.sin(P), C], -1).reshape(-1, 3)
    wt = np.repeat(w, len(phi)) * (2 * PI / len(phi))
    Y = sh.eval_sh_basis(d, 4)
    np.testing.assert_allclose((Y * wt[:, None]).T @ Y, np.eye(25), atol=1e-12)


def test_num_coeffs_and_bad_degree():
    assert sh.num_coeffs(3) == 16
    with pytest.raises(ValueError):
        sh.eval_sh_basis([0, 0, 1.0], 5)


def test_basis_jacobian_and_vjp():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(6, 3))
    vals, jac = sh.eval_sh_basis_grad(d, 4)
    g = rng.normal(size=(6, 25))
    _, gd = sh.sh_basis_vjp(d, g, 4)
    np.testing.assert_allclose(gd, np.einsum("nj,njk->nk", g, jac), atol=1e-12)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        num = (sh.eval_sh_basis(d + e, 4) - sh.eval_sh_basis(d - e, 4)) / (2 * eps)
        np.testing.assert_allclose(jac[..., k], num, atol=1e-7)


def test_sh_color_zero_coeffs():
    np.testing.assert_allclose(sh.eval_sh_color(np.zeros((16, 3)), [0, 0, 1.0]), [0.5, 0.5, 0.5])


def test_sh_color_dc_only():
    c = np.zeros((16, 3))
    c[0] = np.array([1.0, 0, 0]) / 0.28209479177
    np.testing.assert_allclose(sh.eval_sh_color(sh.ShCoefficients(c), [0.6, 0, 0.8]), [1.5, 0.5, 0.5],
                               atol=1e-10)


def test_sh_color_clamped_at_zero():
    c = np.zeros((1, 3))
    c[0, 0] = -100.0
    out = sh.eval_sh_color(c, [0, 0, 1.0])
    assert out[0] == 0.0 and out[1] == 0.5


def test_sh_color_coefficient_gradient_is_basis():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(16, 3)) * 0.1
    d = random_dirs(1, 3)[0]
    g_c, _ = sh.eval_sh_color_vjp(c, d, np.ones(3))
    Y = sh.eval_sh_basis(d, 3)
    np.testing.assert_array_equal(g_c, np.repeat(Y[:, None], 3, axis=1))


def test_ide_infinite_kappa_is_plain_sh():
    d = random_dirs(10, 4)
    f = sh.integrated_directional_encoding(d, np.full(10, 1e9))
    np.testing.assert_allclose(f.values, sh.eval_sh_basis(d, 4), atol=1e-6)
    assert f.values.shape == (10, 25)


def test_ide_attenuation_known_value():
    # band 1 at kappa 1: exp(-1 * 2 / 2)
    A = sh.ide_attenuation(np.array(1.0))
    assert A[1] == pytest.approx(np.exp(-1.0))
    assert A[0] == 1.0


def test_ide_attenuation_monotone():
    kappas = np.geomspace(0.1, 100, 30)
    A = sh.ide_attenuation(kappas)
    band_first = A[:, [0, 1, 4, 9, 16]]
    assert np.all(np.diff(band_first, axis=1) < 0)
    assert np.all(np.diff(band_first[:, 1:], axis=0) > 0)


def test_ide_bounded_by_plain_basis():
    d = random_dirs(50, 5)
    k = np.random.default_rng(5).uniform(0.01, 50, 50)
    f = sh.integrated_directional_encoding(d, k)
    assert np.all(np.abs(f.values) <= np.abs(sh.eval_sh_basis(d, 4)) + 1e-15)
    assert np.all(f.kappa > 0)


def test_ide_rejects_nonpositive_kappa():
    with pytest.raises(ValueError):
        sh.integrated_directional_encoding([0, 0, 1.0], 0.0)


def test_ide_vjp_finite_differences():
    rng = np.random.default_rng(6)
    d = random_dirs(3, 6)
    k = rng.uniform(0.5, 5, 3)
    g = rng.normal(size=(3, 25))
    g_d, g_k = sh.ide_vjp(d, k, g)
    f = lambda d_, k_: float(np.sum(sh.integrated_directional_encoding(d_, k_).values * g))
    eps = 1e-6
    for i in range(3):
        for j in range(3):
            e = np.zeros_like(d)
            e[i, j] = eps
            assert (f(d + e, k) - f(d - e, k)) / (2 * eps) == pytest.approx(g_d[i, j], rel=1e-6, abs=1e-9)
        e = np.zeros(3)
        e[i] = eps
        assert (f(d, k + e) - f(d, k - e)) / (2 * eps) == pytest.approx(g_k[i], rel=1e-6, abs=1e-9)
