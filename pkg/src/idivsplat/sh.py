"""Real spherical harmonics (degree <= 4) and the integrated directional encoding.

Basis functions use the standard real normalization without the Condon-Shortley
phase, ordered by (l, m) with m running from -l to l. Each function is stored as
a short list of monomials so that values and direction gradients come from the
same table.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEGREE = 4
SH_C0 = 0.28209479177387814
DEFAULT_IDE_DEGREE = 4

# (coefficient, power of x, power of y, power of z); valid on the unit sphere.
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658, 0.3731763325901154, 1.445305721320277)
_C4 = (2.5033429417967046, 1.7701307697799304, 0.9461746957575601, 0.6690465435572892,
       0.10578554691520431, 0.47308734787878004, 0.6258357354491761)

_TERMS = [
    [(SH_C0, 0, 0, 0)],
    # l = 1
    [(_C1, 0, 1, 0)],
    [(_C1, 0, 0, 1)],
    [(_C1, 1, 0, 0)],
    # l = 2
    [(_C2[0], 1, 1, 0)],
    [(_C2[0], 0, 1, 1)],
    [(3 * _C2[1], 0, 0, 2), (-_C2[1], 0, 0, 0)],
    [(_C2[0], 1, 0, 1)],
    [(_C2[2], 2, 0, 0), (-_C2[2], 0, 2, 0)],
    # l = 3
    [(3 * _C3[0], 2, 1, 0), (-_C3[0], 0, 3, 0)],
    [(_C3[1], 1, 1, 1)],
    [(5 * _C3[2], 0, 1, 2), (-_C3[2], 0, 1, 0)],
    [(5 * _C3[3], 0, 0, 3), (-3 * _C3[3], 0, 0, 1)],
    [(5 * _C3[2], 1, 0, 2), (-_C3[2], 1, 0, 0)],
    [(_C3[4], 2, 0, 1), (-_C3[4], 0, 2, 1)],
    [(_C3[0], 3, 0, 0), (-3 * _C3[0], 1, 2, 0)],
    # l = 4
    [(_C4[0], 3, 1, 0), (-_C4[0], 1, 3, 0)],
    [(3 * _C4[1], 2, 1, 1), (-_C4[1], 0, 3, 1)],
    [(7 * _C4[2], 1, 1, 2), (-_C4[2], 1, 1, 0)],
    [(7 * _C4[3], 0, 1, 3), (-3 * _C4[3], 0, 1, 1)],
    [(35 * _C4[4], 0, 0, 4), (-30 * _C4[4], 0, 0, 2), (3 * _C4[4], 0, 0, 0)],
    [(7 * _C4[3], 1, 0, 3), (-3 * _C4[3], 1, 0, 1)],
    [(7 * _C4[5], 2, 0, 2), (-_C4[5], 2, 0, 0), (-7 * _C4[5], 0, 2, 2), (_C4[5], 0, 2, 0)],
    [(_C4[1], 3, 0, 1), (-3 * _C4[1], 1, 2, 1)],
    [(_C4[6], 4, 0, 0), (-6 * _C4[6], 2, 2, 0), (_C4[6], 0, 4, 0)],
]

# every monomial of total degree <= 4, so the table is closed under differentiation
_MONOMIALS = sorted((a, b, c) for a in range(5) for b in range(5) for c in range(5) if a + b + c <= MAX_DEGREE)
_MONO_INDEX = {m: i for i, m in enumerate(_MONOMIALS)}
_COEFS = np.zeros((len(_MONOMIALS), len(_TERMS)))
for _j, _terms in enumerate(_TERMS):
    for _c, *_p in _terms:
        _COEFS[_MONO_INDEX[tuple(_p)], _j] += _c
_POW = np.array(_MONOMIALS)  # (M, 3)
# _DCOEFS[k] maps monomials to d Y / d x_k
_DCOEFS = np.zeros((3,) + _COEFS.shape)
for _i, _m in enumerate(_MONOMIALS):
    for _k in range(3):
        if _m[_k]:
            _lower = list(_m)
            _lower[_k] -= 1
            _DCOEFS[_k, _MONO_INDEX[tuple(_lower)]] += _m[_k] * _COEFS[_i]

BAND = np.concatenate([[l] * (2 * l + 1) for l in range(MAX_DEGREE + 1)])


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def _check_degree(degree):
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")


def _powers(d):
    # (..., 3, 5) table of d_k ** e for e = 0..4
    P = np.empty(d.shape + (MAX_DEGREE + 1,))
    P[..., 0] = 1.0
    for e in range(1, MAX_DEGREE + 1):
        P[..., e] = P[..., e - 1] * d
    return P


def _monomials(d):
    P = _powers(d)
    return P[..., 0, _POW[:, 0]] * P[..., 1, _POW[:, 1]] * P[..., 2, _POW[:, 2]]


def eval_sh_basis(direction, degree: int = 3):
    """Real SH basis values, shape (..., (degree+1)**2)."""
    _check_degree(degree)
    return _monomials(np.asarray(direction, dtype=np.float64)) @ _COEFS[:, :num_coeffs(degree)]


def eval_sh_basis_grad(direction, degree: int = 3):
    """Values and Jacobian d Y_j / d direction, shapes (..., J) and (..., J, 3)."""
    _check_degree(degree)
    mono = _monomials(np.asarray(direction, dtype=np.float64))
    n = num_coeffs(degree)
    return mono @ _COEFS[:, :n], np.stack([mono @ _DCOEFS[k, :, :n] for k in range(3)], axis=-1)


def sh_basis_vjp(direction, g_values, degree: int = 3):
    """Values and sum_j g_j dY_j / d direction, without forming the full Jacobian."""
    _check_degree(degree)
    mono = _monomials(np.asarray(direction, dtype=np.float64))
    n = num_coeffs(degree)
    g = np.stack([np.sum(mono * (g_values @ _DCOEFS[k, :, :n].T), axis=-1) for k in range(3)], axis=-1)
    return mono @ _COEFS[:, :n], g


@dataclass
class ShCoefficients:
    coeffs: np.ndarray  # ((L+1)^2, 3)

    @property
    def degree(self) -> int:
        L = int(round(np.sqrt(len(self.coeffs)))) - 1
        if num_coeffs(L) != len(self.coeffs):
            raise ValueError(f"{len(self.coeffs)} is not a square number of coefficients")
        return L


def eval_sh_color(coeffs, view_dir):
    """View-dependent RGB from SH coefficients of shape (..., J, 3).

    The +0.5 offset and clamp at zero follow the usual splatting convention.
    """
    coeffs = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=np.float64)
    L = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    if num_coeffs(L) != coeffs.shape[-2]:
        raise ValueError(f"coefficient count {coeffs.shape[-2]} does not match any degree")
    Y = eval_sh_basis(view_dir, L)
    raw = np.einsum("...j,...jc->...c", Y, coeffs) + 0.5
    return np.maximum(raw, 0.0)


def eval_sh_color_vjp(coeffs, view_dir, g_rgb):
    """Gradients w.r.t. coefficients and the view direction."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    L = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    Y = eval_sh_basis(view_dir, L)
    raw = np.einsum("...j,...jc->...c", Y, coeffs) + 0.5
    g = np.where(raw > 0.0, g_rgb, 0.0)
    g_coeffs = Y[..., :, None] * g[..., None, :]
    _, g_dir = sh_basis_vjp(view_dir, np.einsum("...c,...jc->...j", g, coeffs), L)
    return g_coeffs, g_dir


@dataclass
class IdeFeature:
    values: np.ndarray
    kappa: np.ndarray


def ide_attenuation(kappa, degree: int = DEFAULT_IDE_DEGREE):
    kappa = np.asarray(kappa, dtype=np.float64)
    l = BAND[:num_coeffs(degree)]
    return np.exp(-l * (l + 1) / (2.0 * kappa[..., None]))


def integrated_directional_encoding(reflect_dir, kappa, degree: int = DEFAULT_IDE_DEGREE) -> IdeFeature:
    """vMF-attenuated SH of the reflection direction; ``kappa`` is 1 / roughness."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise ValueError("IDE concentration kappa must be positive")
    Y = eval_sh_basis(reflect_dir, degree)
    return IdeFeature(ide_attenuation(kappa, degree) * Y, kappa)


def ide_vjp(reflect_dir, kappa, g_values, degree: int = DEFAULT_IDE_DEGREE):
    """Gradients of the IDE values w.r.t. the reflection direction and kappa."""
    kappa = np.asarray(kappa, dtype=np.float64)
    l = BAND[:num_coeffs(degree)]
    A = ide_attenuation(kappa, degree)
    gA = g_values * A
    Y, g_dir = sh_basis_vjp(reflect_dir, gA, degree)
    g_kappa = np.sum(gA * Y * l * (l + 1), axis=-1) / (2.0 * kappa**2)
    return g_dir, g_kappa
