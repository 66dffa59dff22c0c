"""Normal-dependent Gaussian colors: IDIV diffuse term plus an IDE-driven specular MLP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import MlpParams, mlp_backward, mlp_forward
from .sh import (DEFAULT_IDE_DEGREE, eval_sh_color, eval_sh_color_vjp,
                 ide_vjp, integrated_directional_encoding)

ROUGHNESS_FLOOR = 1e-3


@dataclass
class ShadingAttributes:
    """Activated per-Gaussian shading inputs (batched along the leading axis).

    ``idiv`` holds one illumination vector per color channel, shape (..., 3, 3).
    When ``idiv`` is None the diffuse term is ``sh`` color if given, else ``k_D``.
    """

    k_D: np.ndarray
    idiv: np.ndarray | None = None
    roughness: np.ndarray | None = None
    specular_feature: np.ndarray | None = None
    sh: np.ndarray | None = None


@dataclass
class ColorDecomposition:
    diffuse: np.ndarray
    specular: np.ndarray
    total: np.ndarray


def diffuse_color(k_D, idiv, normal):
    """Per-channel ``k_D * max(n . l, 0)`` and its Jacobian w.r.t. the normal.

    Returns:
        L_D of shape (..., 3) and dL_D/dn of shape (..., 3 channels, 3).
    """
    k_D = np.asarray(k_D, dtype=np.float64)
    idiv = np.asarray(idiv, dtype=np.float64)
    d = np.einsum("...ck,...k->...c", idiv, normal)
    lit = d > 0.0
    jac = np.where(lit[..., None], k_D[..., None] * idiv, 0.0)
    return k_D * np.maximum(d, 0.0), jac


def diffuse_gradient_wrt_normal(k_D, idiv, normal, upstream):
    """sum_ch upstream[ch] * k_D[ch] * l_ch over lit channels."""
    _, jac = diffuse_color(k_D, idiv, normal)
    return np.einsum("...c,...ck->...k", upstream, jac)


def diffuse_vjp(k_D, idiv, normal, g):
    d = np.einsum("...ck,...k->...c", idiv, normal)
    lit = d > 0.0
    g_kD = g * np.maximum(d, 0.0)
    gd = np.where(lit, g * k_D, 0.0)
    g_idiv = gd[..., None] * np.asarray(normal)[..., None, :]
    g_n = np.einsum("...c,...ck->...k", gd, idiv)
    return g_kD, g_idiv, g_n


def reflect(view_out, normal):
    """Mirror ``view_out`` (surface-to-eye direction) about ``normal``."""
    view_out = np.asarray(view_out, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    dot = np.sum(view_out * normal, axis=-1, keepdims=True)
    return 2.0 * dot * normal - view_out


def reflect_vjp(view_out, normal, g):
    dot = np.sum(view_out * normal, axis=-1, keepdims=True)
    gn_dot = np.sum(g * normal, axis=-1, keepdims=True)
    g_n = 2.0 * dot * g + 2.0 * gn_dot * view_out
    g_o = 2.0 * gn_dot * normal - g
    return g_o, g_n


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def specular_color(ide_values, normal, anchor_feature, specular_feature, specular_mlp: MlpParams,
                   scale: float = 1.0):
    """Specular RGB in [0, scale]; returns (rgb, cache)."""
    x = np.concatenate([ide_values, normal, anchor_feature, specular_feature], axis=-1)
    if x.shape[-1] != specular_mlp.input_dim:
        raise ValueError(f"specular MLP expects {specular_mlp.input_dim} inputs, got {x.shape[-1]}")
    out, cache = mlp_forward(specular_mlp, x)
    s = _sigmoid(out)
    return scale * s, (cache, s)


def specular_vjp(specular_mlp: MlpParams, cache, g_rgb, scale: float = 1.0):
    """Returns (gradient w.r.t. the concatenated MLP input, MLP parameter gradients)."""
    mcache, s = cache
    g_out = g_rgb * scale * s * (1.0 - s)
    return mlp_backward(specular_mlp, mcache, g_out)


def _split_spec_input(gx, n_ide, n_feat):
    return (gx[..., :n_ide], gx[..., n_ide:n_ide + 3],
            gx[..., n_ide + 3:n_ide + 3 + n_feat], gx[..., n_ide + 3 + n_feat:])


@dataclass
class ShadeCache:
    attrs: ShadingAttributes
    normal: np.ndarray
    view_out: np.ndarray
    anchor_feature: np.ndarray
    reflect_dir: np.ndarray | None = None
    kappa: np.ndarray | None = None
    spec_cache: tuple | None = None
    raw_total: np.ndarray | None = None


def shade(attrs: ShadingAttributes, normal, view_out, anchor_feature=None,
          specular_mlp: MlpParams | None = None, use_specular: bool = True,
          spec_scale: float = 1.0, ide_degree: int = DEFAULT_IDE_DEGREE):
    """Color of each Gaussian seen along ``view_out``; returns (ColorDecomposition, cache)."""
    normal = np.asarray(normal, dtype=np.float64)
    view_out = np.asarray(view_out, dtype=np.float64)
    if attrs.idiv is not None:
        diffuse, _ = diffuse_color(attrs.k_D, attrs.idiv, normal)
    elif attrs.sh is not None:
        diffuse = eval_sh_color(attrs.sh, -view_out)
    else:
        diffuse = np.asarray(attrs.k_D, dtype=np.float64).copy()
    cache = ShadeCache(attrs, normal, view_out, anchor_feature)
    specular = np.zeros_like(diffuse)
    if use_specular and specular_mlp is not None:
        rdir = reflect(view_out, normal)
        kappa = 1.0 / np.maximum(attrs.roughness, ROUGHNESS_FLOOR)
        ide = integrated_directional_encoding(rdir, kappa, ide_degree)
        specular, cache.spec_cache = specular_color(ide.values, normal, anchor_feature,
                                                    attrs.specular_feature, specular_mlp, spec_scale)
        cache.reflect_dir, cache.kappa = rdir, kappa
    raw = diffuse + specular
    cache.raw_total = raw
    return ColorDecomposition(diffuse, specular, np.maximum(raw, 0.0)), cache


def shade_vjp(cache: ShadeCache, g_total, specular_mlp: MlpParams | None = None,
              spec_scale: float = 1.0, ide_degree: int = DEFAULT_IDE_DEGREE):
    """Gradients of the total color w.r.t. every shading input.

    Returns a dict with keys ``k_D, idiv, sh, roughness, specular_feature,
    anchor_feature, normal, view_out, mlp`` (absent inputs map to None).
    """
    a = cache.attrs
    g = np.where(cache.raw_total > 0.0, g_total, 0.0)
    out = dict(k_D=None, idiv=None, sh=None, roughness=None, specular_feature=None,
               anchor_feature=None, mlp=None)
    g_n = np.zeros_like(cache.normal)
    g_o = np.zeros_like(cache.view_out)
    if a.idiv is not None:
        out["k_D"], out["idiv"], g_n = diffuse_vjp(a.k_D, a.idiv, cache.normal, g)
    elif a.sh is not None:
        out["sh"], g_view = eval_sh_color_vjp(a.sh, -cache.view_out, g)
        g_o = g_o - g_view
    else:
        out["k_D"] = g.copy()
    if cache.spec_cache is not None:
        n_feat = cache.anchor_feature.shape[-1]
        gx, gp = specular_vjp(specular_mlp, cache.spec_cache, g, spec_scale)
        n_ide = gx.shape[-1] - 3 - n_feat - a.specular_feature.shape[-1]
        g_ide, g_n_direct, g_feat, g_sf = _split_spec_input(gx, n_ide, n_feat)
        g_r, g_kappa = ide_vjp(cache.reflect_dir, cache.kappa, g_ide, ide_degree)
        g_o_r, g_n_r = reflect_vjp(cache.view_out, cache.normal, g_r)
        g_n = g_n + g_n_direct + g_n_r
        g_o = g_o + g_o_r
        rho = np.asarray(a.roughness, dtype=np.float64)
        out["roughness"] = np.where(rho > ROUGHNESS_FLOOR, -g_kappa / rho**2, 0.0)
        out["specular_feature"] = g_sf
        out["anchor_feature"] = g_feat
        out["mlp"] = gp
    out["normal"] = g_n
    out["view_out"] = g_o
    return out
