"""Training objectives with hand-derived gradients.

Every loss returns its value together with the gradient w.r.t. the rendered
quantity it consumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WEIGHT = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NORMAL_ALPHA_MIN = 0.5


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _blur(img, g):
    # zero-padded "same" filtering over the two image axes; self-adjoint
    out = correlate1d(img, g, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, g, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y, data_range=1.0):
    g = gaussian_window()
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x, g), _blur(y, g)
    exx, eyy, exy = _blur(x * x, g), _blur(y * y, g), _blur(x * y, g)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * cxy + C2
    B1, B2 = mx * mx + my * my + C1, vx + vy + C2
    return g, mx, my, A1, A2, B1, B2


def ssim(x, y, data_range=1.0) -> float:
    """Mean SSIM over all pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, _, _, A1, A2, B1, B2 = _ssim_terms(x, y, data_range)
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_with_grad(x, y, data_range=1.0):
    """SSIM and its gradient w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g, mx, my, A1, A2, B1, B2 = _ssim_terms(x, y, data_range)
    S = A1 * A2 / (B1 * B2)
    gS = np.full_like(S, 1.0 / S.size)
    # S depends on x through mx, E[x^2] and E[xy]
    d_mx = gS * S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2)
    d_exx = gS * S * (-1.0 / B2)
    d_exy = gS * S * (2.0 / A2)
    grad = _blur(d_mx, g) + 2 * x * _blur(d_exx, g) + y * _blur(d_exy, g)
    return float(S.mean()), grad


@dataclass
class PhotometricTerms:
    l1: float
    ssim: float
    value: float


def photometric_loss(rendered, target, ssim_weight=SSIM_WEIGHT):
    """(1 - w) * L1 + w * (1 - SSIM); returns (PhotometricTerms, gradient w.r.t. rendered)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    s, gs = ssim_with_grad(rendered, target)
    value = (1 - ssim_weight) * l1 + ssim_weight * (1.0 - s)
    grad = (1 - ssim_weight) * np.sign(diff) / diff.size - ssim_weight * gs
    return PhotometricTerms(l1, s, value), grad


def psnr(x, y, cap=100.0) -> float:
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, -10.0 * np.log10(mse))


def volume_regularization(log_scales):
    """Mean product of axis scales; returns (value, gradient w.r.t. log_scales)."""
    log_scales = np.asarray(log_scales, dtype=np.float64).reshape(-1, 3)
    if len(log_scales) == 0:
        return 0.0, np.zeros_like(log_scales)
    vol = np.exp(log_scales.sum(axis=1))
    # d prod(exp(ls)) / d ls_k = prod(exp(ls))
    return float(vol.mean()), np.repeat(vol[:, None], 3, axis=1) / len(vol)


@dataclass
class DepthNormalCache:
    P: np.ndarray
    Pu: np.ndarray
    Pv: np.ndarray
    cross: np.ndarray
    length: np.ndarray
    sign: np.ndarray
    rays: np.ndarray
    mask: np.ndarray


def _rays(cam, H, W):
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)


def normal_from_depth(depth, cam, alpha=None):
    """Camera-space normals from the cross product of depth-map backprojection gradients.

    Returns (N_D, mask, cache). Normals face the camera (negative z for a
    fronto-parallel plane). The mask drops image borders and any pixel whose
    4-neighbourhood has alpha below 0.5.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    rays = _rays(cam, H, W)
    P = depth[..., None] * rays
    Pu = np.zeros_like(P)
    Pv = np.zeros_like(P)
    Pu[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
    Pv[1:-1, :] = 0.5 * (P[2:, :] - P[:-2, :])
    cross = np.cross(Pu, Pv)
    length = np.linalg.norm(cross, axis=-1)
    n = cross / np.maximum(length, 1e-300)[..., None]
    sign = np.where(np.sum(n * P, axis=-1) > 0.0, -1.0, 1.0)
    mask = np.zeros((H, W), bool)
    mask[1:-1, 1:-1] = True
    if alpha is not None:
        ok = np.asarray(alpha) >= NORMAL_ALPHA_MIN
        mask[1:-1, 1:-1] &= (ok[1:-1, 1:-1] & ok[:-2, 1:-1] & ok[2:, 1:-1]
                             & ok[1:-1, :-2] & ok[1:-1, 2:])
    mask &= length > 1e-20
    N_D = np.where(mask[..., None], sign[..., None] * n, 0.0)
    return N_D, mask, DepthNormalCache(P, Pu, Pv, cross, length, sign, rays, mask)


def normal_from_depth_vjp(cache: DepthNormalCache, g_ND):
    """Gradient w.r.t. the depth map given the gradient on N_D."""
    m = cache.mask[..., None]
    L = np.maximum(cache.length, 1e-300)[..., None]
    n = cache.cross / L
    g_n = np.where(m, cache.sign[..., None] * g_ND, 0.0)
    g_c = (g_n - n * np.sum(n * g_n, -1, keepdims=True)) / L
    g_c = np.where(m, g_c, 0.0)
    g_Pu = np.cross(cache.Pv, g_c)
    g_Pv = np.cross(g_c, cache.Pu)
    g_P = np.zeros_like(cache.P)
    g_P[:, 2:] += 0.5 * g_Pu[:, 1:-1]
    g_P[:, :-2] -= 0.5 * g_Pu[:, 1:-1]
    g_P[2:, :] += 0.5 * g_Pv[1:-1, :]
    g_P[:-2, :] -= 0.5 * g_Pv[1:-1, :]
    return np.sum(g_P * cache.rays, axis=-1)


def depth_normal_loss(N_D, N, mask):
    """Mean of 1 - N_D . N over the mask; returns (value, grad wrt N, grad wrt N_D)."""
    mask = np.asarray(mask, bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(N), np.zeros_like(N_D)
    dots = np.sum(N_D * N, axis=-1)
    value = float(np.mean(1.0 - dots[mask]))
    w = mask[..., None] / count
    return value, -N_D * w, -N * w


def idiv_sibling_regularizers(idiv, n_offsets):
    """Total-variation and Laplacian penalties over each anchor's K sibling IDIVs.

    ``idiv`` has shape (anchors * K, 3, 3). Returns (tv, tv_grad, lap, lap_grad).
    """
    l = np.asarray(idiv, dtype=np.float64).reshape(-1, n_offsets, 9)
    n = len(l)
    if n == 0 or n_offsets < 2:
        z = np.zeros_like(np.asarray(idiv, dtype=np.float64))
        return 0.0, z, 0.0, z.copy()
    d = l[:, 1:] - l[:, :-1]
    tv = float(np.abs(d).sum() / (n * (n_offsets - 1)))
    s = np.sign(d) / (n * (n_offsets - 1))
    g_tv = np.zeros_like(l)
    g_tv[:, 1:] += s
    g_tv[:, :-1] -= s
    r = l - l.mean(axis=1, keepdims=True)
    lap = float(np.sum(r * r) / (n * n_offsets))
    g_lap = 2.0 * r / (n * n_offsets)
    g_lap = g_lap - g_lap.mean(axis=1, keepdims=True)
    shape = np.asarray(idiv).shape
    return tv, g_tv.reshape(shape), lap, g_lap.reshape(shape)


@dataclass
class LossBreakdown:
    photometric: float
    volume: float
    depth_normal: float
    total: float
    lambda_vol: float
    lambda_N: float
    normal_active: bool = True
    regularizer: float = 0.0


def total_loss(photometric, volume, depth_normal, lambda_vol=0.001, lambda_N=0.01,
               iteration=None, warmup=0, regularizer=0.0) -> LossBreakdown:
    """Weighted objective; the depth-normal term is gated off before ``warmup``."""
    active = iteration is None or iteration >= warmup
    weight_N = lambda_N if active else 0.0
    total = photometric + lambda_vol * volume + weight_N * depth_normal + regularizer
    return LossBreakdown(photometric, volume, depth_normal, total, lambda_vol, lambda_N, active, regularizer)
