"""Tile-based front-to-back alpha blending of 2D Gaussian splats, forward and adjoint.

Each splat carries C blended feature channels: RGB color, camera depth and the
camera-space normal. A splat covers the pixels inside its 3-sigma ellipse
(Mahalanobis distance <= 3); tiles only decide which splats a pixel visits, so
the rendered function does not depend on the tiling.

Tiles are processed in parallel. Every tile owns its pixels and its own slice
of the per-entry gradient scratch, and scratch rows are merged in tile order,
so results are bit-identical for any worker count.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

if numba.config.THREADING_LAYER == "default":
    # the bundled TBB is too old for numba; OpenMP avoids the fallback warning
    numba.config.THREADING_LAYER = "omp"

TILE_SIZE = 16
SIGMA_MAX = 0.99
STOP_TRANSMITTANCE = 1e-4
CUTOFF_POWER = -4.5  # -0.5 * 3**2
DEPTH_ALPHA_FLOOR = 1e-6
N_FEAT = 7  # rgb, depth, normal xyz


@dataclass
class SplatArrays:
    """Flat per-splat arrays consumed by the rasterizer."""

    mean2d: np.ndarray   # (N, 2)
    conic: np.ndarray    # (N, 3)
    radius: np.ndarray   # (N,)
    depth: np.ndarray    # (N,)
    opacity: np.ndarray  # (N,)
    color: np.ndarray    # (N, 3)
    normal: np.ndarray   # (N, 3)
    index: np.ndarray    # (N,) stable ids used for depth tie-breaks

    def __len__(self):
        return len(self.mean2d)

    @classmethod
    def from_splats(cls, splats, opacities, colors):
        """Build from a list of ``geometry.Splat2D`` plus per-splat opacity and color."""
        n = len(splats)
        cov = np.array([s.cov2d for s in splats], dtype=np.float64).reshape(n, 2, 2)
        conic, radius = conic_and_radius(cov)
        return cls(
            mean2d=np.array([s.mean2d for s in splats], dtype=np.float64).reshape(n, 2),
            conic=conic, radius=radius,
            depth=np.array([s.depth for s in splats], dtype=np.float64),
            opacity=np.asarray(opacities, dtype=np.float64).reshape(n),
            color=np.asarray(colors, dtype=np.float64).reshape(n, 3),
            normal=np.array([s.normal_cam for s in splats], dtype=np.float64).reshape(n, 3),
            index=np.array([s.gaussian_index for s in splats], dtype=np.int64),
        )

    def features(self):
        return np.concatenate([self.color, self.depth[:, None], self.normal], axis=1)


def conic_and_radius(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(~(det > 0)) or np.any(~(a > 0)):
        raise ValueError("2D covariance is not positive definite")
    conic = np.stack([c / det, -b / det, a / det], -1)
    mid = 0.5 * (a + c)
    radius = 3.0 * np.sqrt(mid + np.sqrt(np.maximum(mid * mid - det, 0.0)))
    return conic, radius


@dataclass
class Binning:
    entries: np.ndarray       # splat positions, grouped by tile, depth-sorted within a tile
    tile_offsets: np.ndarray  # (n_tiles + 1,)
    tiles_x: int
    tiles_y: int
    tile_size: int

    def tile_list(self, tx, ty):
        t = ty * self.tiles_x + tx
        return self.entries[self.tile_offsets[t]:self.tile_offsets[t + 1]]


def sort_and_bin(mean2d, radius, depth, index, width, height, tile_size=TILE_SIZE) -> Binning:
    """Assign splats to every tile their 3-sigma bounding square overlaps."""
    rx = ry = radius
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    n = len(mean2d)
    if n == 0:
        return Binning(np.zeros(0, np.int64), np.zeros(tiles_x * tiles_y + 1, np.int64),
                       tiles_x, tiles_y, tile_size)
    x0 = np.floor((mean2d[:, 0] - rx) / tile_size).astype(np.int64)
    x1 = np.floor((mean2d[:, 0] + rx) / tile_size).astype(np.int64)
    y0 = np.floor((mean2d[:, 1] - ry) / tile_size).astype(np.int64)
    y1 = np.floor((mean2d[:, 1] + ry) / tile_size).astype(np.int64)
    x0, x1 = np.clip(x0, 0, tiles_x), np.clip(x1, -1, tiles_x - 1)
    y0, y1 = np.clip(y0, 0, tiles_y), np.clip(y1, -1, tiles_y - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    splat = np.repeat(np.arange(n), counts)
    local = np.arange(len(splat)) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[splat] + local % nx[splat]
    ty = y0[splat] + local // nx[splat]
    tile = ty * tiles_x + tx
    order = np.lexsort((index[splat], depth[splat], tile))
    entries = splat[order]
    offsets = np.zeros(tiles_x * tiles_y + 1, np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=offsets[1:])
    return Binning(entries.astype(np.int64), offsets, tiles_x, tiles_y, tile_size)


@njit(parallel=True, cache=True)
def _forward_kernel(offsets, tiles_x, tile, width, height, geom, feats, stop_T, out_feat, out_T, out_n):
    # geom and feats are gathered in entry order: geom rows are (mx, my, a, b, c, opacity)
    n_tiles = len(offsets) - 1
    C = feats.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        acc = np.zeros(C)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                last = start
                acc[:] = 0.0
                for e in range(start, end):
                    dx = px - geom[e, 0]
                    dy = py - geom[e, 1]
                    power = -0.5 * (geom[e, 2] * dx * dx + geom[e, 4] * dy * dy) - geom[e, 3] * dx * dy
                    if power < CUTOFF_POWER:
                        continue
                    sig = min(SIGMA_MAX, geom[e, 5] * np.exp(power))
                    T_next = T * (1.0 - sig)
                    if T_next < stop_T:
                        break
                    w = sig * T
                    for c in range(C):
                        acc[c] += feats[e, c] * w
                    T = T_next
                    last = e + 1
                for c in range(C):
                    out_feat[py, px, c] = acc[c]
                out_T[py, px] = T
                out_n[py, px] = last - start


@njit(parallel=True, cache=True)
def _backward_kernel(offsets, tiles_x, tile, width, height, geom, feats, out_T, out_n, g_feat, g_T, scratch):
    n_tiles = len(offsets) - 1
    C = feats.shape[1]
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                stop = start + out_n[py, px]
                T_final = out_T[py, px]
                # pass 1: total weighted upstream Q
                Q = 0.0
                T = 1.0
                for e in range(start, stop):
                    dx = px - geom[e, 0]
                    dy = py - geom[e, 1]
                    power = -0.5 * (geom[e, 2] * dx * dx + geom[e, 4] * dy * dy) - geom[e, 3] * dx * dy
                    if power < CUTOFF_POWER:
                        continue
                    sig = min(SIGMA_MAX, geom[e, 5] * np.exp(power))
                    dot = 0.0
                    for c in range(C):
                        dot += g_feat[py, px, c] * feats[e, c]
                    Q += dot * sig * T
                    T = T * (1.0 - sig)
                # pass 2: per-contributor gradients
                P = 0.0
                T = 1.0
                gT = g_T[py, px]
                for e in range(start, stop):
                    dx = px - geom[e, 0]
                    dy = py - geom[e, 1]
                    a = geom[e, 2]
                    b = geom[e, 3]
                    c2 = geom[e, 4]
                    power = -0.5 * (a * dx * dx + c2 * dy * dy) - b * dx * dy
                    if power < CUTOFF_POWER:
                        continue
                    G = np.exp(power)
                    raw = geom[e, 5] * G
                    sig = min(SIGMA_MAX, raw)
                    w = sig * T
                    dot = 0.0
                    for c in range(C):
                        dot += g_feat[py, px, c] * feats[e, c]
                        scratch[e, 6 + c] += g_feat[py, px, c] * w
                    behind = Q - P - dot * w
                    inv = 1.0 / (1.0 - sig)
                    d_sig = T * dot - behind * inv - gT * T_final * inv
                    P += dot * w
                    T = T * (1.0 - sig)
                    if raw < SIGMA_MAX:
                        scratch[e, 5] += d_sig * G
                        d_pow = d_sig * geom[e, 5] * G
                        scratch[e, 0] += d_pow * (a * dx + b * dy)
                        scratch[e, 1] += d_pow * (b * dx + c2 * dy)
                        scratch[e, 2] += -0.5 * d_pow * dx * dx
                        scratch[e, 3] += -d_pow * dx * dy
                        scratch[e, 4] += -0.5 * d_pow * dy * dy


def _gather(splats: SplatArrays, entries):
    geom = np.concatenate([splats.mean2d, splats.conic, splats.opacity[:, None]], axis=1)
    return np.ascontiguousarray(geom[entries]), np.ascontiguousarray(splats.features()[entries])


@contextmanager
def worker_count(n):
    """Temporarily limit the numba thread pool (``None`` leaves it unchanged)."""
    if n is None:
        yield
        return
    old = numba.get_num_threads()
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
    try:
        yield
    finally:
        numba.set_num_threads(old)


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W) alpha-normalized expected depth
    normal: np.ndarray   # (H, W, 3) unit (zero where nothing was blended)
    alpha: np.ndarray    # (H, W)
    feat_acc: np.ndarray  # (H, W, 7) raw blended channels
    T_final: np.ndarray
    n_visited: np.ndarray  # per-pixel count of tile-list entries up to the last contributor
    binning: Binning
    splats: SplatArrays
    background: np.ndarray
    stop_T: float

    @property
    def height(self):
        return self.color.shape[0]

    @property
    def width(self):
        return self.color.shape[1]

    def contributors(self, row, col):
        """[(splat position, sigma_i, T_i)] for one pixel, front to back."""
        b, s = self.binning, self.splats
        t = (row // b.tile_size) * b.tiles_x + col // b.tile_size
        start = b.tile_offsets[t]
        out = []
        T = 1.0
        for e in range(start, start + self.n_visited[row, col]):
            i = b.entries[e]
            dx, dy = col - s.mean2d[i, 0], row - s.mean2d[i, 1]
            a, bb, c = s.conic[i]
            power = -0.5 * (a * dx * dx + c * dy * dy) - bb * dx * dy
            if power < CUTOFF_POWER:
                continue
            sig = min(SIGMA_MAX, s.opacity[i] * np.exp(power))
            out.append((int(i), sig, T))
            T *= 1.0 - sig
        return out


def render_forward(splats: SplatArrays, width: int, height: int, background=(0.0, 0.0, 0.0),
                   stop_T: float = STOP_TRANSMITTANCE, tile_size: int = TILE_SIZE,
                   workers: int | None = None) -> RenderOutput:
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    binning = sort_and_bin(splats.mean2d, splats.radius, splats.depth, splats.index,
                           width, height, tile_size)
    geom, feats = _gather(splats, binning.entries)
    acc = np.zeros((height, width, N_FEAT))
    T = np.ones((height, width))
    n_vis = np.zeros((height, width), np.int64)
    with worker_count(workers):
        _forward_kernel(binning.tile_offsets, binning.tiles_x, tile_size, width, height,
                        geom, feats, float(stop_T), acc, T, n_vis)
    alpha = 1.0 - T
    color = acc[..., :3] + bg * T[..., None]
    depth = acc[..., 3] / np.maximum(alpha, DEPTH_ALPHA_FLOOR)
    nraw = acc[..., 4:7]
    nlen = np.linalg.norm(nraw, axis=-1, keepdims=True)
    normal = np.where(nlen > 1e-12, nraw / np.maximum(nlen, 1e-12), 0.0)
    return RenderOutput(color, depth, normal, alpha, acc, T, n_vis, binning, splats, bg, stop_T)


@dataclass
class SplatGrads:
    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray


def render_backward(out: RenderOutput, g_color=None, g_depth=None, g_normal=None, g_alpha=None,
                    workers: int | None = None) -> SplatGrads:
    """Adjoint of render_forward for the given image-space gradients (None = zero)."""
    H, W = out.height, out.width
    g_color = np.zeros((H, W, 3)) if g_color is None else np.asarray(g_color, dtype=np.float64)
    g_depth = np.zeros((H, W)) if g_depth is None else np.asarray(g_depth, dtype=np.float64)
    g_normal = np.zeros((H, W, 3)) if g_normal is None else np.asarray(g_normal, dtype=np.float64)
    g_alpha = np.zeros((H, W)) if g_alpha is None else np.asarray(g_alpha, dtype=np.float64)
    if g_color.shape != (H, W, 3) or g_depth.shape != (H, W) or g_normal.shape != (H, W, 3) \
            or g_alpha.shape != (H, W):
        raise ValueError("image gradients do not match the forward record")

    g_acc = np.zeros((H, W, N_FEAT))
    g_acc[..., :3] = g_color
    alpha = out.alpha
    am = np.maximum(alpha, DEPTH_ALPHA_FLOOR)
    g_acc[..., 3] = g_depth / am
    g_a = g_alpha + np.where(alpha > DEPTH_ALPHA_FLOOR, -g_depth * out.feat_acc[..., 3] / am**2, 0.0)
    nraw = out.feat_acc[..., 4:7]
    nlen = np.linalg.norm(nraw, axis=-1, keepdims=True)
    n = out.normal
    g_acc[..., 4:7] = np.where(nlen > 1e-12,
                               (g_normal - n * np.sum(n * g_normal, -1, keepdims=True)) / np.maximum(nlen, 1e-12),
                               0.0)
    g_T = g_color @ out.background - g_a

    s, b = out.splats, out.binning
    scratch = np.zeros((len(b.entries), 6 + N_FEAT))
    geom, feats = _gather(s, b.entries)
    with worker_count(workers):
        _backward_kernel(b.tile_offsets, b.tiles_x, b.tile_size, W, H, geom, feats,
                         out.T_final, out.n_visited, np.ascontiguousarray(g_acc),
                         np.ascontiguousarray(g_T), scratch)
    total = np.zeros((len(s), 6 + N_FEAT))
    np.add.at(total, b.entries, scratch)
    return SplatGrads(mean2d=total[:, 0:2], conic=total[:, 2:5], opacity=total[:, 5],
                      color=total[:, 6:9], depth=total[:, 9], normal=total[:, 10:13])
