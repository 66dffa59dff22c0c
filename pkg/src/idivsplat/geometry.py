"""Gaussian primitives, rotation/covariance math and EWA perspective projection.

Arrays are float64 and batched along the leading axis. Quaternions are stored
as raw (w, x, y, z) parameters and normalized inside every consumer; each
forward function here has a matching ``*_vjp`` that maps output gradients back
to its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOWPASS = 0.3  # px^2 added to the projected covariance diagonal
RADIUS_SIGMAS = 3.0
CULL_MARGIN = 1.3


# --------------------------------------------------------------------------
# quaternions and covariance
# --------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_normalize_vjp(q_raw, g_unit):
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    unit = q_raw / norm
    return (g_unit - unit * np.sum(unit * g_unit, axis=-1, keepdims=True)) / norm


def quat_to_rotmat(q):
    """Rotation matrices for unit quaternions ``q`` of shape (..., 4)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    R = np.empty(w.shape + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, gR):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    G = gR
    g00, g01, g02 = G[..., 0, 0], G[..., 0, 1], G[..., 0, 2]
    g10, g11, g12 = G[..., 1, 0], G[..., 1, 1], G[..., 1, 2]
    g20, g21, g22 = G[..., 2, 0], G[..., 2, 1], G[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=-1)


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def covariance_from_params(rotation, log_scales):
    """Sigma = R diag(exp(2 log_scales)) R^T; the quaternion is normalized here."""
    R = quat_to_rotmat(quat_normalize(rotation))
    var = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("...ik,...k,...jk->...ij", R, var, R)


def covariance_vjp(rotation, log_scales, g_cov):
    """Gradients of covariance_from_params w.r.t. the raw quaternion and log-scales."""
    q = quat_normalize(rotation)
    R = quat_to_rotmat(q)
    var = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    G = 0.5 * (g_cov + np.swapaxes(g_cov, -1, -2))
    gR = 2.0 * np.einsum("...ij,...jk,...k->...ik", G, R, var)
    g_var = np.einsum("...ik,...ij,...jk->...k", R, G, R)
    g_ls = 2.0 * var * g_var
    g_q = quat_normalize_vjp(rotation, quat_to_rotmat_vjp(q, gR))
    return g_q, g_ls


# --------------------------------------------------------------------------
# shortest-axis normals
# --------------------------------------------------------------------------

def shortest_axis_normals(R, log_scales, to_camera):
    """Camera-facing shortest axes.

    Args:
        R: (N, 3, 3) rotation matrices (columns are the Gaussian axes).
        log_scales: (N, 3).
        to_camera: (N, 3) vectors from each Gaussian toward the camera.

    Returns:
        normals (N, 3), the selected axis index (N,) and the applied sign (N,).
    """
    idx = np.argmin(log_scales, axis=-1)
    axis = np.take_along_axis(R, idx[:, None, None], axis=2)[..., 0]
    sign = np.where(np.sum(axis * to_camera, axis=-1) >= 0.0, 1.0, -1.0)
    return sign[:, None] * axis, idx, sign


def shortest_axis_normals_vjp(idx, sign, g_normal):
    gR = np.zeros(g_normal.shape[:1] + (3, 3))
    gR[np.arange(len(idx)), :, idx] = sign[:, None] * g_normal
    return gR


# --------------------------------------------------------------------------
# camera and projection
# --------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    Pixel ``(row i, column j)`` has its center at image coordinates ``(u, v) = (j, i)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera width and height must be >= 1")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        if not is_rotation(self.R):
            raise ValueError("world_to_cam rotation is not orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None, near=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, R, -R @ eye, near)

    def pixel_rays(self):
        """Unit world-space ray directions, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.R

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(), "near": self.near,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["R"]), np.array(d["t"]), d.get("near", 0.01))


def is_rotation(R, tol=1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return bool(np.allclose(R @ R.T, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass
class Projection:
    """Batched projection results for N Gaussians (all entries, culled included)."""

    p_cam: np.ndarray      # (N, 3)
    mean2d: np.ndarray     # (N, 2)
    J: np.ndarray          # (N, 2, 3)
    T: np.ndarray          # (N, 2, 3) = J W
    cov2d: np.ndarray      # (N, 2, 2)
    conic: np.ndarray      # (N, 3) entries (a, b, c) of cov2d^-1
    radius: np.ndarray     # (N,)
    visible: np.ndarray    # (N,) bool

    @property
    def depth(self):
        return self.p_cam[:, 2]


def project_gaussians(means, cov3d, cam: Camera) -> Projection:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    p = means @ cam.R.T + cam.t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    in_front = z > cam.near
    zs = np.where(in_front, z, 1.0)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    T = J @ cam.R
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], -1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(lam_max)
    m = CULL_MARGIN * radius
    on_screen = ((mean2d[:, 0] >= -m) & (mean2d[:, 0] <= cam.width - 1 + m)
                 & (mean2d[:, 1] >= -m) & (mean2d[:, 1] <= cam.height - 1 + m))
    return Projection(p, mean2d, J, T, cov2d, conic, radius, in_front & on_screen & (det > 0))


def project_vjp(proj: Projection, cov3d, cam: Camera, g_mean2d, g_conic, g_depth):
    """Map gradients on (mean2d, conic, depth) back to world means and 3D covariances."""
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    Minv = np.empty_like(proj.cov2d)
    Minv[:, 0, 0] = proj.conic[:, 0]
    Minv[:, 0, 1] = Minv[:, 1, 0] = proj.conic[:, 1]
    Minv[:, 1, 1] = proj.conic[:, 2]
    Gc = np.empty_like(Minv)
    Gc[:, 0, 0] = g_conic[:, 0]
    Gc[:, 0, 1] = Gc[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gc[:, 1, 1] = g_conic[:, 2]
    gM = -Minv @ Gc @ Minv
    T = proj.T
    g_cov3d = np.swapaxes(T, 1, 2) @ gM @ T
    gT = 2.0 * gM @ T @ cov3d
    gJ = gT @ cam.R.T

    gx = g_mean2d[:, 0] * fx / z
    gy = g_mean2d[:, 1] * fy / z
    gz = -g_mean2d[:, 0] * fx * x / z**2 - g_mean2d[:, 1] * fy * y / z**2
    gz = gz + g_depth
    gz += -gJ[:, 0, 0] * fx / z**2 - gJ[:, 1, 1] * fy / z**2
    gx += -gJ[:, 0, 2] * fx / z**2
    gz += gJ[:, 0, 2] * 2 * fx * x / z**3
    gy += -gJ[:, 1, 2] * fy / z**2
    gz += gJ[:, 1, 2] * 2 * fy * y / z**3
    g_p = np.stack([gx, gy, gz], -1)
    return g_p @ cam.R, g_cov3d


# --------------------------------------------------------------------------
# single-primitive API
# --------------------------------------------------------------------------

@dataclass
class Gaussian3D:
    mean: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float = 0.0
    shading: object = None

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.rotation, self.log_scales)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    normal_cam: np.ndarray
    gaussian_index: int = 0


def shortest_axis_normal(g: Gaussian3D, view_dir_to_gaussian) -> np.ndarray:
    """Camera-facing shortest axis of ``g``.

    ``view_dir_to_gaussian`` is the viewing direction from the camera toward the
    Gaussian; the returned normal has a non-negative dot with its negation.
    """
    R = quat_to_rotmat(quat_normalize(g.rotation))[None]
    ls = np.asarray(g.log_scales, dtype=np.float64)[None]
    to_cam = -np.asarray(view_dir_to_gaussian, dtype=np.float64)[None]
    n, _, _ = shortest_axis_normals(R, ls, to_cam)
    return n[0]


def project_gaussian(g: Gaussian3D, cam: Camera, index: int = 0) -> Splat2D | None:
    """Project one Gaussian; returns None when it is culled."""
    cov = g.covariance[None]
    proj = project_gaussians(np.asarray(g.mean)[None], cov, cam)
    if not proj.visible[0]:
        return None
    R = quat_to_rotmat(quat_normalize(g.rotation))[None]
    to_cam = (cam.center - np.asarray(g.mean, dtype=np.float64))[None]
    n, _, _ = shortest_axis_normals(R, np.asarray(g.log_scales, dtype=np.float64)[None], to_cam)
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]), cam.R @ n[0], index)
