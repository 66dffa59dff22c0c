"""Independent ground truth: Monte-Carlo lighting integrals, analytic scenes,
finite-difference gradient checks and a naive reference rasterizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ive

from .geometry import Camera
from .rasterizer import CUTOFF_POWER, SIGMA_MAX, DEPTH_ALPHA_FLOOR, SplatArrays

MC_CHUNK = 1 << 15


# --------------------------------------------------------------------------
# light fields
# --------------------------------------------------------------------------

@dataclass
class LightField:
    """Directional (delta) lights plus smooth vMF-style lobes.

    A lobe contributes ``amplitude * exp(sharpness * (axis . w - 1))``; zero
    sharpness gives radiance that is uniform over the sphere.
    """

    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    radiance: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    lobe_axes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    lobe_sharpness: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lobe_amplitude: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.radiance = np.asarray(self.radiance, dtype=np.float64).reshape(-1, 3)
        self.lobe_axes = np.asarray(self.lobe_axes, dtype=np.float64).reshape(-1, 3)
        self.lobe_sharpness = np.asarray(self.lobe_sharpness, dtype=np.float64).reshape(-1)
        self.lobe_amplitude = np.asarray(self.lobe_amplitude, dtype=np.float64).reshape(-1, 3)
        if len(self.directions) != len(self.radiance):
            raise ValueError("each directional light needs one RGB radiance")
        if not (len(self.lobe_axes) == len(self.lobe_sharpness) == len(self.lobe_amplitude)):
            raise ValueError("lobe axes, sharpness and amplitude must have equal length")
        for name in ("directions", "lobe_axes"):
            a = getattr(self, name)
            if len(a) and not np.allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9):
                raise ValueError(f"{name} must be unit vectors")
        if (self.radiance < 0).any() or (self.lobe_amplitude < 0).any() or (self.lobe_sharpness < 0).any():
            raise ValueError("radiances, amplitudes and sharpness must be non-negative")

    @classmethod
    def directional(cls, direction, radiance):
        d = np.asarray(direction, dtype=np.float64)
        return cls(directions=d / np.linalg.norm(d), radiance=np.broadcast_to(radiance, 3))

    @classmethod
    def uniform(cls, radiance):
        return cls(lobe_axes=[0.0, 0.0, 1.0], lobe_sharpness=[0.0],
                   lobe_amplitude=np.broadcast_to(radiance, 3))

    @classmethod
    def random(cls, rng, n_directional=None, n_lobes=None, max_sharpness=50.0):
        nd = rng.integers(0, 3) if n_directional is None else n_directional
        nl = rng.integers(1, 4) if n_lobes is None else n_lobes
        return cls(directions=_unit(rng.normal(size=(nd, 3))), radiance=rng.uniform(0, 1, (nd, 3)),
                   lobe_axes=_unit(rng.normal(size=(nl, 3))),
                   lobe_sharpness=rng.uniform(0, max_sharpness, nl),
                   lobe_amplitude=rng.uniform(0, 1, (nl, 3)))

    def __add__(self, other: "LightField"):
        return LightField(np.vstack([self.directions, other.directions]),
                          np.vstack([self.radiance, other.radiance]),
                          np.vstack([self.lobe_axes, other.lobe_axes]),
                          np.concatenate([self.lobe_sharpness, other.lobe_sharpness]),
                          np.vstack([self.lobe_amplitude, other.lobe_amplitude]))

    def smooth_radiance(self, omega):
        """RGB radiance of the lobes arriving from directions ``omega`` (..., 3)."""
        omega = np.asarray(omega, dtype=np.float64)
        cos = omega @ self.lobe_axes.T
        w = np.exp(self.lobe_sharpness * (cos - 1.0))
        return w @ self.lobe_amplitude

    def irradiance(self, normal):
        """Exact cosine-weighted irradiance over the hemisphere of ``normal`` (..., 3)."""
        normal = np.asarray(normal, dtype=np.float64)
        E = np.maximum(normal @ self.directions.T, 0.0) @ self.radiance
        for axis, lam, amp in zip(self.lobe_axes, self.lobe_sharpness, self.lobe_amplitude):
            E = E + lobe_irradiance(normal @ axis, lam)[..., None] * amp
        return E

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("directions", "radiance", "lobe_axes", "lobe_sharpness", "lobe_amplitude")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(400)


def lobe_irradiance(cos_beta, sharpness):
    """Cosine-weighted hemisphere integral of a unit-amplitude lobe whose axis
    makes angle beta with the normal. Reduced to 1D with the Bessel identity
    and evaluated by Gauss-Legendre quadrature."""
    cos_beta = np.clip(np.asarray(cos_beta, dtype=np.float64), -1.0, 1.0)
    lam = float(sharpness)
    if lam == 0.0:
        return np.full(cos_beta.shape, np.pi)
    theta = 0.25 * np.pi * (_GL_NODES + 1.0)
    w = 0.25 * np.pi * _GL_WEIGHTS
    cb = cos_beta[..., None]
    sb = np.sqrt(np.maximum(1.0 - cb * cb, 0.0))
    ct, st = np.cos(theta), np.sin(theta)
    # exp(lam (cb ct - 1)) I0(lam sb st) = exp(lam (cb ct + sb st - 1)) ive(0, lam sb st)
    f = np.exp(lam * (cb * ct + sb * st - 1.0)) * ive(0, lam * sb * st) * ct * st
    return 2.0 * np.pi * np.sum(f * w, axis=-1)


def lobe_idiv(normal, axis, sharpness, n_theta=400):
    """Hemisphere integral of a unit lobe times the direction vector, by 2D quadrature."""
    n = _unit(normal)
    t1, t2 = _tangent_frame(n)
    theta = 0.25 * np.pi * (_GL_NODES + 1.0)
    wt = 0.25 * np.pi * _GL_WEIGHTS
    phi = np.linspace(0.0, 2 * np.pi, 2 * n_theta, endpoint=False)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = (np.sin(th) * np.cos(ph))[..., None] * t1 + (np.sin(th) * np.sin(ph))[..., None] * t2 \
        + np.cos(th)[..., None] * n
    val = np.exp(sharpness * (dirs @ axis - 1.0)) * np.sin(th)
    weight = (wt[:, None] * (2 * np.pi / len(phi)))
    return np.einsum("tp,tpk->k", val * weight, dirs)


# --------------------------------------------------------------------------
# Monte-Carlo integrals over the hemisphere
# --------------------------------------------------------------------------

def _tangent_frame(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def sample_hemisphere(rng, normal, count):
    """Uniform directions on the hemisphere around ``normal`` (pdf 1/(2 pi))."""
    n = _unit(normal)
    t1, t2 = _tangent_frame(n)
    u = rng.random((count, 2))
    z = u[:, 0]
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = 2.0 * np.pi * u[:, 1]
    return (r * np.cos(phi))[:, None] * t1 + (r * np.sin(phi))[:, None] * t2 + z[:, None] * n


def _mc_moments(light, normal, samples, seed, integrand):
    """Sum and sum of outer products of ``integrand`` over uniform hemisphere samples.

    Samples are drawn in fixed-size chunks, each from its own child stream of
    ``seed``, so the result is independent of how the work is scheduled.
    """
    n_chunks = -(-samples // MC_CHUNK)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(n_chunks)
    s1 = s2 = None
    for i, ss in enumerate(streams):
        m = min(MC_CHUNK, samples - i * MC_CHUNK)
        w = sample_hemisphere(np.random.default_rng(ss), normal, m)
        v = integrand(w, light.smooth_radiance(w)) * (2.0 * np.pi)
        v = v.reshape(m, -1)
        s1 = v.sum(0) if s1 is None else s1 + v.sum(0)
        o = v.T @ v
        s2 = o if s2 is None else s2 + o
    mean = s1 / samples
    cov = (s2 / samples - np.outer(mean, mean)) * samples / max(samples - 1, 1)
    return mean, cov / samples


@dataclass
class McEstimate:
    value: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray  # covariance of the flattened estimate


def mc_diffuse_integral(light: LightField, normal, k_D, samples: int, seed=0) -> McEstimate:
    """k_D * integral of L_in(w) (w . n) over the hemisphere of n, per channel."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = _unit(normal)
    k_D = np.broadcast_to(np.asarray(k_D, dtype=np.float64), 3)
    mean, cov = _mc_moments(light, n, samples, seed, lambda w, L: L * (w @ n)[:, None])
    delta = np.maximum(light.directions @ n, 0.0) @ light.radiance
    cov = cov * np.outer(k_D, k_D)
    return McEstimate(k_D * (mean + delta), np.sqrt(np.maximum(np.diag(cov), 0.0)), cov)


def mc_idiv(light: LightField, hemisphere_normal, samples: int, seed=0) -> McEstimate:
    """Per-channel integral of L_in(w) w over the hemisphere; value shape (3 channels, 3)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = _unit(hemisphere_normal)
    mean, cov = _mc_moments(light, n, samples, seed, lambda w, L: L[:, :, None] * w[:, None, :])
    inside = (light.directions @ n > 0.0)[:, None]
    delta = np.einsum("jc,jk->ck", light.radiance * inside, light.directions)
    value = mean.reshape(3, 3) + delta
    return McEstimate(value, np.sqrt(np.maximum(np.diag(cov), 0.0)).reshape(3, 3), cov)


def idiv_projection_stderr(est: McEstimate, normal):
    """Standard error of n . l per channel from an mc_idiv estimate."""
    n = _unit(normal)
    cov = est.covariance.reshape(3, 3, 3, 3)
    return np.sqrt(np.maximum(np.einsum("i,cicj,j->c", n, cov, n), 0.0))


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

SCENE_KINDS = ("lambertian-spheres", "specular-sphere", "textured-plane")


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray


@dataclass
class Plane:
    """Axis-aligned square patch of the z = height plane with a checker albedo."""

    height: float
    half_size: float
    albedo_a: np.ndarray
    albedo_b: np.ndarray
    checker: float


@dataclass
class SpecularLobe:
    axis: np.ndarray
    sharpness: float
    amplitude: np.ndarray
    k_S: float


@dataclass
class SyntheticScene:
    kind: str
    cameras: list
    images: np.ndarray    # (V, H, W, 3) in [0, 1]
    depths: np.ndarray    # (V, H, W) camera z, 0 on background
    normals: np.ndarray   # (V, H, W, 3) world-space unit normals, 0 on background
    masks: np.ndarray     # (V, H, W) surface hit at the pixel center
    seed_points: np.ndarray
    light: LightField
    background: np.ndarray
    surfaces: list
    specular: SpecularLobe | None = None

    @property
    def n_views(self):
        return len(self.cameras)


def camera_ring(n_views, resolution, radius=4.0, elevation_deg=20.0, fov_deg=40.0, target=(0, 0, 0)):
    fx = 0.5 * resolution / np.tan(0.5 * np.radians(fov_deg))
    el = np.radians(elevation_deg)
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        eye = np.asarray(target) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), fx, fx, resolution, resolution))
    return cams


def _scene_layout(kind, rng):
    if kind == "lambertian-spheres":
        return [Sphere(np.array([-0.55, -0.35, 0.0]), 0.5, np.array([0.9, 0.35, 0.3])),
                Sphere(np.array([0.55, -0.25, 0.05]), 0.45, np.array([0.3, 0.8, 0.4])),
                Sphere(np.array([0.0, 0.55, -0.05]), 0.5, np.array([0.35, 0.45, 0.9]))], None
    if kind == "specular-sphere":
        lobe = SpecularLobe(_unit(np.array([0.4, -0.3, 0.85])), 60.0, np.array([1.0, 1.0, 1.0]), 0.5)
        return [Sphere(np.zeros(3), 0.8, np.array([0.55, 0.3, 0.25]))], lobe
    if kind == "textured-plane":
        return [Plane(0.0, 1.2, np.array([0.85, 0.8, 0.7]), np.array([0.3, 0.35, 0.5]), 0.4)], None
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")


def default_light():
    """A warm key light, a sky-like lobe and weak ambient fill."""
    return (LightField.directional([0.5, -0.4, 0.75], [0.55, 0.5, 0.45])
            + LightField(lobe_axes=[[0.0, 0.0, 1.0]], lobe_sharpness=[2.0], lobe_amplitude=[[0.12, 0.14, 0.18]])
            + LightField.uniform([0.025, 0.025, 0.025]))


def _intersect(surfaces, origin, dirs):
    """Nearest hit along rays origin + t dirs. Returns t (inf on miss), normal, albedo."""
    n = len(dirs)
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    for s in surfaces:
        if isinstance(s, Sphere):
            oc = origin - s.center
            b = dirs @ oc
            a = np.sum(dirs * dirs, axis=1)
            c = oc @ oc - s.radius ** 2
            disc = b * b - a * c
            ok = disc >= 0
            t = np.where(ok, (-b - np.sqrt(np.maximum(disc, 0))) / a, np.inf)
            t = np.where(t > 1e-9, t, np.inf)
            hit = t < t_best
            p = origin + t[hit, None] * dirs[hit]
            normal[hit] = (p - s.center) / s.radius
            albedo[hit] = s.albedo
        else:
            dz = dirs[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (s.height - origin[2]) / dz
            t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
            p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
            inside = (np.abs(p[:, 0]) <= s.half_size) & (np.abs(p[:, 1]) <= s.half_size)
            t = np.where(inside, t, np.inf)
            hit = t < t_best
            sgn = 1.0 if origin[2] > s.height else -1.0
            normal[hit] = np.array([0.0, 0.0, sgn])
            cell = (np.floor(p[hit, 0] / s.checker) + np.floor(p[hit, 1] / s.checker)).astype(int) % 2
            albedo[hit] = np.where(cell[:, None] == 0, s.albedo_a, s.albedo_b)
        t_best = np.where(hit, t, t_best)
    return t_best, normal, albedo


def shade_surface(light, normal, albedo, view_out=None, specular: SpecularLobe | None = None):
    """Lambertian radiance (plus an optional mirror lobe) leaving a surface point."""
    rgb = albedo * light.irradiance(normal)
    if specular is not None and view_out is not None:
        r = 2.0 * np.sum(view_out * normal, -1, keepdims=True) * normal - view_out
        rgb = rgb + specular.k_S * np.exp(specular.sharpness * (r @ specular.axis - 1.0))[:, None] * specular.amplitude
    return rgb


def _render_truth(cam, surfaces, light, specular, supersample=2):
    H, W = cam.height, cam.width
    origin = cam.center
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    color = np.zeros((H, W, 3))
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    for oy in offs:
        for ox in offs:
            d_cam = np.stack([(u + ox - cam.cx) / cam.fx, (v + oy - cam.cy) / cam.fy, np.ones_like(u)], -1)
            dirs = d_cam.reshape(-1, 3) @ cam.R  # world directions, camera z component 1
            t, n, a = _intersect(surfaces, origin, dirs)
            hit = np.isfinite(t)
            rgb = np.zeros((len(t), 3))
            if hit.any():
                view_out = -_unit(dirs[hit])
                rgb[hit] = shade_surface(light, n[hit], a[hit], view_out, specular)
            color += rgb.reshape(H, W, 3)
    color /= supersample ** 2
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], -1)
    t, n, _ = _intersect(surfaces, origin, d_cam.reshape(-1, 3) @ cam.R)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0).reshape(H, W)
    normal = np.where(hit[:, None], n, 0.0).reshape(H, W, 3)
    return np.clip(color, 0.0, 1.0), depth, normal, hit.reshape(H, W)


def _seed_points(surfaces, rng, count):
    pts = []
    per = -(-count // len(surfaces))
    for s in surfaces:
        if isinstance(s, Sphere):
            pts.append(s.center + s.radius * _unit(rng.normal(size=(per, 3))))
        else:
            xy = rng.uniform(-s.half_size, s.half_size, (per, 2))
            pts.append(np.column_stack([xy, np.full(per, s.height)]))
    return np.vstack(pts)


def generate_scene(kind: str, n_views: int = 16, resolution: int = 128, light: LightField | None = None,
                   seed: int = 0, n_seed_points: int = 1200, supersample: int = 2) -> SyntheticScene:
    """Ray-trace an analytic scene from a ring of cameras."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    surfaces, specular = _scene_layout(kind, rng)
    light = default_light() if light is None else light
    elev = 35.0 if kind == "textured-plane" else 20.0
    cams = camera_ring(n_views, resolution, elevation_deg=elev)
    imgs, deps, nors, masks = zip(*(_render_truth(c, surfaces, light, specular, supersample) for c in cams))
    return SyntheticScene(kind, cams, np.stack(imgs), np.stack(deps), np.stack(nors), np.stack(masks),
                          _seed_points(surfaces, rng, n_seed_points), light, np.zeros(3), surfaces, specular)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def normal_mae(predicted, ground_truth, mask=None) -> float:
    """Mean angle in degrees between unit normals over ``mask`` (NaN if empty)."""
    p = np.asarray(predicted, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 3)
    if mask is None:
        m = np.ones(len(p), bool)
    else:
        m = np.asarray(mask, bool).reshape(-1)
    if not m.any():
        return float("nan")
    cos = np.clip(np.sum(p[m] * g[m], axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


# --------------------------------------------------------------------------
# naive reference rasterizer
# --------------------------------------------------------------------------

@dataclass
class NaiveRender:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    feat_acc: np.ndarray


def naive_render(splats: SplatArrays, width: int, height: int, background=(0.0, 0.0, 0.0),
                 stop_T: float = 0.0) -> NaiveRender:
    """Every pixel blends every splat in one global depth order, no tiles."""
    order = np.lexsort((splats.index, splats.depth))
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    T = np.ones((height, width))
    done = np.zeros((height, width), bool)
    feats = np.concatenate([splats.color, splats.depth[:, None], splats.normal], axis=1)
    acc = np.zeros((height, width, feats.shape[1]))
    for s in order:
        dx, dy = u - splats.mean2d[s, 0], v - splats.mean2d[s, 1]
        a, b, c = splats.conic[s]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        sig = np.where(power >= CUTOFF_POWER, np.minimum(SIGMA_MAX, splats.opacity[s] * np.exp(power)), 0.0)
        T_next = T * (1.0 - sig)
        done |= (sig > 0) & (T_next < stop_T)
        sig = np.where(done, 0.0, sig)
        acc += (sig * T)[..., None] * feats[s]
        T = np.where(done, T, T * (1.0 - sig))
    alpha = 1.0 - T
    bg = np.asarray(background, dtype=np.float64)
    nraw = acc[..., 4:7]
    nlen = np.linalg.norm(nraw, axis=-1, keepdims=True)
    return NaiveRender(acc[..., :3] + bg * T[..., None],
                       acc[..., 3] / np.maximum(alpha, DEPTH_ALPHA_FLOOR),
                       np.where(nlen > 1e-12, nraw / np.maximum(nlen, 1e-12), 0.0), alpha, acc)


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    failing: list           # (name, flat index, analytic, numeric, rel)
    checked: int
    non_smooth: list        # coordinates whose probes crossed a branch at every step size
    non_finite: list
    tolerance: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return not self.failing and not self.non_finite

    def summary(self) -> str:
        return (f"checked={self.checked} max_rel={self.max_rel_error:.3e} tol={self.tolerance:g} "
                f"failing={len(self.failing)} non_smooth={len(self.non_smooth)} "
                f"non_finite={len(self.non_finite)}")


def rel_error(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def _evaluate(func, params):
    r = func(params)
    if isinstance(r, tuple):
        return float(r[0]), r[1]
    return float(r), None


def gradcheck(func, params, analytic, eps=1e-5, tolerance=1e-3, indices=None, max_refinements=3):
    """Compare analytic gradients with central differences.

    ``params`` is an array or a dict of arrays, ``analytic`` has the same
    structure. ``func(params)`` returns the scalar value, or ``(value,
    signature)`` where the signature identifies the discrete branch taken
    (for piecewise-smooth functions). When the two probes of a coordinate land
    on different branches the step is shrunk tenfold, up to
    ``max_refinements`` times; coordinates that never settle are reported as
    non-smooth rather than compared. ``indices`` optionally maps each name to
    the flat indices to probe.
    """
    single = not isinstance(params, dict)
    P = {"x": params} if single else params
    A = {"x": analytic} if single else analytic
    if single and indices is not None and not isinstance(indices, dict):
        indices = {"x": indices}
    _, base_sig = _evaluate(func, params)
    failing, non_smooth, non_finite = [], [], []
    worst, max_rel, checked = None, 0.0, 0
    for name, arr in P.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} must be contiguous")
        g = np.asarray(A[name], dtype=np.float64).reshape(-1)
        idx = range(flat.size) if indices is None or name not in indices else indices[name]
        if indices is not None and name not in indices:
            continue
        for i in idx:
            orig = flat[i]
            h = eps
            numeric = None
            for _ in range(max_refinements + 1):
                flat[i] = orig + h
                fp, sp = _evaluate(func, params)
                flat[i] = orig - h
                fm, sm = _evaluate(func, params)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    break
                if sp is None or (sp == base_sig and sm == base_sig):
                    numeric = (fp - fm) / (2 * h)
                    break
                h *= 0.1
            if not (np.isfinite(fp) and np.isfinite(fm)):
                non_finite.append((name, int(i)))
                continue
            if numeric is None:
                non_smooth.append((name, int(i)))
                continue
            checked += 1
            r = rel_error(g[i], numeric)
            if r > max_rel:
                max_rel, worst = r, (name, int(i), float(g[i]), float(numeric))
            if r > tolerance:
                failing.append((name, int(i), float(g[i]), float(numeric), r))
    return GradcheckReport(max_rel, failing, checked, non_smooth, non_finite, tolerance, worst)
