"""Self-check batteries shared by the command line and the test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .anchors import ModelConfig, init_model
from .oracle import (GradcheckReport, LightField, gradcheck, idiv_projection_stderr, mc_diffuse_integral,
                     mc_idiv)
from .pipeline import LossSettings, loss_and_grads
from .shading import diffuse_color, diffuse_gradient_wrt_normal


# --------------------------------------------------------------------------
# lighting identity
# --------------------------------------------------------------------------

@dataclass
class IdentityResult:
    config: int
    via_idiv: np.ndarray
    direct: np.ndarray
    combined_stderr: np.ndarray

    @property
    def z(self):
        return np.abs(self.via_idiv - self.direct) / np.maximum(self.combined_stderr, 1e-300)

    @property
    def ok(self):
        return bool(np.all(np.abs(self.via_idiv - self.direct) <= 3.0 * self.combined_stderr))


def idiv_identity_battery(configs=100, samples=100_000, seed=0):
    """Albedo times (n . l) against the directly integrated diffuse radiance.

    Each configuration draws a random light field, normal and albedo. The two
    sides are estimated from independent sample streams, so their standard
    errors add in quadrature.
    """
    root = np.random.SeedSequence(seed)
    results = []
    for i, ss in enumerate(root.spawn(configs)):
        cfg_seed, idiv_seed, diff_seed = ss.spawn(3)
        rng = np.random.default_rng(cfg_seed)
        light = LightField.random(rng)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        k_D = rng.uniform(0.05, 1.0, 3)
        li = mc_idiv(light, n, samples, idiv_seed)
        ld = mc_diffuse_integral(light, n, k_D, samples, diff_seed)
        via = k_D * (li.value @ n)
        se = np.hypot(k_D * idiv_projection_stderr(li, n), ld.stderr)
        results.append(IdentityResult(i, via, ld.value, se))
    return results


# --------------------------------------------------------------------------
# diffuse normal gradient
# --------------------------------------------------------------------------

def diffuse_normal_gradcheck(probes=1000, seed=0, eps=1e-6, margin=1e-2):
    """Worst relative error of the closed-form diffuse normal gradient over random probes.

    Probes whose per-channel n . l lies within ``margin`` of the clamp are redrawn.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < probes:
        k_D = rng.uniform(0.05, 1.0, 3)
        l = rng.normal(size=(3, 3))
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        if np.any(np.abs(l @ n) < margin + eps * np.abs(l).sum(axis=1)):
            continue
        u = rng.normal(size=3)
        analytic = diffuse_gradient_wrt_normal(k_D, l, n, u)
        for j in range(3):
            e = np.zeros(3)
            e[j] = eps
            fp = u @ diffuse_color(k_D, l, n + e)[0]
            fm = u @ diffuse_color(k_D, l, n - e)[0]
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[j] - num) / max(abs(analytic[j]), abs(num), 1e-8))
        done += 1
    return worst


# --------------------------------------------------------------------------
# end-to-end gradients
# --------------------------------------------------------------------------

def small_scene(seed=0, n_anchors=5, resolution=16, config: ModelConfig | None = None):
    """A perturbed anchor model in front of a pinhole camera, plus a random target image."""
    rng = np.random.default_rng(seed)
    f = float(resolution)
    c = (resolution - 1) / 2.0
    cam = geo.Camera(f, f, c, c, resolution, resolution)
    pts = np.column_stack([rng.uniform(-0.5, 0.5, (n_anchors, 2)), 3.0 + rng.uniform(-0.2, 0.2, n_anchors)])
    cfg = config or ModelConfig(scale_init=2.0)
    model = init_model(pts, cfg, seed=seed + 1)
    p = model.params
    if "mlp_opacity.b2" in p:
        p["mlp_opacity.b2"][:] = 1.0
    else:
        p["g_opacity"][:] = 1.0
    for v in p.values():
        v += rng.normal(size=v.shape) * 0.05
    target = rng.random((resolution, resolution, 3)) * 0.5
    return model, cam, target


def end_to_end_gradcheck(mode="coupled", seed=0, tolerance=1e-3, per_param=None, config=None,
                         eps=1e-5) -> GradcheckReport:
    """Analytic gradient of the total loss (depth-normal term active) vs central differences.

    ``mode="coupled"`` differentiates through the depth-derived normals;
    ``mode="detached"`` holds them fixed at their value at the probe point,
    which is the function whose gradient training uses. ``per_param`` limits
    the probes per parameter array (None probes every coordinate).
    """
    if mode not in ("coupled", "detached"):
        raise ValueError("mode must be 'coupled' or 'detached'")
    model, cam, target = small_scene(seed, config=config)
    settings = LossSettings(detach_depth_normal=(mode == "detached"), warmup=0)
    base = loss_and_grads(model, cam, target, settings, iteration=1)
    frozen = (base.N_D, base.mask) if mode == "detached" else None

    def f(_):
        r = loss_and_grads(model, cam, target, settings, iteration=1, need_grad=False, signature=True,
                           frozen_N_D=frozen)
        return r.losses.total, r.signature

    indices = None
    if per_param is not None:
        rng = np.random.default_rng(seed + 99)
        indices = {k: np.sort(rng.choice(v.size, min(v.size, per_param), replace=False))
                   for k, v in model.params.items()}
    return gradcheck(f, model.params, base.grads, eps=eps, tolerance=tolerance, indices=indices)
