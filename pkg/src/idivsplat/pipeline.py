"""One-view forward pass from model parameters to losses, and its exact backward pass."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .anchors import GaussianBatch, ModelParams, decode, decode_vjp
from .losses import (depth_normal_loss, idiv_sibling_regularizers, normal_from_depth,
                     normal_from_depth_vjp, photometric_loss, total_loss, volume_regularization)
from .rasterizer import (CUTOFF_POWER, SIGMA_MAX, STOP_TRANSMITTANCE, RenderOutput, SplatArrays,
                         render_backward, render_forward)
from .shading import ShadingAttributes, shade, shade_vjp


@dataclass
class LossSettings:
    lambda_vol: float = 0.001
    lambda_N: float = 0.01
    warmup: int = 300
    photometric_weight: float = 1.0
    detach_depth_normal: bool = True
    tv_weight: float = 0.0
    lap_weight: float = 0.0
    stop_T: float = STOP_TRANSMITTANCE
    background: tuple = (0.0, 0.0, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ViewState:
    """Everything the backward pass needs from one forward evaluation."""

    batch: GaussianBatch
    decode_cache: dict
    quats_unit: np.ndarray
    R: np.ndarray
    cov3d: np.ndarray
    proj: geo.Projection
    vis: np.ndarray
    axis_idx: np.ndarray
    axis_sign: np.ndarray
    normals: np.ndarray          # world, camera-facing, visible subset
    view_out: np.ndarray
    view_dist: np.ndarray
    opacity: np.ndarray
    k_D: np.ndarray
    roughness: np.ndarray | None
    shade_cache: object
    colors: object
    out: RenderOutput
    extras: dict = field(default_factory=dict)


def forward_view(model: ModelParams, cam: geo.Camera, background=(0.0, 0.0, 0.0),
                 stop_T=STOP_TRANSMITTANCE, workers=None) -> ViewState:
    cfg = model.config
    batch, dcache = decode(model)
    q = geo.quat_normalize(batch.quats)
    R = geo.quat_to_rotmat(q)
    var = np.exp(2.0 * batch.log_scales)
    cov3d = np.einsum("nik,nk,njk->nij", R, var, R)
    proj = geo.project_gaussians(batch.means, cov3d, cam)
    vis = np.flatnonzero(proj.visible)
    to_cam = cam.center - batch.means[vis]
    normals, idx, sign = geo.shortest_axis_normals(R[vis], batch.log_scales[vis], to_cam)
    dist = np.linalg.norm(to_cam, axis=-1)
    view_out = to_cam / dist[:, None]
    opacity = _sigmoid(batch.opacity_logit[vis])
    k_D = _sigmoid(batch.albedo_logit[vis])
    rough = None if batch.rough_logit is None else _sigmoid(batch.rough_logit[vis])
    attrs = ShadingAttributes(
        k_D=k_D,
        idiv=None if batch.idiv is None else batch.idiv[vis],
        roughness=rough,
        specular_feature=None if batch.spec_latent is None else batch.spec_latent[vis],
        sh=None if batch.sh is None else batch.sh[vis],
    )
    spec_mlp = model.mlp("mlp_specular") if cfg.use_specular else None
    colors, scache = shade(attrs, normals, view_out, batch.feature[vis], spec_mlp, cfg.use_specular,
                           cfg.spec_scale, cfg.ide_degree)
    splats = SplatArrays(
        mean2d=proj.mean2d[vis], conic=proj.conic[vis], radius=proj.radius[vis],
        depth=proj.depth[vis], opacity=opacity, color=colors.total,
        normal=normals @ cam.R.T, index=vis.astype(np.int64),
    )
    out = render_forward(splats, cam.width, cam.height, background, stop_T, workers=workers)
    return ViewState(batch, dcache, q, R, cov3d, proj, vis, idx, sign, normals, view_out, dist,
                     opacity, k_D, rough, scache, colors, out)


def backward_view(model: ModelParams, cam: geo.Camera, st: ViewState, g_color=None, g_depth=None,
                  g_normal=None, g_alpha=None, workers=None):
    """Gradients of the image-space upstream w.r.t. the decoded GaussianBatch, plus
    the specular-MLP parameter gradients (dict, possibly empty)."""
    cfg = model.config
    b, vis = st.batch, st.vis
    sg = render_backward(st.out, g_color, g_depth, g_normal, g_alpha, workers=workers)
    spec_mlp = model.mlp("mlp_specular") if cfg.use_specular else None
    sv = shade_vjp(st.shade_cache, sg.color, spec_mlp, cfg.spec_scale, cfg.ide_degree)

    g = b.zeros_like()
    g_n = sg.normal @ cam.R + sv["normal"]
    g_o = sv["view_out"]
    g_to_cam = (g_o - st.view_out * np.sum(st.view_out * g_o, -1, keepdims=True)) / st.view_dist[:, None]

    proj = st.proj
    sub = geo.Projection(proj.p_cam[vis], proj.mean2d[vis], proj.J[vis], proj.T[vis], proj.cov2d[vis],
                         proj.conic[vis], proj.radius[vis], proj.visible[vis])
    g_mean, g_cov = geo.project_vjp(sub, st.cov3d[vis], cam, sg.mean2d, sg.conic, sg.depth)
    g_mean = g_mean - g_to_cam
    g_q, g_ls = geo.covariance_vjp(b.quats[vis], b.log_scales[vis], g_cov)
    gR = geo.shortest_axis_normals_vjp(st.axis_idx, st.axis_sign, g_n)
    g_q = g_q + geo.quat_normalize_vjp(b.quats[vis], geo.quat_to_rotmat_vjp(st.quats_unit[vis], gR))

    g.means[vis] = g_mean
    g.quats[vis] = g_q
    g.log_scales[vis] = g_ls
    g.opacity_logit[vis] = sg.opacity * st.opacity * (1.0 - st.opacity)
    if sv["k_D"] is not None:
        g.albedo_logit[vis] = sv["k_D"] * st.k_D * (1.0 - st.k_D)
    if sv["idiv"] is not None:
        g.idiv[vis] = sv["idiv"]
    if sv["sh"] is not None:
        g.sh[vis] = sv["sh"]
    mlp_grads = {}
    if sv["mlp"] is not None:
        g.rough_logit[vis] = sv["roughness"] * st.roughness * (1.0 - st.roughness)
        g.spec_latent[vis] = sv["specular_feature"]
        g.feature[vis] = sv["anchor_feature"]
        mlp_grads = {f"mlp_specular.{k}": v for k, v in sv["mlp"].items()}
    return g, mlp_grads


@dataclass
class ViewResult:
    losses: object
    grads: dict | None
    state: ViewState
    N_D: np.ndarray
    mask: np.ndarray
    signature: str | None = None


def loss_and_grads(model: ModelParams, cam: geo.Camera, target, settings: LossSettings,
                   iteration=None, need_grad=True, signature=False, workers=None,
                   frozen_N_D=None) -> ViewResult:
    """Total training objective for one view and its gradient for every parameter array.

    ``frozen_N_D`` (N_D, mask) substitutes fixed depth normals; finite-difference
    checks of the detached objective use it.
    """
    st = forward_view(model, cam, settings.background, settings.stop_T, workers)
    out = st.out
    terms, g_img = photometric_loss(out.color, target)
    vol, g_vol = volume_regularization(st.batch.log_scales)
    if frozen_N_D is not None:
        N_D, mask = frozen_N_D
        ncache = None
    else:
        N_D, mask, ncache = normal_from_depth(out.depth, cam, out.alpha)
    LN, g_N, g_ND = depth_normal_loss(N_D, out.normal, mask)
    reg = 0.0
    g_reg = None
    if st.batch.idiv is not None and (settings.tv_weight or settings.lap_weight):
        tv, g_tv, lap, g_lap = idiv_sibling_regularizers(st.batch.idiv, model.config.n_offsets)
        reg = settings.tv_weight * tv + settings.lap_weight * lap
        g_reg = settings.tv_weight * g_tv + settings.lap_weight * g_lap
    pw = settings.photometric_weight
    losses = total_loss(pw * terms.value, vol, LN, settings.lambda_vol, settings.lambda_N,
                        iteration, settings.warmup, reg)
    losses.ssim = terms.ssim
    losses.l1 = terms.l1

    sig = None
    if signature:
        extra = [mask] if ncache is None else [mask, ncache.sign]
        sig = _signature(st, target, extra)
    if not need_grad:
        return ViewResult(losses, None, st, N_D, mask, sig)

    wN = settings.lambda_N if losses.normal_active else 0.0
    g_depth = None
    if wN and not settings.detach_depth_normal and ncache is not None:
        g_depth = wN * normal_from_depth_vjp(ncache, g_ND)
    g, mlp_grads = backward_view(model, cam, st, pw * g_img, g_depth, wN * g_N, None, workers)
    g.log_scales += settings.lambda_vol * g_vol
    if g_reg is not None:
        g.idiv += g_reg
    grads = decode_vjp(model, st.decode_cache, g)
    grads.update(mlp_grads)
    for k, v in model.params.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return ViewResult(losses, grads, st, N_D, mask, sig)


def _signature(st: ViewState, target, extra=()) -> str:
    """Hash of every discrete branch taken by the forward pass.

    Two parameter vectors with equal signatures lie in the same smooth piece of
    the objective, which is what finite-difference checks need.
    """
    h = hashlib.sha1()

    def add(a):
        h.update(np.ascontiguousarray(a).tobytes())

    add(st.vis)
    add(st.axis_idx)
    add(st.axis_sign)
    for name, c in st.decode_cache.items():
        if hasattr(c, "pre"):
            add(c.pre > 0)
    sc = st.shade_cache
    if sc.spec_cache is not None:
        add(sc.spec_cache[0].pre > 0)
        add(sc.attrs.roughness > 1e-3)
    if sc.attrs.idiv is not None:
        add(np.einsum("nck,nk->nc", sc.attrs.idiv, sc.normal) > 0)
    add(sc.raw_total > 0)
    out = st.out
    s = out.splats
    add(np.argsort(np.lexsort((s.index, s.depth))))
    v, u = np.mgrid[0:out.height, 0:out.width].astype(np.float64)
    dx = u[None] - s.mean2d[:, 0, None, None]
    dy = v[None] - s.mean2d[:, 1, None, None]
    power = -0.5 * (s.conic[:, 0, None, None] * dx * dx + s.conic[:, 2, None, None] * dy * dy) \
        - s.conic[:, 1, None, None] * dx * dy
    add(power >= CUTOFF_POWER)
    add(s.opacity[:, None, None] * np.exp(power) >= SIGMA_MAX)
    add(out.n_visited)
    add(out.alpha > 1e-6)
    add(np.sign(out.color - target))
    for a in extra:
        add(a)
    return h.hexdigest()


def render_view(model: ModelParams, cam: geo.Camera, background=(0.0, 0.0, 0.0), workers=None):
    """Forward-only render; returns the RenderOutput and the per-view state."""
    st = forward_view(model, cam, background, workers=workers)
    return st.out, st
