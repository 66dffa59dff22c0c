"""Anchor-based parameter encoding.

Every anchor owns a latent feature, a log scaling and K offsets. Small global
MLPs decode the feature into the attributes of the anchor's K Gaussians. With
``use_anchor=False`` the same K-per-anchor layout stores the attributes
directly as free parameters (the explicit ablation).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .sh import DEFAULT_IDE_DEGREE, num_coeffs


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass
class MlpParams:
    """input_dim -> hidden (ReLU) -> output_dim."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self):
        return self.w1.shape[0]

    @property
    def output_dim(self):
        return self.w2.shape[1]

    @classmethod
    def init(cls, rng, input_dim, output_dim, hidden=64, out_bias=None, out_scale=1.0):
        w1 = rng.uniform(-1, 1, (input_dim, hidden)) * np.sqrt(6.0 / input_dim)
        w2 = rng.uniform(-1, 1, (hidden, output_dim)) * np.sqrt(3.0 / hidden) * out_scale
        b2 = np.zeros(output_dim) if out_bias is None else np.asarray(out_bias, dtype=np.float64).copy()
        return cls(w1, np.zeros(hidden), w2, b2)

    def arrays(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class MlpCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def mlp_forward(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"MLP expects input dim {params.input_dim}, got {x.shape[-1]}")
    pre = x @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    return h @ params.w2 + params.b2, MlpCache(x, pre, h)


def mlp_backward(params: MlpParams, cache: MlpCache, upstream):
    """Returns (input gradient, dict of parameter gradients)."""
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[:-1] != cache.x.shape[:-1] or g.shape[-1] != params.output_dim:
        raise ValueError("upstream gradient does not match the cached forward pass")
    h2 = cache.hidden.reshape(-1, cache.hidden.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw2 = h2.T @ g2
    gb2 = g2.sum(axis=0)
    gh = (g2 @ params.w2.T) * (cache.pre.reshape(h2.shape) > 0.0)
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    gw1 = x2.T @ gh
    gb1 = gh.sum(axis=0)
    gx = (gh @ params.w1.T).reshape(cache.x.shape)
    return gx, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass
class ModelConfig:
    feature_dim: int = 32
    n_offsets: int = 5
    hidden: int = 64
    spec_latent_dim: int = 8
    ide_degree: int = DEFAULT_IDE_DEGREE
    sh_degree: int = 3
    spec_scale: float = 1.0
    use_idiv: bool = True
    use_specular: bool = True
    use_anchor: bool = True
    feature_init_std: float = 0.01
    init_opacity: float = 0.1
    spec_out_bias: float = -3.0
    scale_init: float = 1.0  # anchor scaling multiplier on the seed spacing

    @property
    def spec_input_dim(self):
        return num_coeffs(self.ide_degree) + 3 + self.feature_dim + self.spec_latent_dim


@dataclass
class Anchor:
    position: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray


MLP_NAMES = ("mlp_idiv", "mlp_opacity", "mlp_cov", "mlp_albedo", "mlp_specattr", "mlp_specular")


@dataclass
class ModelParams:
    """All trainable arrays keyed by name, plus fixed anchor positions.

    Keys not starting with ``mlp_`` have the anchor index as leading axis.
    """

    config: ModelConfig
    anchor_xyz: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def n_anchors(self) -> int:
        return len(self.anchor_xyz)

    @property
    def n_gaussians(self) -> int:
        return self.n_anchors * self.config.n_offsets

    def has_mlp(self, name) -> bool:
        return f"{name}.w1" in self.params

    def mlp(self, name) -> MlpParams:
        p = self.params
        return MlpParams(p[f"{name}.w1"], p[f"{name}.b1"], p[f"{name}.w2"], p[f"{name}.b2"])

    def per_anchor_keys(self):
        return [k for k in self.params if not k.startswith("mlp_")]

    @property
    def anchors(self):
        p = self.params
        if not self.config.use_anchor:
            raise AttributeError("explicit-mode models store per-Gaussian attributes, not anchors")
        return [Anchor(self.anchor_xyz[i], p["feature"][i], np.exp(p["log_scaling"][i]), p["offset"][i])
                for i in range(self.n_anchors)]

    def copy(self):
        return ModelParams(replace(self.config), self.anchor_xyz.copy(),
                           {k: v.copy() for k, v in self.params.items()})

    def select_anchors(self, keep):
        keep = np.asarray(keep)
        params = {k: (v if k.startswith("mlp_") else v[keep]) for k, v in self.params.items()}
        return ModelParams(self.config, self.anchor_xyz[keep], params)


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q * np.sign(q[:, :1] + 1e-300)


def nearest_spacing(points):
    """Mean distance from each point to its nearest neighbour."""
    from scipy.spatial import cKDTree

    if len(points) < 2:
        return 1.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(d[:, 1]))


def init_model(seed_points, config: ModelConfig | None = None, seed: int = 0, spacing=None) -> ModelParams:
    """Anchors at ``seed_points`` with freshly initialized decoders."""
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    xyz = np.asarray(seed_points, dtype=np.float64).reshape(-1, 3).copy()
    n, K, F = len(xyz), cfg.n_offsets, cfg.feature_dim
    spacing = nearest_spacing(xyz) if spacing is None else spacing
    p = {"feature": rng.normal(0.0, cfg.feature_init_std, (n, F))}
    opacity_logit = np.log(cfg.init_opacity / (1.0 - cfg.init_opacity))
    offset = rng.uniform(-0.5, 0.5, (n, K, 3))
    log_scaling = np.full((n, 3), np.log(cfg.scale_init * spacing))

    def add_mlp(name, out_dim, out_bias=None, out_scale=1.0, in_dim=F):
        m = MlpParams.init(rng, in_dim, out_dim, cfg.hidden, out_bias, out_scale)
        for k, v in m.arrays().items():
            p[f"{name}.{k}"] = v

    if cfg.use_anchor:
        p["log_scaling"] = log_scaling
        p["offset"] = offset
        cov_bias = np.concatenate([_random_quats(rng, K), rng.normal(0.0, 0.1, (K, 3))], axis=1)
        add_mlp("mlp_cov", K * 7, cov_bias.ravel(), 0.1)
        add_mlp("mlp_opacity", K, np.full(K, opacity_logit), 0.1)
        add_mlp("mlp_albedo", K * 3, None, 0.1)
        if cfg.use_idiv:
            add_mlp("mlp_idiv", K * 9, None, 0.1)
        if cfg.use_specular:
            add_mlp("mlp_specattr", K * (1 + cfg.spec_latent_dim), None, 0.1)
    else:
        scale = np.exp(log_scaling)[:, None, :]
        p["g_mean"] = xyz[:, None, :] + offset * scale
        p["g_quat"] = _random_quats(rng, n * K).reshape(n, K, 4)
        p["g_log_scale"] = np.log(0.5 * scale) + rng.normal(0.0, 0.1, (n, K, 3))
        p["g_opacity"] = np.full((n, K), opacity_logit)
        p["g_albedo"] = np.zeros((n, K, 3))
        if cfg.use_idiv:
            p["g_idiv"] = rng.normal(0.0, 0.01, (n, K, 3, 3))
        else:
            p["g_sh"] = np.zeros((n, K, num_coeffs(cfg.sh_degree), 3))
        if cfg.use_specular:
            p["g_rough"] = np.zeros((n, K))
            p["g_spec"] = np.zeros((n, K, cfg.spec_latent_dim))
    if cfg.use_specular:
        add_mlp("mlp_specular", 3, np.full(3, cfg.spec_out_bias), 0.1, in_dim=cfg.spec_input_dim)
    return ModelParams(cfg, xyz, p)


# --------------------------------------------------------------------------
# decoding anchors into Gaussians
# --------------------------------------------------------------------------

@dataclass
class GaussianBatch:
    """Flat per-Gaussian attributes (N = anchors * K), pre-activation where noted."""

    means: np.ndarray           # (N, 3)
    quats: np.ndarray           # (N, 4) raw quaternions
    log_scales: np.ndarray      # (N, 3)
    opacity_logit: np.ndarray   # (N,)
    albedo_logit: np.ndarray    # (N, 3); plain color logits when use_idiv is off
    feature: np.ndarray         # (N, F) owning anchor's feature
    idiv: np.ndarray | None = None         # (N, 3 channels, 3)
    rough_logit: np.ndarray | None = None  # (N,)
    spec_latent: np.ndarray | None = None  # (N, F_s)
    sh: np.ndarray | None = None           # (N, J, 3) explicit baseline colors

    def __len__(self):
        return len(self.means)

    def zeros_like(self):
        return GaussianBatch(**{f.name: (None if getattr(self, f.name) is None
                                         else np.zeros_like(getattr(self, f.name)))
                                for f in fields(self)})

    def subset(self, idx):
        return GaussianBatch(**{f.name: (None if getattr(self, f.name) is None
                                         else getattr(self, f.name)[idx])
                                for f in fields(self)})


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(model: ModelParams):
    """Decode every anchor into K Gaussians. Returns (batch, cache)."""
    cfg, p = model.config, model.params
    n, K = model.n_anchors, cfg.n_offsets
    N = n * K
    feat = np.repeat(p["feature"], K, axis=0)
    if not cfg.use_anchor:
        b = GaussianBatch(
            means=p["g_mean"].reshape(N, 3), quats=p["g_quat"].reshape(N, 4),
            log_scales=p["g_log_scale"].reshape(N, 3), opacity_logit=p["g_opacity"].reshape(N),
            albedo_logit=p["g_albedo"].reshape(N, 3), feature=feat,
            idiv=p["g_idiv"].reshape(N, 3, 3) if cfg.use_idiv else None,
            rough_logit=p["g_rough"].reshape(N) if cfg.use_specular else None,
            spec_latent=p["g_spec"].reshape(N, -1) if cfg.use_specular else None,
            sh=None if cfg.use_idiv else p["g_sh"].reshape(N, -1, 3),
        )
        return b, {}
    f = p["feature"]
    scaling = np.exp(p["log_scaling"])
    caches = {}
    outs = {}
    for name in MLP_NAMES[:-1]:
        if model.has_mlp(name):
            outs[name], caches[name] = mlp_forward(model.mlp(name), f)
    means = (model.anchor_xyz[:, None, :] + p["offset"] * scaling[:, None, :]).reshape(N, 3)
    cov = outs["mlp_cov"].reshape(n, K, 7)
    raw_scale = cov[..., 4:]
    log_scales = (p["log_scaling"][:, None, :] + _log_sigmoid(raw_scale)).reshape(N, 3)
    b = GaussianBatch(
        means=means, quats=cov[..., :4].reshape(N, 4), log_scales=log_scales,
        opacity_logit=outs["mlp_opacity"].reshape(N), albedo_logit=outs["mlp_albedo"].reshape(N, 3),
        feature=feat,
    )
    if cfg.use_idiv:
        b.idiv = outs["mlp_idiv"].reshape(N, 3, 3)
    if cfg.use_specular:
        sa = outs["mlp_specattr"].reshape(N, 1 + cfg.spec_latent_dim)
        b.rough_logit = sa[:, 0]
        b.spec_latent = sa[:, 1:]
    caches["raw_scale"] = raw_scale
    caches["scaling"] = scaling
    return b, caches


def decode_vjp(model: ModelParams, cache, g: GaussianBatch):
    """Parameter gradients (dict keyed like ``model.params``) from batch gradients."""
    cfg, p = model.config, model.params
    n, K = model.n_anchors, cfg.n_offsets
    grads = {}
    g_feat = g.feature.reshape(n, K, -1).sum(axis=1)
    if not cfg.use_anchor:
        grads["g_mean"] = g.means.reshape(n, K, 3)
        grads["g_quat"] = g.quats.reshape(n, K, 4)
        grads["g_log_scale"] = g.log_scales.reshape(n, K, 3)
        grads["g_opacity"] = g.opacity_logit.reshape(n, K)
        grads["g_albedo"] = g.albedo_logit.reshape(n, K, 3)
        if cfg.use_idiv:
            grads["g_idiv"] = g.idiv.reshape(n, K, 3, 3)
        else:
            grads["g_sh"] = g.sh.reshape(p["g_sh"].shape)
        if cfg.use_specular:
            grads["g_rough"] = g.rough_logit.reshape(n, K)
            grads["g_spec"] = g.spec_latent.reshape(n, K, -1)
        grads["feature"] = g_feat
        return grads
    scaling = cache["scaling"]
    g_means = g.means.reshape(n, K, 3)
    grads["offset"] = g_means * scaling[:, None, :]
    g_ls = g.log_scales.reshape(n, K, 3)
    grads["log_scaling"] = (np.sum(g_means * p["offset"], axis=1) * scaling + g_ls.sum(axis=1))
    g_raw_scale = g_ls * (1.0 - _sigmoid(cache["raw_scale"]))
    g_out = {
        "mlp_cov": np.concatenate([g.quats.reshape(n, K, 4), g_raw_scale], axis=-1).reshape(n, K * 7),
        "mlp_opacity": g.opacity_logit.reshape(n, K),
        "mlp_albedo": g.albedo_logit.reshape(n, K * 3),
    }
    if cfg.use_idiv:
        g_out["mlp_idiv"] = g.idiv.reshape(n, K * 9)
    if cfg.use_specular:
        g_out["mlp_specattr"] = np.concatenate(
            [g.rough_logit.reshape(n, K, 1), g.spec_latent.reshape(n, K, -1)], axis=-1).reshape(n, -1)
    for name in MLP_NAMES[:-1]:
        if name in g_out:
            gx, gp = mlp_backward(model.mlp(name), cache[name], g_out[name])
            g_feat = g_feat + gx
            for k, v in gp.items():
                grads[f"{name}.{k}"] = v
    grads["feature"] = g_feat
    return grads


def spawn_gaussians(anchor_index: int, model: ModelParams):
    """The K Gaussians decoded from one anchor, as a GaussianBatch of length K."""
    sub = model.select_anchors([anchor_index])
    batch, _ = decode(sub)
    return batch


def decoded_opacity(model: ModelParams):
    """(anchors, K) opacities in (0, 1)."""
    p, cfg = model.params, model.config
    if cfg.use_anchor:
        logits, _ = mlp_forward(model.mlp("mlp_opacity"), p["feature"])
    else:
        logits = p["g_opacity"]
    return _sigmoid(logits.reshape(model.n_anchors, cfg.n_offsets))


def prune_anchors(model: ModelParams, min_opacity: float, adam_state=None):
    """Drop anchors whose K decoded opacities are all below ``min_opacity``.

    Returns the pruned model and the boolean keep-mask; optimizer moment rows of
    removed anchors are dropped from ``adam_state`` in place.
    """
    keep = decoded_opacity(model).max(axis=1) >= min_opacity
    if min_opacity <= 0:
        keep[:] = True
    pruned = model.select_anchors(keep)
    if adam_state is not None:
        adam_state.select_rows(keep, model.per_anchor_keys())
    return pruned, keep


def zero_grads(model: ModelParams):
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def empirical_lipschitz(mlp: MlpParams, rng, pairs=2000, radius=0.05):
    """Largest |f(a) - f(b)| / |a - b| over random nearby input pairs."""
    a = rng.normal(0.0, 1.0, (pairs, mlp.input_dim)) * radius
    b = a + rng.normal(0.0, 1.0, a.shape) * radius
    fa, _ = mlp_forward(mlp, a)
    fb, _ = mlp_forward(mlp, b)
    return float(np.max(np.linalg.norm(fa - fb, axis=1) / np.linalg.norm(a - b, axis=1)))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IDVSPLT\0"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: ModelParams) -> bytes:
    """Serialize to magic, version, JSON header length, JSON header, raw little-endian f8 data."""
    arrays = {"anchor_xyz": model.anchor_xyz, **{f"params/{k}": v for k, v in model.params.items()}}
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"config": asdict(model.config), "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, "<f8", count, start).astype(np.float64).reshape(e["shape"])
    params = {k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")}
    return ModelParams(ModelConfig(**header["config"]), arrays["anchor_xyz"], params)


def save_checkpoint(model: ModelParams, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())
