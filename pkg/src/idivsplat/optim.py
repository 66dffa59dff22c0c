"""Adam with per-group learning rates and the training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .anchors import ModelConfig, ModelParams, init_model, prune_anchors, save_checkpoint
from .losses import psnr
from .pipeline import LossSettings, loss_and_grads


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def zeros(cls, params: dict, **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)

    def select_rows(self, keep, keys):
        """Keep only the leading-axis rows selected by ``keep`` for ``keys``."""
        for k in keys:
            self.m[k] = self.m[k][keep]
            self.v[k] = self.v[k][keep]


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict, weight_decay=None,
              unit_keys=()):
    """One bias-corrected Adam update, in place.

    ``lrs`` maps every parameter name to its learning rate. ``weight_decay``
    optionally maps names to a decoupled decay factor. Arrays named in
    ``unit_keys`` are renormalized along their last axis afterwards (quaternions).
    """
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"no gradient for parameter {k!r}")
        if grads[k].shape != p.shape:
            raise ValueError(f"gradient shape {grads[k].shape} does not match parameter {k!r} {p.shape}")
        if state.m[k].shape != p.shape:
            raise ValueError(f"optimizer state for {k!r} has shape {state.m[k].shape}, parameter {p.shape}")
    bad = [k for k in params if not np.all(np.isfinite(grads[k]))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)} at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = lrs[k]
        if weight_decay and weight_decay.get(k):
            p -= lr * weight_decay[k] * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for k in unit_keys:
        if k in params:
            q = params[k]
            q /= np.linalg.norm(q, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    total_iterations: int = 2000
    warmup_iterations: int = 300
    lambda_vol: float = 0.001
    lambda_N: float = 0.01
    photometric_weight: float = 1.0
    lr_feature: float = 2.5e-3
    lr_offset: float = 1e-2
    lr_offset_final: float = 1e-4
    lr_mlp: float = 2e-3
    lr_other: float = 5e-3
    mlp_weight_decay: float = 0.0
    prune_interval: int = 500
    min_opacity: float = 0.005
    seed: int = 7
    use_idiv: bool = True
    use_specular: bool = True
    use_anchor: bool = True
    detach_depth_normal: bool = True
    tv_weight: float = 0.0
    lap_weight: float = 0.0
    psnr_interval: int = 50
    workers: int | None = None
    model: dict = field(default_factory=dict)  # extra ModelConfig overrides

    def __post_init__(self):
        if self.total_iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.total_iterations > 0 and self.warmup_iterations >= self.total_iterations:
            raise ValueError("warmup_iterations must be smaller than total_iterations")
        for f in ("lr_feature", "lr_offset", "lr_offset_final", "lr_mlp", "lr_other"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        unknown = set(self.model) - {f.name for f in fields(ModelConfig)}
        if unknown:
            raise ValueError(f"unknown model options: {sorted(unknown)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(use_idiv=self.use_idiv, use_specular=self.use_specular,
                           use_anchor=self.use_anchor, **self.model)

    def loss_settings(self, background=(0.0, 0.0, 0.0)) -> LossSettings:
        return LossSettings(lambda_vol=self.lambda_vol, lambda_N=self.lambda_N,
                            warmup=self.warmup_iterations, photometric_weight=self.photometric_weight,
                            detach_depth_normal=self.detach_depth_normal, tv_weight=self.tv_weight,
                            lap_weight=self.lap_weight, background=tuple(np.asarray(background, float)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


POSITION_KEYS = ("offset", "g_mean")


def learning_rates(model: ModelParams, cfg: TrainConfig, iteration: int) -> dict:
    """Per-parameter learning rates; positions decay exponentially over the run."""
    frac = iteration / max(cfg.total_iterations - 1, 1)
    lr_pos = cfg.lr_offset * (cfg.lr_offset_final / cfg.lr_offset) ** min(frac, 1.0)
    lrs = {}
    for k in model.params:
        if k.startswith("mlp_"):
            lrs[k] = cfg.lr_mlp
        elif k == "feature":
            lrs[k] = cfg.lr_feature
        elif k in POSITION_KEYS:
            lrs[k] = lr_pos
        else:
            lrs[k] = cfg.lr_other
    return lrs


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

LOG_FIELDS = ("iteration", "L_P", "L_vol", "L_N", "total", "PSNR", "wall_time")


@dataclass
class TrainResult:
    model: ModelParams
    log: list
    state: AdamState


def train(dataset, config: TrainConfig, model: ModelParams | None = None, log_path=None,
          dump_dir=None, callback=None) -> TrainResult:
    """Fit a model to the training views of ``dataset``.

    ``dataset`` provides ``train_views()`` -> list of (Camera, image), plus
    ``seed_points`` and ``background``. ``callback(iteration, result)`` sees
    every per-view evaluation.
    """
    views = dataset.train_views()
    if not views:
        raise ValueError("dataset has no training views")
    if model is None:
        model = init_model(dataset.seed_points, config.model_config(), config.seed)
    model = model.copy()
    state = AdamState.zeros(model.params)
    settings = config.loss_settings(dataset.background)
    rng = np.random.default_rng(config.seed)
    unit_keys = () if model.config.use_anchor else ("g_quat",)
    decay = {k: config.mlp_weight_decay for k in model.params if k.startswith("mlp_")} \
        if config.mlp_weight_decay else None
    log = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    t0 = time.perf_counter()
    try:
        for it in range(config.total_iterations):
            cam, image = views[int(rng.integers(len(views)))]
            res = loss_and_grads(model, cam, image, settings, iteration=it, workers=config.workers)
            L = res.losses
            if not np.isfinite(L.total):
                _dump(model, dump_dir)
                raise NonFiniteError(f"non-finite loss at iteration {it}")
            if callback is not None:
                callback(it, res)
            try:
                adam_step(model.params, res.grads, state, learning_rates(model, config, it), decay, unit_keys)
            except NonFiniteError:
                _dump(model, dump_dir)
                raise
            bad = [k for k, p in model.params.items() if not np.all(np.isfinite(p))]
            if bad:
                _dump(model, dump_dir)
                raise NonFiniteError(f"non-finite parameters {bad} after iteration {it}")
            p = ""
            if config.psnr_interval and (it % config.psnr_interval == 0 or it == config.total_iterations - 1):
                p = psnr(res.state.out.color, image)
            row = {"iteration": it, "L_P": L.photometric, "L_vol": L.volume, "L_N": L.depth_normal,
                   "total": L.total, "PSNR": p, "wall_time": time.perf_counter() - t0}
            log.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_FIELDS])
            done = it + 1
            if config.prune_interval and done % config.prune_interval == 0 and done < config.total_iterations:
                model, _ = prune_anchors(model, config.min_opacity, state)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, log, state)


def _dump(model, dump_dir):
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(dump_dir) / "diverged.ckpt")
