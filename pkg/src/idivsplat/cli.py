"""Command-line entry points: make-scene, train, render, eval, gradcheck, oracle."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__

TRAIN_FLAG_FIELDS = {"iters": "total_iterations", "warmup": "warmup_iterations"}


def _echo(out_dir, command, args, extra=None):
    payload = {
        "command": command,
        "version": f"idivsplat {__version__}",
        "seed": args.seed,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")},
    }
    if args.config:
        payload["config_file"] = str(args.config)
    if extra:
        payload.update(extra)
    text = json.dumps(payload, indent=1, sort_keys=True, default=str)
    if out_dir is None:
        print(text)
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_echo.json"
    path.write_text(text)
    return path


def _load_config(path):
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise SystemExit(f"error: config file not found: {path}")
    except json.JSONDecodeError as e:
        raise SystemExit(f"error: config file {path} is not valid JSON ({e})")
    if not isinstance(data, dict):
        raise SystemExit(f"error: config file {path} must hold a JSON object")
    return data


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_make_scene(args, cfg):
    from .dataio import dataset_from_scene, save_dataset
    from .oracle import generate_scene

    scene = generate_scene(args.kind, args.views, args.res, seed=args.seed, n_seed_points=args.seed_points)
    ds = dataset_from_scene(scene)
    path = save_dataset(ds, args.out, extra={"kind": args.kind, "light": scene.light.to_dict()})
    _echo(args.out, "make-scene", args)
    print(f"wrote {scene.n_views} views ({ds.split.count('train')} train, {ds.split.count('test')} test) to {path}")
    return 0


def _train_config(args, cfg):
    from .optim import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    flags = set(vars(args)) | {k.replace("_", "-") for k in vars(args)}
    unknown = sorted(k for k in cfg if k not in known and k not in flags)
    if unknown:
        raise ValueError(f"unknown options in config file: {unknown}")
    values = {k: v for k, v in cfg.items() if k in known}
    for flag, name in TRAIN_FLAG_FIELDS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    if args.no_idiv:
        values["use_idiv"] = False
    if args.no_specular:
        values["use_specular"] = False
    if args.no_anchor:
        values["use_anchor"] = False
    if args.couple_depth_normal:
        values["detach_depth_normal"] = False
    if args.workers is not None:
        values["workers"] = args.workers
    values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def cmd_train(args, cfg):
    from .anchors import save_checkpoint
    from .dataio import eval_metrics, load_dataset, metrics_json
    from .optim import train

    tc = _train_config(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, "train", args, {"train_config": tc.to_dict()})
    ds = load_dataset(args.data)
    result = train(ds, tc, log_path=out / "train_log.csv", dump_dir=out)
    save_checkpoint(result.model, out / "model.ckpt")
    report = {split: eval_metrics(result.model, ds, split, workers=tc.workers)
              for split in ("train", "test") if ds.indices(split)}
    (out / "metrics.json").write_text(metrics_json(report))
    for split, r in report.items():
        print(f"{split}: PSNR {r['psnr']:.2f} dB  SSIM {r['ssim']:.4f}  normal MAE "
              f"{'absent' if r['normal_mae'] is None else format(r['normal_mae'], '.2f')}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_render(args, cfg):
    from .anchors import load_checkpoint
    from .dataio import load_dataset, write_images
    from .pipeline import render_view

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    _echo(args.out, "render", args)
    idx = ds.indices(args.split)
    for i in idx:
        out, _ = render_view(model, ds.cameras[i], ds.background, workers=args.workers)
        write_images(out, args.out, prefix=f"{i:03d}_", gamma=ds.gamma)
    print(f"rendered {len(idx)} views to {args.out}")
    return 0


def cmd_eval(args, cfg):
    from .anchors import load_checkpoint
    from .dataio import eval_metrics, format_metrics, load_dataset, metrics_json

    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = eval_metrics(model, ds, args.split, workers=args.workers)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(metrics_json(report))
        _echo(out.parent, "eval", args)
    else:
        print(metrics_json(report))
    print(format_metrics(report))
    return 0


def cmd_gradcheck(args, cfg):
    from .anchors import MlpParams, mlp_backward, mlp_forward
    from .checks import diffuse_normal_gradcheck, end_to_end_gradcheck
    from .oracle import gradcheck

    _echo(args.out, "gradcheck", args)
    ok = True
    worst = diffuse_normal_gradcheck(probes=1000, seed=args.seed)
    good = worst <= 1e-6
    ok &= good
    print(f"diffuse normal gradient: max rel {worst:.2e} {'ok' if good else 'FAIL'}")

    rng = np.random.default_rng(args.seed)
    mlp = MlpParams.init(rng, 6, 4, hidden=8)
    x = rng.normal(size=(3, 6))
    up = rng.normal(size=(3, 4))
    gx, gp = mlp_backward(mlp, mlp_forward(mlp, x)[1], up)

    def f(p):
        out, cache = mlp_forward(MlpParams(p["w1"], p["b1"], p["w2"], p["b2"]), p["x"])
        return float(np.sum(out * up)), (cache.pre > 0).tobytes()

    rep = gradcheck(f, {**mlp.arrays(), "x": x}, {**gp, "x": gx}, tolerance=args.tolerance)
    ok &= rep.passed
    print(f"mlp: {rep.summary()} {'ok' if rep.passed else 'FAIL'}")

    for mode in ("coupled", "detached"):
        rep = end_to_end_gradcheck(mode, seed=args.seed, tolerance=args.tolerance, per_param=args.per_param)
        ok &= rep.passed
        print(f"end-to-end ({mode}): {rep.summary()} {'ok' if rep.passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_oracle(args, cfg):
    from .checks import idiv_identity_battery

    _echo(args.out, "oracle", args)
    results = idiv_identity_battery(args.configs, args.samples, args.seed)
    bad = [r for r in results if not r.ok]
    zmax = max(float(r.z.max()) for r in results)
    print(f"illumination-vector identity: {len(results) - len(bad)}/{len(results)} within 3 stderr "
          f"(max |z| = {zmax:.2f})")
    for r in bad:
        print(f"  config {r.config}: via-vector {r.via_idiv} direct {r.direct} stderr {r.combined_stderr}")
    return 0 if not bad else 1


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="JSON file with option defaults")

    p = argparse.ArgumentParser(prog="idivsplat", description=__doc__)
    p.add_argument("--version", action="version", version=f"idivsplat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", parents=[common], help="generate an analytic synthetic dataset")
    s.add_argument("--kind", default="lambertian-spheres",
                   choices=["lambertian-spheres", "specular-sphere", "textured-plane"])
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--seed-points", type=int, default=1200)
    s.add_argument("--out", default="scene")
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("train", parents=[common], help="train a model on a dataset")
    s.add_argument("--data", default="scene")
    s.add_argument("--out", default="run")
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--warmup", type=int, default=None)
    s.add_argument("--no-idiv", action="store_true", help="decoded plain color instead of illumination vectors")
    s.add_argument("--no-specular", action="store_true")
    s.add_argument("--no-anchor", action="store_true", help="free per-Gaussian parameters")
    s.add_argument("--couple-depth-normal", action="store_true",
                   help="backpropagate the depth-normal loss into the depth map too")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    s.add_argument("--checkpoint", default="run/model.ckpt")
    s.add_argument("--data", default="scene")
    s.add_argument("--split", default="all", choices=["all", "train", "test"])
    s.add_argument("--out", default="renders")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="PSNR, SSIM and normal MAE of a checkpoint")
    s.add_argument("--checkpoint", default="run/model.ckpt")
    s.add_argument("--data", default="scene")
    s.add_argument("--split", default="test", choices=["all", "train", "test"])
    s.add_argument("--out", default=None, help="metrics JSON path")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of the analytic gradients")
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--per-param", type=int, default=10, help="probes per parameter array")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("oracle", parents=[common], help="Monte-Carlo check of the illumination-vector identity")
    s.add_argument("--configs", type=int, default=100)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_oracle)
    return p


DEFAULT_SEEDS = {"make-scene": 7, "train": 7}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _load_config(args.config)
    # config-file values fill in flags that were left at their defaults
    sub_defaults = vars(parser.parse_args([args.command]))
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in sub_defaults and dest not in ("func", "command", "config"):
            if getattr(args, dest) == sub_defaults[dest]:
                setattr(args, dest, value)
        elif args.command != "train":
            parser.error(f"unknown option {key!r} in config file")
    if args.seed is None:
        args.seed = DEFAULT_SEEDS.get(args.command, 0)
    try:
        return args.func(args, cfg)
    except (OSError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
