"""Command-line entry point: ``msbt {train,eval,predict,gradcheck,synth}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, parse_modalities, read_config_file
from .data import (SynthConfig, check_synthetic_labels, generate_synthetic, load_manifest,
                   read_feature_file, write_dataset)
from .errors import ConfigurationError, MSBTError
from .evaluation import evaluate, write_score_csv
from .model import predict
from .trainer import load_checkpoint, save_checkpoint, train, write_loss_log

log = logging.getLogger("msbt")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", help="key = value file with model/training settings")
    g.add_argument("--preset", choices=["default", "reduced", "toy"], default=None,
                   help="starting configuration, applied before --config and flags")
    g.add_argument("--modalities", help="subset of r,f,a (at least two)")
    g.add_argument("--lambda", dest="lam", type=float, help="TCC loss weight")
    g.add_argument("--topk", type=int, help="K of the top-K MIL loss")
    g.add_argument("--no-cross-transformer", action="store_true",
                   help="start each fusion layer from fresh tokens only")
    g.add_argument("--no-weighting", action="store_true", help="plain concatenation of fused pairs")
    g.add_argument("--fixed-tokens", type=int, metavar="N", help="use N bottleneck tokens at every layer")
    g.add_argument("--bottleneck-n1", type=int, metavar="N", help="tokens entering the first fusion layer")
    g.add_argument("--layers-msbt", type=int, metavar="N", help="number of fusion layers")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)


def _build_configs(args, input_dims: dict[str, int] | None = None) -> tuple[ModelConfig, TrainConfig]:
    preset = getattr(args, "preset", None) or "default"
    model_kw = {"default": {}, "reduced": dataclasses.asdict(ModelConfig.reduced()),
                "toy": dataclasses.asdict(ModelConfig.toy())}[preset]
    train_kw: dict = {}
    if getattr(args, "config", None):
        m, t = read_config_file(args.config)
        model_kw.update(m)
        train_kw.update(t)
    if input_dims:
        model_kw["input_dims"] = {**model_kw.get("input_dims", {}), **input_dims}
    if getattr(args, "modalities", None):
        model_kw["modalities"] = parse_modalities(args.modalities)
    elif input_dims and "modalities" not in model_kw:
        model_kw["modalities"] = tuple(input_dims)
    for flag, key in (("lam", "lam"), ("topk", "topk"), ("fixed_tokens", "fixed_tokens"),
                      ("bottleneck_n1", "bottleneck_n1"), ("layers_msbt", "layers_msbt")):
        value = getattr(args, flag, None)
        if value is not None:
            model_kw[key] = value
    if getattr(args, "no_cross_transformer", False):
        model_kw["cross_transformer"] = False
    if getattr(args, "no_weighting", False):
        model_kw["weighting"] = False
    for flag in ("epochs", "batch_size", "lr"):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[flag] = value
    if getattr(args, "seed", None) is not None:
        train_kw["seed"] = args.seed
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def cmd_train(args) -> int:
    manifest, samples = load_manifest(args.manifest)
    model_cfg, train_cfg = _build_configs(args, manifest.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training on %d videos", len(samples))
    ckpt = train(samples, model_cfg, train_cfg)
    save_checkpoint(out / "model.ckpt", ckpt)
    write_loss_log(out / "loss.csv", ckpt.history)
    print(f"wrote {out / 'model.ckpt'} and {out / 'loss.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.modalities and parse_modalities(args.modalities) != ckpt.model_cfg.modalities:
        raise ConfigurationError(f"checkpoint was trained on {list(ckpt.model_cfg.modalities)}, "
                                 f"not {list(parse_modalities(args.modalities))}")
    _, samples = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(ckpt.params, ckpt.model_cfg, samples, out / "scores")
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"frame AP {report.frame_ap:.6f} over {report.num_frames} frames "
          f"({report.num_positive_frames} positive)")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_cfg
    given = {"R": args.rgb, "F": args.flow, "A": args.audio}
    missing = [m for m in cfg.modalities if given[m] is None]
    if missing:
        raise ConfigurationError(f"checkpoint needs feature files for modalities {missing}")
    feats = {m: read_feature_file(given[m]) for m in cfg.modalities}
    scores = predict(feats, ckpt.params, cfg)
    frames = np.repeat(scores, args.frames_per_snippet)
    write_score_csv(args.out, frames, None)
    print(f"wrote {len(frames)} frame scores to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_model_gradcheck, run_primitive_gradchecks

    start = time.perf_counter()
    worst = 0.0
    if not args.skip_primitives:
        for name, rep in run_primitive_gradchecks(seed=args.seed):
            print(f"{name:24s} {rep}")
            worst = max(worst, rep.max_rel_err)
    rep = run_model_gradcheck(preset=args.preset, seed=args.seed)
    print(f"{'full model (' + args.preset + ')':24s} {rep}")
    print(f"max rel. err {max(worst, rep.max_rel_err):.3e} in {time.perf_counter() - start:.1f}s")
    return 0 if rep.max_rel_err < args.tol and worst < 1e-4 else 1


def cmd_synth(args) -> int:
    dims = {}
    mods = parse_modalities(args.modalities or "r,f,a")
    for m in mods:
        dims[m] = args.dim
    cfg = SynthConfig(num_videos=args.num_videos, t_min=args.t_min, t_max=args.t_max, dims=dims,
                      anomaly_rate=args.anomaly_rate, event_len_min=args.event_len_min,
                      event_len_max=args.event_len_max, signal=args.signal, noise=args.noise,
                      async_min=args.async_min, async_max=args.async_max,
                      distractor_rate=args.distractor_rate,
                      frames_per_snippet=args.frames_per_snippet, seed=args.seed)
    samples = generate_synthetic(cfg)
    check_synthetic_labels(samples, cfg.frames_per_snippet)
    path = write_dataset(samples, args.out, cfg.frames_per_snippet)
    print(f"wrote {len(samples)} videos to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msbt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for model.ckpt and loss.csv")
    p.add_argument("--seed", type=int, default=None)
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame-level AP of a checkpoint on a labelled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for report.json and per-video CSVs")
    p.add_argument("--modalities", help="assert the checkpoint uses these modalities")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one video from its feature files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb")
    p.add_argument("--flow")
    p.add_argument("--audio")
    p.add_argument("--frames-per-snippet", type=int, default=16)
    p.add_argument("--out", required=True, help="score CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    p.add_argument("--preset", choices=["toy"], default="toy")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-primitives", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic multimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-videos", type=int, default=100)
    p.add_argument("--modalities", default=None)
    p.add_argument("--dim", type=int, default=8, help="feature width of every modality")
    p.add_argument("--t-min", type=int, default=20)
    p.add_argument("--t-max", type=int, default=28)
    p.add_argument("--anomaly-rate", type=float, default=0.5)
    p.add_argument("--event-len-min", type=int, default=9)
    p.add_argument("--event-len-max", type=int, default=12)
    p.add_argument("--signal", type=float, default=2.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--async-min", type=int, default=0)
    p.add_argument("--async-max", type=int, default=0)
    p.add_argument("--distractor-rate", type=float, default=0.3)
    p.add_argument("--frames-per-snippet", type=int, default=16)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MSBTError, OSError, ValueError) as exc:
        print(f"msbt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
