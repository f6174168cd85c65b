"""Command-line entry point: synth / train / eval / compare / sweep-alpha /
gradcheck.

Every command is deterministic given its flags and seed, and every run
directory receives the fully resolved configuration as `config.json`.
Exit codes: 0 success, 1 usage or config error, 2 data/validation error,
3 internal check failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .model import ModelConfig, build
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train,
                       _config_to_dict)
from .gradcheck import MODULE_CHECKS, run_checks


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


_SECTION_TYPES = {"synth": data_mod.SynthConfig, "model": ModelConfig,
                  "train": TrainConfig}


def _coerce(value: str, typ) -> object:
    origin = str(typ)
    if typ is bool or origin == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {value!r}")
    if typ is int or origin == "int":
        return int(value)
    if typ is float or origin == "float":
        return float(value)
    if typ is str or origin == "str":
        return value
    # tuples (input_size, ema_points): comma-separated
    parts = [p.strip() for p in value.split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        return tuple(parts)


def _load_config_file(path: str) -> dict[str, dict[str, object]]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise UsageError(f"config file {path} not found")
    out: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise UsageError(f"unknown config section [{section}]")
        ftypes = {f.name: f.type for f in fields(_SECTION_TYPES[section])}
        vals: dict[str, object] = {}
        for key, raw in parser[section].items():
            if key not in ftypes:
                raise UsageError(f"unknown key {key!r} in section [{section}]")
            vals[key] = _coerce(raw, ftypes[key])
        out[section] = vals
    return out


def _write_resolved_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2,
                                                    sort_keys=True) + "\n")


def _dataset_size(samples) -> tuple[int, int]:
    return samples[0].frames[0].shape


def _build_config(cls, merged: dict):
    # dataclass validation failures are configuration mistakes, exit code 1
    try:
        return cls(**merged)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    file_cfg = (_load_config_file(args.config).get("synth", {})
                if args.config else {})
    overrides = {"n_videos": args.videos, "frames_per_video": args.frames,
                 "height": args.size, "width": args.size, "seed": args.seed,
                 "noise": args.noise, "max_speed": args.speed}
    merged = {**file_cfg, **{k: v for k, v in overrides.items() if v is not None}}
    cfg = _build_config(data_mod.SynthConfig, merged)
    samples = data_mod.generate(cfg)
    out = Path(args.out_dir)
    data_mod.write_dataset(samples, out)
    _write_resolved_config(out, {"synth": asdict(cfg)})
    print(f"wrote {len(samples)} videos x {cfg.frames_per_video} frames to {out}")
    return 0


def _parse_model_flags(args, input_size) -> ModelConfig:
    kind = args.recurrence
    if kind == "convlstm" and args.ema_at is not None:
        raise UsageError("--ema-at does not apply to --recurrence convlstm")
    if kind in ("none", "convlstm") and args.alpha is not None:
        raise UsageError(f"--alpha does not apply to --recurrence {kind}")
    points = tuple(p for p in (args.ema_at or "bottleneck").split(",") if p)
    alpha = args.alpha
    if alpha is None:
        alpha = 0.3 if len(points) == 2 else 0.1  # dual placement default
    file_cfg = {}
    if args.config:
        file_cfg = _load_config_file(args.config).get("model", {})
    merged = dict(file_cfg)
    merged.update(input_size=tuple(input_size), recurrence=kind, alpha=alpha,
                  seed=args.seed)
    if kind in ("none", "convlstm"):
        merged.pop("alpha", None)
        merged["alpha"] = 0.1
    else:
        merged["ema_points"] = points
    if args.stages is not None:
        merged["stages"] = args.stages
    if args.base_channels is not None:
        merged["base_channels"] = args.base_channels
    if args.dropout:
        merged["dropout"] = True
    return _build_config(ModelConfig, merged)


def cmd_train(args) -> int:
    samples = data_mod.read_dataset(args.data_dir)
    model_cfg = _parse_model_flags(args, _dataset_size(samples))
    file_cfg = {}
    if args.config:
        file_cfg = _load_config_file(args.config).get("train", {})
    merged = dict(file_cfg)
    for key, val in (("lr", args.lr), ("epochs", args.epochs),
                     ("clip_length", args.clip_length), ("seed", args.seed)):
        if val is not None:
            merged[key] = val
    if args.augment:
        merged["augment"] = True
    train_cfg = _build_config(TrainConfig, merged)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, {"model": _config_to_dict(model_cfg),
                                 "train": asdict(train_cfg)})
    model = build(model_cfg)
    log_path = out / "loss_log.txt"
    log = open(log_path, "w")

    def on_epoch(epoch, report, optimizer, rng):
        log.write(f"epoch {epoch + 1} mean_bce {report.mean_loss:.8f}\n")
        log.flush()
        save_checkpoint(out / f"checkpoint_epoch{epoch + 1:02d}.salr",
                        model, optimizer, rng, epoch + 1, train_cfg)

    optimizer, rng, reports = train(model, samples, train_cfg,
                                    epoch_callback=on_epoch)
    log.close()
    save_checkpoint(out / "checkpoint_final.salr", model, optimizer, rng,
                    train_cfg.epochs, train_cfg)
    print(f"trained {train_cfg.epochs} epochs; "
          f"final mean BCE {reports[-1].mean_loss:.6f}; logs in {out}")
    return 0


def _predict_all(model, samples, alpha_override=None):
    return {s.video_id: model.predict_sequence(s.frames, alpha_override)
            for s in samples}


def cmd_eval(args) -> int:
    samples = data_mod.read_dataset(args.data_dir)
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("exactly one of --checkpoint or --pred-dir is required")
    if args.checkpoint:
        model, *_ = load_checkpoint(args.checkpoint)
        h, w = _dataset_size(samples)
        if model.cfg.input_size != (h, w):
            raise ValueError(f"checkpoint expects {model.cfg.input_size}, "
                             f"dataset frames are ({h}, {w})")
        preds = _predict_all(model, samples)
    else:
        preds = data_mod.load_predictions(args.pred_dir, samples)
    report = metrics_mod.evaluate_predictions(samples, preds,
                                              n_splits=args.n_splits,
                                              seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, {"eval": {"data_dir": str(args.data_dir),
                                          "checkpoint": args.checkpoint,
                                          "pred_dir": args.pred_dir,
                                          "n_splits": args.n_splits,
                                          "seed": args.seed}})
    text = metrics_mod.report_to_text(report)
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(metrics_mod.report_to_csv(report))
    if args.dump_maps:
        data_mod.write_predictions(preds, out / "maps")
    print(text, end="")
    return 0


def read_report_csv(path: Path) -> metrics_mod.MetricReport:
    report = metrics_mod.MetricReport(per_frame={})
    with open(path) as f:
        for row in csv.DictReader(f):
            m = row["metric"]
            report.video_means.setdefault(m, {})[row["video_id"]] = (
                float(row["mean"]) if row["mean"] else None)
            report.valid_counts.setdefault(m, {})[row["video_id"]] = int(
                row["valid_frames"])
    for m, vm in report.video_means.items():
        vals = [v for v in vm.values() if v is not None]
        report.dataset_means[m] = float(np.mean(vals)) if vals else None
    return report


def cmd_compare(args) -> int:
    ra = read_report_csv(Path(args.report_a))
    rb = read_report_csv(Path(args.report_b))
    diffs, mean, var = metrics_mod.compare_per_video(ra, rb, args.metric)
    print(f"{'video':>10}  {args.metric} (A-B)")
    for vid, d in diffs:
        print(f"{vid:>10}  {d:+.6f}")
    print(f"{'mean':>10}  {mean:+.6f}")
    print(f"{'variance':>10}  {var:.6f}")
    return 0


def cmd_sweep_alpha(args) -> int:
    samples = data_mod.read_dataset(args.data_dir)
    model, optimizer, rng, epoch, train_cfg = load_checkpoint(args.checkpoint)
    if model.cfg.recurrence not in ("ema", "ema-trainable", "ema-residual"):
        raise UsageError("sweep-alpha requires a checkpoint trained with an "
                         "EMA recurrence")
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = []
    for alpha in alphas:
        if args.retrain:
            m, *_ = load_checkpoint(args.checkpoint)
            m.cfg.alpha = alpha
            if m.ema_cfg is not None:
                m.ema_cfg.alpha = alpha
            tc = train_cfg or TrainConfig()
            tc = TrainConfig(**{**asdict(tc), "epochs": args.retrain_epochs})
            train(m, samples, tc)
            preds = _predict_all(m, samples)
        else:
            preds = _predict_all(model, samples, alpha_override=alpha)
        report = metrics_mod.evaluate_predictions(samples, preds,
                                                  n_splits=args.n_splits,
                                                  seed=args.seed)
        rows.append((alpha, report.dataset_means))
    header = ["alpha"] + list(metrics_mod.METRIC_NAMES)
    print("  ".join(f"{h:>8}" for h in header))
    lines = []
    for alpha, means in rows:
        cells = [f"{alpha:>8.3f}"] + [
            f"{means[m]:>8.4f}" if means[m] is not None else f"{'n/a':>8}"
            for m in metrics_mod.METRIC_NAMES]
        line = "  ".join(cells)
        print(line)
        lines.append(line)
    if args.out:
        Path(args.out).write_text(
            "  ".join(f"{h:>8}" for h in header) + "\n" + "\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    modules = list(MODULE_CHECKS) if args.module == "all" else [args.module]
    results = run_checks(modules, seed=args.seed)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name:<32} max rel err {r.max_rel_err:.3e} "
              f"(tol {r.tol:.0e})")
        failed = failed or not r.passed
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="salrec",
                     description="Video saliency with EMA / ConvLSTM recurrences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--config", help="INI config file ([synth] section)")
    p.add_argument("--videos", type=int, help="number of videos (default 20)")
    p.add_argument("--frames", type=int, help="frames per video (default 40)")
    p.add_argument("--size", type=int, help="square frame size (default 32)")
    p.add_argument("--noise", type=float, help="pixel noise amplitude")
    p.add_argument("--speed", type=float, help="max blob speed px/frame")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", help="INI config file ([model]/[train] sections)")
    p.add_argument("--recurrence", default="none",
                   choices=["none", "ema", "ema-trainable", "ema-residual",
                            "convlstm"])
    p.add_argument("--ema-at", help="comma list of insertion points: "
                   "encoderK | bottleneck | decoderK | output")
    p.add_argument("--alpha", type=float, help="EMA alpha (default 0.1; 0.3 "
                   "when two insertion points are given)")
    p.add_argument("--dropout", action="store_true",
                   help="dropout (p=0.5) before each recurrence")
    p.add_argument("--stages", type=int, help="encoder/decoder stages (default 3)")
    p.add_argument("--base-channels", type=int, help="channels of stage 1 (default 8)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--epochs", type=int, help="epochs (default 7)")
    p.add_argument("--clip-length", type=int, help="BPTT window (default 10)")
    p.add_argument("--augment", action="store_true",
                   help="mirror/right-angle-rotation augmentation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction dir")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--pred-dir", help="directory of predicted PGM maps")
    p.add_argument("--dump-maps", action="store_true",
                   help="write predicted maps as PGMs")
    p.add_argument("--n-splits", type=int, default=100,
                   help="s-AUC negative resamplings")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-video metric difference A-B")
    p.add_argument("report_a", help="report.csv of run A")
    p.add_argument("report_b", help="report.csv of run B")
    p.add_argument("--metric", default="NSS",
                   choices=list(metrics_mod.METRIC_NAMES))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-alpha", help="evaluate one checkpoint under "
                       "several inference-time alphas")
    p.add_argument("data_dir")
    p.add_argument("checkpoint")
    p.add_argument("--alphas", default="0.05,0.1,0.2,0.3")
    p.add_argument("--retrain", action="store_true",
                   help="fine-tune per alpha instead of overriding at inference")
    p.add_argument("--retrain-epochs", type=int, default=1)
    p.add_argument("--n-splits", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the table to this file")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--module", default="all",
                   choices=["all"] + list(MODULE_CHECKS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
