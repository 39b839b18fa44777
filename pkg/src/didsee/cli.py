"""Command-line frontend: ``didsee <command> [flags]``.

Commands
--------
gen-data       render a synthetic dataset to disk
train          train a completion model from a dataset and a TOML config
infer          run a checkpoint over a dataset, writing predictions
eval           score predictions against a dataset
diagnose       exposure-bias curves of a multi-step checkpoint
plot-schedule  noise-schedule CSV plus sqrt(alpha_bar) and log-SNR plots

Every failure prints a single JSON line ``{"error": ..., "kind": ..., "exit_code": ...}``
to stderr. Usage errors exit with 2, missing inputs with 1. Commands that take
``--seed`` fall back to the ``DIDSEE_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_MISSING = 1
EXIT_USAGE = 2
PRED_FILE = "predictions.npz"


class CliError(Exception):
    def __init__(self, message, code=EXIT_MISSING, kind="error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _emit_error(message, code, kind):
    print(json.dumps({"error": str(message), "kind": kind, "exit_code": code}), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error(message, EXIT_USAGE, "usage")
        sys.exit(EXIT_USAGE)


def resolve_seed(value):
    if value is not None:
        return value
    env = os.environ.get("DIDSEE_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"DIDSEE_SEED must be an integer, got {env!r}", EXIT_USAGE, "usage")


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h < 8 or w < 8:
        raise argparse.ArgumentTypeError("image size must be at least 8x8")
    return h, w


def _steps(text):
    try:
        steps = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not steps or min(steps) < 1:
        raise argparse.ArgumentTypeError("steps must be positive integers")
    return steps


def _require(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", EXIT_MISSING, "missing_file")
    return p


def _load_data(path):
    from .synthdata import load_samples
    _require(Path(path) / "manifest.json", "dataset manifest")
    return load_samples(path)


def _load_model(path):
    from .model import CompletionModel
    return CompletionModel.load(_require(path, "checkpoint"))


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    from .synthdata import SceneConfig, generate_dataset, write_dataset
    if args.count < 0:
        raise CliError("--count must be non-negative", EXIT_USAGE, "usage")
    seed = resolve_seed(args.seed)
    h, w = args.size
    cfg = SceneConfig(height=h, width=w)
    man = write_dataset(generate_dataset(args.count, seed, cfg), args.out, cfg, generator_seed=seed)
    return {"out": str(args.out), "samples": man.sample_count, "seed": seed}


def cmd_train(args):
    from dataclasses import replace

    from .denoiser import DenoiserConfig
    from .training import TrainConfig, load_config_file, train, write_config_file
    _, samples = _load_data(args.data)
    if args.config is not None:
        tcfg, dcfg = load_config_file(_require(args.config, "config file"))
        explicit_seed = "seed" in _raw_keys(args.config)
    else:
        tcfg, dcfg, explicit_seed = TrainConfig(), DenoiserConfig(), False
    if args.seed is not None or not explicit_seed:
        tcfg = replace(tcfg, seed=resolve_seed(args.seed))
    val = None
    if args.val_data is not None:
        _, val = _load_data(args.val_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(samples, dcfg, tcfg, val_dataset=val, log_path=out / "train_log.csv", progress=args.progress)
    ckpt = res.model.save(out / "model.npz", extra={"train_config": _plain(tcfg)})
    write_config_file(out / "config.toml", tcfg, res.model.denoiser.config)
    last = res.log[-1]
    return {"checkpoint": str(ckpt), "final_loss": last["loss"], "val_REL": last.get("val_REL")}


def _raw_keys(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return set(tomllib.load(fh))


def _plain(cfg):
    from dataclasses import asdict
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}


def cmd_infer(args):
    from PIL import Image

    from .evaluation import complete
    model = _load_model(args.ckpt)
    _, samples = _load_data(args.data)
    seed = resolve_seed(args.seed)
    comp = complete(model, samples, args.steps, args.strategy, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"depth": comp.depth.astype(np.float64)}
    if comp.labels is not None:
        arrays["labels"] = comp.labels.astype(np.int64)
    np.savez(out / PRED_FILE, **arrays)
    for i in range(len(samples)):
        mm = np.clip(np.round(comp.depth[i] * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(out / f"{i:06d}_depth.png")
        if comp.labels is not None:
            Image.fromarray(comp.labels[i].astype(np.uint8)).save(out / f"{i:06d}_sem.png")
    return {"out": str(out), "samples": len(samples), "step_mode": model.step_mode, "steps": args.steps}


def read_predictions(pred_dir):
    pred_dir = _require(pred_dir, "prediction directory")
    path = pred_dir / PRED_FILE
    if path.exists():
        with np.load(path) as data:
            return data["depth"], (data["labels"] if "labels" in data.files else None)
    from PIL import Image
    files = sorted(pred_dir.glob("*_depth.png"))
    if not files:
        raise CliError(f"no predictions in {pred_dir}", EXIT_MISSING, "missing_file")
    depth = np.stack([np.array(Image.open(f)).astype(np.float64) / 1000.0 for f in files])
    return depth, None


def cmd_eval(args):
    from .evaluation import class_mask, depth_metrics, semantic_accuracy, write_metrics
    pred, labels = read_predictions(args.pred)
    _, samples = _load_data(args.data)
    if len(samples) != len(pred):
        raise CliError(f"{len(pred)} predictions for {len(samples)} samples", EXIT_MISSING, "mismatch")
    gt = np.stack([s.gt_depth for s in samples])
    gt_labels = np.stack([s.labels for s in samples])
    if pred.shape != gt.shape:
        raise CliError(f"prediction shape {pred.shape} != ground truth {gt.shape}", EXIT_MISSING, "mismatch")
    mask = class_mask(gt_labels, args.mask) & (gt > 0)
    if not mask.any():
        raise CliError(f"no pixels in mask {args.mask!r}", EXIT_MISSING, "empty_mask")
    report = depth_metrics(pred, gt, mask, args.mask)
    extra = {}
    if labels is not None:
        extra["semantic_accuracy"] = semantic_accuracy(labels, gt_labels)
    out = Path(args.out) if args.out else Path(args.pred)
    write_metrics([report], out, stem=f"metrics_{args.mask}", extra=extra)
    return {**report.to_dict(), **extra}


def cmd_diagnose(args):
    from .evaluation import exposure_bias_curve, write_bias_report
    from .schedule import build_schedule
    model = _load_model(args.ckpt)
    _, samples = _load_data(args.data)
    if args.max_samples:
        samples = samples[: args.max_samples]
    schedule = build_schedule(args.scheduler, model.schedule.T) if args.scheduler else model.schedule
    if max(args.steps) > schedule.T:
        raise CliError(f"steps exceed T={schedule.T}", EXIT_USAGE, "usage")
    rep = exposure_bias_curve(model, samples, args.steps, schedule, args.strategy, resolve_seed(args.seed))
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "diagnose"
    write_bias_report(rep, out)
    return {"out": str(out), "final_rmse": {S: rep.final_rmse(S) for S in rep.steps},
            "terminal_sqrt_alpha_bar": rep.terminal_sqrt_alpha_bar, "terminal_snr": rep.terminal_snr}


def cmd_plot_schedule(args):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .schedule import build_schedule, snr_curve, write_schedule_csv
    if args.T < 2:
        raise CliError("--T must be at least 2", EXIT_USAGE, "usage")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = {"on": ["rescaled"], "off": ["original"], "both": ["original", "rescaled"]}[args.rescaled]
    written = []
    curves = {}
    for mode in modes:
        sched = build_schedule(mode, args.T)
        written.append(write_schedule_csv(sched, out / f"schedule_{mode}.csv"))
        curves[mode] = (sched.sqrt_alpha_bars, snr_curve(sched))
    t = np.arange(1, args.T + 1)
    for name, ylabel in (("sqrt_alpha_bar", "sqrt(alpha_bar)"), ("log_snr", "log SNR")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode, (sab, s) in curves.items():
            if name == "sqrt_alpha_bar":
                ax.plot(t, sab, label=mode)
            else:
                with np.errstate(divide="ignore"):
                    ls = np.log(s)
                finite = np.isfinite(ls)
                ax.plot(t[finite], ls[finite], label=mode)
        ax.set_xlabel("t")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return {"files": [str(p) for p in written]}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="didsee", description="Diffusion depth completion toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64), help="HxW, default 64x64")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a completion model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--config", type=Path, help="flat TOML; denoiser.<key> entries configure the network")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--val-data", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict depth (and semantics) for a dataset")
    i.add_argument("--ckpt", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--steps", type=int, default=10, help="sampler steps for multi-step checkpoints")
    i.add_argument("--strategy", choices=("trailing", "leading"), default="trailing")
    i.add_argument("--seed", type=int)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--mask", choices=("all", "nonlambertian", "transparent"), default="all")
    e.add_argument("--out", type=Path, help="report directory, default the prediction directory")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="exposure-bias curves for a checkpoint")
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--steps", type=_steps, default=[1, 2, 5, 10])
    d.add_argument("--strategy", choices=("trailing", "leading"), default="trailing")
    d.add_argument("--scheduler", choices=("original", "rescaled"), help="override the checkpoint's schedule")
    d.add_argument("--max-samples", type=int, default=0)
    d.add_argument("--out", type=Path)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("plot-schedule", help="schedule CSV and curve plots")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--rescaled", choices=("on", "off", "both"), default="both")
    s.add_argument("--out", type=Path, default=Path("schedule_plots"))
    s.set_defaults(func=cmd_plot_schedule)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except CliError as exc:
        _emit_error(exc, exc.code, exc.kind)
        return exc.code
    except FileNotFoundError as exc:
        _emit_error(exc, EXIT_MISSING, "missing_file")
        return EXIT_MISSING
    except (ValueError, RuntimeError) as exc:
        _emit_error(exc, EXIT_MISSING, type(exc).__name__)
        return EXIT_MISSING
    print(json.dumps(result, default=float, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
