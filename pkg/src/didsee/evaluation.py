"""Depth/semantic metrics, model inference and the signal-leakage / exposure-bias diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import diffusion
from .schedule import NoiseSchedule, Strategy, snr, timestep_grid
from .semantics import decode_labels
from .synthdata import NON_LAMBERTIAN, TRANSPARENT, denormalize_depth

THRESHOLDS = (1.05, 1.10, 1.25)
MASK_NAMES = ("all", "nonlambertian", "transparent")


class ModeMismatch(ValueError):
    """Inference requested in a mode the checkpoint was not trained for."""


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    mae: float
    delta_105: float
    delta_110: float
    delta_125: float
    pixel_count: int
    mask_name: str = "all"

    def to_dict(self):
        return asdict(self)


@dataclass
class BiasReport:
    steps: list[int]
    per_step_latent_rmse: dict[int, list[float]]
    terminal_sqrt_alpha_bar: float
    terminal_snr: float
    strategy: str = "trailing"
    extra: dict = field(default_factory=dict)

    def final_rmse(self, S: int) -> float:
        return self.per_step_latent_rmse[S][-1]

    def to_dict(self):
        return {
            "steps": list(self.steps),
            "per_step_latent_rmse": {str(k): list(v) for k, v in self.per_step_latent_rmse.items()},
            "terminal_sqrt_alpha_bar": self.terminal_sqrt_alpha_bar,
            "terminal_snr": self.terminal_snr,
            "strategy": self.strategy,
            **({"extra": self.extra} if self.extra else {}),
        }


# -- metrics -----------------------------------------------------------------

def depth_metrics(pred, gt, mask=None, mask_name: str = "all") -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != gt.shape:
        raise ValueError("mask shape differs from depth shape")
    if not mask.any():
        raise ValueError(f"empty mask {mask_name!r}")
    p, g = pred[mask], gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive inside the mask")
    err = p - g
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, np.where(p > 0, g / p, np.inf))
    deltas = [100.0 * float(np.mean(ratio < tau)) for tau in THRESHOLDS]
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rel=float(np.mean(np.abs(err) / g)),
        mae=float(np.mean(np.abs(err))),
        delta_105=deltas[0], delta_110=deltas[1], delta_125=deltas[2],
        pixel_count=int(mask.sum()),
        mask_name=mask_name,
    )


def semantic_accuracy(pred_labels, gt_labels, mask=None) -> float:
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label map shapes differ")
    mask = np.ones(gt_labels.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty mask")
    return 100.0 * float(np.mean(pred_labels[mask] == gt_labels[mask]))


def class_mask(labels, mask_name: str) -> np.ndarray:
    labels = np.asarray(labels)
    if mask_name == "all":
        return np.ones(labels.shape, bool)
    if mask_name == "nonlambertian":
        return np.isin(labels, NON_LAMBERTIAN)
    if mask_name == "transparent":
        return labels == TRANSPARENT
    raise ValueError(f"unknown mask {mask_name!r}")


# -- inference ---------------------------------------------------------------

@dataclass
class Completion:
    depth: np.ndarray                     # (N, H, W) metres
    labels: Optional[np.ndarray] = None   # (N, H, W) when the model is joint
    per_step_rmse: Optional[np.ndarray] = None  # (N, S) latent RMSE per grid step


def _batches(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _to_outputs(model, z0_depth, z0_sem):
    with torch.no_grad():
        img = model.codec.decode(z0_depth).double().numpy()
    depth = np.stack([np.clip(denormalize_depth(im, model.near, model.far), model.near, model.far) for im in img])
    labels = None
    if z0_sem is not None:
        with torch.no_grad():
            sem = model.codec.decode(z0_sem).double().numpy()
        labels = np.stack([decode_labels(im, model.palette) for im in sem])
    return depth, labels


def single_step_complete(model, samples, batch_size: int = 32, seed: int = 0) -> Completion:
    """One forward pass at t = T per sample."""
    if model.step_mode != "single":
        raise ModeMismatch(f"checkpoint trained in {model.step_mode!r} mode, single-step requested")
    samples = list(samples) if isinstance(samples, (list, tuple)) else [samples]
    T = model.schedule.T
    gen = torch.Generator().manual_seed(seed)
    depths, labels = [], []
    for chunk in _batches(samples, batch_size):
        batch = model.encode_batch(chunk)
        y0, s0 = batch["y0"], batch["s0"]
        if model.noisy_input_mode == "zeros":
            z_d, z_s = torch.zeros_like(y0), torch.zeros_like(s0)
        else:
            z_d = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
            z_s = torch.randn(s0.shape, generator=gen, dtype=s0.dtype)
        v_d, v_s = model.predict_v(batch, z_d, z_s, T)
        z0_d = diffusion.predict_clean(z_d, v_d, T, model.schedule)
        z0_s = diffusion.predict_clean(z_s, v_s, T, model.schedule) if v_s is not None else None
        d, l = _to_outputs(model, z0_d, z0_s)
        depths.append(d)
        if l is not None:
            labels.append(l)
    return Completion(np.concatenate(depths), np.concatenate(labels) if labels else None)


def multi_step_complete(model, samples, S: int, strategy="trailing", schedule: Optional[NoiseSchedule] = None,
                        batch_size: int = 32, seed: int = 0, require_mode: bool = True) -> Completion:
    """Deterministic sampler over ``timestep_grid(T, S, strategy)`` from seeded Gaussian noise."""
    if require_mode and model.step_mode != "multi":
        raise ModeMismatch(f"checkpoint trained in {model.step_mode!r} mode, multi-step requested")
    schedule = schedule or model.schedule
    grid = timestep_grid(schedule.T, S, strategy)
    samples = list(samples) if isinstance(samples, (list, tuple)) else [samples]
    gen = torch.Generator().manual_seed(seed)
    depths, labels, curves = [], [], []
    for chunk in _batches(samples, batch_size):
        batch = model.encode_batch(chunk)
        y0 = batch["y0"]
        z_d = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
        z_s = torch.randn(y0.shape, generator=gen, dtype=y0.dtype) if model.joint else None
        steps = list(grid)
        rmse = np.zeros((len(chunk), len(steps)))
        for i, t in enumerate(steps):
            t_next = steps[i + 1] if i + 1 < len(steps) else 0
            v_d, v_s = model.predict_v(batch, z_d, z_s, t)
            z0_hat = diffusion.predict_clean(z_d, v_d, t, schedule)
            rmse[:, i] = torch.sqrt(((z0_hat - y0) ** 2).flatten(1).mean(1)).double().numpy()
            z_d = diffusion.sampler_step(z_d, v_d, t, t_next, schedule)
            if v_s is not None:
                z_s = diffusion.sampler_step(z_s, v_s, t, t_next, schedule)
        d, l = _to_outputs(model, z_d, z_s)
        depths.append(d)
        curves.append(rmse)
        if l is not None:
            labels.append(l)
    return Completion(np.concatenate(depths), np.concatenate(labels) if labels else None, np.concatenate(curves))


def complete(model, samples, steps: int = 1, strategy="trailing", seed: int = 0) -> Completion:
    if model.step_mode == "single":
        return single_step_complete(model, samples, seed=seed)
    return multi_step_complete(model, samples, steps, strategy, seed=seed)


def pooled_metrics(pred_depth, samples, mask_names=MASK_NAMES) -> dict[str, MetricsReport]:
    """Metrics pooled over every masked pixel of every sample, per mask."""
    gt = np.stack([s.gt_depth for s in samples])
    labels = np.stack([s.labels for s in samples])
    out = {}
    for name in mask_names:
        m = class_mask(labels, name) & (gt > 0)
        if m.any():
            out[name] = depth_metrics(pred_depth, gt, m, name)
    return out


def evaluate_model(model, samples, steps: int = 10, strategy="trailing", seed: int = 0) -> dict:
    comp = complete(model, samples, steps, strategy, seed)
    report = pooled_metrics(comp.depth, samples)
    if comp.labels is not None:
        report["semantic_accuracy"] = semantic_accuracy(comp.labels, np.stack([s.labels for s in samples]))
    return report


# -- diagnostics -------------------------------------------------------------

def signal_leakage_report(schedule: NoiseSchedule) -> tuple[float, float]:
    """``(sqrt(alpha_bar_T), SNR(T))`` of a schedule."""
    T = schedule.T
    return schedule.sqrt_alpha_bar(T), snr(schedule, T)


def exposure_bias_curve(model, samples, steps_list=(1, 2, 5, 10), schedule: Optional[NoiseSchedule] = None,
                        strategy="trailing", seed: int = 0) -> BiasReport:
    """Per-step latent RMSE of the clean estimate vs the ground-truth latent, averaged over samples."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    schedule = schedule or model.schedule
    curves = {}
    for S in steps_list:
        comp = multi_step_complete(model, samples, S, strategy, schedule, seed=seed, require_mode=False)
        curves[int(S)] = [float(v) for v in comp.per_step_rmse.mean(axis=0)]
    sa, s = signal_leakage_report(schedule)
    return BiasReport([int(S) for S in steps_list], curves, sa, s, Strategy(strategy).value)


# -- report I/O ----------------------------------------------------------------

def write_metrics(reports, out_dir, stem: str = "metrics", extra: Optional[dict] = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.to_dict() for r in (reports.values() if isinstance(reports, dict) else reports)
            if isinstance(r, MetricsReport)]
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(MetricsReport.__dataclass_fields__))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    payload = {"metrics": rows, **(extra or {})}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def write_bias_report(report: BiasReport, out_dir, stem: str = "exposure_bias", plot: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.json", out / f"{stem}.csv"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with paths[1].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["S", "step", "latent_rmse"])
        for S in report.steps:
            for i, v in enumerate(report.per_step_latent_rmse[S], 1):
                w.writerow([S, i, repr(float(v))])
    if plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for S in report.steps:
            ys = report.per_step_latent_rmse[S]
            ax.plot(range(1, len(ys) + 1), ys, marker="o", label=f"S={S}")
        ax.set_xlabel("inference step")
        ax.set_ylabel("latent RMSE")
        ax.legend()
        fig.tight_layout()
        paths.append(out / f"{stem}.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths


def read_metrics_json(path) -> dict[str, MetricsReport]:
    data = json.loads(Path(path).read_text())
    return {r["mask_name"]: MetricsReport(**r) for r in data["metrics"]}

