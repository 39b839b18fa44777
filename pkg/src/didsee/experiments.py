"""Toy-scale ablation and exposure-bias experiments.

Results are cached as JSON under ``results/`` keyed by a hash of the
experiment configuration, so the slow acceptance checks only train once per
configuration. Delete the cache file to force a rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .denoiser import DenoiserConfig
from .evaluation import evaluate_model, exposure_bias_curve
from .synthdata import SceneConfig, generate_dataset
from .training import TrainConfig, train

log = logging.getLogger(__name__)

RESULTS_DIR = Path(__file__).resolve().parents[2] / "results"

# name -> overrides applied on top of the shared TrainConfig
VARIANTS = {
    # standard diffusion baseline: v-prediction over all timesteps, 10-step trailing inference
    "original_multi": dict(scheduler_mode="original", step_mode="multi", joint_mode=False),
    "rescaled_multi": dict(scheduler_mode="rescaled", step_mode="multi", joint_mode=False),
    "rescaled_single": dict(scheduler_mode="rescaled", step_mode="single", joint_mode=False),
    "rescaled_single_joint": dict(scheduler_mode="rescaled", step_mode="single", joint_mode=True),
}


@dataclass
class AblationConfig:
    n_train: int = 2000
    n_test: int = 200
    size: int = 64
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("original_multi", "rescaled_single", "rescaled_single_joint")
    # variants trained for the first seed only
    first_seed_variants: tuple[str, ...] = ("rescaled_multi",)
    eval_steps: int = 10
    bias_steps: tuple[int, ...] = (1, 2, 5, 10)
    train_data_seed: int = 1
    test_data_seed: int = 2
    denoiser: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(base_channels=16, time_embed_dim=64))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=12, batch_size=16, learning_rate=1e-3, val_max_samples=0, val_steps=10))

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def criterion_summary(results: dict) -> dict:
    """Medians over seeds of the quantities the ablation criteria compare."""
    runs = results["runs"]

    def med(variant, key):
        vals = [r[variant][key] for r in runs.values() if variant in r]
        return statistics.median(vals) if vals else None

    return {
        "rel_original_multi": med("original_multi", "rel"),
        "rel_rescaled_single": med("rescaled_single", "rel"),
        "rel_transparent_single": med("rescaled_single", "rel_transparent"),
        "rel_transparent_joint": med("rescaled_single_joint", "rel_transparent"),
        "rel_joint": med("rescaled_single_joint", "rel"),
    }


def run_ablation(cfg: Optional[AblationConfig] = None, cache_dir=RESULTS_DIR, use_cache: bool = True,
                 progress: bool = False) -> dict:
    cfg = cfg or AblationConfig()
    cache = Path(cache_dir) / f"ablation_{cfg.key()}.json"
    if use_cache and cache.exists():
        return json.loads(cache.read_text())

    scene = SceneConfig(height=cfg.size, width=cfg.size)
    t0 = time.time()
    train_set = generate_dataset(cfg.n_train, cfg.train_data_seed, scene)
    test_set = generate_dataset(cfg.n_test, cfg.test_data_seed, scene)

    runs: dict[str, dict] = {}
    bias: dict[str, dict] = {}
    for i, seed in enumerate(cfg.seeds):
        names = list(cfg.variants) + (list(cfg.first_seed_variants) if i == 0 else [])
        runs[str(seed)] = {}
        for name in names:
            tcfg = replace(cfg.train, seed=seed, **VARIANTS[name])
            start = time.time()
            result = train(train_set, cfg.denoiser, tcfg, progress=progress)
            model = result.model
            report = evaluate_model(model, test_set, steps=cfg.eval_steps, strategy="trailing", seed=seed)
            entry = {
                "rel": report["all"].rel,
                "rmse": report["all"].rmse,
                "mae": report["all"].mae,
                "delta_105": report["all"].delta_105,
                "rel_transparent": report["transparent"].rel,
                "rel_nonlambertian": report["nonlambertian"].rel,
                "final_loss": result.log[-1]["loss"],
                "train_seconds": time.time() - start,
            }
            if "semantic_accuracy" in report:
                entry["semantic_accuracy"] = report["semantic_accuracy"]
            if tcfg.step_mode == "multi":
                br = exposure_bias_curve(model, test_set, cfg.bias_steps, seed=seed)
                bias.setdefault(name, {})[str(seed)] = br.to_dict()
            runs[str(seed)][name] = entry
            msg = f"seed {seed} {name}: REL {entry['rel']:.4f} transparent {entry['rel_transparent']:.4f}"
            (print if progress else log.info)(msg)

    results = {
        "config": json.loads(json.dumps(asdict(cfg), default=str)),
        "key": cfg.key(),
        "runs": runs,
        "exposure_bias": bias,
        "elapsed_seconds": time.time() - t0,
    }
    results["summary"] = criterion_summary(results)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def mean_bias_curves(results: dict, variant: str = "original_multi") -> dict[int, list[float]]:
    """Per-step exposure-bias curves averaged over the seeds that trained ``variant``."""
    per_seed = results["exposure_bias"].get(variant, {})
    curves: dict[int, list] = {}
    for rep in per_seed.values():
        for S, curve in rep["per_step_latent_rmse"].items():
            curves.setdefault(int(S), []).append(curve)
    return {S: list(np.mean(np.array(c), axis=0)) for S, c in sorted(curves.items())}


def monotone_fraction(curves: dict[int, list[float]]) -> float:
    """Share of adjacent per-step pairs that do not decrease, pooled over curves."""
    ups = total = 0
    for c in curves.values():
        for a, b in zip(c, c[1:]):
            total += 1
            ups += b >= a
    return ups / total if total else 1.0
