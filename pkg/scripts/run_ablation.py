"""Toy ablation: original multi-step vs rescaled single-step vs single-step + semantic enhancer.

Trains every variant for each seed on a shared synthetic train/test split and
caches the results under results/. The acceptance suite reads the same cache.

    python scripts/run_ablation.py                 # full config (slow, hours on CPU)
    python scripts/run_ablation.py --quick         # 1/10 data, one seed
"""

import argparse
import json
import logging
from dataclasses import replace

from didsee.experiments import AblationConfig, RESULTS_DIR, mean_bias_curves, monotone_fraction, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--quick", action="store_true", help="200/20 samples, one seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--cache-dir", default=str(RESULTS_DIR))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = AblationConfig()
    if args.quick:
        cfg = replace(cfg, n_train=200, n_test=20, seeds=(0,))
    if args.seeds:
        cfg = replace(cfg, seeds=args.seeds)
    if args.epochs:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    res = run_ablation(cfg, cache_dir=args.cache_dir, use_cache=not args.no_cache, progress=True)

    s = res["summary"]
    print(json.dumps(s, indent=2))
    print(f"rescaled single < original 10-step: {s['rel_rescaled_single'] < s['rel_original_multi']}")
    print(f"joint transparent < non-joint:      {s['rel_transparent_joint'] < s['rel_transparent_single']}")
    curves = mean_bias_curves(res, "original_multi")
    print("exposure bias (original, multi):", {S: [round(v, 4) for v in c] for S, c in curves.items()})
    print(f"non-decreasing adjacent pairs: {monotone_fraction({S: c for S, c in curves.items() if S > 1}):.2f}")
    print(f"elapsed {res['elapsed_seconds'] / 60:.1f} min, cache key {res['key']}")


if __name__ == "__main__":
    main()
