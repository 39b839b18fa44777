"""Where does the semantic enhancer help on transparent pixels?

Trains the joint single-step model of the toy ablation for one seed, then
reports the per-class semantic confusion on the test set and transparent-pixel
depth REL split by whether the semantic stream recognised the pixel.

    python -u scripts/analyze_enhancer.py --seed 0 --out results/enhancer_analysis.json
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from didsee.evaluation import single_step_complete
from didsee.experiments import VARIANTS, AblationConfig
from didsee.synthdata import TRANSPARENT, SceneConfig, fill_invalid, generate_dataset
from didsee.training import train


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/enhancer_analysis.json")
    p.add_argument("--ckpt", help="optionally save the trained model here")
    args = p.parse_args()

    cfg = AblationConfig()
    scene = SceneConfig(height=cfg.size, width=cfg.size)
    train_set = generate_dataset(cfg.n_train, cfg.train_data_seed, scene)
    test_set = generate_dataset(cfg.n_test, cfg.test_data_seed, scene)
    tcfg = replace(cfg.train, seed=args.seed, **VARIANTS["rescaled_single_joint"])
    model = train(train_set, cfg.denoiser, tcfg).model
    if args.ckpt:
        model.save(args.ckpt)

    comp = single_step_complete(model, test_set)
    labels = np.stack([s.labels for s in test_set])
    gt = np.stack([s.gt_depth for s in test_set])
    raw = np.stack([np.clip(fill_invalid(s.raw_depth), scene.near, scene.far) for s in test_set])
    conf = np.zeros((4, 4), dtype=np.int64)
    np.add.at(conf, (labels.ravel(), comp.labels.ravel()), 1)

    rel = np.abs(comp.depth - gt) / gt
    t = labels == TRANSPARENT
    hit = t & (comp.labels == TRANSPARENT)
    out = {
        "seed": args.seed,
        "confusion_rows_gt_cols_pred": conf.tolist(),
        "recall": [float(v) for v in np.diag(conf) / conf.sum(axis=1)],
        "transparent_pixel_share": float(t.mean()),
        "rel_transparent": float(rel[t].mean()),
        "rel_transparent_raw_input": float((np.abs(raw - gt) / gt)[t].mean()),
        "rel_transparent_recognised": float(rel[hit].mean()) if hit.any() else None,
        "rel_transparent_missed": float(rel[t & ~hit].mean()),
        "recognised_pixels": int(hit.sum()),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
