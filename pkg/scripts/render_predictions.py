"""Render predicted and ground-truth aggregated maps of a few test queries as PGM files.

    python3 scripts/render_predictions.py --ckpt runs/default --data data --out results/maps --count 4
"""

import argparse
import os

import numpy as np

from mapdiff.cli import render_pgm
from mapdiff.diffusion import even_steps
from mapdiff.evaluation import DiffusionPredictor
from mapdiff.synthetic_data import load_split
from mapdiff.temporal_map import MultiScaleMaps, aggregate_multiscale, build_iou_map, scale_index
from mapdiff.training import load_checkpoint, schedule_from, tensorize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    args = p.parse_args()

    model, cfg, _ = load_checkpoint(args.ckpt)
    examples = load_split(args.data, "test")[: args.count]
    sched = schedule_from(cfg)
    predictor = DiffusionPredictor(model, sched, even_steps(sched.T, cfg.diffusion.inference_steps),
                                   cfg.diffusion.rescale, cfg.eval.seed)
    maps = predictor(tensorize(examples, cfg.model), 0)
    k_total, anchors = cfg.model.scales, cfg.model.anchors
    os.makedirs(args.out, exist_ok=True)
    for b, ex in enumerate(examples):
        valid = [scale_index(ex.n, k, anchors)[2] for k in range(k_total)]
        pred = aggregate_multiscale(MultiScaleMaps(ex.grid, k_total, anchors, [np.where(v, m[b], 0.0) for m, v in
                                                                                zip(maps, valid)], valid))
        for tag, score_map in (("pred", pred), ("truth", build_iou_map(ex.grid, ex.moment))):
            with open(os.path.join(args.out, f"{ex.id}_{tag}.pgm"), "w") as fh:
                fh.write(render_pgm(score_map))
    print(f"wrote {2 * len(examples)} maps to {args.out}")


if __name__ == "__main__":
    main()
