"""Train the default configuration, evaluate it, and compare against the chance baseline.

This is the run the learnability thresholds were frozen from.

    python3 scripts/reference_run.py --steps 1000 --out results/reference.json
"""

import argparse
import json

from mapdiff.config import load_config
from mapdiff.evaluation import chance_baseline, evaluate_model
from mapdiff.synthetic_data import generate_examples
from mapdiff.training import schedule_from, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--chance-draws", type=int, default=100)
    p.add_argument("--out")
    args = p.parse_args()

    cfg = load_config(args.config)
    train_set = list(generate_examples(cfg.data, cfg.data.n_train, "train"))
    test_set = list(generate_examples(cfg.data, cfg.data.n_test, "test"))
    result = train(train_set, cfg, steps=args.steps,
                   progress=lambda s, loss: s % 100 == 0 and print(f"step {s:5d} loss {loss:.5f}", flush=True))
    metrics = evaluate_model(result.model, test_set, schedule_from(cfg), cfg.diffusion.inference_steps,
                             cfg.diffusion.rescale, cfg.eval.seed, cfg.eval.batch_size)
    chance = chance_baseline(test_set, cfg.model.scales, cfg.model.anchors, draws=args.chance_draws)
    report = {
        "steps": len(result.losses),
        "train_seconds": round(result.seconds, 1),
        "smoothed_loss_ratio": result.smoothed_ratio(cfg.train.smoothing),
        "metrics": metrics,
        "chance_rank1@0.5": chance,
        "margin_over_chance": metrics["rank1@0.5"] - chance,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
