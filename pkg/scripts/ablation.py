"""Train every ablation variant at the same step budget and compare test Rank1@0.5.

    python3 scripts/ablation.py --steps 1000 --out results/ablation.json
"""

import argparse
import json
import time

from mapdiff.config import ABLATIONS, load_config
from mapdiff.evaluation import evaluate_model
from mapdiff.synthetic_data import generate_examples
from mapdiff.training import schedule_from, train


def run_variant(name, steps, train_set, test_set):
    cfg = load_config(None, ABLATIONS[name])
    result = train(train_set, cfg, steps=steps)
    metrics = evaluate_model(result.model, test_set, schedule_from(cfg), cfg.diffusion.inference_steps,
                             cfg.diffusion.rescale, cfg.eval.seed, cfg.eval.batch_size)
    return {"metrics": metrics, "train_seconds": round(result.seconds, 1),
            "smoothed_loss_ratio": result.smoothed_ratio(cfg.train.smoothing)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--variants", nargs="*", default=list(ABLATIONS))
    p.add_argument("--out")
    args = p.parse_args()

    gen = load_config().data
    train_set = list(generate_examples(gen, gen.n_train, "train"))
    test_set = list(generate_examples(gen, gen.n_test, "test"))
    table = {}
    for name in args.variants:
        t0 = time.perf_counter()
        table[name] = run_variant(name, args.steps, train_set, test_set)
        print(f"{name:28s} rank1@0.5={table[name]['metrics']['rank1@0.5']:6.2f}  "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"steps": args.steps, "variants": table}, fh, indent=2, sort_keys=True)
            fh.write("\n")


if __name__ == "__main__":
    main()
