"""Command-line entry points: gen-data, train, eval, render, gradcheck.

Exit codes: 0 success, 1 threshold/assertion failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from multiprocessing import Pool
from typing import List, Optional

import numpy as np

from . import synthetic_data
from .config import ExperimentConfig, load_config
from .diffusion import even_steps, make_schedule
from .evaluation import DiffusionPredictor, OraclePredictor, RandomPredictor, evaluate, metrics_json
from .temporal_map import ScoreMap2D
from .training import (
    CHECKPOINT_VERSION,
    TrainingError,
    GRADCHECK_CASES,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("mapdiff")


class InputError(Exception):
    pass


def _hash_paths(paths: List[str]) -> str:
    h = hashlib.sha1()
    for p in sorted(p for p in paths if p):
        if os.path.isfile(p):
            h.update(os.path.basename(p).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def write_run_manifest(out_dir: str, command: str, config_path: Optional[str], seed: int,
                       inputs: List[str], started: str) -> None:
    manifest = {
        "command": command,
        "config_path": config_path,
        "seed": seed,
        "input_hash": _hash_paths(inputs),
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_cfg(path: Optional[str], overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        return load_config(path, overrides)
    except (OSError, ValueError) as err:
        raise InputError(f"bad config {path}: {err}") from err


def _seed_overrides(args, section: str) -> dict:
    return {section: {"seed": args.seed}} if getattr(args, "seed", None) is not None else {}


# ---------------------------------------------------------------------------


def _gen_one(job):
    cfg_dict, split, idx, protos = job
    from .config import GenConfig

    cfg = GenConfig(**cfg_dict)
    ex = synthetic_data.generate_example(cfg, synthetic_data.example_rng(cfg.seed, split, idx), protos,
                                         id=f"{split}-{idx:06d}")
    return json.dumps(ex.to_dict())


def cmd_gen_data(args) -> int:
    started = _now()
    cfg = _load_cfg(args.config, _seed_overrides(args, "data"))
    gen = cfg.data
    splits = list(synthetic_data.SPLITS) if args.split == "all" else [args.split]
    os.makedirs(args.out, exist_ok=True)
    for split in splits:
        count = args.count if args.count is not None else getattr(gen, f"n_{split}")
        if args.jobs > 1 and count > 0:
            protos = synthetic_data.make_prototypes(gen)
            path = os.path.join(args.out, f"{split}.jsonl")
            with Pool(args.jobs) as pool, open(path, "w") as fh:
                # imap keeps input order, so output matches the serial path byte for byte
                for line in pool.imap(_gen_one, ((gen.__dict__, split, i, protos) for i in range(count)), chunksize=16):
                    fh.write(line + "\n")
            manifest = {"split": split, "count": count, "config": gen.__dict__,
                        "sha256": synthetic_data.file_sha256(path)}
            with open(os.path.join(args.out, f"{split}.manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
                fh.write("\n")
        else:
            path = synthetic_data.generate_dataset(gen, count, args.out, split)
        print(f"wrote {count} examples to {path}")
    write_run_manifest(args.out, "gen-data", args.config, gen.seed, [args.config], started)
    return 0


def cmd_train(args) -> int:
    started = _now()
    overrides = _seed_overrides(args, "train")
    if args.steps is not None:
        overrides.setdefault("train", {})["steps"] = args.steps
    cfg = _load_cfg(args.config, overrides)
    try:
        examples = synthetic_data.load_split(args.data, "train")
    except (OSError, ValueError) as err:
        raise InputError(str(err)) from err
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")

    def progress(step, loss):
        if step % args.log_every == 0:
            log.info("step %d loss %.6f", step, loss)

    try:
        result = train(examples, cfg, log_path=log_path, progress=progress)
    except ValueError as err:
        raise InputError(str(err)) from err
    except TrainingError as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 1
    ratio = result.smoothed_ratio(cfg.train.smoothing)
    save_checkpoint(args.out, result.model, cfg, cfg.train.steps,
                    {"final_loss": result.losses[-1], "smoothed_loss_ratio": ratio})
    write_run_manifest(args.out, "train", args.config, cfg.train.seed,
                       [args.config, os.path.join(args.data, "train.jsonl")], started)
    print(json.dumps({"steps": cfg.train.steps, "final_loss": result.losses[-1],
                      "smoothed_loss_ratio": ratio, "seconds": round(result.seconds, 1)}))
    return 0


def write_oracle_checkpoint(out_dir: str, cfg: Optional[ExperimentConfig] = None, kind: str = "oracle") -> None:
    """A weightless checkpoint whose predictions are the ground-truth (or random) maps."""
    cfg = cfg or ExperimentConfig()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"version": CHECKPOINT_VERSION, "predictor": kind, "config": cfg.to_dict()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def cmd_eval(args) -> int:
    manifest_path = os.path.join(args.ckpt, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        examples = synthetic_data.load_split(args.data, args.split)
    except (OSError, ValueError) as err:
        raise InputError(str(err)) from err
    kind = manifest.get("predictor", "diffusion")
    seed = args.seed if args.seed is not None else 0
    try:
        if kind == "diffusion":
            model, cfg, _ = load_checkpoint(args.ckpt)
            d = cfg.diffusion
            eta = d.eta if args.eta is None else args.eta
            sched = make_schedule(d.T, d.beta_start, d.beta_end, eta)
            steps = even_steps(d.T, args.steps if args.steps is not None else d.inference_steps)
            predictor = DiffusionPredictor(model, sched, steps, d.rescale, seed)
        else:
            cfg = ExperimentConfig.from_dict(manifest["config"]).validate()
            predictor = OraclePredictor() if kind == "oracle" else RandomPredictor(seed)
        metrics, _ = evaluate(predictor, examples, cfg.model.scales, cfg.model.anchors,
                              args.batch_size, model_cfg=cfg.model)
    except (KeyError, ValueError) as err:
        raise InputError(f"checkpoint/data mismatch: {err}") from err
    text = metrics_json(metrics)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def render_pgm(score_map: ScoreMap2D) -> str:
    """Plain-text PGM; row = start index, column = duration index, uncovered cells black."""
    n = score_map.grid.n_segments
    v = np.clip(score_map.values, 0.0, 1.0)
    pix = np.floor(v * 255 + 0.5).astype(int)
    pix[~score_map.covered] = 0
    lines = ["P2", f"{n} {n}", "255"]
    lines += [" ".join(str(p) for p in row) for row in pix]
    return "\n".join(lines) + "\n"


def cmd_render(args) -> int:
    try:
        with open(args.map) as fh:
            score_map = ScoreMap2D.from_json(fh.read())
    except (OSError, ValueError) as err:
        raise InputError(f"cannot read map {args.map}: {err}") from err
    with open(args.out, "w") as fh:
        fh.write(render_pgm(score_map))
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = _load_cfg(args.config)
        m = cfg.model
        cases = [(m.variant, m.conditioning, m.feature_mode, cfg.train.loss)]
    else:
        cases = GRADCHECK_CASES
    report = gradcheck(cases, seed=args.seed or 0)
    for e in report.entries:
        flag = "ok " if e["rel_error"] <= report.tolerance else "BAD"
        print(f"{flag} {e['case']:45s} {e['tensor']:50s} {e['rel_error']:.3e}")
    print(json.dumps({"max_rel_error": report.max_rel_error, "tolerance": report.tolerance,
                      "passed": report.passed}))
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic JSONL splits")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--split", default="all", choices=["all", *synthetic_data.SPLITS])
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="sample maps and print Rank n@m metrics JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=list(synthetic_data.SPLITS))
    e.add_argument("--steps", type=int)
    e.add_argument("--eta", type=float)
    e.add_argument("--seed", type=int)
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a score map JSON as plain PGM")
    r.add_argument("--map", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    c.add_argument("--config")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
