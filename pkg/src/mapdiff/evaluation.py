"""Interval IoU, Rank n@m, and the evaluation pipeline over a dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .diffusion import NoiseSchedule, even_steps, sample_loop
from .model import MapDiffusionModel, from_diffusion_space
from .synthetic_data import GroundingExample
from .temporal_map import (
    MomentInterval,
    MultiScaleMaps,
    aggregate_multiscale,
    scale_index,
    top_n_moments,
)
from .training import TensorData, tensorize

RANKS = (1, 5)
THRESHOLDS = (0.5, 0.7)


def interval_iou(a: MomentInterval, b: MomentInterval) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


@dataclass
class RetrievalResult:
    query_id: str
    ranked: List[MomentInterval]
    ground_truth: MomentInterval


def is_hit(result: RetrievalResult, n: int, m: float) -> bool:
    # strictly greater: an IoU equal to the threshold is a miss
    return any(interval_iou(p, result.ground_truth) > m for p in result.ranked[:n])


def rank_n_at_m(results: Sequence[RetrievalResult], n: int, m: float) -> float:
    """Percentage of queries with at least one top-``n`` moment whose IoU exceeds ``m``."""
    if not results:
        raise ValueError("no retrieval results")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < m <= 1:
        raise ValueError("m must lie in (0, 1]")
    hits = sum(is_hit(r, n, m) for r in results)
    return 100.0 * hits / len(results)


def metrics_table(results: Sequence[RetrievalResult], ranks=RANKS, thresholds=THRESHOLDS) -> Dict[str, float]:
    out = {f"rank{n}@{m}": rank_n_at_m(results, n, m) for n in ranks for m in thresholds}
    out["n_queries"] = len(results)
    return out


def metrics_json(metrics: Dict[str, float]) -> str:
    return json.dumps(metrics, sort_keys=True)


# ---------------------------------------------------------------------------
# predictors: map a tensorised batch to per-scale numpy maps (B, rows_k, A)


class DiffusionPredictor:
    """Samples clean maps with the reverse DDIM chain, one seeded generator per batch."""

    def __init__(self, model: MapDiffusionModel, sched: NoiseSchedule, steps: Sequence[int],
                 rescale: bool = False, seed: int = 0):
        self.model, self.sched, self.steps = model, sched, list(steps)
        self.rescale, self.seed = rescale, seed

    @torch.no_grad()
    def __call__(self, batch: TensorData, batch_index: int) -> List[np.ndarray]:
        model = self.model.eval()
        feats = model.encode(batch.segs, batch.words, batch.lengths)
        b = len(batch)

        def predict(ys, t):
            return model.denoise(ys, torch.full((b,), t, dtype=torch.long), feats)

        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([self.seed, batch_index]).generate_state(1)[0]))
        dtype = feats[0].dtype
        out = sample_loop(predict, model.masks, self.sched, self.steps, gen, batch_size=b, dtype=dtype)
        return [from_diffusion_space(y, self.rescale, m).numpy().astype(np.float64) for y, m in zip(out, model.masks)]


class OraclePredictor:
    def __call__(self, batch: TensorData, batch_index: int) -> List[np.ndarray]:
        return [t.numpy().astype(np.float64) for t in batch.targets]


class RandomPredictor:
    """Uniform random scores; the chance reference."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, batch: TensorData, batch_index: int) -> List[np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, batch_index]))
        return [rng.uniform(size=t.shape) for t in batch.targets]


def retrieve(ex: GroundingExample, maps: Sequence[np.ndarray], scales: int, anchors: int,
             top: int = max(RANKS)) -> RetrievalResult:
    n = ex.n
    valid = [scale_index(n, k, anchors)[2] for k in range(scales)]
    ms = MultiScaleMaps(ex.grid, scales, anchors, [np.where(v, m, 0.0) for m, v in zip(maps, valid)], valid)
    ranked = top_n_moments(aggregate_multiscale(ms), top)
    return RetrievalResult(ex.id, [m for m, _ in ranked], ex.moment)


def evaluate(predictor, examples: Sequence[GroundingExample], scales: int, anchors: int,
             batch_size: int = 64, data: Optional[TensorData] = None,
             model_cfg=None) -> Tuple[Dict[str, float], List[RetrievalResult]]:
    if not examples:
        raise ValueError("empty dataset")
    if data is None:
        if model_cfg is None:
            raise ValueError("need either tensorised data or a model config")
        data = tensorize(examples, model_cfg)
    results = []
    for bi, start in enumerate(range(0, len(examples), batch_size)):
        idx = list(range(start, min(start + batch_size, len(examples))))
        maps = predictor(data.subset(idx), bi)
        for j, i in enumerate(idx):
            results.append(retrieve(examples[i], [m[j] for m in maps], scales, anchors))
    return metrics_table(results), results


def evaluate_model(model: MapDiffusionModel, examples: Sequence[GroundingExample], sched: NoiseSchedule,
                   inference_steps: int = 25, rescale: bool = False, seed: int = 0,
                   batch_size: int = 64) -> Dict[str, float]:
    cfg = model.cfg
    predictor = DiffusionPredictor(model, sched, even_steps(sched.T, inference_steps), rescale, seed)
    metrics, _ = evaluate(predictor, examples, cfg.scales, cfg.anchors, batch_size, model_cfg=cfg)
    return metrics


def chance_baseline(examples: Sequence[GroundingExample], scales: int, anchors: int, n: int = 1,
                    m: float = 0.5, draws: int = 100, seed: int = 0) -> float:
    """Monte-Carlo Rank n@m of uniform-random score maps over the dataset's geometry."""
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(draws):
        for ex in examples:
            maps = [rng.uniform(size=scale_index(ex.n, k, anchors)[2].shape) for k in range(scales)]
            hits += is_hit(retrieve(ex, maps, scales, anchors, top=n), n, m)
    return 100.0 * hits / (draws * len(examples))
