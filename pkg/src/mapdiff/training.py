"""Losses, the training step/loop, checkpoints, and the finite-difference gradient check."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .config import LOSS_KINDS, ExperimentConfig, ModelConfig
from .encoder import scale_masks
from .diffusion import NoiseSchedule, forward_sample, make_schedule
from .model import MapDiffusionModel, build_model, to_diffusion_space
from .synthetic_data import GroundingExample
from .temporal_map import ScoreMap2D, build_iou_map, extract_multiscale

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BCE_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


def rescale_values(y, t_min: float, t_max: float):
    """Clamp-linear rescale: 0 below ``t_min``, 1 above ``t_max``, linear in between."""
    if not 0 <= t_min < t_max <= 1:
        raise ValueError("need 0 <= t_min < t_max <= 1")
    if torch.is_tensor(y):
        return torch.clamp((y - t_min) / (t_max - t_min), 0.0, 1.0)
    return np.clip((np.asarray(y, dtype=np.float64) - t_min) / (t_max - t_min), 0.0, 1.0)


def rescale_map(y: ScoreMap2D, t_min: float, t_max: float) -> ScoreMap2D:
    return ScoreMap2D(y.grid, rescale_values(y.values, t_min, t_max), y.covered)


def scale_loss(pred: torch.Tensor, truth: torch.Tensor, mask: torch.Tensor, kind: str) -> torch.Tensor:
    """Mean over valid cells of one map (averaged over the batch if batched)."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(truth.shape)} differ")
    if pred.dim() == 2:
        pred, truth = pred[None], truth[None]
    m = mask.to(torch.bool).expand_as(pred)
    p, y = pred[m], truth[m]
    if kind == "mse-full":
        per_cell = (p - y) ** 2
    elif kind in ("bce-rescaled", "bce-full"):
        p = torch.clamp(p, BCE_CLAMP, 1 - BCE_CLAMP)
        per_cell = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return per_cell.sum() / m.sum()


def compute_loss(preds: Sequence[torch.Tensor], truths: Sequence[torch.Tensor],
                 masks: Sequence[torch.Tensor], kind: str = "mse-full") -> torch.Tensor:
    """Sum over scales of the per-scale masked mean loss."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if not (len(preds) == len(truths) == len(masks)):
        raise ValueError("need one prediction, target and mask per scale")
    total = None
    for p, y, m in zip(preds, truths, masks):
        term = scale_loss(p, y, m, kind)
        total = term if total is None else total + term
    return total


@dataclass
class TensorData:
    """Padded tensors for a list of examples; ``targets[k]`` is (B, rows_k, A)."""

    segs: torch.Tensor
    words: torch.Tensor
    lengths: torch.Tensor
    targets: List[torch.Tensor]
    examples: List[GroundingExample] = field(default_factory=list)

    def __len__(self):
        return self.segs.shape[0]

    def subset(self, idx) -> "TensorData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        lengths = self.lengths[idx]
        m = int(lengths.max()) if len(idx) else 1
        return TensorData(self.segs[idx], self.words[idx, :m], lengths, [t[idx] for t in self.targets],
                          [self.examples[i] for i in idx.tolist()] if self.examples else [])


def target_maps(ex: GroundingExample, scales: int, anchors: int) -> List[np.ndarray]:
    return extract_multiscale(build_iou_map(ex.grid, ex.moment), scales, anchors).maps


def tensorize(examples: Sequence[GroundingExample], cfg: ModelConfig, dtype=torch.float32) -> TensorData:
    if not examples:
        raise ValueError("no examples")
    for ex in examples:
        if ex.n != cfg.n_segments or ex.segment_features.shape[1] != cfg.d_seg or ex.word_embeddings.shape[1] != cfg.d_w:
            raise ValueError(
                f"example {ex.id} has N={ex.n}, d_seg={ex.segment_features.shape[1]}, "
                f"d_w={ex.word_embeddings.shape[1]}; model expects N={cfg.n_segments}, "
                f"d_seg={cfg.d_seg}, d_w={cfg.d_w}"
            )
    segs = torch.as_tensor(np.stack([ex.segment_features for ex in examples]), dtype=dtype)
    m = max(len(ex.word_embeddings) for ex in examples)
    words = torch.zeros(len(examples), m, cfg.d_w, dtype=dtype)
    for b, ex in enumerate(examples):
        words[b, : len(ex.word_embeddings)] = torch.as_tensor(ex.word_embeddings, dtype=dtype)
    lengths = torch.as_tensor([len(ex.word_embeddings) for ex in examples], dtype=torch.long)
    per_ex = [target_maps(ex, cfg.scales, cfg.anchors) for ex in examples]
    targets = [torch.as_tensor(np.stack([t[k] for t in per_ex]), dtype=dtype) for k in range(cfg.scales)]
    return TensorData(segs, words, lengths, targets, list(examples))


def training_targets(targets: Sequence[torch.Tensor], cfg: ExperimentConfig) -> List[torch.Tensor]:
    """Maps the model is trained to reproduce (rescaled for the BCE ablation)."""
    if cfg.train.loss == "bce-rescaled":
        return [rescale_values(t, cfg.train.t_min, cfg.train.t_max) for t in targets]
    return list(targets)


def train_step(model: MapDiffusionModel, optimizer: torch.optim.Optimizer, batch: TensorData,
               sched: NoiseSchedule, cfg: ExperimentConfig, generator: torch.Generator) -> float:
    model.train()
    b = len(batch)
    masks = model.masks
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    y0s = [to_diffusion_space(y, cfg.diffusion.rescale, m) for y, m in zip(training_targets(batch.targets, cfg), masks)]
    yts = []
    for y0, m in zip(y0s, masks):
        eps = torch.randn(y0.shape, generator=generator, dtype=y0.dtype)
        yts.append(forward_sample(y0, t, eps, sched, m))
    preds = model(yts, t, batch.segs, batch.words, batch.lengths)
    loss = compute_loss(preds, y0s, masks, cfg.train.loss)
    if not torch.isfinite(loss):
        stats = {f"pred{k}_absmax": float(p.detach().abs().max()) for k, p in enumerate(preds)}
        raise TrainingError(f"non-finite loss {loss.item()} (t={t.tolist()}, {stats})")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def make_optimizer(model: torch.nn.Module, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    if cfg.train.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.train.lr)


def schedule_from(cfg: ExperimentConfig) -> NoiseSchedule:
    d = cfg.diffusion
    return make_schedule(d.T, d.beta_start, d.beta_end, d.eta)


def smoothed(losses: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    window = max(1, min(window, len(x)))
    return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class TrainResult:
    model: MapDiffusionModel
    losses: List[float]
    seconds: float

    def smoothed_ratio(self, window: int = 50) -> float:
        s = smoothed(self.losses, window)
        return float(s[-1] / s[0])


def train(examples: Sequence[GroundingExample], cfg: ExperimentConfig, log_path: Optional[str] = None,
          steps: Optional[int] = None, progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train from scratch; fully determined by ``cfg`` (seed included) and the data."""
    cfg.validate()
    steps = cfg.train.steps if steps is None else steps
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg)
    data = tensorize(examples, cfg.model)
    sched = schedule_from(cfg)
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.train.seed)
    bs = min(cfg.train.batch_size, len(data))
    order = torch.randperm(len(data), generator=gen)
    pos = 0
    losses = []
    log_fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        for step in range(1, steps + 1):
            if pos + bs > len(data):
                order = torch.randperm(len(data), generator=gen)
                pos = 0
            batch = data.subset(order[pos:pos + bs])
            pos += bs
            loss = train_step(model, opt, batch, sched, cfg, gen)
            losses.append(loss)
            if log_fh:
                log_fh.write(json.dumps({"step": step, "loss": loss, "lr": cfg.train.lr}) + "\n")
            if progress:
                progress(step, loss)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model, losses, time.perf_counter() - t0)


def save_checkpoint(out_dir: str, model: MapDiffusionModel, cfg: ExperimentConfig, steps: int,
                    extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    torch.save(model.state_dict(), os.path.join(out_dir, "weights.pt"))
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "schedule": schedule_from(cfg).as_dict(),
        "seed": cfg.train.seed,
        "steps": steps,
        "stylization_mlp": "silu -> linear(hidden) -> silu -> linear",
    }
    manifest.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir: str):
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = ExperimentConfig.from_dict(manifest["config"]).validate()
    model = build_model(cfg)
    state = torch.load(os.path.join(ckpt_dir, "weights.pt"), weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, manifest


# ---------------------------------------------------------------------------
# finite-difference gradient check

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


def tiny_model_config(variant: str = "cnn", conditioning: str = "concat", feature_mode: str = "max-pool") -> ModelConfig:
    return ModelConfig(
        n_segments=4, scales=1, anchors=4, d_w=3, d_seg=3, d_v=3, d_s=3, d_f=4,
        feature_mode=feature_mode, lstm_layers=3, variant=variant, conditioning=conditioning,
        blocks=2, kernel=3, channels=4, d_e=4, mlp_hidden=4,
    )


GRADCHECK_CASES = (
    ("cnn", "concat", "max-pool", "mse-full"),
    ("cnn", "concat", "max-pool", "bce-rescaled"),
    ("cnn", "mul", "stacked-conv", "mse-full"),
    ("transformer", "cross-attn", "max-pool", "mse-full"),
    ("transformer", "cross-attn", "max-pool", "bce-full"),
    ("transformer", "concat", "stacked-conv", "bce-rescaled"),
)


@dataclass
class GradcheckReport:
    entries: List[dict]
    tolerance: float = GRADCHECK_TOL
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(e["rel_error"] for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def worst(self, n: int = 5) -> List[dict]:
        return sorted(self.entries, key=lambda e: -e["rel_error"])[:n]

    def to_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "tolerance": self.tolerance,
                "passed": self.passed, "seconds": self.seconds, "entries": self.entries}


def rel_error(numeric: torch.Tensor, analytic: torch.Tensor, floor: float = 1e-8) -> float:
    """Max-abs discrepancy relative to the larger gradient magnitude of the tensor."""
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), floor)
    return float((numeric - analytic).abs().max()) / scale


def _tiny_problem(mcfg: ModelConfig, seed: int, batch: int = 2):
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64
    segs = torch.randn(batch, mcfg.n_segments, mcfg.d_seg, generator=g, dtype=dt)
    words = torch.randn(batch, 3, mcfg.d_w, generator=g, dtype=dt)
    lengths = torch.tensor([3, 2][:batch] + [3] * max(0, batch - 2))
    rows = [m.shape for m in scale_masks(mcfg.n_segments, mcfg.scales, mcfg.anchors)]
    targets = [torch.rand((batch,) + tuple(r), generator=g, dtype=dt) for r in rows]
    yts = [torch.randn((batch,) + tuple(r), generator=g, dtype=dt) for r in rows]
    t = torch.tensor([7, 3][:batch] + [5] * max(0, batch - 2))
    return segs, words, lengths, targets, yts, t


def gradcheck_case(variant: str, conditioning: str, feature_mode: str, loss: str, seed: int = 0,
                   h: float = GRADCHECK_STEP, corrupt: Optional[str] = None) -> List[dict]:
    """Compare autograd against central differences for every parameter element.

    ``corrupt`` names a parameter whose analytic gradient gets one element offset,
    to confirm the harness notices.
    """
    mcfg = tiny_model_config(variant, conditioning, feature_mode)
    torch.manual_seed(seed)
    model = MapDiffusionModel(mcfg, output_sigmoid=loss.startswith("bce")).double()
    segs, words, lengths, targets, yts, t = _tiny_problem(mcfg, seed)
    if loss == "bce-rescaled":
        targets = [rescale_values(y, 0.5, 1.0) for y in targets]
    masks = model.masks
    # masked cells carry no signal; zero them like real inputs
    yts = [y * m for y, m in zip(yts, masks)]
    targets = [y * m for y, m in zip(targets, masks)]

    def objective():
        return compute_loss(model(yts, t, segs, words, lengths), targets, masks, loss)

    case = f"{variant}/{conditioning}/{feature_mode}/{loss}"
    return [dict(case=case, **e) for e in finite_difference_errors(model, objective, h, corrupt)]


def finite_difference_errors(module: torch.nn.Module, objective: Callable[[], torch.Tensor],
                             h: float = GRADCHECK_STEP, corrupt: Optional[str] = None) -> List[dict]:
    """Central differences vs autograd for every element of every parameter of ``module``."""
    module.zero_grad()
    value = objective()
    value.backward()
    # central differences cannot resolve gradients below a few ulps of the objective over h
    floor = max(1e-8, 1e4 * torch.finfo(value.dtype).eps * abs(value.item()) / h)
    entries = []
    with torch.no_grad():
        for name, p in module.named_parameters():
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            if name == corrupt:
                analytic.view(-1)[0] += 1.0
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = objective().item()
                flat[i] = orig - h
                down = objective().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            entries.append({"tensor": name, "numel": p.numel(), "rel_error": rel_error(numeric, analytic, floor)})
    return entries


def gradcheck(cases=GRADCHECK_CASES, seed: int = 0, corrupt: Optional[str] = None,
              tolerance: float = GRADCHECK_TOL) -> GradcheckReport:
    t0 = time.perf_counter()
    entries = []
    for case in cases:
        entries.extend(gradcheck_case(*case, seed=seed, corrupt=corrupt))
    return GradcheckReport(entries, tolerance, time.perf_counter() - t0)
