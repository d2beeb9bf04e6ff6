"""Synthetic grounding examples standing in for pretrained video/text features.

Each example picks a prototype direction; segments inside the target moment and all
query words are noisy copies of it, segments outside mix a foreign prototype with a
random direction. Per-example generators are derived from ``(seed, split, index)`` so
examples can be generated in any order or in parallel.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, List

import numpy as np

from .config import GenConfig
from .temporal_map import MomentInterval, VideoGrid, valid_mask

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class GroundingExample:
    id: str
    n: int
    tau: float
    segment_features: np.ndarray
    word_embeddings: np.ndarray
    moment: MomentInterval
    prototype: int = -1

    @property
    def grid(self) -> VideoGrid:
        return VideoGrid(self.n, self.tau)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "n": self.n,
            "tau": self.tau,
            "segment_features": self.segment_features.tolist(),
            "word_embeddings": self.word_embeddings.tolist(),
            "moment": [self.moment.start, self.moment.end],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GroundingExample":
        segs = np.asarray(obj["segment_features"], dtype=np.float64)
        words = np.asarray(obj["word_embeddings"], dtype=np.float64)
        if segs.ndim != 2 or segs.shape[0] != obj["n"]:
            raise ValueError(f"example {obj.get('id')}: segment_features must have n rows")
        if words.ndim != 2 or words.shape[0] < 1:
            raise ValueError(f"example {obj.get('id')}: need at least one word embedding")
        return cls(str(obj["id"]), int(obj["n"]), float(obj["tau"]), segs, words, MomentInterval(*obj["moment"]))

    def __eq__(self, other):
        if not isinstance(other, GroundingExample):
            return NotImplemented
        return (
            self.id == other.id and self.n == other.n and self.tau == other.tau
            and self.moment == other.moment
            and np.array_equal(self.segment_features, other.segment_features)
            and np.array_equal(self.word_embeddings, other.word_embeddings)
        )


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_prototypes(cfg: GenConfig):
    """Fixed prototype directions shared by every split: (video, text) arrays of shape (P, d)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.prototype_seed]))
    video = _unit(rng.standard_normal((cfg.prototypes, cfg.d_v)))
    if cfg.d_w == cfg.d_v:
        return video, video
    return video, _unit(rng.standard_normal((cfg.prototypes, cfg.d_w)))


def example_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS[split], index]))


def generate_example(cfg: GenConfig, rng: np.random.Generator, prototypes=None, id: str = "0") -> GroundingExample:
    video_protos, text_protos = prototypes if prototypes is not None else make_prototypes(cfg)
    n, tau = cfg.n_segments, cfg.tau
    p = int(rng.integers(cfg.prototypes))

    cells = np.argwhere(valid_mask(n))
    i, j = cells[rng.integers(len(cells))]
    start, end = float(i * tau), float((i + j + 1) * tau)
    if not cfg.aligned:
        jitter = rng.uniform(-0.5, 0.5, size=2) * tau
        start = min(max(0.0, start + jitter[0]), n * tau)
        end = min(max(0.0, end + jitter[1]), n * tau)
        if end - start < 0.25 * tau:
            start, end = float(i * tau), float((i + j + 1) * tau)
    moment = MomentInterval(start, end)

    centers = (np.arange(n) + 0.5) * tau
    inside = (centers >= start) & (centers <= end)
    segs = np.empty((n, cfg.d_v))
    k_in = int(inside.sum())
    segs[inside] = _unit(video_protos[p] + cfg.sigma_in * rng.standard_normal((k_in, cfg.d_v)))
    others = np.delete(np.arange(cfg.prototypes), p)
    foreign = video_protos[rng.choice(others, size=n - k_in)]
    rand = _unit(rng.standard_normal((n - k_in, cfg.d_v)))
    segs[~inside] = _unit(cfg.distractor_mix * foreign + (1 - cfg.distractor_mix) * rand)

    m = int(rng.integers(cfg.min_words, cfg.max_words + 1))
    words = _unit(text_protos[p] + cfg.sigma_q * rng.standard_normal((m, cfg.d_w)))
    return GroundingExample(id, n, tau, segs, words, moment, p)


def generate_examples(cfg: GenConfig, count: int, split: str = "train") -> Iterator[GroundingExample]:
    cfg.validate()
    protos = make_prototypes(cfg)
    for idx in range(count):
        yield generate_example(cfg, example_rng(cfg.seed, split, idx), protos, id=f"{split}-{idx:06d}")


def write_jsonl(path: str, examples: Iterable[GroundingExample]) -> int:
    count = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")
            count += 1
    return count


def read_jsonl(path: str) -> List[GroundingExample]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(GroundingExample.from_dict(json.loads(line)))
            except (KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{line_no}: bad example: {err}") from err
    return out


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(cfg: GenConfig, count: int, out_dir: str, split: str = "train") -> str:
    """Write ``<out_dir>/<split>.jsonl`` and ``<split>.manifest.json``; returns the JSONL path."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{split}.jsonl")
    written = write_jsonl(path, generate_examples(cfg, count, split))
    manifest = {
        "split": split,
        "count": written,
        "config": cfg.__dict__,
        "sha256": file_sha256(path),
    }
    with open(os.path.join(out_dir, f"{split}.manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_split(data_dir: str, split: str) -> List[GroundingExample]:
    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {split} split in {data_dir} (expected {path})")
    return read_jsonl(path)
