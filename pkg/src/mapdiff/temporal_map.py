"""2D temporal score maps: construction, multi-scale sparsification, aggregation, ranking.

Cell ``(i, j)`` of an ``N x N`` map stands for the moment that starts at ``i * tau``
and lasts ``(j + 1) * tau``. The scale-``k`` sparse map keeps every ``2**k``-th start
and every ``2**k``-th duration, with ``A`` duration anchors per start.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

END_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MomentInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"non-finite moment {self.start, self.end}")
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"invalid moment: need 0 <= start < end, got ({self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class VideoGrid:
    n_segments: int
    unit: float = 1.0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not self.unit > 0:
            raise ValueError("unit must be > 0")

    @property
    def duration(self) -> float:
        return self.n_segments * self.unit

    def moment(self, i: int, j: int) -> MomentInterval:
        return MomentInterval(i * self.unit, i * self.unit + (j + 1) * self.unit)


def valid_mask(n: int) -> np.ndarray:
    """Boolean ``n x n`` mask, True where ``i + j + 1 <= n``."""
    i, j = np.indices((n, n))
    return i + j + 1 <= n


@dataclass(frozen=True)
class ScoreMap2D:
    grid: VideoGrid
    values: np.ndarray
    covered: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.grid.n_segments
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (n, n):
            raise ValueError(f"values must be {n}x{n}, got {values.shape}")
        covered = valid_mask(n) if self.covered is None else np.asarray(self.covered, dtype=bool)
        if covered.shape != (n, n):
            raise ValueError("covered mask has wrong shape")
        covered = covered & valid_mask(n)
        values = np.where(valid_mask(n), values, 0.0)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "covered", covered)

    @property
    def valid(self) -> np.ndarray:
        return valid_mask(self.grid.n_segments)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.grid.n_segments,
                "tau": self.grid.unit,
                "values": [float(v) for v in self.values.ravel()],
                "covered": [bool(c) for c in self.covered.ravel()],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ScoreMap2D":
        try:
            obj = json.loads(text)
            n = int(obj["n"])
            tau = float(obj["tau"])
            values = np.asarray(obj["values"], dtype=np.float64)
            covered = obj.get("covered")
            if values.size != n * n:
                raise ValueError(f"expected {n * n} values, got {values.size}")
            if covered is not None:
                covered = np.asarray(covered, dtype=bool)
                if covered.size != n * n:
                    raise ValueError(f"expected {n * n} covered flags, got {covered.size}")
                covered = covered.reshape(n, n)
        except (KeyError, TypeError, json.JSONDecodeError) as err:
            raise ValueError(f"malformed score map JSON: {err}") from err
        return cls(VideoGrid(n, tau), values.reshape(n, n), covered)


def build_iou_map(grid: VideoGrid, gt: MomentInterval) -> ScoreMap2D:
    """Ground-truth map: every valid cell holds the IoU of its moment with ``gt``."""
    if gt.end > grid.duration + END_TOLERANCE:
        raise ValueError(f"ground truth {gt} extends past the video end {grid.duration}")
    n, tau = grid.n_segments, grid.unit
    i, j = np.indices((n, n), dtype=np.float64)
    start = i * tau
    end = start + (j + 1) * tau
    inter = np.clip(np.minimum(end, gt.end) - np.maximum(start, gt.start), 0.0, None)
    union = (end - start) + (gt.end - gt.start) - inter
    values = np.where(valid_mask(n), inter / union, 0.0)
    return ScoreMap2D(grid, values)


def scale_shape(n: int, k: int, anchors: int) -> Tuple[int, int]:
    return -(-n // 2**k), anchors


def scale_index(n: int, k: int, anchors: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source rows, source columns and validity for every cell of the scale-``k`` map.

    Invalid cells get source index 0 so the arrays can be used for gathering directly.
    """
    rows, cols = scale_shape(n, k, anchors)
    a, b = np.indices((rows, cols))
    stride = 2**k
    valid = (a + b + 1) * stride <= n
    src_i = np.where(valid, a * stride, 0)
    src_j = np.where(valid, (b + 1) * stride - 1, 0)
    return src_i, src_j, valid


def check_coverage(n: int, scales: int, anchors: int) -> None:
    if scales < 1:
        raise ValueError("need at least one scale")
    if anchors < 1:
        raise ValueError("need at least one anchor")
    if anchors * 2 ** (scales - 1) < n:
        raise ValueError(
            f"A * 2^(K-1) = {anchors * 2 ** (scales - 1)} does not cover N = {n} segments"
        )


@dataclass(frozen=True)
class MultiScaleMaps:
    grid: VideoGrid
    scales: int
    anchors: int
    maps: List[np.ndarray] = field(default_factory=list)
    valid: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        check_coverage(self.grid.n_segments, self.scales, self.anchors)
        if len(self.maps) != self.scales or len(self.valid) != self.scales:
            raise ValueError("need exactly one map and one mask per scale")
        for k, (m, v) in enumerate(zip(self.maps, self.valid)):
            shape = scale_shape(self.grid.n_segments, k, self.anchors)
            if np.shape(m) != shape or np.shape(v) != shape:
                raise ValueError(f"scale {k}: expected shape {shape}")

    def moment(self, k: int, a: int, b: int) -> MomentInterval:
        stride = 2**k * self.grid.unit
        return MomentInterval(a * stride, a * stride + (b + 1) * stride)


def extract_multiscale(score_map: ScoreMap2D, scales: int, anchors: int) -> MultiScaleMaps:
    n = score_map.grid.n_segments
    check_coverage(n, scales, anchors)
    maps, masks = [], []
    for k in range(scales):
        src_i, src_j, valid = scale_index(n, k, anchors)
        maps.append(np.where(valid, score_map.values[src_i, src_j], 0.0))
        masks.append(valid)
    return MultiScaleMaps(score_map.grid, scales, anchors, maps, masks)


def aggregate_multiscale(ms: MultiScaleMaps) -> ScoreMap2D:
    """Merge scale maps back onto the single-scale grid, keeping the max where several scales overlap."""
    n = ms.grid.n_segments
    out = np.full((n, n), -np.inf)
    for k in range(ms.scales):
        src_i, src_j, valid = scale_index(n, k, ms.anchors)
        np.maximum.at(out, (src_i[valid], src_j[valid]), np.asarray(ms.maps[k], dtype=np.float64)[valid])
    covered = np.isfinite(out)
    return ScoreMap2D(ms.grid, np.where(covered, out, 0.0), covered)


def top_n_moments(score_map: ScoreMap2D, n: int) -> List[Tuple[MomentInterval, float]]:
    """Covered cells by descending score; ties go to the earlier start, then the shorter duration."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i, j = np.nonzero(score_map.covered)
    scores = score_map.values[i, j]
    # lexsort sorts by the last key first
    order = np.lexsort((j, i, -scores))[:n]
    return [(score_map.grid.moment(int(i[o]), int(j[o])), float(scores[o])) for o in order]


def moments_only(ranked: Sequence[Tuple[MomentInterval, float]]) -> List[MomentInterval]:
    return [m for m, _ in ranked]
