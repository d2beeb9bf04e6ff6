"""Multimodal feature encoder: sentence feature, 2D moment feature map, fusion, scale views."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .temporal_map import check_coverage, scale_index, valid_mask

NORM_EPS = 1e-8
FEATURE_MODES = ("max-pool", "stacked-conv")


class SentenceEncoder(nn.Module):
    """Three-layer bidirectional LSTM; final states of both directions projected to ``d_s``."""

    def __init__(self, d_w: int, d_s: int, hidden: Optional[int] = None, layers: int = 3):
        super().__init__()
        hidden = hidden or d_s
        self.lstm = nn.LSTM(d_w, hidden, num_layers=layers, bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * hidden, d_s)

    def forward(self, words: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        # words: (B, M, d_w), lengths: (B,)
        if words.dim() != 3 or words.shape[1] < 1:
            raise ValueError("query must contain at least one word")
        if lengths is None:
            lengths = torch.full((words.shape[0],), words.shape[1], dtype=torch.long)
        if torch.any(lengths < 1):
            raise ValueError("empty query")
        packed = pack_padded_sequence(words, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h, _) = self.lstm(packed)
        # h: (layers * 2, B, hidden); the last two rows are the top layer's two directions
        return self.proj(torch.cat([h[-2], h[-1]], dim=-1))


def max_pool_map(seg: torch.Tensor) -> torch.Tensor:
    """(B, N, d) segment features -> (B, N, N, d) map with cell (a, b) = max over segments a..a+b."""
    n = seg.shape[1]
    rows = [seg]
    for b in range(1, n):
        prev = rows[-1]
        # row b at start a: max(row b-1 at a, segment a+b); starts past n-b-1 are invalid
        shifted = torch.cat([seg[:, b:], seg.new_zeros(seg.shape[0], b, seg.shape[2])], dim=1)
        rows.append(torch.maximum(prev, shifted))
    out = torch.stack(rows, dim=2)
    return out * _mask(n, out)


def _mask(n: int, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(valid_mask(n), dtype=like.dtype, device=like.device)[None, :, :, None]


class MomentFeatureMap(nn.Module):
    """Projects segment features and lays them out as a 2D (start, duration) map."""

    def __init__(self, d_in: int, d_v: int, mode: str = "max-pool"):
        super().__init__()
        if mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature-map mode {mode!r}; expected one of {FEATURE_MODES}")
        self.mode = mode
        self.proj = nn.Linear(d_in, d_v)
        if mode == "stacked-conv":
            self.conv = nn.Conv1d(d_v, d_v, kernel_size=2)

    def forward(self, segs: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.proj(segs))
        if self.mode == "max-pool":
            return max_pool_map(x)
        n = x.shape[1]
        rows = [x]
        h = x.transpose(1, 2)
        for b in range(1, n):
            # each pass shortens the sequence by one: row b has n - b valid starts
            h = torch.relu(self.conv(h))
            rows.append(F.pad(h.transpose(1, 2), (0, 0, 0, b)))
        out = torch.stack(rows, dim=2)
        return out * _mask(n, out)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = NORM_EPS) -> torch.Tensor:
    # clamp the squared norm, not the norm: sqrt'(0) would otherwise poison the backward pass
    sq = torch.sum(x * x, dim=dim, keepdim=True)
    return x / torch.sqrt(torch.clamp(sq, min=eps * eps))


class Fusion(nn.Module):
    def __init__(self, d_v: int, d_s: int, d_f: int):
        super().__init__()
        self.visual = nn.Linear(d_v, d_f)
        self.text = nn.Linear(d_s, d_f)

    def forward(self, vmap: torch.Tensor, sent: torch.Tensor) -> torch.Tensor:
        n = vmap.shape[1]
        fused = self.visual(vmap) * self.text(sent)[:, None, None, :]
        mask = _mask(n, fused)
        # invalid cells are zeroed before normalising so the eps guard keeps them at 0
        return l2_normalize(fused * mask)


def extract_feature_scales(fmap: torch.Tensor, scales: int, anchors: int) -> List[torch.Tensor]:
    """(B, N, N, d) map -> per-scale channels-first views (B, d, rows_k, A), invalid cells zeroed."""
    n = fmap.shape[1]
    check_coverage(n, scales, anchors)
    views = []
    for k in range(scales):
        src_i, src_j, valid = scale_index(n, k, anchors)
        v = fmap[:, torch.as_tensor(src_i), torch.as_tensor(src_j)]  # (B, rows, A, d)
        v = v * torch.as_tensor(valid, dtype=fmap.dtype)[None, :, :, None]
        views.append(v.permute(0, 3, 1, 2))
    return views


class MultimodalEncoder(nn.Module):
    def __init__(self, d_w: int = 16, d_seg: int = 16, d_v: int = 16, d_s: int = 16, d_f: int = 32,
                 mode: str = "max-pool", lstm_layers: int = 3):
        super().__init__()
        self.sentence = SentenceEncoder(d_w, d_s, layers=lstm_layers)
        self.visual = MomentFeatureMap(d_seg, d_v, mode)
        self.fusion = Fusion(d_v, d_s, d_f)

    def forward(self, segs: torch.Tensor, words: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.fusion(self.visual(segs), self.sentence(words, lengths))


def scale_masks(n: int, scales: int, anchors: int) -> List[np.ndarray]:
    return [scale_index(n, k, anchors)[2] for k in range(scales)]
