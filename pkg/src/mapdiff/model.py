"""Encoder + K scale decoders, plus the glue for diffusion-space transforms."""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
from torch import nn

from .config import ExperimentConfig, ModelConfig
from .decoder import ScaleDecoder
from .encoder import MultimodalEncoder, extract_feature_scales, scale_masks
from .temporal_map import check_coverage, scale_shape


class MapDiffusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig, output_sigmoid: bool = False):
        super().__init__()
        cfg.validate()
        check_coverage(cfg.n_segments, cfg.scales, cfg.anchors)
        self.cfg = cfg
        self.encoder = MultimodalEncoder(cfg.d_w, cfg.d_seg, cfg.d_v, cfg.d_s, cfg.d_f,
                                         cfg.feature_mode, cfg.lstm_layers)
        self.decoders = nn.ModuleList(
            ScaleDecoder(cfg, *scale_shape(cfg.n_segments, k, cfg.anchors), output_sigmoid=output_sigmoid)
            for k in range(cfg.scales)
        )
        for k, m in enumerate(scale_masks(cfg.n_segments, cfg.scales, cfg.anchors)):
            self.register_buffer(f"mask{k}", torch.as_tensor(m), persistent=False)

    @property
    def masks(self) -> List[torch.Tensor]:
        return [getattr(self, f"mask{k}") for k in range(self.cfg.scales)]

    def encode(self, segs: torch.Tensor, words: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        fmap = self.encoder(segs, words, lengths)
        return extract_feature_scales(fmap, self.cfg.scales, self.cfg.anchors)

    def denoise(self, ys: Sequence[torch.Tensor], t, feats: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        if len(ys) != self.cfg.scales or len(feats) != self.cfg.scales:
            raise ValueError(f"expected {self.cfg.scales} scale maps")
        return [dec(y, t, f, m) for dec, y, f, m in zip(self.decoders, ys, feats, self.masks)]

    def forward(self, ys, t, segs, words, lengths=None):
        return self.denoise(ys, t, self.encode(segs, words, lengths))


def build_model(cfg: ExperimentConfig) -> MapDiffusionModel:
    return MapDiffusionModel(cfg.model, output_sigmoid=cfg.train.loss.startswith("bce"))


def to_diffusion_space(y: torch.Tensor, rescale: bool, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if not rescale:
        return y
    out = 2 * y - 1
    return out * mask.to(out.dtype) if mask is not None else out


def from_diffusion_space(y: torch.Tensor, rescale: bool, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if not rescale:
        return y
    out = (y + 1) / 2
    return out * mask.to(out.dtype) if mask is not None else out
