"""Condition-injected denoising decoder, one per scale map.

Each scale decoder maps ``(Y_t^k, t, F_k)`` to a clean-map estimate. Time enters only
through stylization blocks (normalise, scale/shift from the time embedding, MLP).
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig


def sinusoidal_embedding(t: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(base) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimeEmbedding(nn.Module):
    def __init__(self, d_e: int = 64):
        super().__init__()
        self.d_e = d_e
        self.linear = nn.Linear(d_e, d_e)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        return self.linear(sinusoidal_embedding(t, self.d_e).to(self.linear.weight.dtype))


class Stylization(nn.Module):
    """``MLP(act(Norm(x) * w + b))`` with ``[w, b]`` projected from the time embedding.

    ``layout="map"`` works on channels-first maps (GroupNorm, 1x1 convs);
    ``layout="tokens"`` on ``(B, L, C)`` sequences (LayerNorm, linear layers).
    """

    def __init__(self, channels: int, d_e: int, layout: str = "map", hidden: int = 0, groups: int = 8):
        super().__init__()
        hidden = hidden or channels
        self.layout = layout
        self.proj = nn.Linear(d_e, 2 * channels)
        with torch.no_grad():
            # start from the neutral style (w = 1, b = 0)
            self.proj.bias[:channels].fill_(1.0)
            self.proj.bias[channels:].zero_()
        if layout == "map":
            g = math.gcd(groups, channels)
            self.norm = nn.GroupNorm(g, channels)
            self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.SiLU(), nn.Conv2d(hidden, channels, 1))
        elif layout == "tokens":
            self.norm = nn.LayerNorm(channels)
            self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))
        else:
            raise ValueError(f"unknown layout {layout!r}")

    def style(self, emb: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        w, b = self.proj(emb).chunk(2, dim=-1)
        if self.layout == "map":
            return w[:, :, None, None], b[:, :, None, None]
        return w[:, None, :], b[:, None, :]

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        w, b = self.style(emb)
        return self.mlp(F.silu(self.norm(x) * w + b))


class GatedConv2d(nn.Module):
    """``conv_a(x) * sigmoid(conv_b(x))``, both convolutions computed in one pass."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 5):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 2 * c_out, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat, gate = self.conv(x).chunk(2, dim=1)
        return feat * torch.sigmoid(gate)


class ConvBlock(nn.Module):
    def __init__(self, channels: int, d_e: int, kernel: int, hidden: int = 0):
        super().__init__()
        self.style_in = Stylization(channels, d_e, "map", hidden)
        self.conv = GatedConv2d(channels, channels, kernel)
        self.style_out = Stylization(channels, d_e, "map", hidden)

    def forward(self, x, emb, mask, cond=None):
        r = self.style_in(x, emb) * mask
        r = self.conv(r) * mask
        r = self.style_out(r, emb) * mask
        return x + r


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              key_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Single-head scaled dot-product attention; returns (output, weights)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class AttentionBlock(nn.Module):
    """Attention module + FFN, each followed by a stylization block on the residual branch.

    With ``cond_dim`` set, queries come from the map tokens and keys/values from the
    map tokens concatenated (along the sequence) with the condition tokens.
    """

    def __init__(self, channels: int, d_e: int, cond_dim: Optional[int] = None, hidden: int = 0):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.cross = cond_dim is not None
        self.q = nn.Linear(channels, channels)
        # a bias shared by every key shifts all logits equally, so self-attention drops it
        self.k = nn.Linear(channels, channels, bias=self.cross)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        if self.cross:
            self.cond_norm = nn.LayerNorm(cond_dim)
            self.k_cond = nn.Linear(cond_dim, channels)
            self.v_cond = nn.Linear(cond_dim, channels)
        self.style_attn = Stylization(channels, d_e, "tokens", hidden)
        self.ffn_norm = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))
        self.style_ffn = Stylization(channels, d_e, "tokens", hidden)

    def attend(self, x, cond=None, token_mask=None):
        h = self.norm(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        key_mask = token_mask
        if self.cross:
            c = self.cond_norm(cond)
            k = torch.cat([k, self.k_cond(c)], dim=1)
            v = torch.cat([v, self.v_cond(c)], dim=1)
            if token_mask is not None:
                key_mask = torch.cat([token_mask, token_mask], dim=-1)
        if key_mask is not None:
            key_mask = key_mask.reshape(1, 1, -1)
        out, weights = attention(q, k, v, key_mask)
        return self.out(out), weights

    def forward(self, x, emb, mask, cond=None):
        # x: (B, L, C); mask: (L,) bool over map tokens
        m = mask.to(x.dtype)[None, :, None]
        a, _ = self.attend(x, cond, mask)
        x = x + self.style_attn(a, emb) * m
        x = x + self.style_ffn(self.ffn(self.ffn_norm(x)), emb) * m
        return x


class ScaleDecoder(nn.Module):
    """Denoiser for one scale map of shape ``(rows, anchors)``."""

    def __init__(self, cfg: ModelConfig, rows: int, anchors: int, output_sigmoid: bool = False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.rows, self.anchors = rows, anchors
        self.output_sigmoid = output_sigmoid
        d_h, d_f = cfg.channels, cfg.d_f
        self.time = TimeEmbedding(cfg.d_e)
        self.in_proj = nn.Linear(1, d_h)
        if cfg.conditioning == "concat":
            width = d_h + d_f
        else:
            width = d_h
        if cfg.conditioning == "mul":
            self.cond_proj = nn.Linear(d_f, d_h)
        self.width = width
        if cfg.variant == "cnn":
            self.blocks = nn.ModuleList(ConvBlock(width, cfg.d_e, cfg.kernel, cfg.mlp_hidden) for _ in range(cfg.blocks))
        else:
            cond_dim = d_f if cfg.conditioning == "cross-attn" else None
            self.pos = nn.Parameter(0.02 * torch.randn(rows * anchors, width))
            self.blocks = nn.ModuleList(
                AttentionBlock(width, cfg.d_e, cond_dim, cfg.mlp_hidden) for _ in range(cfg.blocks)
            )
        self.head = nn.Linear(width, 1)

    def forward(self, yt: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """yt: (B, rows, A); t: (B,) steps; cond: (B, d_f, rows, A); mask: (rows, A) bool."""
        b = yt.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and b > 1:
            t = t.expand(b)
        emb = self.time(t)
        fmask = mask.to(yt.dtype)
        h = self.in_proj(yt[..., None])  # (B, rows, A, d_h)
        c = cond.permute(0, 2, 3, 1)  # (B, rows, A, d_f)
        if self.cfg.conditioning == "concat":
            x = torch.cat([h, c], dim=-1)
        elif self.cfg.conditioning == "mul":
            x = h * self.cond_proj(c)
        else:
            x = h
        x = x * fmask[None, :, :, None]

        if self.cfg.variant == "cnn":
            x = x.permute(0, 3, 1, 2)
            m = fmask[None, None]
            for block in self.blocks:
                x = block(x, emb, m)
            x = x.permute(0, 2, 3, 1)
        else:
            x = x.reshape(b, self.rows * self.anchors, self.width) + self.pos
            tokens_c = c.reshape(b, self.rows * self.anchors, -1)
            tmask = mask.reshape(-1)
            for block in self.blocks:
                x = block(x, emb, tmask, tokens_c)
            x = x.reshape(b, self.rows, self.anchors, self.width)

        out = self.head(x)[..., 0]
        if self.output_sigmoid:
            out = torch.sigmoid(out)
        return out * fmask
