"""DDIM noise schedule and sampler for score maps.

Index 0 of every schedule table is the clean data (``alpha_bar[0] == 1``), so the
step ``t = 1 -> 0`` lands exactly on the model's prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    eta: float

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def sigma_between(self, t: int, t_prev: int) -> float:
        """Reverse-step noise scale for a jump ``t -> t_prev`` (``t_prev < t``)."""
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t_prev]
        return float(self.eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev))

    def as_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.beta[1]),
            "beta_end": float(self.beta[-1]),
            "eta": self.eta,
        }


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.05, eta: float = 0.0) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 0 <= eta <= 1:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T + 1)
    t = np.arange(1, T + 1)
    sigma[1:] = eta * np.sqrt((1 - alpha_bar[t - 1]) / (1 - alpha_bar[t])) * np.sqrt(1 - alpha_bar[t] / alpha_bar[t - 1])
    return NoiseSchedule(beta, alpha, alpha_bar, sigma, float(eta))


def _check_step(sched: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside [1, {sched.T}]")


def _broadcast(coef, like: torch.Tensor) -> torch.Tensor:
    coef = torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    return coef.reshape(coef.shape + (1,) * (like.dim() - coef.dim()))


def forward_sample(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule,
                   mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Draw ``Y_t ~ q(Y_t | Y_0)`` with the supplied noise.

    ``t`` is an int or a per-batch integer tensor (leading dim of ``y0``).
    """
    if eps.shape != y0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != map shape {tuple(y0.shape)}")
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"step outside [1, {sched.T}]")
    ab = sched.alpha_bar[t_arr]
    yt = _broadcast(np.sqrt(ab), y0) * y0 + _broadcast(np.sqrt(1 - ab), y0) * eps
    if mask is not None:
        yt = yt * mask.to(yt.dtype)
    return yt


def ddim_step(yt: torch.Tensor, y0_hat: torch.Tensor, t: int, sched: NoiseSchedule,
              eps: Optional[torch.Tensor] = None, t_prev: Optional[int] = None,
              mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    _check_step(sched, t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must lie in [0, {t})")
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    sigma = sched.sigma[t] if t_prev == t - 1 else sched.sigma_between(t, t_prev)
    direction_var = 1 - ab_prev - sigma**2
    if direction_var < -1e-12:
        raise ValueError(f"inconsistent schedule at t={t}: 1 - alpha_bar_prev - sigma^2 = {direction_var}")
    direction_var = max(direction_var, 0.0)
    eps_hat = (yt - math.sqrt(ab_t) * y0_hat) / math.sqrt(1 - ab_t)
    out = math.sqrt(ab_prev) * y0_hat + math.sqrt(direction_var) * eps_hat
    if sigma > 0:
        if eps is None:
            raise ValueError("stochastic step (sigma > 0) needs a noise tensor")
        out = out + sigma * eps
    if mask is not None:
        out = out * mask.to(out.dtype)
    return out


def even_steps(T: int, n_steps: int) -> List[int]:
    """``n_steps`` roughly evenly spaced steps from ``T`` down to 1 (fewer if ``T`` is small)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps == 1:
        return [1]
    steps = np.round(np.linspace(T, 1, min(n_steps, T))).astype(int)
    return sorted(set(int(s) for s in steps), reverse=True)


def strided_steps(T: int, stride: int) -> List[int]:
    steps = list(range(T, 0, -stride))
    if steps[-1] != 1:
        steps.append(1)
    return steps


def check_subsequence(steps: Sequence[int], T: int) -> None:
    if len(steps) == 0:
        raise ValueError("empty step subsequence")
    if steps[-1] != 1:
        raise ValueError("step subsequence must end at 1")
    if any(s > T or s < 1 for s in steps):
        raise ValueError(f"steps must lie in [1, {T}]")
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise ValueError("step subsequence must be strictly decreasing")


MapPredictor = Callable[[List[torch.Tensor], int], List[torch.Tensor]]


@torch.no_grad()
def sample_loop(model: MapPredictor, masks: Sequence[torch.Tensor], sched: NoiseSchedule,
                steps: Sequence[int], generator: Optional[torch.Generator] = None,
                batch_size: int = 1, dtype=torch.float32) -> List[torch.Tensor]:
    """Run the reverse chain from pure noise for every scale map.

    ``model(maps, t)`` takes the current noisy maps (one ``(B, rows_k, A)`` tensor per
    scale) and returns the clean-map predictions in the same layout. ``masks[k]`` is
    the scale-``k`` validity mask. Conditioning is closed over by ``model``.
    """
    check_subsequence(steps, sched.T)
    masks = [m.to(dtype) for m in masks]
    ys = [torch.randn((batch_size,) + tuple(m.shape), generator=generator, dtype=dtype) * m for m in masks]
    for idx, t in enumerate(steps):
        t_prev = steps[idx + 1] if idx + 1 < len(steps) else 0
        y0_hats = model(ys, t)
        new = []
        for y, y0_hat, m in zip(ys, y0_hats, masks):
            eps = None
            if sched.eta > 0 and t_prev > 0:
                eps = torch.randn(y.shape, generator=generator, dtype=dtype)
            new.append(ddim_step(y, y0_hat * m, t, sched, eps, t_prev=t_prev, mask=m))
        ys = new
    return ys
