"""Noise schedule, forward diffusion and the x0 prediction it implies.

Steps are 1-based: ``t = 1..T``.  Internally the cumulative products are
stored with a leading ``alpha_bar_0 = 1`` so ``alpha_bar(t)`` indexes the
extended table directly and the last DDIM step (``t = 1 -> 0``) needs no
special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("a schedule needs at least 2 steps")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        alpha_bars = np.cumprod(alphas)
        alpha_bars.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alpha_bars_ext(self) -> np.ndarray:
        """``alpha_bar`` indexed by step, ``[1, ab_1, ..., ab_T]``."""
        return np.concatenate([[1.0], self.alpha_bars])

    def check_step(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        tt = torch.as_tensor(t)
        if tt.numel() and (int(tt.min()) < lo or int(tt.max()) > self.T):
            raise ValueError(f"step {t} outside {lo}..{self.T}")

    def alpha_bar(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        """``alpha_bar_t`` as a tensor; ``t`` may be an int or a tensor of
        per-sample steps, ``t = 0`` gives 1."""
        self.check_step(t, allow_zero=True)
        dtype = like.dtype if like is not None else torch.float64
        table = torch.as_tensor(self.alpha_bars_ext, dtype=dtype)
        return table[torch.as_tensor(t, dtype=torch.long)]

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}


def make_linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def _coef(schedule: NoiseSchedule, t, x: torch.Tensor) -> torch.Tensor:
    ab = schedule.alpha_bar(t, like=x)
    # per-sample steps broadcast over the feature axis
    return ab.reshape(ab.shape + (1,) * (x.dim() - ab.dim())) if ab.dim() else ab


def _check_dims(a: torch.Tensor, b: torch.Tensor):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def forward_diffuse(schedule: NoiseSchedule, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _check_dims(x0, eps)
    schedule.check_step(t)
    ab = _coef(schedule, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0(schedule: NoiseSchedule, x_t: torch.Tensor, eps_pred: torch.Tensor, t) -> torch.Tensor:
    """Invert ``forward_diffuse`` given a noise estimate (the one-step snapshot)."""
    _check_dims(x_t, eps_pred)
    schedule.check_step(t)
    ab = _coef(schedule, t, x_t)
    return (x_t - (1 - ab).sqrt() * eps_pred) / ab.sqrt()
