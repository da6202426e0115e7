"""Deterministic DDIM sampling and inversion, classifier-free guidance, slerp.

``model`` is any callable ``model(x_t, t, cond) -> eps``; a ``Denoiser``
qualifies, and so do the hand-built oracle models used in tests.

The update implemented here is the standard deterministic DDIM step written
with cumulative products::

    x0_pred  = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
    x_prev   = sqrt(ab_prev) x0_pred + sqrt(1 - ab_prev) eps

Rearranged, the coefficient on ``eps`` is
``sqrt(ab_prev) (sqrt(1/ab_prev - 1) - sqrt(1/ab_t - 1))``.  Forms that drop
the ``sqrt(ab_prev)`` factor, or use per-step alphas in place of the
cumulative ones, do not invert ``forward_diffuse`` and are not used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .schedule import NoiseSchedule, predict_x0

SLERP_PARALLEL_EPS = 1e-4
SLERP_ANTIPARALLEL_EPS = 1e-6


@dataclass
class TrajectoryRecord:
    direction: str  # "sample" (T -> 0) or "invert" (0 -> T)
    w: float
    steps: list[int] = field(default_factory=list)
    latents: list[torch.Tensor] = field(default_factory=list)
    eps: list[torch.Tensor] = field(default_factory=list)

    def append(self, t: int, latent: torch.Tensor, eps: torch.Tensor | None):
        self.steps.append(int(t))
        self.latents.append(latent.detach().clone())
        self.eps.append(None if eps is None else eps.detach().clone())

    def to_csv(self, path):
        """One row per (step, sample): ``step,index,v0,v1,...``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            dim = self.latents[0].shape[-1]
            writer.writerow(["step", "index"] + [f"v{i}" for i in range(dim)])
            for t, lat in zip(self.steps, self.latents):
                for i, row in enumerate(lat.reshape(-1, dim).tolist()):
                    writer.writerow([t, i] + [repr(float(v)) for v in row])


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending sub-sequence with uniform stride that always contains ``T``."""
    if num_steps < 1 or num_steps > T:
        raise ValueError(f"num_steps must be in 1..{T}, got {num_steps}")
    stride = T // num_steps
    return [T - i * stride for i in range(num_steps)]


def _per_step(value, i: int):
    if value is None or isinstance(value, torch.Tensor):
        return value
    return value[i]


def cfg_predict(model: Callable, x_t: torch.Tensor, t, cond, null_cond, w: float) -> torch.Tensor:
    """``w * eps(x, t, cond) + (1 - w) * eps(x, t, null)``."""
    if cond is not None and null_cond is not None and cond.shape[-1] != null_cond.shape[-1]:
        raise ValueError("condition and null embeddings differ in dimension")
    if w == 1:
        return model(x_t, t, cond)
    if w == 0:
        return model(x_t, t, null_cond)
    return w * model(x_t, t, cond) + (1 - w) * model(x_t, t, null_cond)


def _default_null(model, null_cond):
    if null_cond is None and hasattr(model, "null_embedding"):
        return model.null_embedding()
    return null_cond


def _eps(model, x, t, cond, null_cond, w):
    if w == 1:
        return model(x, t, cond)
    return cfg_predict(model, x, t, cond, _default_null(model, null_cond), w)


def ddim_step(schedule: NoiseSchedule, model: Callable, x_t: torch.Tensor, t: int, cond=None,
              w: float = 1.0, null_cond=None, t_prev: int | None = None,
              eps: torch.Tensor | None = None) -> torch.Tensor:
    """One deterministic step ``x_t -> x_{t_prev}`` (``t_prev`` defaults to ``t - 1``)."""
    t_prev = t - 1 if t_prev is None else t_prev
    schedule.check_step(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev={t_prev} must lie in 0..{t - 1}")
    if eps is None:
        eps = _eps(model, x_t, t, cond, null_cond, w)
    if eps.shape != x_t.shape:
        raise ValueError(f"dimension mismatch: eps {tuple(eps.shape)} vs x {tuple(x_t.shape)}")
    ab_prev = schedule.alpha_bar(t_prev, like=x_t)
    x0 = predict_x0(schedule, x_t, eps, t)
    return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


def ddim_inversion_step(schedule: NoiseSchedule, x: torch.Tensor, eps: torch.Tensor, t_from: int, t_to: int):
    """Step ``x_{t_from} -> x_{t_to}`` (``t_to > t_from``) reusing a fixed noise estimate."""
    ab_from = schedule.alpha_bar(t_from, like=x)
    ab_to = schedule.alpha_bar(t_to, like=x)
    x0 = (x - (1 - ab_from).sqrt() * eps) / ab_from.sqrt()
    return ab_to.sqrt() * x0 + (1 - ab_to).sqrt() * eps


def ddim_sample(schedule: NoiseSchedule, model: Callable, x_T: torch.Tensor, cond=None, w: float = 1.0,
                num_steps: int = 50, null_cond=None) -> tuple[torch.Tensor, TrajectoryRecord]:
    """Run the backward process from ``x_T``.

    ``cond`` and ``null_cond`` are either single embeddings or sequences with
    one entry per sampling step, ordered from ``T`` downwards.
    """
    steps = ddim_timesteps(schedule.T, num_steps)
    record = TrajectoryRecord("sample", w)
    x = x_T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps = _eps(model, x, t, _per_step(cond, i), _per_step(null_cond, i), w)
        record.append(t, x, eps)
        x = ddim_step(schedule, model, x, t, t_prev=t_prev, eps=eps)
    record.append(0, x, None)
    return x, record


def ddim_invert(schedule: NoiseSchedule, model: Callable, x0: torch.Tensor, cond=None, w: float = 1.0,
                num_steps: int = 50, null_cond=None) -> tuple[torch.Tensor, TrajectoryRecord]:
    """DDIM inversion under the local linear approximation.

    The step ``t_prev -> t`` evaluates the model at the current latent
    ``x_{t_prev}`` with step index ``t``.
    """
    steps = ddim_timesteps(schedule.T, num_steps)[::-1]
    record = TrajectoryRecord("invert", w)
    x = x0
    t_prev = 0
    for i, t in enumerate(steps):
        j = len(steps) - 1 - i  # position in sampling order
        eps = _eps(model, x, t, _per_step(cond, j), _per_step(null_cond, j), w)
        record.append(t_prev, x, eps)
        x = ddim_inversion_step(schedule, x, eps, t_prev, t)
        t_prev = t
    record.append(t_prev, x, None)
    return x, record


def slerp(a: torch.Tensor, b: torch.Tensor, eta: float) -> torch.Tensor:
    """Spherical interpolation along the last axis.

    Falls back to linear interpolation when the angle is below
    ``SLERP_PARALLEL_EPS`` radians; antiparallel inputs are rejected.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    if bool((na == 0).any() or (nb == 0).any()):
        raise ValueError("slerp endpoints must be nonzero")
    cos = ((a * b).sum(-1, keepdim=True) / (na * nb)).clamp(-1.0, 1.0)
    theta = torch.arccos(cos)
    if bool((math.pi - theta < SLERP_ANTIPARALLEL_EPS).any()):
        raise ValueError("slerp is undefined for antiparallel endpoints")
    if eta == 0:
        return a.clone()
    if eta == 1:
        return b.clone()
    sin = torch.sin(theta)
    small = theta < SLERP_PARALLEL_EPS
    safe_sin = torch.where(small, torch.ones_like(sin), sin)
    ca = torch.where(small, torch.full_like(theta, 1 - eta), torch.sin((1 - eta) * theta) / safe_sin)
    cb = torch.where(small, torch.full_like(theta, eta), torch.sin(eta * theta) / safe_sin)
    return ca * a + cb * b
