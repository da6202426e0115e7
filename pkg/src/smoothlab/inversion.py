"""Null-text inversion, reconstruction, real-sample interpolation and editing.

Null-text inversion keeps the conditional embedding fixed and, walking the
sampling steps from ``T`` down, optimizes one null embedding per step so the
guided DDIM step lands on the DDIM-inversion ("pivot") trajectory.  Each
step's null starts from the previous step's optimum.

Several samples can be inverted in one batch.  ``groups`` assigns each sample
to a null row: distinct rows give independent per-sample inversions, a single
row shared by a pair gives the shared-null variant used for interpolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch

from .sampler import _default_null, ddim_invert, ddim_sample, ddim_step, ddim_timesteps, slerp
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class NullSchedule:
    nulls: torch.Tensor  # (num_steps, groups, cond_dim), sampling order (T first)
    w: float

    def __len__(self):
        return self.nulls.shape[0]

    def per_step(self, index: torch.Tensor | None = None) -> list[torch.Tensor]:
        """One ``(batch, cond_dim)`` null per step, rows picked by ``index``."""
        nulls = self.nulls if index is None else self.nulls[:, index]
        return [n for n in nulls]


@dataclass
class InversionResult:
    x_T: torch.Tensor
    null_schedule: NullSchedule
    residuals: torch.Tensor  # (num_steps, batch) final per-step residual MSE
    source: torch.Tensor
    method: str = "nti"
    groups: torch.Tensor | None = None
    inner_history: list[torch.Tensor] = field(default_factory=list, repr=False)
    lr_halvings: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.null_schedule)

    def select(self, i: int) -> "InversionResult":
        """The single-sample result for batch row ``i``."""
        g = self.groups[i] if self.groups is not None else i
        ns = NullSchedule(self.null_schedule.nulls[:, g:g + 1], self.null_schedule.w)
        return InversionResult(self.x_T[i:i + 1], ns, self.residuals[:, i:i + 1], self.source[i:i + 1],
                               self.method, None)


def _residual(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).pow(2).mean(-1)


def _group_mean(values: torch.Tensor, groups: torch.Tensor, num_groups: int) -> torch.Tensor:
    total = torch.zeros(num_groups, dtype=values.dtype).index_add(0, groups, values)
    counts = torch.zeros(num_groups, dtype=values.dtype).index_add(0, groups, torch.ones_like(values))
    return total / counts


def _optimize_null(schedule, model, x, t, t_prev, cond, w, null, target, groups, num_groups,
                   inner_iters, inner_lr, early_stop_tol):
    """Adam on the per-group null with reject-and-halve steps.

    A step that raises a group's residual is undone for that group and its
    learning rate halved, so each group's residual is non-increasing.
    """
    null = null.detach().clone()
    lr = torch.full((num_groups, 1), float(inner_lr), dtype=null.dtype)
    m = torch.zeros_like(null)
    v = torch.zeros_like(null)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    halvings = 0

    def loss_of(n):
        pred = ddim_step(schedule, model, x, t, cond, w=w, null_cond=n[groups], t_prev=t_prev)
        return _group_mean(_residual(pred, target), groups, num_groups)

    null.requires_grad_(True)
    loss = loss_of(null)
    history = [loss.detach()]
    for k in range(1, inner_iters + 1):
        if bool((loss.detach() < early_stop_tol).all()):
            break
        (grad,) = torch.autograd.grad(loss.sum(), null)
        with torch.no_grad():
            m.mul_(b1).add_((1 - b1) * grad)
            v.mul_(b2).add_((1 - b2) * grad * grad)
            step = (m / (1 - b1 ** k)) / ((v / (1 - b2 ** k)).sqrt() + adam_eps)
            active = (loss.detach() >= early_stop_tol)[:, None]
            trial = torch.where(active, null - lr * step, null)
        trial.requires_grad_(True)
        trial_loss = loss_of(trial)
        worse = (trial_loss.detach() > loss.detach())
        if bool(worse.any()):
            halvings += int(worse.sum())
            log.debug("step %d: residual increased for %d group(s), halving their lr", t, int(worse.sum()))
            lr[worse] *= 0.5
            with torch.no_grad():
                keep = torch.where(worse[:, None], null, trial)
            keep.requires_grad_(True)
            null = keep
            loss = loss_of(null)
        else:
            null, loss = trial, trial_loss
        history.append(loss.detach())
    return null.detach(), torch.stack(history), halvings


def nti_invert(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor, w: float = 7.5,
               num_steps: int = 50, inner_iters: int = 10, inner_lr: float = 1e-2,
               early_stop_tol: float = 1e-5, groups: torch.Tensor | None = None,
               pivot_w: float = 1.0) -> InversionResult:
    """Null-text inversion of a batch ``x0`` of shape ``(B, D)``.

    The pivot trajectory comes from unguided DDIM inversion (``pivot_w=1``);
    guided inversion at large ``w`` is unstable.  With ``inner_iters=0`` the
    result is plain DDIM inversion followed, in ``reconstruct``, by guided
    sampling with the model's own null embedding.
    """
    if inner_iters < 0:
        raise ValueError("inner_iters must be >= 0")
    x0 = x0.reshape(-1, x0.shape[-1])
    B = x0.shape[0]
    groups = torch.arange(B) if groups is None else torch.as_tensor(groups, dtype=torch.long)
    num_groups = int(groups.max()) + 1
    base_null = _default_null(model, None)
    base_null = base_null.detach().reshape(1, -1).expand(num_groups, -1).clone()

    with torch.no_grad():
        x_T, pivot = ddim_invert(schedule, model, x0, cond, w=pivot_w, num_steps=num_steps,
                                 null_cond=base_null[groups])
    # pivot.latents[j] is the latent at pivot.steps[j] (ascending from 0)
    steps = ddim_timesteps(schedule.T, num_steps)
    targets = pivot.latents[::-1]  # targets[i] = latent at step i in sampling order; [-1] is x0
    null = base_null
    nulls, residuals, history, halvings = [], [], [], 0
    x = x_T
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        target = targets[i + 1]
        if inner_iters > 0 and w != 1:
            null, hist, h = _optimize_null(schedule, model, x, t, t_prev, cond, w, null, target, groups,
                                           num_groups, inner_iters, inner_lr, early_stop_tol)
            history.append(hist)
            halvings += h
        nulls.append(null.clone())
        with torch.no_grad():
            x = ddim_step(schedule, model, x, t, cond, w=w, null_cond=null[groups], t_prev=t_prev)
        res = _residual(x, target)
        if not bool(torch.isfinite(res).all()):
            raise FloatingPointError(f"non-finite NTI residual at step {t}")
        residuals.append(res)
    return InversionResult(x_T.detach(), NullSchedule(torch.stack(nulls), w), torch.stack(residuals),
                           x0, "nti" if inner_iters > 0 else "ddim", groups, history, halvings)


def ddim_inversion_result(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor, w: float = 1.0,
                          num_steps: int = 50) -> InversionResult:
    """Plain DDIM inversion wrapped as an ``InversionResult`` (model's own null at every step).

    Inversion is unguided; ``w`` is the guidance scale used when reconstructing.
    """
    return nti_invert(schedule, model, x0, cond, w=w, num_steps=num_steps, inner_iters=0)


def nti_invert_shared(schedule: NoiseSchedule, model, x0_a: torch.Tensor, x0_b: torch.Tensor, cond: torch.Tensor,
                      w: float = 7.5, **kwargs) -> tuple[InversionResult, InversionResult, NullSchedule]:
    """Invert two samples under one shared null schedule (mean of both residuals)."""
    x0_a, x0_b = x0_a.reshape(1, -1), x0_b.reshape(1, -1)
    if x0_a.shape != x0_b.shape:
        raise ValueError("both samples must share a dimension")
    cond = cond.reshape(-1, cond.shape[-1])
    if cond.shape[0] == 1:
        cond = cond.expand(2, -1)
    joint = nti_invert(schedule, model, torch.cat([x0_a, x0_b]), cond, w=w, groups=torch.zeros(2, dtype=torch.long),
                       **kwargs)
    return joint.select(0), joint.select(1), joint.null_schedule


@torch.no_grad()
def reconstruct(schedule: NoiseSchedule, model, inv: InversionResult, cond: torch.Tensor,
                num_steps: int | None = None) -> torch.Tensor:
    """Guided DDIM sampling from ``inv.x_T`` with the stored per-step nulls."""
    if num_steps is not None and num_steps != inv.num_steps:
        raise ValueError(f"inversion used {inv.num_steps} steps, sampling asked for {num_steps}")
    out, _ = ddim_sample(schedule, model, inv.x_T, cond, w=inv.null_schedule.w, num_steps=inv.num_steps,
                         null_cond=inv.null_schedule.per_step(inv.groups))
    return out


def interpolate_real(schedule: NoiseSchedule, model, x0_a: torch.Tensor, x0_b: torch.Tensor, cond: torch.Tensor,
                     etas, w: float = 7.5, **nti_kwargs) -> list[torch.Tensor]:
    """Shared-null inversion of both samples, slerp of their latents, guided reconstruction.

    Every interpolant is reconstructed on its own, so the endpoints match
    ``reconstruct`` on the per-sample results bit for bit.
    """
    if any(not 0 <= float(e) <= 1 for e in etas):
        raise ValueError("etas must lie in [0, 1]")
    inv_a, inv_b, _ = nti_invert_shared(schedule, model, x0_a, x0_b, cond, w=w, **nti_kwargs)
    cond1 = cond.reshape(-1, cond.shape[-1])[:1]
    outputs = []
    for eta in etas:
        z = slerp(inv_a.x_T, inv_b.x_T, float(eta))
        inv = InversionResult(z, inv_a.null_schedule, inv_a.residuals, inv_a.source, "interp")
        outputs.append(reconstruct(schedule, model, inv, cond1))
    return outputs


def switch_conditions(T: int, steps: list[int], cond_src, cond_trg, r: float) -> list:
    """Per-step conditions: source while ``t > T * r``, target afterwards."""
    if not 0 < r <= 1:
        raise ValueError(f"switch threshold r must be in (0, 1], got {r}")
    return [cond_src if t > T * r else cond_trg for t in steps]


@torch.no_grad()
def edit_prompt_switch(schedule: NoiseSchedule, model, inv: InversionResult, cond_src: torch.Tensor,
                       cond_trg: torch.Tensor, r: float) -> torch.Tensor:
    steps = ddim_timesteps(schedule.T, inv.num_steps)
    conds = switch_conditions(schedule.T, steps, cond_src, cond_trg, r)
    out, _ = ddim_sample(schedule, model, inv.x_T, conds, w=inv.null_schedule.w, num_steps=inv.num_steps,
                         null_cond=inv.null_schedule.per_step(inv.groups))
    return out
