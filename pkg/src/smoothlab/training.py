"""Training: denoising loss, step-wise variation regularization, the loop.

The regularizer penalizes, per sample, the deviation of

    n = sqrt(1 - ab_t) * || J_eps^T u ||,   J_eps = d x0_pred / d eps

from a running average ``a`` of the same quantity, where ``u`` is a random
unit direction in data space and ``x0_pred`` is the one-step prediction from
``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.  ``J^T u`` is never formed:
it is the gradient of the scalar ``<x0_pred, u>`` with respect to ``eps``,
so one reverse pass per batch suffices.  The loss keeps that graph
(``create_graph=True``) and is differentiated again for the parameter update.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .denoiser import Denoiser, init_lora
from .schedule import NoiseSchedule, forward_diffuse, predict_x0

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iteration", "base_loss", "reg_loss", "ema_a", "reg_skipped"]


class NumericalAbort(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    lam: float = 1.0
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    total_iterations: int = 20000
    seed: int = 0
    lora_rank: int = 0
    ema_decay: float = 0.99
    reg_interval: int = 1
    uncond_prob: float = 0.1
    share_noise: bool = False
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"TrainConfig.lam must be >= 0, got {self.lam}")
        if self.reg_interval < 1:
            raise ValueError(f"TrainConfig.reg_interval must be >= 1, got {self.reg_interval}")
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"TrainConfig.ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.batch_size < 1 or self.total_iterations < 0 or self.lora_rank < 0:
            raise ValueError("TrainConfig: batch_size >= 1, total_iterations >= 0, lora_rank >= 0")


@dataclass
class EmaTracker:
    decay: float = 0.99
    a: float = 0.0
    initialized: bool = False

    def update(self, norms) -> "EmaTracker":
        norms = torch.as_tensor(norms, dtype=torch.float64)
        if not bool(torch.isfinite(norms).all()) or bool((norms < 0).any()):
            raise ValueError("EMA update needs finite, nonnegative norms")
        mean = float(norms.mean())
        if not self.initialized:
            self.a, self.initialized = mean, True
        else:
            self.a = self.decay * self.a + (1 - self.decay) * mean
        return self


def ema_update(ema: EmaTracker, norms) -> EmaTracker:
    return ema.update(norms)


def base_loss(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor,
              eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``||eps - eps_theta(x_t, t, cond)||^2``."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    x_t = forward_diffuse(schedule, x0, eps, t)
    return (eps - model(x_t, t, cond)).pow(2).sum(-1).mean()


def svr_direction(dim: int, generator: torch.Generator | None = None, batch: int | None = None,
                  dtype=torch.float64) -> torch.Tensor:
    """Gaussian direction(s) scaled to unit L2 norm."""
    shape = (dim,) if batch is None else (batch, dim)
    while True:
        u = torch.randn(shape, generator=generator, dtype=torch.float64)
        norm = u.norm(dim=-1, keepdim=True)
        if bool((norm > 0).all()):
            return (u / norm).to(dtype)


def svr_norms(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor, eps: torch.Tensor,
              t: torch.Tensor, direction: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Per-sample ``sqrt(1 - ab_t) ||J_eps^T u||`` via one reverse pass."""
    eps = eps.detach().requires_grad_(True)
    x_t = forward_diffuse(schedule, x0, eps, t)
    x0_pred = predict_x0(schedule, x_t, model(x_t, t, cond), t)
    scale = (1 - schedule.alpha_bar(t, like=x0)).sqrt()
    s = (scale * (x0_pred * direction).sum(-1)).sum()
    # samples do not interact, so the gradient of the sum splits per sample
    (g,) = torch.autograd.grad(s, eps, create_graph=create_graph)
    if not bool(torch.isfinite(g).all()):
        raise NumericalAbort("non-finite gradient in the regularizer")
    return g.norm(dim=-1)


def svr_loss(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor, ema_a: float,
             eps: torch.Tensor, t: torch.Tensor, direction: torch.Tensor,
             create_graph: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(mean (n - a)^2, n)``; the norms feed the EMA update."""
    n = svr_norms(schedule, model, x0, cond, eps, t, direction, create_graph=create_graph)
    return (n - ema_a).pow(2).mean(), n.detach()


def total_loss(base, reg, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return base + lam * reg


def _metrics_writer(run_dir: Path | None):
    if run_dir is None:
        return None, None
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    fh = open(run_dir / "logs" / "metrics.csv", "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_FIELDS)
    return fh, writer


def train(config: TrainConfig, dataset: tuple[torch.Tensor, torch.Tensor], model: Denoiser,
          schedule: NoiseSchedule, run_dir: str | Path | None = None, ema: EmaTracker | None = None):
    """Optimize ``model`` in place with AdamW on ``base + lam * reg``.

    ``dataset`` is ``(samples, labels)``.  With ``lora_rank > 0`` the base
    weights and the condition table are frozen and only fresh LoRA factors
    train.  Returns ``(model, metrics, ema)``; ``metrics`` holds one dict per
    logged iteration and mirrors ``logs/metrics.csv`` in ``run_dir``.
    """
    from .checkpoint import save_checkpoint

    x_data, labels = dataset
    if len(x_data) == 0:
        raise ValueError("empty dataset")
    run_dir = Path(run_dir) if run_dir is not None else None
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    x_data = x_data.to(dtype)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if config.lora_rank > 0:
        init_lora(model, config.lora_rank, seed=config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    frozen = {name: p.detach().clone() for name, p in model.named_parameters() if not p.requires_grad}
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    ema = ema if ema is not None else EmaTracker(config.ema_decay)
    T, B, D = schedule.T, config.batch_size, x_data.shape[-1]

    fh, writer = _metrics_writer(run_dir)
    timing = open(run_dir / "logs" / "timing.csv", "w") if run_dir else None
    metrics = []
    start = time.perf_counter()
    try:
        for it in range(1, config.total_iterations + 1):
            idx = torch.randint(len(x_data), (B,), generator=gen)
            x0 = x_data[idx]
            lab = labels[idx].clone()
            drop = torch.rand(B, generator=gen) < config.uncond_prob
            lab[drop] = model.null_id
            cond = model.embed(lab)
            t = torch.randint(1, T + 1, (B,), generator=gen)
            eps = torch.randn(B, D, generator=gen, dtype=torch.float64).to(dtype)
            # direction is drawn before, and independently of, the regularizer noise
            u = svr_direction(D, gen, B, dtype=dtype)
            eps_reg = eps if config.share_noise else torch.randn(B, D, generator=gen, dtype=torch.float64).to(dtype)
            t_reg = torch.randint(1, T + 1, (B,), generator=gen)

            loss_base = base_loss(schedule, model, x0, cond, eps, t)
            loss_reg = torch.zeros((), dtype=dtype)
            skipped = 0
            if config.lam > 0 and it % config.reg_interval == 0:
                n = svr_norms(schedule, model, x0, cond, eps_reg, t_reg, u)
                if ema.initialized and bool((n > 1e3 * ema.a).any()):
                    skipped = 1
                    log.warning("iteration %d: regularizer norm %.3g exceeds 1e3 * a, skipped", it, float(n.max()))
                else:
                    first = not ema.initialized
                    if first:
                        ema.update(n.detach())
                    loss_reg = (n - ema.a).pow(2).mean()
                    if not first:
                        ema.update(n.detach())
            loss = total_loss(loss_base, loss_reg, config.lam)
            if not bool(torch.isfinite(loss)):
                raise NumericalAbort(f"non-finite loss at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

            if it % config.log_every == 0 or it == config.total_iterations:
                row = {"iteration": it, "base_loss": float(loss_base.detach()), "reg_loss": float(loss_reg.detach()),
                       "ema_a": ema.a, "reg_skipped": skipped}
                metrics.append(row)
                if writer is not None:
                    writer.writerow([row[k] if not isinstance(row[k], float) else repr(row[k]) for k in METRIC_FIELDS])
                    timing.write(f"{it},{time.perf_counter() - start:.3f}\n")
            if run_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"iter_{it:06d}", model, schedule)
    except NumericalAbort:
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / "abort", model, schedule)
        raise
    finally:
        if fh is not None:
            fh.close()
            timing.close()

    for name, p in model.named_parameters():
        if name in frozen and not torch.equal(frozen[name], p.detach()):
            raise AssertionError(f"frozen parameter {name} changed during training")
    return model, metrics, ema
