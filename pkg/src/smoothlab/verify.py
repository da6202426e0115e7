"""Oracle checks shared by the ``verify`` command and the test suite.

Each check returns a ``CheckResult``; none of them trains a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, forward_diffuse, make_linear_schedule, predict_x0
from .training import svr_direction, svr_loss, svr_norms

F64 = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


def random_mlp(data_dim: int, seed: int, hidden_width: int = 32, depth: int = 2) -> Denoiser:
    """Float64 MLP with a randomized (non-zero) output layer."""
    torch.manual_seed(seed)
    model = Denoiser(DenoiserConfig(data_dim=data_dim, hidden_width=hidden_width, depth=depth,
                                    time_embed_dim=8, cond_embed_dim=4, num_conditions=3)).to(F64)
    with torch.no_grad():
        model.out.weight.normal_(0, 0.3)
        model.out.bias.normal_(0, 0.1)
    return model


def explicit_jacobian_norms(schedule: NoiseSchedule, model, x0, cond, eps, t, direction) -> torch.Tensor:
    """``sqrt(1-ab_t) ||J^T u||`` with ``J = d x0_pred / d eps`` built row by row
    (one reverse pass per output coordinate)."""
    ab = torch.as_tensor(schedule.alpha_bars_ext, dtype=F64)[t][:, None]
    eps = eps.detach().clone().requires_grad_(True)
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    x0_pred = (x_t - (1 - ab).sqrt() * model(x_t, t, cond)) / ab.sqrt()
    B, D = x0.shape
    J = torch.zeros(B, D, D, dtype=F64)
    for i in range(D):
        (row,) = torch.autograd.grad(x0_pred[:, i].sum(), eps, retain_graph=True)
        J[:, i, :] = row
    jtu = torch.einsum("bij,bi->bj", J, direction)
    return (1 - ab[:, 0]).sqrt() * jtu.norm(dim=-1)


def check_vjp_identity(dims=(4, 8, 16), draws: int = 100, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    schedule = make_linear_schedule(100, 1e-4, 0.2)
    worst = 0.0
    for d in dims:
        model = random_mlp(d, seed + d)
        gen = torch.Generator().manual_seed(seed + 100 + d)
        x0 = torch.randn(draws, d, generator=gen, dtype=F64)
        u = svr_direction(d, gen, draws)
        eps = torch.randn(draws, d, generator=gen, dtype=F64)
        t = torch.randint(1, schedule.T + 1, (draws,), generator=gen)
        cond = model.embed(torch.randint(0, 4, (draws,), generator=gen))
        vjp = svr_norms(schedule, model, x0, cond, eps, t, u, create_graph=False)
        ref = explicit_jacobian_norms(schedule, model, x0, cond, eps, t, u)
        worst = max(worst, float(((vjp - ref).abs() / ref.abs()).max()))
    return CheckResult("VJP norm vs explicit Jacobian", worst < tol, worst, tol,
                       f"dims={list(dims)}, {draws} draws each")


def check_second_order_gradient(num_params: int = 60, h: float = 1e-4, tol: float = 1e-3,
                                seed: int = 0) -> CheckResult:
    """d L_reg / d theta from double backprop vs central differences."""
    schedule = make_linear_schedule(100, 1e-4, 0.2)
    model = random_mlp(4, seed, hidden_width=16, depth=2)
    gen = torch.Generator().manual_seed(seed + 1)
    B, D = 16, 4
    x0 = torch.randn(B, D, generator=gen, dtype=F64)
    eps = torch.randn(B, D, generator=gen, dtype=F64)
    u = svr_direction(D, gen, B)
    t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    labels = torch.randint(0, 4, (B,), generator=gen)
    a = 0.05

    def loss():
        return svr_loss(schedule, model, x0, model.embed(labels), a, eps, t, u)[0]

    params = [p for p in model.parameters()]
    grads = torch.autograd.grad(loss(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < num_params:
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[k].data.view(-1)
        j = int(rng.integers(flat.numel()))
        g = float(grads[k].reshape(-1)[j])
        orig = float(flat[j])
        flat[j] = orig + h
        up = float(loss().detach())
        flat[j] = orig - h
        down = float(loss().detach())
        flat[j] = orig
        fd = (up - down) / (2 * h)
        scale = max(abs(g), abs(fd))
        if scale < 1e-8:
            continue  # parameter with no influence; both sides agree at zero
        worst = max(worst, abs(g - fd) / scale)
        checked += 1
    return CheckResult("regularizer parameter gradient vs central differences", worst < tol, worst, tol,
                       f"{num_params} parameters, h={h:g}")


def orthogonal_oracle(schedule: NoiseSchedule, x0: torch.Tensor, Q: torch.Tensor, K: float, c: torch.Tensor):
    """Noise predictor whose one-step prediction is ``x0_pred = K Q eps + c``
    for inputs built from ``x0`` (the clean sample is baked in)."""

    def model(x_t, t, cond):
        ab = schedule.alpha_bar(t, like=x_t)
        ab = ab.reshape(ab.shape + (1,) * (x_t.dim() - ab.dim())) if ab.dim() else ab
        eps = (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()
        target = K * eps @ Q.T + c
        return (x_t - ab.sqrt() * target) / (1 - ab).sqrt()

    return model


def check_orthogonal_closed_form(D: int = 8, K: float = 1.7, draws: int = 64, tol: float = 1e-9,
                                 seed: int = 0) -> list[CheckResult]:
    schedule = make_linear_schedule(100, 1e-4, 0.2)
    gen = torch.Generator().manual_seed(seed)
    Q, _ = torch.linalg.qr(torch.randn(D, D, generator=gen, dtype=F64))
    c = torch.randn(D, generator=gen, dtype=F64)
    x0 = torch.randn(draws, D, generator=gen, dtype=F64)
    eps = torch.randn(draws, D, generator=gen, dtype=F64)
    u = svr_direction(D, gen, draws)
    t = torch.randint(1, schedule.T + 1, (draws,), generator=gen)
    model = orthogonal_oracle(schedule, x0, Q, K, c)
    expected = (1 - schedule.alpha_bar(t)).sqrt() * K
    n = svr_norms(schedule, model, x0, None, eps, t, u, create_graph=False)
    err_n = float((n - expected).abs().max())

    t_fixed = torch.full((draws,), 37)
    a = 0.3
    loss, _ = svr_loss(schedule, model, x0, None, a, eps, t_fixed, u, create_graph=False)
    want = (math.sqrt(1 - float(schedule.alpha_bar(37))) * K - a) ** 2
    err_loss = abs(float(loss) - want)
    a_opt = math.sqrt(1 - float(schedule.alpha_bar(37))) * K
    loss_opt, _ = svr_loss(schedule, model, x0, None, a_opt, eps, t_fixed, u, create_graph=False)
    return [
        CheckResult("orthogonal Jacobian: norm = sqrt(1-ab_t) K", err_n < tol, err_n, tol, f"D={D}, K={K}"),
        CheckResult("orthogonal Jacobian: loss = (sqrt(1-ab_t) K - a)^2", err_loss < tol, err_loss, tol),
        CheckResult("orthogonal Jacobian: loss vanishes at a = sqrt(1-ab_t) K", float(loss_opt) < tol,
                    float(loss_opt), tol),
    ]


def direction_variance(schedule: NoiseSchedule, Q: torch.Tensor, K: float, t: int = 37, draws: int = 2000,
                       seed: int = 0) -> float:
    """Variance of the regularizer norm over random unit directions for ``x0_pred = K Q eps``."""
    D = Q.shape[0]
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.zeros(draws, D, dtype=F64)
    eps = torch.randn(draws, D, generator=gen, dtype=F64)
    u = svr_direction(D, gen, draws)
    model = orthogonal_oracle(schedule, x0, Q, K, torch.zeros(D, dtype=F64))
    n = svr_norms(schedule, model, x0, None, eps, torch.full((draws,), t), u, create_graph=False)
    return float(n.var())


def run_all() -> list[CheckResult]:
    """Full oracle suite run by ``smoothlab verify``."""
    from . import unit_checks

    results = [check_vjp_identity(), check_second_order_gradient()]
    results += check_orthogonal_closed_form()
    results += unit_checks.run()
    return results
