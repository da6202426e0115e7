"""Fast exact/unit property checks bundled for ``smoothlab verify``."""

from __future__ import annotations

import math

import numpy as np
import torch

from .datasets import DatasetSpec, generate
from .denoiser import Denoiser, DenoiserConfig, init_lora
from .sampler import cfg_predict, ddim_sample, slerp
from .schedule import forward_diffuse, make_linear_schedule, predict_x0
from .training import EmaTracker, TrainConfig, train
from .verify import CheckResult, random_mlp

F64 = torch.float64


def _check(name, ok, value=0.0, tol=0.0, detail=""):
    return CheckResult(name, bool(ok), float(value), float(tol), detail)


def schedule_arithmetic():
    s = make_linear_schedule(2, 0.1, 0.2)
    err = float(np.abs(s.alpha_bars - [0.9, 0.72]).max())
    s100 = make_linear_schedule(100, 1e-4, 0.02)
    cum = float(np.max(np.abs(np.cumprod(s100.alphas) / s100.alpha_bars - 1)))
    return _check("schedule arithmetic and cumulative product", err < 1e-15 and cum < 1e-12, max(err, cum), 1e-12)


def diffuse_round_trip():
    s = make_linear_schedule(100, 1e-4, 0.2)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(1000, 4, generator=gen, dtype=F64)
    eps = torch.randn(1000, 4, generator=gen, dtype=F64)
    t = torch.randint(1, 101, (1000,), generator=gen)
    err = float((predict_x0(s, forward_diffuse(s, x0, eps, t), eps, t) - x0).abs().max())
    return _check("forward_diffuse / predict_x0 round trip", err < 1e-8, err, 1e-8)


def slerp_properties():
    gen = torch.Generator().manual_seed(1)
    worst = 0.0
    ok = True
    for _ in range(50):
        a, b = torch.randn(2, 5, generator=gen, dtype=F64)
        ok &= torch.equal(slerp(a, b, 0.0), a) and torch.equal(slerp(a, b, 1.0), b)
        a, b = a / a.norm(), b / b.norm()
        total = math.acos(float(a @ b))
        for eta in (0.1, 0.35, 0.8):
            p = slerp(a, b, eta)
            ang = math.atan2(float(torch.linalg.norm(p - (a @ p) * a)), float(a @ p))
            worst = max(worst, abs(ang - eta * total), abs(float(p.norm()) - 1))
    return _check("slerp endpoints, unit norm, angle proportionality", ok and worst < 1e-9, worst, 1e-9)


def cfg_reductions():
    model = random_mlp(4, 0)
    x = torch.randn(3, 4, dtype=F64)
    c, n = model.embed([0, 1, 2]), model.null_embedding()
    with torch.no_grad():
        ok = torch.equal(cfg_predict(model, x, 7, c, n, 1.0), model(x, 7, c))
        ok &= torch.equal(cfg_predict(model, x, 7, c, n, 0.0), model(x, 7, n))
    scalar = cfg_predict(lambda x, t, c: torch.full_like(x, float(c)), torch.zeros(1), 1,
                         torch.tensor([1.0]), torch.tensor([0.5]), 7.5)
    return _check("CFG reductions at w in {0, 1} and w=7.5 arithmetic", ok and float(scalar) == 4.25)


def ema_fixed_point():
    ema = EmaTracker(0.99)
    ema.update([3.0])
    first = ema.a == 3.0
    ema = EmaTracker(0.99)
    for _ in range(2000):
        ema.update([0.5])
    err = abs(ema.a - 0.5)
    return _check("EMA initialization and fixed point", first and err < 1e-6, err, 1e-6)


def lora_zero_init_and_freeze():
    model = random_mlp(4, 2)
    x = torch.randn(5, 4, dtype=F64)
    c = model.embed([0, 1, 2, 0, 1])
    before = model(x, 3, c).detach()
    adapter = init_lora(model, 4, seed=0)
    same = torch.equal(model(x, 3, c), before)
    with torch.no_grad():
        for B, _ in adapter.factors.values():
            B.normal_()
    model(x, 3, model.embed([0, 1, 2, 0, 1])).pow(2).sum().backward()
    trainable = {id(p) for p in adapter.parameters()}
    frozen_clean = all(p.grad is None or float(p.grad.abs().max()) == 0
                       for p in model.parameters() if id(p) not in trainable)
    return _check("LoRA zero-init equivalence and frozen-weight gradients", same and frozen_clean)


def train_sample_determinism():
    schedule = make_linear_schedule(20, 1e-3, 0.2)
    x, labels = generate(DatasetSpec(size=256, seed=0))
    data = (torch.tensor(x), torch.tensor(labels))
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = Denoiser(DenoiserConfig(hidden_width=32, depth=1))
        _, metrics, _ = train(TrainConfig(lam=1.0, total_iterations=20, batch_size=32, log_every=5,
                                          learning_rate=1e-3), data, model, schedule)
        with torch.no_grad():
            out, _ = ddim_sample(schedule, model, torch.ones(4, 2), model.embed([0, 1, 2, 8]), w=2.0,
                                 num_steps=10)
        runs.append((metrics, out))
    ok = runs[0][0] == runs[1][0] and torch.equal(runs[0][1], runs[1][1])
    return _check("train and sample determinism under a fixed seed", ok)


def run() -> list[CheckResult]:
    return [schedule_arithmetic(), diffuse_round_trip(), slerp_properties(), cfg_reductions(), ema_fixed_point(),
            lora_zero_init_and_freeze(), train_sample_determinism()]
