"""Acceptance suite: one PASS/FAIL line per criterion (1-9).

Criteria 1-3 and 8 are exact oracle checks and run in seconds.  Criteria 4-7
and 9 compare toy twins trained under shared seeds; trained checkpoints are
cached under ``$SMOOTHLAB_CACHE`` (default ``<repo>/.cache/acceptance``),
keyed by a hash of the full run config, so only the first run pays for
training (roughly 25 minutes on one CPU core).

Run on its own with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``; the summary lines are also repeated at
the end of the pytest terminal report.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from smoothlab import unit_checks, verify
from smoothlab.checkpoint import load_checkpoint
from smoothlab.config import from_dict
from smoothlab.datasets import DatasetSpec, classify_shape, generate, shape_templates
from smoothlab.evaluation import (compute_istd, off_object_change, recon_sweep, sample_mmd,
                                  step_ratio_trend)
from smoothlab.inversion import ddim_inversion_result, edit_prompt_switch, nti_invert, reconstruct
from smoothlab.pipeline import load_dataset, run_training

CACHE = Path(os.environ.get("SMOOTHLAB_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))

RESULTS: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
    return passed


# ---------------------------------------------------------------- protocols

# 8-mode mixture twins: T=100 with beta up to 0.2 so x_T is close to N(0, I)
MIXTURE = {
    "schedule": {"T": 100, "beta_start": 1e-4, "beta_end": 0.2},
    "denoiser": {"data_dim": 2, "hidden_width": 128, "depth": 3, "num_conditions": 8},
    "train": {"learning_rate": 1e-3, "total_iterations": 20000, "seed": 0},
    "dataset": {"kind": "gaussian-mixture", "size": 4096, "seed": 0},
    "seed": 0,
}
LAMBDAS = (0.0, 0.1, 1.0, 10.0)

# shapes twins: one lambda=0 pretraining run, then paired fine-tunes from its weights
SHAPES_PRETRAIN = {
    "schedule": {"T": 100, "beta_start": 1e-4, "beta_end": 0.2},
    "denoiser": {"data_dim": 64, "hidden_width": 256, "depth": 3, "num_conditions": 3},
    "train": {"lam": 0.0, "learning_rate": 1e-3, "total_iterations": 10000, "seed": 0},
    "dataset": {"kind": "shapes-8x8", "size": 4096, "seed": 0},
    "seed": 0,
}
SHAPES_FINETUNE = {"learning_rate": 1e-4, "total_iterations": 6000, "seed": 1}

HELD_OUT = DatasetSpec(kind="gaussian-mixture", size=256, seed=123)
ISTD_CONDITIONS, ISTD_SEED = 32, 0
MMD_SAMPLES, MMD_SEED = 2000, 5
GUIDANCE = 7.5


def _with(base: dict, **sections) -> dict:
    out = json.loads(json.dumps(base))
    for key, value in sections.items():
        if isinstance(value, dict):
            out.setdefault(key, {}).update(value)
        else:
            out[key] = value
    return out


def trained(cfg_dict: dict):
    """Train ``cfg_dict`` once; later calls load the cached final checkpoint."""
    config = from_dict(cfg_dict)
    key_data = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
    key = hashlib.sha256(json.dumps(key_data, sort_keys=True).encode()).hexdigest()[:16]
    run_dir = CACHE / key
    done = run_dir / "DONE"
    if not done.exists():
        if run_dir.exists():
            shutil.rmtree(run_dir)
        config.output_dir = str(run_dir)
        run_training(config)
        done.write_text(json.dumps(key_data, sort_keys=True) + "\n")
    model, schedule, _ = load_checkpoint(run_dir / "checkpoints" / "final")
    model.eval()
    return model, schedule, run_dir


@pytest.fixture(scope="session")
def mixture_models():
    return {lam: trained(_with(MIXTURE, train={"lam": lam}))[:2] for lam in LAMBDAS}


@pytest.fixture(scope="session")
def mixture_data():
    x, _ = load_dataset(from_dict(MIXTURE).dataset)
    return x.numpy()


@pytest.fixture(scope="session")
def held_out():
    x, labels = generate(HELD_OUT)
    return torch.tensor(x, dtype=torch.float32), labels.tolist()


@pytest.fixture(scope="session")
def shapes_models():
    _, _, pre_dir = trained(SHAPES_PRETRAIN)
    init = str(pre_dir / "checkpoints" / "final")
    return {lam: trained(_with(SHAPES_PRETRAIN, train={**SHAPES_FINETUNE, "lam": lam}, init_checkpoint=init))[:2]
            for lam in (0.0, 1.0)}


def _istd(model, schedule) -> float:
    return compute_istd(schedule, model, [model.null_id] * ISTD_CONDITIONS, seed=ISTD_SEED).istd


# ---------------------------------------------------------------- exact checks


def test_criterion_1_vjp_identity():
    r = verify.check_vjp_identity(dims=(4, 8, 16), draws=100, tol=1e-6)
    assert report(1, r.passed, f"max rel err {r.value:.2e} < 1e-6 ({r.detail})")


def test_criterion_2_second_order_gradient():
    r = verify.check_second_order_gradient(num_params=60, h=1e-4, tol=1e-3)
    assert report(2, r.passed, f"max rel err {r.value:.2e} < 1e-3 ({r.detail})")


def test_criterion_3_orthogonal_closed_form():
    results = verify.check_orthogonal_closed_form()
    worst = max(r.value for r in results)
    assert report(3, all(r.passed for r in results), f"max abs err {worst:.2e} < 1e-9 over {len(results)} checks")


def test_criterion_8_unit_properties():
    results = unit_checks.run()
    failed = [r.name for r in results if not r.passed]
    assert report(8, not failed, f"{len(results) - len(failed)}/{len(results)} properties hold"
                  + (f"; failing: {failed}" if failed else ""))


# ---------------------------------------------------------------- paired twins


def test_criterion_4_istd_separation(mixture_models, mixture_data):
    (base, sched), (smooth, _) = mixture_models[0.0], mixture_models[1.0]
    i_b, i_s = _istd(base, sched), _istd(smooth, sched)
    m_b = sample_mmd(sched, base, mixture_data, MMD_SAMPLES, MMD_SEED)
    m_s = sample_mmd(sched, smooth, mixture_data, MMD_SAMPLES, MMD_SEED)
    ok = i_s / i_b <= 0.8 and m_s <= 1.1 * m_b
    assert report(4, ok, f"ISTD {i_s:.4f}/{i_b:.4f} = {i_s / i_b:.3f} (<= 0.8); "
                         f"MMD {m_s:.5f} vs 1.1 x {m_b:.5f}")


def test_criterion_5_lambda_monotonicity(mixture_models, mixture_data):
    sched = mixture_models[1.0][1]
    istd = {lam: _istd(m, sched) for lam, (m, _) in mixture_models.items() if lam > 0}
    mmd = {lam: sample_mmd(sched, m, mixture_data, MMD_SAMPLES, MMD_SEED)
           for lam, (m, _) in mixture_models.items() if lam > 0}
    lams = sorted(istd)
    ok = all(istd[a] >= istd[b] for a, b in zip(lams, lams[1:]))
    detail = ", ".join(f"lam={lam:g}: ISTD {istd[lam]:.4f} MMD {mmd[lam]:.5f}" for lam in lams)
    assert report(5, ok, f"ISTD non-increasing; {detail} (MMD reported only)")


def test_criterion_6_inversion(mixture_models, held_out):
    x0, labels = held_out
    nti_kw = {"inner_iters": 10, "inner_lr": 1e-2}
    sweeps = {lam: recon_sweep(mixture_models[lam][1], mixture_models[lam][0], x0, labels, (10, 20, 50),
                               GUIDANCE, nti_kw) for lam in (0.0, 1.0)}
    b, s = sweeps[0.0], sweeps[1.0]
    labelled = {}
    for lam in (0.0, 1.0):
        model, sched = mixture_models[lam]
        cond = model.embed(labels).detach()
        inv = ddim_inversion_result(sched, model, x0, cond, w=1.0, num_steps=50)
        labelled[lam] = float((reconstruct(sched, model, inv, cond) - x0).pow(2).mean())
    plain_ok = s["ddim_mse_50"] <= b["ddim_mse_50"]
    cut = {lam: 1 - r["nti_mse"] / r["ddim_guided_mse"] for lam, r in sweeps.items()}
    ok = plain_ok and all(c >= 0.5 for c in cut.values())
    assert report(6, ok, f"plain DDIM MSE smooth {s['ddim_mse_50']:.5f} <= base {b['ddim_mse_50']:.5f} "
                         f"(10/20 steps: {s['ddim_mse_10']:.4f}/{s['ddim_mse_20']:.4f} vs "
                         f"{b['ddim_mse_10']:.4f}/{b['ddim_mse_20']:.4f}); NTI cut at w={GUIDANCE}: "
                         f"base {cut[0.0]:.1%}, smooth {cut[1.0]:.1%} (>= 50%); label-conditioned round trip "
                         f"(reported): smooth {labelled[1.0]:.5f}, base {labelled[0.0]:.5f}")


def test_criterion_7_editing(shapes_models):
    images, labels, _ = shape_templates()
    src = images[labels == 0]  # every square variant
    x0 = torch.tensor(src, dtype=torch.float32)
    flips, off = {}, {}
    for lam, (model, sched) in shapes_models.items():
        c_src = model.embed([0] * len(x0)).detach()
        c_trg = model.embed([1] * len(x0)).detach()
        inv = nti_invert(sched, model, x0, c_src, w=GUIDANCE, num_steps=50)
        edited = edit_prompt_switch(sched, model, inv, c_src, c_trg, r=0.8).numpy()
        flips[lam] = float(np.mean(classify_shape(edited) == 1))
        off[lam] = float(off_object_change(edited, src).mean())
    ok = flips[1.0] >= 0.8 and off[1.0] < off[0.0]
    assert report(7, ok, f"square->circle flips smooth {flips[1.0]:.0%} (>= 80%), base {flips[0.0]:.0%}; "
                         f"off-object MAD smooth {off[1.0]:.4f} < base {off[0.0]:.4f}")


def test_criterion_9_ratio_trend(mixture_models, held_out):
    x0, _ = held_out
    steps = list(range(2, 101, 4))
    corr = {}
    for lam in (0.0, 1.0):
        model, sched = mixture_models[lam]
        cond = model.embed([model.null_id] * len(x0)).detach()
        for mode in ("sampler", "one-step"):
            corr[lam, mode] = step_ratio_trend(sched, model, x0, cond, steps, h=1e-2, seed=0, mode=mode).correlation
    ok = corr[1.0, "sampler"] > 0.9
    assert report(9, ok, f"corr(ratio, sqrt(1-ab_t)) smooth {corr[1.0, 'sampler']:.3f} (> 0.9); "
                         f"baseline {corr[0.0, 'sampler']:.3f} (reported); one-step prediction: "
                         f"smooth {corr[1.0, 'one-step']:.3f}, baseline {corr[0.0, 'one-step']:.3f}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-s"]))
