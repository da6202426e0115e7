import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from smoothlab.evaluation import (DEFAULT_ETAS, PairedReport, SmoothnessReport, adjacent_distances, compute_istd,
                                  latent_pairs, mmd_quality, off_object_change, paired_report, recon_metrics,
                                  sample_mmd, ssim, step_ratio_trend)
from smoothlab.schedule import make_linear_schedule

from conftest import small_model


def identity_eps(x, t, cond=None):
    return x


class AffineEps:
    """eps(x) = A x + b; every DDIM step, hence the whole sampler, is affine in x_T."""

    def __init__(self, dim, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.A = 0.1 * torch.randn(dim, dim, generator=g, dtype=torch.float64)
        self.b = torch.randn(dim, generator=g, dtype=torch.float64)

    def __call__(self, x, t, cond=None):
        return x @ self.A.T + self.b


# ---------------------------------------------------------------- ISTD


def test_istd_zero_for_constant_sweep(schedule):
    # equal endpoints: all 11 interpolants, hence all outputs, coincide
    pairs = torch.ones(3, 2, 4, dtype=torch.float64)
    rep = compute_istd(schedule, identity_eps, [0, 1, 2], dim=4, pairs=pairs, num_steps=10)
    assert rep.istd == 0.0
    assert rep.distances.shape == (3, 1, len(DEFAULT_ETAS) - 1)


def test_istd_zero_for_affine_sampler_with_linear_interpolation(schedule):
    model = AffineEps(6)
    rep = compute_istd(schedule, model, [0, 0, 0, 0], dim=6, interp="linear", num_steps=20, seed=3)
    assert rep.distances.min() > 0
    assert rep.istd < 1e-10


def test_istd_slerp_on_affine_sampler_is_not_flat(schedule):
    rep = compute_istd(schedule, AffineEps(6), [0, 0], dim=6, interp="slerp", num_steps=20, seed=3)
    assert rep.istd > 1e-4


def test_istd_needs_two_points_and_conditions(schedule):
    with pytest.raises(ValueError):
        compute_istd(schedule, AffineEps(2), [0], dim=2, etas=[0.5])
    with pytest.raises(ValueError):
        compute_istd(schedule, AffineEps(2), [], dim=2)


def test_istd_reproducible_and_shared_latents(schedule):
    model = small_model(4, dtype=torch.float32)
    a = compute_istd(schedule, model, [0, 1, 2, 3], seed=7, num_steps=10)
    b = compute_istd(schedule, model, [0, 1, 2, 3], seed=7, num_steps=10)
    np.testing.assert_array_equal(a.distances, b.distances)
    assert a.istd == b.istd


def test_istd_invariant_to_condition_order(schedule):
    model = small_model(4, dtype=torch.float64)
    conds = [0, 1, 2, 3]
    pairs = latent_pairs(4, 4, seed=1, dtype=torch.float64)
    perm = [2, 0, 3, 1]
    a = compute_istd(schedule, model, conds, pairs=pairs, num_steps=10)
    b = compute_istd(schedule, model, [conds[i] for i in perm], pairs=pairs[perm], num_steps=10)
    assert a.istd == pytest.approx(b.istd, rel=1e-12)
    np.testing.assert_allclose(np.sort(a.stds), np.sort(b.stds), rtol=1e-12)


def test_istd_invariant_to_pair_permutation_under_one_condition(schedule):
    model = small_model(4, dtype=torch.float64)
    pairs = latent_pairs(5, 4, seed=2, dtype=torch.float64)
    a = compute_istd(schedule, model, [3] * 5, pairs=pairs, num_steps=10)
    b = compute_istd(schedule, model, [3] * 5, pairs=pairs.flip(0), num_steps=10)
    assert a.istd == pytest.approx(b.istd, rel=1e-12)


def test_smoothness_report_fields():
    d = np.array([[[1.0, 1.0, 3.0, 3.0]], [[0.0, 2.0, 0.0, 2.0]]])
    rep = SmoothnessReport([0, 1], [0, 1 / 3, 2 / 3, 1, 1.0], d)
    np.testing.assert_allclose(rep.stds, [1.0, 1.0])
    assert rep.istd == 1.0 and rep.num_conditions == 2


def test_adjacent_distances():
    x = torch.tensor([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    np.testing.assert_allclose(adjacent_distances(x), [5.0, 0.0])


# ---------------------------------------------------------------- reconstruction metrics


def scalar_metrics(a, b, data_range):
    """Loop-based MSE / PSNR / SSIM written independently of the vectorized code."""
    n = len(a)
    mse = sum((a[i] - b[i]) ** 2 for i in range(n)) / n
    psnr = math.inf if mse == 0 else 10 * math.log10(data_range ** 2 / mse)
    side = int(round(math.sqrt(n)))
    size = min(11, side)
    size = size if size % 2 else size - 1
    w1 = [math.exp(-((k - (size - 1) / 2) ** 2) / (2 * 1.5 ** 2)) for k in range(size)]
    total = sum(w1)
    w1 = [v / total for v in w1]
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for r0 in range(side - size + 1):
        for q0 in range(side - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(size):
                for j in range(size):
                    w = w1[i] * w1[j]
                    u, v = a[(r0 + i) * side + q0 + j], b[(r0 + i) * side + q0 + j]
                    mx += w * u
                    my += w * v
                    sxx += w * u * u
                    syy += w * v * v
                    sxy += w * u * v
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return mse, psnr, sum(vals) / len(vals)


def test_recon_identity():
    x = np.random.default_rng(0).random((3, 64))
    rep = recon_metrics(x, x)
    assert np.all(rep.mse == 0) and np.all(np.isinf(rep.psnr)) and np.all(rep.ssim == 1.0)


def test_recon_constant_shift_gives_psnr_20():
    x = np.random.default_rng(1).random((4, 64)) * 0.9
    rep = recon_metrics(x, x + 0.1)
    np.testing.assert_allclose(rep.mse, 0.01, rtol=1e-12)
    np.testing.assert_allclose(rep.psnr, 20.0, rtol=1e-12)


def test_recon_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((5, 64)), rng.random((5, 64))
    rep = recon_metrics(a, b, data_range=1.0)
    for i in range(5):
        mse, psnr, s = scalar_metrics(list(a[i]), list(b[i]), 1.0)
        assert abs(rep.mse[i] - mse) < 1e-9
        assert abs(rep.psnr[i] - psnr) < 1e-9
        assert abs(rep.ssim[i] - s) < 1e-9


def test_recon_shape_mismatch():
    with pytest.raises(ValueError):
        recon_metrics(np.zeros((2, 4)), np.zeros((3, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 80))
def test_ssim_bounds_and_symmetry(seed, dim):
    rng = np.random.default_rng(seed)
    x, y = rng.random(dim), rng.random(dim)
    s = ssim(x, y)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(y, x), abs=1e-12)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- MMD


def analytic_mmd(delta, s, h, d):
    """Population MMD^2 between N(mu1, s^2 I) and N(mu2, s^2 I), Gaussian kernel of width h."""
    c = (h * h / (h * h + 2 * s * s)) ** (d / 2)
    return 2 * c * (1 - math.exp(-delta ** 2 / (2 * (h * h + 2 * s * s))))


def test_mmd_identical_sets_near_zero():
    x = np.random.default_rng(0).standard_normal((500, 2))
    assert abs(mmd_quality(x, x)) < 5e-3


def test_mmd_matches_analytic_gaussians():
    rng = np.random.default_rng(1)
    values = []
    for delta in (3.0, 1.5, 0.5):
        x = rng.standard_normal((2000, 2))
        y = rng.standard_normal((2000, 2)) + np.array([delta, 0.0])
        est = mmd_quality(x, y, bandwidth=1.0)
        assert est == pytest.approx(analytic_mmd(delta, 1.0, 1.0, 2), abs=0.02)
        values.append(est)
    assert values[0] > values[1] > values[2] > 0


def test_mmd_permutation_centered_at_zero():
    rng = np.random.default_rng(3)
    pool = rng.standard_normal((400, 2))
    ests = []
    for _ in range(60):
        p = rng.permutation(400)
        ests.append(mmd_quality(pool[p[:200]], pool[p[200:]], bandwidth=1.0))
    ests = np.array(ests)
    assert abs(ests.mean()) < 3 * ests.std() / np.sqrt(len(ests)) + 1e-4


def test_mmd_errors():
    x = np.zeros((5, 2))
    with pytest.raises(ValueError):
        mmd_quality(x, x, bandwidth=0.0)
    with pytest.raises(ValueError):
        mmd_quality(x[:1], x)


# ---------------------------------------------------------------- trend, editing, paired report


def test_step_ratio_trend_linear_model_is_exact():
    # eps = 0 gives x0_hat = x_t / sqrt(ab_t): one-step ratio is sqrt(1-ab_t)/sqrt(ab_t) exactly
    sch = make_linear_schedule(50, 1e-4, 0.2)
    x0 = torch.randn(16, 3, dtype=torch.float64)
    zero = lambda x, t, c=None: torch.zeros_like(x)  # noqa: E731
    steps = [5, 20, 45]
    tr = step_ratio_trend(sch, zero, x0, None, steps, mode="one-step")
    ab = sch.alpha_bars_ext[steps]
    np.testing.assert_allclose(tr.ratios, np.sqrt(1 - ab) / np.sqrt(ab), rtol=1e-9)
    np.testing.assert_allclose(tr.scale, np.sqrt(1 - ab))


def test_step_ratio_trend_rejects_bad_input(schedule):
    with pytest.raises(ValueError):
        step_ratio_trend(schedule, identity_eps, torch.zeros(2, 2), None, [0])
    with pytest.raises(ValueError):
        step_ratio_trend(schedule, identity_eps, torch.zeros(2, 2), None, [3], mode="bogus")


def test_off_object_change_ignores_object_pixels():
    src = np.zeros((1, 64))
    src[0, 27] = 1.0  # single pixel at (3, 3); mask is rows/cols 2..4
    edited = src.copy()
    edited[0, 18:21] = 0.5  # inside the dilated box
    assert off_object_change(edited, src)[0] == 0.0
    edited[0, 0] = 0.55  # corner pixel, outside
    assert off_object_change(edited, src)[0] == pytest.approx(0.55 / 55)


def test_paired_report_reflexive(schedule, tmp_path):
    model = small_model(2, dtype=torch.float32)
    data = np.random.default_rng(0).standard_normal((50, 2))
    held = torch.tensor(data[:6], dtype=torch.float32)
    rep = paired_report(model, model, schedule, seed=1, conditions=[0, 1], data=data, held_out=held,
                        held_out_labels=[0, 1, 2, 0, 1, 2], mmd_samples=20, recon_steps=(5, 10),
                        nti_kwargs={"inner_iters": 2}, num_steps=10)
    names = [r[0] for r in rep.rows]
    assert names == ["istd", "mmd", "ddim_mse_5", "ddim_mse_10", "ddim_guided_mse", "nti_mse"]
    assert all(rep.get(n)[2] == 1.0 for n in names)
    rep.write(tmp_path)
    lines = (tmp_path / "paired.csv").read_text().splitlines()
    assert lines[0] == "metric,smooth,baseline,ratio" and len(lines) == 7
    assert "istd" in (tmp_path / "paired.txt").read_text()


def test_paired_report_rejects_mismatched_schedules(schedule):
    model = small_model(2, dtype=torch.float32)
    with pytest.raises(ValueError):
        paired_report(model, model, schedule, base_schedule=make_linear_schedule(100, 1e-4, 0.02))


def test_paired_ratio_edge_cases():
    assert PairedReport.ratio(0.0, 0.0) == 1.0
    assert PairedReport.ratio(1.0, 0.0) == math.inf
    assert PairedReport.ratio(1.0, 4.0) == 0.25


def test_sample_mmd_is_seeded(schedule):
    model = small_model(2, dtype=torch.float32)
    data = np.random.default_rng(0).standard_normal((30, 2))
    assert sample_mmd(schedule, model, data, 30, seed=4, num_steps=5) == sample_mmd(schedule, model, data, 30,
                                                                                     seed=4, num_steps=5)
