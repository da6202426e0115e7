"""Smoothness and quality metrics: ISTD, reconstruction metrics, MMD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .sampler import ddim_sample, slerp
from .schedule import NoiseSchedule

DEFAULT_ETAS = tuple(i / 10 for i in range(11))
PSNR_INF = math.inf


@dataclass
class SmoothnessReport:
    conditions: list[int]
    etas: list[float]
    distances: np.ndarray  # (num_conditions, pairs, len(etas) - 1)
    stds: np.ndarray = field(init=False)  # per condition
    istd: float = field(init=False)

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.stds = self.distances.std(axis=-1).mean(axis=-1)
        self.istd = float(self.stds.mean())

    @property
    def num_conditions(self) -> int:
        return len(self.conditions)


def lerp(a, b, eta):
    return (1 - eta) * a + eta * b


def interpolation_latents(a: torch.Tensor, b: torch.Tensor, etas, interp: str = "slerp") -> torch.Tensor:
    """Stack of interpolants, shape ``(len(etas),) + a.shape``."""
    fn = {"slerp": slerp, "linear": lerp}[interp]
    return torch.stack([fn(a, b, float(eta)) for eta in etas])


def latent_pairs(num: int, dim: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """``(num, 2, dim)`` Gaussian latent pairs from a dedicated generator."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(num, 2, dim, generator=gen, dtype=torch.float64).to(dtype)


def adjacent_distances(outputs: torch.Tensor) -> np.ndarray:
    """L2 distances between consecutive outputs along axis 0."""
    flat = outputs.reshape(outputs.shape[0], -1).double()
    return (flat[1:] - flat[:-1]).norm(dim=-1).numpy()


@torch.no_grad()
def compute_istd(schedule: NoiseSchedule, model, conditions, pairs_per_condition: int = 1, seed: int = 0,
                 w: float = 1.0, num_steps: int = 50, etas=DEFAULT_ETAS, interp: str = "slerp",
                 dim: int | None = None, pairs: torch.Tensor | None = None) -> SmoothnessReport:
    """Interpolation standard deviation over a list of condition ids.

    Each condition gets ``pairs_per_condition`` latent pairs; all sweep points
    of all conditions go through one batched sampling run.  The pairs depend
    only on ``seed`` (and the condition's position in the list), so models
    compared under one seed see identical latents.
    """
    etas = list(etas)
    if len(etas) < 2:
        raise ValueError("an interpolation sweep needs at least 2 points")
    conditions = list(conditions)
    if not conditions:
        raise ValueError("no conditions given")
    dim = dim if dim is not None else model.config.data_dim
    dtype = next(model.parameters()).dtype if hasattr(model, "parameters") else torch.float64
    C, P, E = len(conditions), pairs_per_condition, len(etas)
    if pairs is None:
        pairs = latent_pairs(C * P, dim, seed, dtype)
    pairs = pairs.reshape(C, P, 2, dim).to(dtype)
    latents = torch.stack([interpolation_latents(pairs[c, p, 0], pairs[c, p, 1], etas, interp)
                           for c in range(C) for p in range(P)])  # (C*P, E, dim)
    labels = torch.tensor(conditions).repeat_interleave(P * E)
    cond = model.embed(labels) if hasattr(model, "embed") else None
    out, _ = ddim_sample(schedule, model, latents.reshape(-1, dim), cond, w=w, num_steps=num_steps)
    out = out.reshape(C, P, E, -1)
    dist = np.stack([[adjacent_distances(out[c, p]) for p in range(P)] for c in range(C)])
    return SmoothnessReport(conditions, etas, dist)


def mmd_quality(x: torch.Tensor | np.ndarray, y: torch.Tensor | np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel ``exp(-|x-y|^2 / (2 h^2))``.

    ``bandwidth=None`` uses the median pairwise distance of the pooled sample.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("MMD needs at least two samples per set")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([x, y]))
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    def gram(a, b):
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None] - 2 * a @ b.T
        return np.exp(-np.maximum(d2, 0) / (2 * bandwidth ** 2))

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    n, m = len(x), len(y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2 * kxy.mean())


def median_bandwidth(z: np.ndarray, max_points: int = 2000) -> float:
    z = z[:max_points]
    d2 = ((z[:, None, :] - z[None]) ** 2).sum(-1)
    return float(np.sqrt(np.median(d2[np.triu_indices(len(z), 1)])))


SSIM_K1, SSIM_K2, SSIM_SIGMA = 0.01, 0.03, 1.5


@dataclass
class ReconReport:
    mse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray
    data_range: float = 1.0

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def mean_psnr(self) -> float:
        return float(self.psnr.mean())

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())

    def rows(self):
        for i, (m, p, s) in enumerate(zip(self.mse, self.psnr, self.ssim)):
            yield {"index": i, "mse": float(m), "psnr": float(p), "ssim": float(s)}


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _window_size(side: int) -> int:
    # 11 taps as in the usual SSIM setup, shrunk (odd) to fit small inputs
    size = min(11, side)
    return size if size % 2 else size - 1


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the trailing one or two axes."""
    out = np.apply_along_axis(lambda v: np.convolve(v, g, mode="valid"), -1, x)
    if x.ndim >= 2 and x.shape[-2] > 1:
        out = np.apply_along_axis(lambda v: np.convolve(v, g, mode="valid"), -2, out)
    return out


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with a Gaussian window (sigma 1.5, K1=0.01, K2=0.03).

    Square images (``D`` a perfect square) use a 2-D window of up to 11 taps;
    other vectors use the same window in 1-D over the flattened data.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    side = int(round(np.sqrt(x.size)))
    if side * side == x.size and side > 1:
        x, y = x.reshape(side, side), y.reshape(side, side)
    g = gaussian_window(_window_size(x.shape[-1]))
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    vx = _filter_valid(x * x, g) - mx ** 2
    vy = _filter_valid(y * y, g) - my ** 2
    cxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def recon_metrics(originals, reconstructions, data_range: float = 1.0) -> ReconReport:
    """Per-sample MSE, PSNR (``10 log10(range^2 / MSE)``, ``inf`` at zero MSE) and SSIM."""
    a = np.asarray(originals, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    mse = ((a - b) ** 2).mean(-1)
    with np.errstate(divide="ignore"):
        psnr = np.where(mse == 0, PSNR_INF, 10 * np.log10(data_range ** 2 / np.where(mse == 0, 1, mse)))
    s = np.array([1.0 if m == 0 else ssim(u, v, data_range) for u, v, m in zip(a, b, mse)])
    return ReconReport(mse, psnr, s, data_range)


# ---------------------------------------------------------------- trend / editing


@dataclass
class RatioTrend:
    """Finite-difference output/input ratios across steps against ``sqrt(1 - ab_t)``."""
    steps: list[int]
    ratios: np.ndarray
    scale: np.ndarray
    mode: str

    @property
    def correlation(self) -> float:
        return float(np.corrcoef(self.ratios, self.scale)[0, 1])


@torch.no_grad()
def _sample_from(schedule: NoiseSchedule, model, x_t: torch.Tensor, t: int, cond, num_steps: int) -> torch.Tensor:
    """Deterministic DDIM from step ``t`` down to 0 on the stride grid below ``t``."""
    from .sampler import ddim_step, ddim_timesteps
    seq = [t] + [s for s in ddim_timesteps(schedule.T, num_steps) if s < t]
    for i, tt in enumerate(seq):
        x_t = ddim_step(schedule, model, x_t, tt, cond, t_prev=seq[i + 1] if i + 1 < len(seq) else 0)
    return x_t


@torch.no_grad()
def step_ratio_trend(schedule: NoiseSchedule, model, x0: torch.Tensor, cond: torch.Tensor, steps,
                     h: float = 1e-2, seed: int = 0, mode: str = "sampler", num_steps: int = 50) -> RatioTrend:
    """Mean ``|dx0_hat| / |d eps|`` per step for central differences along random unit directions.

    ``x_t`` is built from ``x0`` and a noise draw; the noise is moved by
    ``+-h u``.  ``mode="sampler"`` takes ``x0_hat`` as the sample the DDIM
    sampler produces from the perturbed ``x_t``; ``mode="one-step"`` takes
    the single-step prediction.
    """
    from .schedule import forward_diffuse, predict_x0
    from .training import svr_direction
    if mode not in ("sampler", "one-step"):
        raise ValueError(f"mode must be 'sampler' or 'one-step', got {mode!r}")
    steps = [int(t) for t in steps]
    for t in steps:
        schedule.check_step(t)
    gen = torch.Generator().manual_seed(seed)
    B, D = x0.shape
    ratios = []
    for t in steps:
        eps = torch.randn(B, D, generator=gen, dtype=torch.float64).to(x0.dtype)
        u = svr_direction(D, gen, B, dtype=x0.dtype)
        tt = torch.full((B,), t)
        outs = []
        for sign in (1.0, -1.0):
            e = eps + sign * h * u
            x_t = forward_diffuse(schedule, x0, e, tt)
            if mode == "sampler":
                outs.append(_sample_from(schedule, model, x_t, t, cond, num_steps))
            else:
                outs.append(predict_x0(schedule, x_t, model(x_t, tt, cond), tt))
        ratios.append(float(((outs[0] - outs[1]).double().norm(dim=-1) / (2 * h)).mean()))
    scale = np.sqrt(1 - schedule.alpha_bars_ext[steps])
    return RatioTrend(steps, np.array(ratios), scale, mode)


def off_object_change(edited, sources) -> np.ndarray:
    """Per-image mean absolute change over pixels outside the source object's (dilated) box."""
    from .datasets import object_mask
    edited = np.asarray(edited, dtype=np.float64).reshape(len(edited), -1)
    sources = np.asarray(sources, dtype=np.float64).reshape(len(sources), -1)
    out = []
    for e, s in zip(edited, sources):
        keep = ~object_mask(s).reshape(-1)
        out.append(np.abs(e - s)[keep].mean() if keep.any() else 0.0)
    return np.array(out)


# ---------------------------------------------------------------- paired report


@dataclass
class PairedReport:
    rows: list[tuple[str, float, float]]  # (metric, smooth, baseline)

    @staticmethod
    def ratio(smooth: float, base: float) -> float:
        if smooth == base:
            return 1.0
        return smooth / base if base != 0 else math.inf

    def get(self, metric: str) -> tuple[float, float, float]:
        for name, s, b in self.rows:
            if name == metric:
                return s, b, self.ratio(s, b)
        raise KeyError(metric)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("metric,smooth,baseline,ratio\n")
            for name, s, b in self.rows:
                fh.write(f"{name},{s!r},{b!r},{self.ratio(s, b)!r}\n")

    def table(self) -> str:
        lines = [f"{'metric':<22}{'smooth':>12}{'baseline':>12}{'ratio':>9}"]
        for name, s, b in self.rows:
            lines.append(f"{name:<22}{s:>12.5g}{b:>12.5g}{self.ratio(s, b):>9.3f}")
        return "\n".join(lines)

    def write(self, directory):
        from pathlib import Path
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_csv(directory / "paired.csv")
        (directory / "paired.txt").write_text(self.table() + "\n")


@torch.no_grad()
def sample_mmd(schedule: NoiseSchedule, model, data, num: int, seed: int, cond_id=None, w: float = 1.0,
               num_steps: int = 50) -> float:
    """MMD between ``num`` generated samples (seeded latents) and the first ``num`` data points."""
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(num, model.config.data_dim, generator=gen, dtype=torch.float64).to(dtype)
    cond_id = model.null_id if cond_id is None else cond_id
    out, _ = ddim_sample(schedule, model, z, model.embed([cond_id] * num), w=w, num_steps=num_steps)
    return mmd_quality(out.numpy(), np.asarray(data)[:num])


def recon_sweep(schedule: NoiseSchedule, model, x0: torch.Tensor, labels=None, steps=(10, 20, 50),
                nti_w: float = 7.5, nti_kwargs: dict | None = None) -> dict[str, float]:
    """Round-trip MSEs: unconditional plain DDIM per step count, and (with labels)
    guided plain-DDIM vs NTI reconstruction at ``nti_w``."""
    from .inversion import ddim_inversion_result, nti_invert, reconstruct
    x0 = x0.to(next(model.parameters()).dtype)
    out = {}
    null = model.embed([model.null_id] * len(x0)).detach()
    for n in steps:
        inv = ddim_inversion_result(schedule, model, x0, null, w=1.0, num_steps=n)
        out[f"ddim_mse_{n}"] = float(recon_metrics(x0, reconstruct(schedule, model, inv, null)).mse.mean())
    if labels is not None:
        cond = model.embed(labels).detach()
        kw = dict(nti_kwargs or {})
        plain = ddim_inversion_result(schedule, model, x0, cond, w=nti_w, num_steps=max(steps))
        nti = nti_invert(schedule, model, x0, cond, w=nti_w, num_steps=max(steps), **kw)
        out["ddim_guided_mse"] = float(recon_metrics(x0, reconstruct(schedule, model, plain, cond)).mse.mean())
        out["nti_mse"] = float(recon_metrics(x0, reconstruct(schedule, model, nti, cond)).mse.mean())
    return out


def paired_report(model_smooth, model_base, schedule: NoiseSchedule, seed: int = 0, *,
                  base_schedule: NoiseSchedule | None = None, conditions=None, data=None, held_out=None,
                  held_out_labels=None, mmd_samples: int = 2000, recon_steps=(10, 20, 50), nti_w: float = 7.5,
                  nti_kwargs: dict | None = None, num_steps: int = 50, w: float = 1.0) -> PairedReport:
    """Smooth-vs-baseline table under shared seeds: ISTD, MMD and reconstruction MSEs.

    ``conditions`` defaults to 32 sweeps under the null condition.  MMD needs
    ``data``; reconstruction rows need ``held_out`` (and ``held_out_labels``
    for the guided / NTI rows).
    """
    if base_schedule is not None and not np.array_equal(base_schedule.betas, schedule.betas):
        raise ValueError("smooth and baseline models were given different schedules")
    rows = []
    conds = list(conditions) if conditions is not None else [model_smooth.null_id] * 32
    s = compute_istd(schedule, model_smooth, conds, seed=seed, w=w, num_steps=num_steps)
    b = compute_istd(schedule, model_base, conds, seed=seed, w=w, num_steps=num_steps)
    rows.append(("istd", s.istd, b.istd))
    if data is not None:
        rows.append(("mmd", *(sample_mmd(schedule, m, data, mmd_samples, seed, w=w, num_steps=num_steps)
                              for m in (model_smooth, model_base))))
    if held_out is not None:
        x0 = torch.as_tensor(held_out)
        rs = recon_sweep(schedule, model_smooth, x0, held_out_labels, recon_steps, nti_w, nti_kwargs)
        rb = recon_sweep(schedule, model_base, x0, held_out_labels, recon_steps, nti_w, nti_kwargs)
        rows.extend((k, rs[k], rb[k]) for k in rs)
    return PairedReport(rows)
