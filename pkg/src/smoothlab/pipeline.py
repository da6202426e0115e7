"""Assemble schedule, data and model from a ``RunConfig`` and run training."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, ScheduleConfig, prepare_run_dir
from .datasets import DatasetSpec, generate, num_conditions
from .denoiser import Denoiser
from .schedule import NoiseSchedule, make_linear_schedule
from .training import train

log = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final"


def build_schedule(cfg: ScheduleConfig) -> NoiseSchedule:
    try:
        return make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc


def load_dataset(spec: DatasetSpec) -> tuple[torch.Tensor, torch.Tensor]:
    try:
        x, labels = generate(spec)
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    return torch.from_numpy(x), torch.from_numpy(labels)


def check_consistency(config: RunConfig, data: torch.Tensor):
    if config.denoiser.data_dim != data.shape[-1]:
        raise ConfigError(f"denoiser.data_dim is {config.denoiser.data_dim} but the dataset has "
                          f"dimension {data.shape[-1]}")
    if config.denoiser.num_conditions != num_conditions(config.dataset):
        raise ConfigError(f"denoiser.num_conditions is {config.denoiser.num_conditions} but the dataset "
                          f"has {num_conditions(config.dataset)} labels")


def build_model(config: RunConfig) -> Denoiser:
    """Fresh model seeded by ``config.seed``, or the weights of ``init_checkpoint``."""
    if config.init_checkpoint:
        path = Path(config.init_checkpoint)
        if not (path / "manifest.txt").exists():
            raise ConfigError(f"init_checkpoint: no checkpoint at {path}")
        model, _, _ = load_checkpoint(path)
        if vars(model.config) != vars(config.denoiser):
            raise ConfigError(f"init_checkpoint: {path} was trained with denoiser {vars(model.config)}")
        return model
    torch.manual_seed(config.seed)
    return Denoiser(config.denoiser)


def run_training(config: RunConfig, run_dir: str | Path | None = None):
    """Train per ``config`` into a fresh run directory.

    Returns ``(model, schedule, metrics, run_dir)``; the final weights are
    under ``checkpoints/final``.
    """
    schedule = build_schedule(config.schedule)
    data = load_dataset(config.dataset)
    check_consistency(config, data[0])
    run_dir = prepare_run_dir(config, run_dir)
    model = build_model(config)
    log.info("training lam=%g for %d iterations into %s", config.train.lam, config.train.total_iterations, run_dir)
    model, metrics, ema = train(config.train, data, model, schedule, run_dir=run_dir)
    save_checkpoint(run_dir / "checkpoints" / FINAL_CHECKPOINT, model, schedule,
                    {"train.lam": config.train.lam, "ema.a": ema.a})
    return model, schedule, metrics, run_dir
