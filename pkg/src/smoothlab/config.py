"""Run configuration: nested dataclasses, JSON files and ``key=value`` overrides.

Precedence, lowest first: dataclass defaults < config file < ``--set`` overrides.
The resolved config is written to ``<output_dir>/config.json`` before a
command does any work, so every run can be re-executed from that file alone.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datasets import DatasetSpec
from .denoiser import DenoiserConfig
from .training import TrainConfig

RUN_SUBDIRS = ("checkpoints", "reports", "logs")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class EvalConfig:
    istd_conditions: int = 32
    istd_pairs: int = 1
    istd_seed: int = 0
    # "null": every sweep uses the null condition; "labels": cycle through the label ids
    istd_cond: str = "null"
    w: float = 1.0
    num_steps: int = 50
    mmd_samples: int = 2000
    mmd_seed: int = 5
    recon_samples: int = 256
    recon_seed: int = 123
    nti_w: float = 7.5
    nti_inner_iters: int = 10
    nti_inner_lr: float = 1e-2

    def __post_init__(self):
        if self.istd_cond not in ("null", "labels"):
            raise ValueError(f"istd_cond must be 'null' or 'labels', got {self.istd_cond!r}")
        for name in ("istd_conditions", "istd_pairs", "num_steps", "mmd_samples", "recon_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0  # model initialization; the batch stream uses train.seed
    init_checkpoint: str | None = None  # fine-tune from these weights instead of a fresh init

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field {'.'.join(filter(None, [path, unknown[0]]))!r}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _build(hints[name], value, sub) if dataclasses.is_dataclass(hints[name]) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as JSON, else kept as text)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown field {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown field {key!r}")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    data = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        from_dict(file_data)  # reject unknown fields with the file's own names
        data = _merge(data, file_data)
    return from_dict(apply_overrides(data, list(overrides)))


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for key, value in top.items():
        out[key] = _merge(base[key], value) if isinstance(value, dict) and isinstance(base.get(key), dict) else value
    return out


def prepare_run_dir(config: RunConfig, output_dir: str | Path | None = None) -> Path:
    """Create the fixed run layout and write the resolved config into it."""
    run_dir = Path(output_dir if output_dir is not None else config.output_dir)
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.to_json() + "\n")
    return run_dir
