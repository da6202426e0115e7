"""Manifest + raw-array persistence.

A checkpoint is a directory with ``manifest.txt`` (``key = value`` lines,
JSON-encoded values) and ``arrays.bin`` (little-endian float32 arrays,
concatenated in manifest order).  Array entries appear in the manifest as
``array.<name> = {"shape": [...], "dtype": "float32", "offset": n}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, init_lora
from .schedule import NoiseSchedule

DTYPE = "<f4"


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {json.dumps(value, sort_keys=True)}" for key, value in (meta or {}).items()]
    offset = 0
    with open(path / "arrays.bin", "wb") as fh:
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype=DTYPE)
            fh.write(data.tobytes(order="C"))
            lines.append(f"array.{name} = " + json.dumps({"shape": list(data.shape), "dtype": "float32", "offset": offset}))
            offset += data.nbytes
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    raw = (path / "arrays.bin").read_bytes()
    meta, arrays = {}, {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        value = json.loads(value)
        if key.startswith("array."):
            count = int(np.prod(value["shape"], dtype=np.int64))
            arr = np.frombuffer(raw, dtype=DTYPE, count=count, offset=value["offset"])
            arrays[key[len("array."):]] = arr.reshape(value["shape"]).copy()
        else:
            meta[key] = value
    return arrays, meta


def save_checkpoint(path: str | Path, model: Denoiser, schedule: NoiseSchedule, extra: dict | None = None):
    meta = {"config.denoiser": vars(model.config), "schedule.betas": schedule.betas.tolist()}
    lora = [n for n, p in model.named_parameters() if n.endswith("lora_A")]
    if lora:
        meta["lora.rank"] = int(dict(model.named_parameters())[lora[0]].shape[0])
    meta.update(extra or {})
    arrays = {n: p.detach().cpu().float().numpy() for n, p in model.named_parameters()}
    write_arrays(path, arrays, meta)


def load_checkpoint(path: str | Path, dtype=torch.float32) -> tuple[Denoiser, NoiseSchedule, dict]:
    arrays, meta = read_arrays(path)
    model = Denoiser(DenoiserConfig(**meta["config.denoiser"]))
    if "lora.rank" in meta:
        init_lora(model, meta["lora.rank"], seed=0)
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint {path} is missing entries: {sorted(missing)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    model.to(dtype)
    return model, NoiseSchedule(np.array(meta["schedule.betas"])), meta


def save_inversion(path: str | Path, inv, extra: dict | None = None) -> None:
    """Persist an ``InversionResult`` in the same manifest + raw-array format."""
    groups = inv.groups if inv.groups is not None else torch.arange(inv.x_T.shape[0])
    arrays = {"x_T": inv.x_T, "nulls": inv.null_schedule.nulls, "residuals": inv.residuals,
              "source": inv.source, "groups": groups}
    meta = {"kind": "inversion", "method": inv.method, "w": inv.null_schedule.w, "lr_halvings": inv.lr_halvings}
    meta.update(extra or {})
    write_arrays(path, {k: v.detach().cpu().numpy() for k, v in arrays.items()}, meta)


def load_inversion(path: str | Path, dtype=torch.float32):
    """Inverse of ``save_inversion``; returns ``(InversionResult, meta)``."""
    from .inversion import InversionResult, NullSchedule
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "inversion":
        raise ValueError(f"{path} does not hold an inversion result")
    t = {k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()}
    return InversionResult(t["x_T"], NullSchedule(t["nulls"], meta["w"]), t["residuals"], t["source"],
                           meta["method"], t["groups"].long(), lr_halvings=meta["lr_halvings"]), meta
