"""Deterministic synthetic datasets: 2-D point clouds and 8x8 shape images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPE_CLASSES = ("square", "circle", "cross")
SHAPE_RADII = (2.0, 3.0)
_SUPERSAMPLE = 8


@dataclass
class DatasetSpec:
    """Parameters of one synthetic dataset.

    Shapes are 8x8 images in ``[0, 1]``.  The swiss roll is standardized per
    coordinate; the mixture is left in its native scale so its modes sit
    exactly on the circle of ``radius`` (see ``mixture_means``).
    """
    kind: str = "gaussian-mixture"
    size: int = 4096
    seed: int = 0
    modes: int = 8
    radius: float = 2.0
    mode_std: float = 0.1
    weights: list[float] | None = None
    roll_noise: float = 0.05
    roll_classes: int = 4
    shapes: list[str] = field(default_factory=lambda: list(SHAPE_CLASSES))


def mixture_means(modes: int, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def _gaussian_mixture(spec: DatasetSpec, rng: np.random.Generator):
    weights = np.full(spec.modes, 1.0 / spec.modes) if spec.weights is None else np.asarray(spec.weights, float)
    if weights.shape != (spec.modes,) or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
        raise ValueError("mixture weights must be a probability vector with one entry per mode")
    labels = rng.choice(spec.modes, size=spec.size, p=weights)
    x = mixture_means(spec.modes, spec.radius)[labels] + spec.mode_std * rng.standard_normal((spec.size, 2))
    return x, labels


def _swiss_roll(spec: DatasetSpec, rng: np.random.Generator):
    s = 1.5 * np.pi * (1 + 2 * rng.random(spec.size))
    x = np.stack([s * np.cos(s), s * np.sin(s)], axis=-1) + spec.roll_noise * rng.standard_normal((spec.size, 2))
    std = x.std(0)
    x = (x - x.mean(0)) / np.where(std > 0, std, 1.0)
    edges = np.linspace(1.5 * np.pi, 4.5 * np.pi, spec.roll_classes + 1)[1:-1]
    return x, np.digitize(s, edges)


def shape_positions(radius: float) -> list[tuple[float, float]]:
    lo, hi = (2.5, 5.5) if radius < 2.5 else (3.0, 5.0)
    return [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]


def _coverage(kind: str, cy: float, cx: float, r: float) -> np.ndarray:
    n = 8 * _SUPERSAMPLE
    c = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(c, c, indexing="ij")
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if kind == "square":
        inside = (dy <= 0.85 * r) & (dx <= 0.85 * r)
    elif kind == "circle":
        inside = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "cross":
        arm = 0.35 * r
        inside = ((dy <= arm) & (dx <= r)) | ((dx <= arm) & (dy <= r))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return inside.reshape(8, _SUPERSAMPLE, 8, _SUPERSAMPLE).mean(axis=(1, 3))


def shape_templates(shapes=SHAPE_CLASSES) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every (class, size, position) rendering: ``(images[N, 64], labels, variant ids)``."""
    images, labels, variants = [], [], []
    for label, kind in enumerate(shapes):
        v = 0
        for r in SHAPE_RADII:
            for cy, cx in shape_positions(r):
                images.append(_coverage(kind, cy, cx, r).reshape(-1))
                labels.append(label)
                variants.append(v)
                v += 1
    return np.array(images), np.array(labels), np.array(variants)


def _shapes(spec: DatasetSpec, rng: np.random.Generator):
    images, labels, _ = shape_templates(tuple(spec.shapes))
    idx = rng.integers(len(images), size=spec.size)
    return images[idx], labels[idx]


_GENERATORS = {"gaussian-mixture": _gaussian_mixture, "swiss-roll": _swiss_roll, "shapes-8x8": _shapes}


def generate(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(samples[size, D], labels[size])`` as a pure function of ``spec``."""
    if spec.kind not in _GENERATORS:
        raise ValueError(f"unknown dataset kind {spec.kind!r}; expected one of {sorted(_GENERATORS)}")
    if spec.size < 1:
        raise ValueError("dataset size must be >= 1")
    x, labels = _GENERATORS[spec.kind](spec, np.random.default_rng(spec.seed))
    return x.astype(np.float64), labels.astype(np.int64)


def num_conditions(spec: DatasetSpec) -> int:
    return {"gaussian-mixture": spec.modes, "swiss-roll": spec.roll_classes, "shapes-8x8": len(spec.shapes)}[spec.kind]


def classify_shape(images: np.ndarray, shapes=SHAPE_CLASSES) -> np.ndarray:
    """Label of the nearest rendered template (L2) for each 8x8 image."""
    templates, labels, _ = shape_templates(tuple(shapes))
    images = np.clip(np.asarray(images, dtype=np.float64).reshape(-1, 64), 0.0, 1.0)
    d = ((images[:, None, :] - templates[None]) ** 2).sum(-1)
    return labels[d.argmin(1)]


def object_mask(image: np.ndarray, dilate: int = 1) -> np.ndarray:
    """Boolean 8x8 mask of the object's bounding box grown by ``dilate`` pixels."""
    on = np.asarray(image).reshape(8, 8) > 0.05
    mask = np.zeros((8, 8), dtype=bool)
    if on.any():
        rows, cols = np.where(on)
        mask[max(rows.min() - dilate, 0):rows.max() + dilate + 1, max(cols.min() - dilate, 0):cols.max() + dilate + 1] = True
    return mask
