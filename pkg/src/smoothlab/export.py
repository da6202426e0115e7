"""Sample exports: binary PGM grids for 8x8 images, CSV for point data."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def image_grid(images, cols: int | None = None, side: int = 8, pad: int = 1) -> np.ndarray:
    """Tile ``(N, side*side)`` images in ``[0, 1]`` into one array, ``pad`` pixels apart."""
    images = np.clip(np.asarray(images, dtype=np.float64).reshape(-1, side, side), 0.0, 1.0)
    n = len(images)
    cols = cols or min(n, 8)
    rows = -(-n // cols)
    grid = np.zeros((rows * (side + pad) + pad, cols * (side + pad) + pad))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (side + pad), pad + c * (side + pad)
        grid[y:y + side, x:x + side] = img
    return grid


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) of a 2-D array in ``[0, 1]``."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-D array")
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w) / maxval


def write_points(path: str | Path, samples, labels=None) -> None:
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"x{i}" for i in range(samples.shape[1])]
        writer.writerow(header + (["label"] if labels is not None else []))
        for i, row in enumerate(samples):
            writer.writerow([repr(float(v)) for v in row] + ([int(labels[i])] if labels is not None else []))


def read_points(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if header and header[-1] == "label":
        return np.array([[float(v) for v in r[:-1]] for r in body]), np.array([int(r[-1]) for r in body])
    return np.array([[float(v) for v in r] for r in body]), None


def write_samples(path_stem: str | Path, samples, image_side: int | None = None, labels=None) -> list[Path]:
    """CSV always; a PGM grid as well when the samples are square images."""
    path_stem = Path(path_stem)
    paths = [path_stem.with_suffix(".csv")]
    write_points(paths[0], samples, labels)
    if image_side:
        paths.append(path_stem.with_suffix(".pgm"))
        write_pgm(paths[1], image_grid(samples, side=image_side))
    return paths
