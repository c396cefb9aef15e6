"""Procedural desk-scale classification datasets.

Every generator is deterministic given its seed, produces single-channel
16x16 images with values in ``[0, 1]``, and balances the classes of every
split to within one sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Tuple, Union

import numpy as np

from . import checkpoint

SIZE = 16


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    name: str
    train: Split
    val: Split
    test: Split
    num_classes: int

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.x.shape[1:])


def _grid():
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return yy, xx


def _draw_shapes16(label: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid()
    r = rng.uniform(3.0, 5.5)
    cy, cx = rng.uniform(r + 0.5, SIZE - r - 1.5, size=2)
    intensity = rng.uniform(0.6, 1.0)
    if label == 0:      # filled square
        mask = (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    elif label == 1:    # filled disc
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:               # cross
        half = max(r * 0.3, 0.8)
        mask = ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= r)) | \
               ((np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= r))
    img = mask * intensity + rng.normal(0.0, 0.12, size=(SIZE, SIZE))
    return img


def _draw_rings(label: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid()
    cy, cx = rng.uniform(6.5, 8.5, size=2)
    radius = rng.uniform(2.0, 3.5) if label == 0 else rng.uniform(5.0, 6.5)
    width = rng.uniform(0.8, 1.4)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img = (np.abs(dist - radius) <= width) * rng.uniform(0.6, 1.0)
    return img + rng.normal(0.0, 0.12, size=(SIZE, SIZE))


def _draw_parity_patch(label: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid()
    period = 2 if label == 0 else 4
    oy, ox = rng.integers(0, period, size=2)
    cells = ((yy + oy) // (period // 2) + (xx + ox) // (period // 2)) % 2
    img = cells * rng.uniform(0.4, 0.9)
    return img + rng.normal(0.0, 0.15, size=(SIZE, SIZE))


GENERATORS: Dict[str, Tuple[Callable, int]] = {
    "shapes16": (_draw_shapes16, 3),
    "rings": (_draw_rings, 2),
    "parity-patch": (_draw_parity_patch, 2),
}


def _make_split(draw: Callable, num_classes: int, n: int, rng: np.random.Generator) -> Split:
    labels = rng.permutation(np.arange(n) % num_classes)
    x = np.empty((n, 1, SIZE, SIZE), dtype=np.float32)
    for i, label in enumerate(labels):
        x[i, 0] = np.clip(draw(int(label), rng), 0.0, 1.0)
    return Split(x, labels.astype(np.int64))


def generate_dataset(name: str, seed: int = 0, sizes: Tuple[int, int, int] = (2000, 500, 500)
                     ) -> Dataset:
    """Deterministic train/val/test splits of a named procedural task.

    :param name: ``"shapes16"``, ``"rings"`` or ``"parity-patch"``
    :param sizes: number of train, validation and test samples
    """
    if name not in GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}")
    draw, c = GENERATORS[name]
    splits = [_make_split(draw, c, n, np.random.default_rng([seed, k]))
              for k, n in enumerate(sizes)]
    return Dataset(name, *splits, num_classes=c)


def save_dataset(ds: Dataset, directory: Union[str, Path]) -> Path:
    """Write a dataset as ``data.dnft`` with arrays ``<split>.x`` / ``<split>.y``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for split in ("train", "val", "test"):
        s = getattr(ds, split)
        arrays[f"{split}.x"] = s.x
        arrays[f"{split}.y"] = s.y.astype(np.float32)
    checkpoint.save(directory / "data.dnft", arrays)
    return directory


def load_dataset(directory: Union[str, Path], name: str = "raw") -> Dataset:
    """Read a dataset written by :func:`save_dataset` (labels stored as floats)."""
    arrays = checkpoint.load(Path(directory) / "data.dnft")
    splits = []
    for split in ("train", "val", "test"):
        try:
            x, y = arrays[f"{split}.x"], arrays[f"{split}.y"]
        except KeyError as exc:
            raise ValueError(f"dataset directory lacks array {exc.args[0]!r}") from None
        splits.append(Split(x.astype(np.float32), np.rint(y).astype(np.int64)))
    num_classes = int(max(s.y.max() for s in splits)) + 1
    return Dataset(name, *splits, num_classes=num_classes)


def get_dataset(name: str, seed: int = 0, sizes: Tuple[int, int, int] = (2000, 500, 500)) -> Dataset:
    """A named procedural dataset, or a directory written by :func:`save_dataset`."""
    if name in GENERATORS:
        return generate_dataset(name, seed, sizes)
    if Path(name).is_dir():
        return load_dataset(name, Path(name).name)
    raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)} "
                     "or give a dataset directory")
