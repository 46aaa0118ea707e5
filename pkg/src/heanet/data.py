"""Resolve ``--data`` arguments to dataset splits.

A data argument is either a directory laid out as
``root/<split>/<class>/<file>`` or a synthetic description::

    synthetic                       # sphere/cube/torus, 300 train / 60 test, N=256
    synthetic-parts                 # cube-face 6-part segmentation, same scale
    synthetic:shapes=sphere+cube,train=100,test=20,points=128,seed=3

Synthetic keys: ``shapes`` (``+``-separated), ``train``, ``test`` (cloud
counts), ``points``, ``seed``, ``noise``, ``stretch`` (per-axis scale
jitter) and ``parts`` (0/1, emit per-point face labels).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Optional

from .exceptions import ConfigError, DataError
from .pcio import SHAPES, Dataset, load_dataset_dir, make_synthetic_dataset


@dataclass(frozen=True)
class SyntheticSource:
    shapes: tuple = ("sphere", "cube", "torus")
    train: int = 300
    test: int = 60
    points: int = 256
    seed: int = 0
    noise: float = 0.01
    stretch: float = 0.25
    parts: bool = False

    def load(self, split: str) -> Dataset:
        count = self.train if split == "train" else self.test
        return make_synthetic_dataset(self.shapes, count, self.points, self.noise, self.seed, split,
                                      self.parts, self.stretch)

    def describe(self) -> str:
        keys = [f"shapes={'+'.join(self.shapes)}"]
        keys += [f"{f.name}={int(getattr(self, f.name)) if f.name == 'parts' else getattr(self, f.name)}"
                 for f in fields(self) if f.name != "shapes"]
        return "synthetic:" + ",".join(keys)


PRESETS = {
    "synthetic": SyntheticSource(),
    "synthetic-parts": SyntheticSource(shapes=("cube",), parts=True),
}


def _parse_synthetic(text: str) -> SyntheticSource:
    head, _, rest = text.partition(":")
    if head not in PRESETS:
        raise ConfigError(f"unknown synthetic preset {head!r}; choose from {', '.join(PRESETS)}")
    src = PRESETS[head]
    if not rest:
        return src
    casts = {"train": int, "test": int, "points": int, "seed": int, "noise": float, "stretch": float}
    updates, bad = {}, []
    for item in rest.split(","):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            bad.append(item)
        elif key == "shapes":
            shapes = tuple(s for s in value.split("+") if s)
            unknown = [s for s in shapes if s not in SHAPES]
            if unknown or not shapes:
                bad.append(f"shapes={value} (known: {'+'.join(SHAPES)})")
            updates["shapes"] = shapes
        elif key == "parts":
            if value not in ("0", "1"):
                bad.append(f"parts={value}")
            updates["parts"] = value == "1"
        elif key in casts:
            try:
                updates[key] = casts[key](value)
            except ValueError:
                bad.append(f"{key}={value}")
        else:
            bad.append(f"unknown key {key!r}")
    if bad:
        raise ConfigError(f"bad synthetic data description: {'; '.join(bad)}")
    src = replace(src, **updates)
    if src.train < 1 or src.test < 1 or src.points < 8:
        raise ConfigError("synthetic data needs train, test >= 1 and points >= 8")
    return src


def resolve(data: str) -> Optional[SyntheticSource]:
    """Synthetic source for a synthetic description, ``None`` for a directory."""
    if data.split(":", 1)[0] in PRESETS:
        return _parse_synthetic(data)
    if not os.path.isdir(data):
        raise DataError(f"data {data!r} is neither a synthetic description nor a directory")
    return None


def load_split(data: str, split: str, n_points: Optional[int] = None, seed: int = 0) -> Dataset:
    """Load one split of a data argument.

    Directory clouds are resampled to ``n_points`` (seeded); synthetic
    clouds are generated at their own ``points`` size.
    """
    src = resolve(data)
    if src is not None:
        return src.load(split)
    return load_dataset_dir(data, split, n_points, seed)
