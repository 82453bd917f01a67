"""Raster-stack data model shared by every stage.

Stacks are plain numpy arrays with a fixed axis order:

* feature stacks ``(T, H, W, F)``
* probability / energy stacks ``(T, H, W, K)``
* label stacks ``(T, H, W)`` of integer class indices

Class order is fixed by a :class:`ClassSet` and indexes every matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_CLASSES = (
    "burnt_pasture",
    "clean_pasture",
    "shrubby_pasture",
    "water",
    "forest",
)

DEFAULT_FLOOR = 1e-12
PROB_SUM_TOL = 1e-9


class NumericalError(ArithmeticError):
    """A numerical procedure produced non-finite or singular results."""


@dataclass(frozen=True)
class ClassSet:
    names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 1:
            raise ValueError("class set must contain at least one class")
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; known: {', '.join(self.names)}") from None

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ClassSet":
        return cls(tuple(n.strip() for n in names))


def _first_bad_index(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def check_probabilities(p: np.ndarray, tol: float = PROB_SUM_TOL) -> None:
    """Raise ``ValueError`` unless ``p`` is a valid ``(T, H, W, K)`` probability stack."""
    if p.ndim != 4:
        raise ValueError(f"probability stack must be 4-D (T, H, W, K), got shape {p.shape}")
    bad = ~np.isfinite(p)
    if bad.any():
        t, r, c, k = _first_bad_index(bad)
        raise ValueError(f"non-finite probability at t={t}, pixel=({r}, {c}), class={k}")
    if (p < 0).any():
        t, r, c, k = _first_bad_index(p < 0)
        raise ValueError(f"negative probability at t={t}, pixel=({r}, {c}), class={k}")
    dev = np.abs(p.sum(axis=-1) - 1.0)
    if (dev > tol).any():
        t, r, c = _first_bad_index(dev > tol)
        raise ValueError(f"probabilities at t={t}, pixel=({r}, {c}) do not sum to 1")


def check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.ndim != 3:
        raise ValueError(f"label stack must be 3-D (T, H, W), got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")


def prob_to_energy(p: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Unary energies ``-ln(max(p, floor))``.

    Works on any array whose last axis is the class axis. Minimizing the
    summed energy over labels is the same as maximizing the product of the
    per-pixel probabilities.
    """
    if not 0.0 < floor <= 1e-6:
        raise ValueError(f"floor must lie in (0, 1e-6], got {floor}")
    p = np.asarray(p, dtype=np.float64)
    bad = ~np.isfinite(p)
    if bad.any():
        idx = _first_bad_index(bad)
        if len(idx) == 4:
            t, r, c, k = idx
            raise ValueError(f"non-finite probability at t={t}, pixel=({r}, {c}), class={k}")
        raise ValueError(f"non-finite probability at index {idx}")
    return -np.log(np.maximum(p, floor))


def argmax_labels(p: np.ndarray) -> np.ndarray:
    """Per-pixel most probable class; ties go to the lowest class index."""
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return np.argmax(np.asarray(p), axis=-1).astype(np.int64)
