"""Spatial and temporal compatibility matrices.

Entries are weights in [0, 1] that enter the energy as ``1 - M[a, b]``;
they are not probabilities and rows are never normalized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from stmrf.core import DEFAULT_CLASSES

SPATIAL = "spatial"
FORWARD = "temporal-forward"
BACKWARD = "temporal-backward"
KINDS = (SPATIAL, FORWARD, BACKWARD)

BASE_DAYS = 11
TOLERANCE_FLOOR = 0.05
HIGH = 0.25


@dataclass(frozen=True)
class TransitionMatrix:
    M: np.ndarray
    kind: str = SPATIAL
    gap_days: int | None = None

    def __post_init__(self):
        M = np.array(self.M, dtype=np.float64)
        M.setflags(write=False)
        object.__setattr__(self, "M", M)
        validate(M, self.kind)

    @property
    def K(self) -> int:
        return self.M.shape[0]

    def penalty(self) -> np.ndarray:
        return 1.0 - self.M


def validate(M: np.ndarray, kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown matrix kind {kind!r}")
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise ValueError(f"transition matrix must be square and non-empty, got shape {M.shape}")
    if not np.isfinite(M).all() or (M < 0).any() or (M > 1).any():
        raise ValueError("transition matrix entries must lie in [0, 1]")
    if kind == SPATIAL and not np.array_equal(M, M.T):
        raise ValueError("spatial compatibility matrix must be symmetric")
    if kind != SPATIAL:
        diag = np.diag(M)
        if (diag < M.max(axis=1)).any():
            rows = np.flatnonzero(diag < M.max(axis=1))
            raise ValueError(f"temporal matrix diagonal is not the row maximum in rows {rows.tolist()}")


def potts_matrix(K: int) -> TransitionMatrix:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    return TransitionMatrix(np.eye(K), SPATIAL)


def _check_forward(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValueError(f"forward matrix must be square, got shape {F.shape}")
    if not np.isfinite(F).all() or (F < 0).any() or (F > 1).any():
        raise ValueError("forward matrix entries must lie in [0, 1]")
    return F


def build_tau_pair(F, gap_days: int | None = None) -> tuple[TransitionMatrix, TransitionMatrix]:
    """Backward and forward matrices ``(tau1, tau2)`` from forward compatibilities.

    ``tau2 = F`` weighs a label at ``t`` against its successor at ``t+1``;
    ``tau1 = F.T`` weighs a label at ``t+1`` against its predecessor.
    """
    F = _check_forward(F)
    tau2 = TransitionMatrix(F, FORWARD, gap_days)
    tau1 = TransitionMatrix(F.T, BACKWARD, gap_days)
    return tau1, tau2


def scale_for_gap(tau: TransitionMatrix, gap_days: int, base_days: int = BASE_DAYS) -> TransitionMatrix:
    """Scale off-diagonal entries linearly with the elapsed time, clipped to [0, 1]."""
    if gap_days < 0:
        raise ValueError(f"gap_days must be >= 0, got {gap_days}")
    if base_days <= 0:
        raise ValueError(f"base_days must be > 0, got {base_days}")
    M = tau.M * (gap_days / base_days)
    np.fill_diagonal(M, np.diag(tau.M))
    return TransitionMatrix(np.clip(M, 0.0, 1.0), tau.kind, gap_days)


def tau_pairs_for_gaps(F, gaps: Sequence[int], base_days: int = BASE_DAYS):
    """One gap-scaled ``(tau1, tau2)`` pair per consecutive date gap."""
    _, tau2 = build_tau_pair(F)
    pairs = []
    for gap in gaps:
        scaled = scale_for_gap(tau2, int(gap), base_days)
        pairs.append(build_tau_pair(scaled.M, int(gap)))
    return pairs


def default_study_matrix() -> np.ndarray:
    """Forward compatibilities for the five default classes at the 11-day base gap.

    Class order: burnt, clean, shrubby pasture, water, forest. Rows are the
    class at ``t``, columns the class at ``t+1``.
    """
    f = TOLERANCE_FLOOR
    return np.array(
        [
            # burnt  clean  shrubby water  forest
            [1.00, 0.35, 0.30, f, f],  # burnt: returns to pasture
            [0.30, 1.00, 0.15, f, 0.07],  # clean: may burn, drifts to shrubby
            [0.25, 0.15, 1.00, f, 0.12],  # shrubby: may burn, regrows to forest
            [f, f, f, 1.00, f],  # water: permanently filled
            [0.08, 0.08, 0.08, f, 1.00],  # forest: most consistent
        ]
    )


def study_matrix_violations(F: np.ndarray, classes: Sequence[str] = DEFAULT_CLASSES) -> list[str]:
    """List which trajectory assumptions ``F`` breaks (empty when all hold)."""
    ix = {n: i for i, n in enumerate(classes)}
    b, c, s, w, fo = (ix[n] for n in DEFAULT_CLASSES)
    floor = TOLERANCE_FLOOR
    checks = {
        "pasture can burn": F[c, b] >= HIGH and F[s, b] >= HIGH,
        "burnt returns to pasture": F[b, c] >= HIGH and F[b, s] >= HIGH,
        "shrubby to clean permitted": F[s, c] > floor,
        "clean may become shrubby or forest": F[c, s] > floor and F[c, fo] > floor,
        "forest and water permanent": F[fo, fo] == 1.0 and F[w, w] == 1.0,
        "shrubby regrows to forest faster than clean": F[s, fo] > F[c, fo],
        "tolerance floor everywhere": bool((F >= floor).all()),
        "diagonal is the row maximum": bool((np.diag(F) >= F.max(axis=1)).all()),
    }
    return [name for name, ok in checks.items() if not ok]


def read_matrix_csv(path, classes: Sequence[str]) -> np.ndarray:
    """Read a K x K matrix whose header row lists the class names.

    An optional leading label column (row class names) is accepted.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(x.strip() for x in r)]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    header = [h.strip() for h in rows[0]]
    labelled = len(header) == len(classes) + 1
    if labelled:
        header = header[1:]
    if header != list(classes):
        raise ValueError(f"{path}: header {header} does not match classes {list(classes)}")
    body = rows[1:]
    if len(body) != len(classes):
        raise ValueError(f"{path}: expected {len(classes)} rows, found {len(body)}")
    out = []
    for k, r in enumerate(body):
        cells = [x.strip() for x in r]
        if labelled:
            if cells[0] != classes[k]:
                raise ValueError(f"{path}: row {k} labelled {cells[0]!r}, expected {classes[k]!r}")
            cells = cells[1:]
        if len(cells) != len(classes):
            raise ValueError(f"{path}: row {k} has {len(cells)} values")
        out.append([float(x) for x in cells])
    return np.array(out)


def write_matrix_csv(path, M: np.ndarray, classes: Sequence[str]) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", *classes])
        for name, row in zip(classes, np.asarray(M)):
            w.writerow([name, *(repr(float(x)) for x in row)])
