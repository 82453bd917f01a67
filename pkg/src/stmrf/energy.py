"""Energy of a labeling under the spatio-temporal MRF.

    U = sum_i unary_i(y_i)
        + beta_sp   * sum_{i~j spatial} (1 - delta(y_i, y_j))
        + beta_temp * sum_{links t -> t+1} [(1 - tau2(y_t, y_t+1)) + (1 - tau1(y_t+1, y_t))]

Spatial edges are the unordered 4-neighbour pairs within one date. Every
temporal link contributes both of its directed terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from stmrf.core import check_labels
from stmrf.transitions import (
    BACKWARD,
    FORWARD,
    SPATIAL,
    TransitionMatrix,
    build_tau_pair,
    potts_matrix,
)

TauPair = tuple[TransitionMatrix, TransitionMatrix]


@dataclass
class MrfProblem:
    unary: np.ndarray
    delta: TransitionMatrix
    tau_pairs: Sequence[TauPair] = field(default_factory=list)
    beta_sp: float = 1.0
    beta_temp: float = 1.0

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        if self.unary.ndim != 4:
            raise ValueError(f"unary must be (T, H, W, K), got {self.unary.shape}")
        if not np.isfinite(self.unary).all() or (self.unary < 0).any():
            raise ValueError("unary energies must be finite and >= 0")
        T, _, _, K = self.unary.shape
        if self.beta_sp < 0 or self.beta_temp < 0:
            raise ValueError("beta weights must be >= 0")
        if self.delta.kind != SPATIAL or self.delta.K != K:
            raise ValueError("delta must be a spatial K x K matrix")
        self.tau_pairs = list(self.tau_pairs)
        if len(self.tau_pairs) != T - 1:
            raise ValueError(f"need {T - 1} tau pairs for {T} dates, got {len(self.tau_pairs)}")
        for tau1, tau2 in self.tau_pairs:
            if tau1.kind != BACKWARD or tau2.kind != FORWARD:
                raise ValueError("tau pairs must be (backward, forward)")
            if tau1.K != K or tau2.K != K:
                raise ValueError("tau matrices must be K x K")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.unary.shape

    def spatial_factor(self) -> np.ndarray:
        """Pairwise cost ``beta_sp * (1 - delta)`` of a spatial edge."""
        return self.beta_sp * (1.0 - self.delta.M)

    def temporal_factors(self) -> list[np.ndarray]:
        """Per gap, cost ``psi[a, b]`` of label ``a`` at ``t`` and ``b`` at ``t+1``."""
        return [
            self.beta_temp * ((1.0 - tau2.M) + (1.0 - tau1.M).T) for tau1, tau2 in self.tau_pairs
        ]

    def with_betas(self, beta_sp=None, beta_temp=None) -> "MrfProblem":
        return MrfProblem(
            self.unary,
            self.delta,
            self.tau_pairs,
            self.beta_sp if beta_sp is None else beta_sp,
            self.beta_temp if beta_temp is None else beta_temp,
        )


def potts_problem(unary, beta_sp=1.0, beta_temp=1.0, temporal_potts=True) -> MrfProblem:
    """Convenience constructor: Potts delta and (optionally) Potts tau for every gap."""
    unary = np.asarray(unary, dtype=np.float64)
    T, K = unary.shape[0], unary.shape[-1]
    F = np.eye(K) if temporal_potts else np.ones((K, K))
    return MrfProblem(unary, potts_matrix(K), [build_tau_pair(F) for _ in range(T - 1)], beta_sp, beta_temp)


def unary_energy(labels: np.ndarray, unary: np.ndarray) -> float:
    picked = np.take_along_axis(unary, labels[..., None].astype(np.intp), axis=-1)
    return float(picked.sum())


def spatial_energy(labels: np.ndarray, delta: TransitionMatrix, beta_sp: float) -> float:
    labels = np.asarray(labels)
    pen = 1.0 - delta.M
    horiz = pen[labels[:, :, :-1], labels[:, :, 1:]].sum()
    vert = pen[labels[:, :-1, :], labels[:, 1:, :]].sum()
    return float(beta_sp * (horiz + vert))


def temporal_energy(labels: np.ndarray, tau_pairs: Sequence[TauPair], beta_temp: float) -> float:
    labels = np.asarray(labels)
    if len(tau_pairs) != labels.shape[0] - 1:
        raise ValueError("need one tau pair per consecutive date gap")
    total = 0.0
    for t, (tau1, tau2) in enumerate(tau_pairs):
        a, b = labels[t], labels[t + 1]
        total += (1.0 - tau2.M[a, b]).sum() + (1.0 - tau1.M[b, a]).sum()
    return float(beta_temp * total)


def total_energy(labels: np.ndarray, prob: MrfProblem) -> float:
    labels = np.asarray(labels)
    T, H, W, K = prob.shape
    if labels.shape != (T, H, W):
        raise ValueError(f"labels shape {labels.shape} does not match problem {(T, H, W)}")
    check_labels(labels, K)
    return (
        unary_energy(labels, prob.unary)
        + spatial_energy(labels, prob.delta, prob.beta_sp)
        + temporal_energy(labels, prob.tau_pairs, prob.beta_temp)
    )
