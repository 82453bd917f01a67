"""MAP inference for the spatio-temporal MRF.

Min-sum loopy belief propagation in two schedules, plus iterated
conditional modes and an exhaustive search used as a test oracle.

Messages are stored as incoming messages per pixel, indexed by the
direction they arrive from (see the ``FROM_*`` constants). Every pairwise
factor is the full cost of one edge, so a temporal link carries both of
its directed terms.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from stmrf.core import NumericalError
from stmrf.energy import MrfProblem, total_energy

log = logging.getLogger(__name__)

FROM_UP, FROM_DOWN, FROM_LEFT, FROM_RIGHT, FROM_PREV, FROM_NEXT = range(6)
SPATIAL_DIRS = (FROM_UP, FROM_DOWN, FROM_LEFT, FROM_RIGHT)


class InferenceError(NumericalError):
    pass


@dataclass(frozen=True)
class LbpConfig:
    max_iters: int = 10
    damping: float = 0.0
    convergence_eps: float = 1e-4
    window: int = 256
    normalize: bool = True
    threads: int = 1
    keep_best: bool = True  # return the lowest-energy iterate, not the last one

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.convergence_eps < 0:
            raise ValueError("convergence_eps must be >= 0")


class LbpResult(NamedTuple):
    labels: np.ndarray
    converged: bool
    iters: int


def _min_convolve(h: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``out[..., b] = min_a h[..., a] + psi[a, b]``."""
    return (h[..., :, None] + psi).min(axis=-2)


def _normalize(m: np.ndarray) -> np.ndarray:
    return m - m.min(axis=-1, keepdims=True)


def _check_finite(m: np.ndarray, where: str) -> None:
    bad = ~np.isfinite(m)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
        raise InferenceError(f"non-finite message ({where}) at pixel {idx}")


def _labels(beliefs: np.ndarray) -> np.ndarray:
    return np.argmin(beliefs, axis=-1).astype(np.int64)


def _log_iteration(it, labels, prob, changed, trace) -> float:
    energy = total_energy(labels, prob)
    line = f"{it},{energy:.12g},{changed:.6g}"
    log.info(line)
    if trace is not None:
        trace.append((it, energy, changed))
    return energy


class _Best:
    """Lowest-energy labeling seen so far; ties keep the earlier one."""

    def __init__(self, labels, prob, enabled):
        self.enabled = enabled
        self.labels = labels
        self.energy = total_energy(labels, prob) if enabled else np.inf

    def offer(self, labels, energy):
        if energy < self.energy:
            self.labels, self.energy = labels, energy

    def result(self, labels):
        return self.labels if self.enabled else labels


def lbp_reference(prob: MrfProblem, cfg: LbpConfig = LbpConfig(), trace: list | None = None) -> LbpResult:
    """Synchronous (flooding) min-sum LBP over all pixels and dates at once."""
    U = prob.unary
    T, H, W, K = U.shape
    psi_sp = prob.spatial_factor()
    psi_t = prob.temporal_factors()
    msg = np.zeros((6, T, H, W, K))
    labels = _labels(U)
    best = _Best(labels, prob, cfg.keep_best)
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        belief = U + msg.sum(axis=0)
        new = np.zeros_like(msg)
        h = belief[:, :-1] - msg[FROM_DOWN, :, :-1]
        new[FROM_UP, :, 1:] = _min_convolve(h, psi_sp)
        h = belief[:, 1:] - msg[FROM_UP, :, 1:]
        new[FROM_DOWN, :, :-1] = _min_convolve(h, psi_sp)
        h = belief[:, :, :-1] - msg[FROM_RIGHT, :, :, :-1]
        new[FROM_LEFT, :, :, 1:] = _min_convolve(h, psi_sp)
        h = belief[:, :, 1:] - msg[FROM_LEFT, :, :, 1:]
        new[FROM_RIGHT, :, :, :-1] = _min_convolve(h, psi_sp)
        for t, psi in enumerate(psi_t):
            h = belief[t] - msg[FROM_NEXT, t]
            new[FROM_PREV, t + 1] = _min_convolve(h, psi)
            h = belief[t + 1] - msg[FROM_PREV, t + 1]
            new[FROM_NEXT, t] = _min_convolve(h, psi.T)
        if cfg.normalize:
            new = _normalize(new)
        if cfg.damping:
            new = (1.0 - cfg.damping) * new + cfg.damping * msg
        _check_finite(new, "reference")
        msg = new
        new_labels = _labels(U + msg.sum(axis=0))
        changed = float(np.mean(new_labels != labels))
        labels = new_labels
        best.offer(labels, _log_iteration(it, labels, prob, changed, trace))
        if changed < cfg.convergence_eps:
            converged = True
            break
    return LbpResult(best.result(labels), converged, it)


def _tiles(n: int, size: int) -> list[tuple[int, int]]:
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def _spatial_inflow(belief, old, psi, r0, r1, c0, c1):
    """New spatial messages into the targets ``[r0:r1, c0:c1]`` of one layer.

    Reads ``belief`` and ``old`` (shape ``(4, H, W, K)``) on the target block
    plus a one-pixel halo, so neighbouring windows overlap by one pixel.
    """
    H, W, K = belief.shape
    out = np.zeros((4, r1 - r0, c1 - c0, K))
    # from the pixel above: sources rows [max(r0,1)-1, r1-1)
    a = max(r0, 1)
    if a < r1:
        h = belief[a - 1 : r1 - 1, c0:c1] - old[FROM_DOWN, a - 1 : r1 - 1, c0:c1]
        out[FROM_UP, a - r0 :] = _min_convolve(h, psi)
    b = min(r1, H - 1)
    if r0 < b:
        h = belief[r0 + 1 : b + 1, c0:c1] - old[FROM_UP, r0 + 1 : b + 1, c0:c1]
        out[FROM_DOWN, : b - r0] = _min_convolve(h, psi)
    a = max(c0, 1)
    if a < c1:
        h = belief[r0:r1, a - 1 : c1 - 1] - old[FROM_RIGHT, r0:r1, a - 1 : c1 - 1]
        out[FROM_LEFT, :, a - c0 :] = _min_convolve(h, psi)
    b = min(c1, W - 1)
    if c0 < b:
        h = belief[r0:r1, c0 + 1 : b + 1] - old[FROM_LEFT, r0:r1, c0 + 1 : b + 1]
        out[FROM_RIGHT, :, : b - c0] = _min_convolve(h, psi)
    return out


def lbp_layered_sweep(prob: MrfProblem, cfg: LbpConfig = LbpConfig(), trace: list | None = None) -> LbpResult:
    """Layer-by-layer min-sum LBP with a fallback copy of the previous layer.

    Each iteration visits the dates in order. For date ``t``:

    1. keep a fallback copy of the layer's incoming messages;
    2. receive temporal messages from the fallback of ``t-1`` and from the
       current state of ``t+1``, then update the spatial messages of ``t``
       window by window from the layer snapshot;
    3. drop the old fallback; the copy made in step 1 becomes the fallback
       for ``t+1``.

    Only three layers are touched at any time. Window updates read from a
    snapshot, so the result does not depend on window size or thread count.
    """
    U = prob.unary
    T, H, W, K = U.shape
    psi_sp = prob.spatial_factor()
    psi_t = prob.temporal_factors()
    msg = np.zeros((6, T, H, W, K))
    labels = _labels(U)
    best = _Best(labels, prob, cfg.keep_best)
    tiles = [(r, c) for r in _tiles(H, cfg.window) for c in _tiles(W, cfg.window)]
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    converged = False
    it = 0
    try:
        for it in range(1, cfg.max_iters + 1):
            fallback = None
            for t in range(T):
                current = msg[:, t].copy()
                if t > 0:
                    h = U[t - 1] + fallback.sum(axis=0) - fallback[FROM_NEXT]
                    m = _min_convolve(h, psi_t[t - 1])
                    msg[FROM_PREV, t] = _finish(m, current[FROM_PREV], cfg)
                if t < T - 1:
                    nxt = msg[:, t + 1]
                    h = U[t + 1] + nxt.sum(axis=0) - nxt[FROM_PREV]
                    m = _min_convolve(h, psi_t[t].T)
                    msg[FROM_NEXT, t] = _finish(m, current[FROM_NEXT], cfg)
                belief = U[t] + current[:4].sum(axis=0) + msg[FROM_PREV, t] + msg[FROM_NEXT, t]
                old_sp = current[:4]

                def run(tile, belief=belief, old_sp=old_sp):
                    (r0, r1), (c0, c1) = tile
                    m = _spatial_inflow(belief, old_sp, psi_sp, r0, r1, c0, c1)
                    return tile, m

                results = pool.map(run, tiles) if pool else map(run, tiles)
                for ((r0, r1), (c0, c1)), m in results:
                    old = old_sp[:, r0:r1, c0:c1]
                    msg[:4, t, r0:r1, c0:c1] = _finish(m, old, cfg)
                _check_finite(msg[:, t], f"layer {t}")
                fallback = current
            new_labels = _labels(U + msg.sum(axis=0))
            changed = float(np.mean(new_labels != labels))
            labels = new_labels
            best.offer(labels, _log_iteration(it, labels, prob, changed, trace))
            if changed < cfg.convergence_eps:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return LbpResult(best.result(labels), converged, it)


def _finish(m, old, cfg):
    if cfg.normalize:
        m = _normalize(m)
    if cfg.damping:
        m = (1.0 - cfg.damping) * m + cfg.damping * old
    return m


def _local_costs(labels, t, r, c, U, psi_sp, psi_t):
    T, H, W, _ = U.shape
    cost = U[t, r, c].copy()
    if r > 0:
        cost += psi_sp[:, labels[t, r - 1, c]]
    if r < H - 1:
        cost += psi_sp[:, labels[t, r + 1, c]]
    if c > 0:
        cost += psi_sp[:, labels[t, r, c - 1]]
    if c < W - 1:
        cost += psi_sp[:, labels[t, r, c + 1]]
    if t > 0:
        cost += psi_t[t - 1][labels[t - 1, r, c], :]
    if t < T - 1:
        cost += psi_t[t][:, labels[t + 1, r, c]]
    return cost


def icm_baseline(
    prob: MrfProblem,
    init: np.ndarray,
    max_sweeps: int = 50,
    trace: list | None = None,
    audit: bool = False,
) -> np.ndarray:
    """Iterated conditional modes in raster order (t, row, column).

    A pixel moves only to a strictly cheaper label (lowest index among the
    cheapest). ``trace`` receives the total energy after every accepted
    flip; with ``audit`` it is recomputed from scratch instead of updated
    incrementally.
    """
    U = prob.unary
    T, H, W, K = U.shape
    labels = np.array(init, dtype=np.int64, copy=True)
    if labels.shape != (T, H, W):
        raise ValueError(f"init shape {labels.shape} does not match problem {(T, H, W)}")
    psi_sp = prob.spatial_factor()
    psi_t = prob.temporal_factors()
    energy = total_energy(labels, prob) if trace is not None else 0.0
    for _ in range(max_sweeps):
        flips = 0
        for t in range(T):
            for r in range(H):
                for c in range(W):
                    cost = _local_costs(labels, t, r, c, U, psi_sp, psi_t)
                    cur = labels[t, r, c]
                    best = int(np.argmin(cost))
                    if cost[best] < cost[cur]:
                        labels[t, r, c] = best
                        flips += 1
                        if trace is not None:
                            energy = total_energy(labels, prob) if audit else energy + cost[best] - cost[cur]
                            trace.append(energy)
        if flips == 0:
            break
    return labels


class BruteForceResult(NamedTuple):
    labels: np.ndarray
    energy: float


def brute_force_map(prob: MrfProblem, state_limit: int = 100_000, chunk: int = 1 << 15) -> BruteForceResult:
    """Global minimum of the total energy by exhaustive enumeration.

    Labelings are enumerated in lexicographic order over the flattened
    ``(T, H, W)`` grid; exact ties resolve to the first (smallest) labeling.
    """
    U = prob.unary
    T, H, W, K = U.shape
    n = T * H * W
    size = K**n
    if size > state_limit:
        raise ValueError(f"state space {K}^{n} = {size} exceeds limit {state_limit}")
    flat_u = U.reshape(n, K)
    pen_sp = prob.spatial_factor()
    psi_t = prob.temporal_factors()
    grid = np.arange(n).reshape(T, H, W)
    h_edges = np.stack([grid[:, :, :-1].ravel(), grid[:, :, 1:].ravel()], axis=1)
    v_edges = np.stack([grid[:, :-1, :].ravel(), grid[:, 1:, :].ravel()], axis=1)
    sp_edges = np.concatenate([h_edges, v_edges])
    powers = K ** np.arange(n - 1, -1, -1, dtype=np.int64)
    best_e, best_idx = np.inf, -1
    for start in range(0, size, chunk):
        idx = np.arange(start, min(start + chunk, size), dtype=np.int64)
        lab = (idx[:, None] // powers) % K
        e = flat_u[np.arange(n), lab].sum(axis=1)
        if len(sp_edges):
            e = e + pen_sp[lab[:, sp_edges[:, 0]], lab[:, sp_edges[:, 1]]].sum(axis=1)
        for t, psi in enumerate(psi_t):
            a = grid[t].ravel()
            b = grid[t + 1].ravel()
            e = e + psi[lab[:, a], lab[:, b]].sum(axis=1)
        j = int(np.argmin(e))
        if e[j] < best_e:
            best_e, best_idx = e[j], int(idx[j])
    labels = ((best_idx // powers) % K).reshape(T, H, W)
    return BruteForceResult(labels, total_energy(labels, prob))
