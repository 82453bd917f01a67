"""Synthetic multi-temporal scenes and the polygon sampling protocol.

A scene is a mosaic of patches grown from random seeds. Each patch carries
one class per date and changes class as a whole by sampling a Markov chain
between consecutive dates. Features are drawn per pixel from class
conditional Gaussians, scaled by a per-(patch, date) brightness factor and
multiplied by unit-mean gamma speckle.

Reference polygons are axis-aligned squares inscribed in patches, so every
polygon is single-class at every date.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from stmrf.core import DEFAULT_CLASSES

log = logging.getLogger(__name__)

DEFAULT_DATES = (
    dt.date(2014, 6, 8),
    dt.date(2014, 6, 30),
    dt.date(2014, 7, 22),
    dt.date(2014, 8, 24),
    dt.date(2014, 9, 4),
)

BURNT, CLEAN, SHRUBBY, WATER, FOREST = range(5)

# 11-day class-change probabilities (rows: from, columns: to) outside and
# inside the burning season. Water is permanent.
BASE_STEP = np.array(
    [
        [0.80, 0.12, 0.08, 0.00, 0.00],
        [0.00, 0.95, 0.05, 0.00, 0.00],
        [0.00, 0.04, 0.95, 0.00, 0.01],
        [0.00, 0.00, 0.00, 1.00, 0.00],
        [0.00, 0.00, 0.00, 0.00, 1.00],
    ]
)
BURN_STEP = np.array(
    [
        [0.90, 0.06, 0.04, 0.00, 0.00],
        [0.15, 0.81, 0.04, 0.00, 0.00],
        [0.12, 0.03, 0.84, 0.00, 0.01],
        [0.00, 0.00, 0.00, 1.00, 0.00],
        [0.02, 0.00, 0.00, 0.00, 0.98],
    ]
)

# Two intensity-like bands (co- and cross-polarized backscatter).
CLASS_MEANS = np.array(
    [
        [0.55, 0.10],  # burnt pasture
        [0.90, 0.22],  # clean pasture
        [1.05, 0.28],  # shrubby pasture
        [0.15, 0.03],  # water
        [1.40, 0.45],  # forest
    ]
)


def _default_cov():
    rel = 0.08
    return np.array([np.diag((rel * m) ** 2) for m in CLASS_MEANS])


@dataclass
class Scenario:
    H: int = 128
    W: int = 128
    dates: tuple = DEFAULT_DATES
    n_patches: int = 48
    n_water: int = 2
    initial: tuple = (0.0, 0.25, 0.25, 0.0, 0.5)  # non-water patch class shares at t = 0
    base_step: np.ndarray = field(default_factory=lambda: BASE_STEP.copy())
    burn_step: np.ndarray = field(default_factory=lambda: BURN_STEP.copy())
    burn_start: dt.date = dt.date(2014, 7, 20)
    step_days: int = 11
    means: np.ndarray = field(default_factory=lambda: CLASS_MEANS.copy())
    cov: np.ndarray = field(default_factory=_default_cov)
    looks: float = 4.0  # gamma speckle shape; inf switches speckle off
    patch_jitter: float = 0.12  # sd of the per-(patch, date) brightness factor
    elongated: bool = False
    seed: int = 0

    def __post_init__(self):
        self.dates = tuple(self.dates)
        self.base_step = np.asarray(self.base_step, dtype=np.float64)
        self.burn_step = np.asarray(self.burn_step, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.H < 2 or self.W < 2:
            raise ValueError("scene must be at least 2x2")
        if not self.dates:
            raise ValueError("need at least one date")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")
        if self.n_patches < 1 or self.n_patches > self.H * self.W:
            raise ValueError("n_patches must lie in [1, H*W]")
        if not 0 <= self.n_water <= self.n_patches:
            raise ValueError("n_water must lie in [0, n_patches]")
        K = self.K
        for name, P in (("base_step", self.base_step), ("burn_step", self.burn_step)):
            if P.shape != (K, K) or (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0):
                raise ValueError(f"{name} must be a row-stochastic {K}x{K} matrix")
        if len(self.initial) != K or min(self.initial) < 0 or sum(self.initial) <= 0:
            raise ValueError("initial shares must be K non-negative numbers")
        if self.looks <= 0:
            raise ValueError("looks must be > 0")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def gaps(self) -> list[int]:
        return [(b - a).days for a, b in zip(self.dates, self.dates[1:])]

    def gap_matrix(self, t: int) -> np.ndarray:
        """Class-change probabilities from date ``t`` to ``t+1``."""
        start, end = self.dates[t], self.dates[t + 1]
        n_steps = max(1, round((end - start).days / self.step_days))
        P = np.eye(self.K)
        for s in range(n_steps):
            when = start + dt.timedelta(days=self.step_days * (s + 1))
            P = P @ (self.burn_step if when > self.burn_start else self.base_step)
        return P


@dataclass
class Scene:
    patches: np.ndarray  # (H, W) patch id
    patch_classes: np.ndarray  # (n_patches, T)
    truth: np.ndarray  # (T, H, W)


def _grow_patches(sc: Scenario, rng) -> np.ndarray:
    seeds = rng.choice(sc.H * sc.W, size=sc.n_patches, replace=False)
    sr, scol = np.divmod(seeds, sc.W)
    rows, cols = np.indices((sc.H, sc.W))
    xscale = 0.35 if sc.elongated else 1.0
    # simultaneous growth from all seeds with a noisy front: nearest seed
    # under a jittered distance
    jitter = rng.uniform(0.0, 1.5, size=(sc.n_patches,))
    best = np.full((sc.H, sc.W), np.inf)
    ids = np.zeros((sc.H, sc.W), dtype=np.int64)
    for p in range(sc.n_patches):
        d = np.hypot(rows - sr[p], (cols - scol[p]) * xscale) + jitter[p]
        closer = d < best
        best[closer] = d[closer]
        ids[closer] = p
    # relabel so that ids are contiguous and ordered by first appearance
    _, first = np.unique(ids.ravel(), return_index=True)
    order = np.argsort(np.argsort(first))
    return order[np.unique(ids.ravel(), return_inverse=True)[1]].reshape(sc.H, sc.W)


def generate_scene(sc: Scenario) -> Scene:
    rng = np.random.default_rng([sc.seed, 1])
    patches = _grow_patches(sc, rng)
    n = int(patches.max()) + 1
    classes = np.zeros((n, sc.T), dtype=np.int64)
    init = np.asarray(sc.initial, dtype=np.float64)
    init = init / init.sum()
    classes[:, 0] = rng.choice(sc.K, size=n, p=init)
    if sc.n_water and sc.K > WATER:
        sizes = np.bincount(patches.ravel(), minlength=n)
        candidates = np.flatnonzero(sizes >= np.median(sizes))
        water = rng.choice(candidates, size=min(sc.n_water, len(candidates)), replace=False)
        classes[water, 0] = WATER
    for t in range(sc.T - 1):
        P = sc.gap_matrix(t)
        u = rng.random(n)
        cdf = np.cumsum(P[classes[:, t]], axis=1)
        classes[:, t + 1] = np.minimum((u[:, None] >= cdf).sum(axis=1), sc.K - 1)
    truth = classes[patches].transpose(2, 0, 1)
    return Scene(patches, classes, np.ascontiguousarray(truth))


def generate_truth_stack(sc: Scenario) -> np.ndarray:
    return generate_scene(sc).truth


def _cov_roots(cov: np.ndarray) -> np.ndarray:
    roots = []
    for k, S in enumerate(cov):
        if not np.allclose(S, S.T):
            raise ValueError(f"covariance of class {k} is not symmetric")
        vals, vecs = np.linalg.eigh(S)
        if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
            raise ValueError(f"covariance of class {k} is not positive semi-definite")
        roots.append(vecs * np.sqrt(np.clip(vals, 0, None)))
    return np.array(roots)


def render_features(truth: np.ndarray, sc: Scenario, patches: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel intensities ``(T, H, W, B)`` for a label stack."""
    truth = np.asarray(truth)
    T, H, W = truth.shape
    B = sc.means.shape[1]
    if truth.max() >= sc.K:
        raise ValueError("truth contains classes without feature parameters")
    roots = _cov_roots(sc.cov)
    rng = np.random.default_rng([sc.seed, 2])
    if patches is None:
        patches = np.zeros((H, W), dtype=np.int64)
    n_patches = int(patches.max()) + 1
    out = np.empty((T, H, W, B))
    for t in range(T):
        z = rng.standard_normal((H, W, B))
        lab = truth[t]
        x = sc.means[lab] + np.einsum("hwij,hwj->hwi", roots[lab], z)
        if sc.patch_jitter > 0:
            factor = np.clip(1.0 + sc.patch_jitter * rng.standard_normal(n_patches), 0.2, None)
            x *= factor[patches][..., None]
        if np.isfinite(sc.looks):
            x *= rng.gamma(sc.looks, 1.0 / sc.looks, size=(H, W, B))
        out[t] = x
    return out


# ---------------------------------------------------------------------------
# reference polygons and sampling


@dataclass(frozen=True)
class Polygon:
    id: int
    r0: int
    r1: int  # exclusive
    c0: int
    c1: int  # exclusive
    classes: tuple  # class per date

    def vertices(self) -> list[tuple[int, int]]:
        """Corner coordinates (x = column, y = row) on pixel edges, clockwise."""
        return [(self.c0, self.r0), (self.c1, self.r0), (self.c1, self.r1), (self.c0, self.r1)]

    def pixels(self) -> np.ndarray:
        rr, cc = np.mgrid[self.r0 : self.r1, self.c0 : self.c1]
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


def reference_polygons(scene: Scene, max_half: int = 6, min_half: int = 0) -> list[Polygon]:
    """One inscribed square polygon per patch (largest, capped at ``2*max_half+1``)."""
    polys = []
    for p in range(scene.patch_classes.shape[0]):
        mask = np.pad(scene.patches == p, 1)
        if not mask.any():
            continue
        dist = ndimage.distance_transform_cdt(mask, metric="chessboard")[1:-1, 1:-1]
        r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
        half = min(int(dist[r, c]) - 1, max_half)
        if half < min_half:
            continue
        polys.append(
            Polygon(len(polys), r - half, r + half + 1, c - half, c + half + 1, tuple(int(k) for k in scene.patch_classes[p]))
        )
    return polys


def split_polygons(polys, rng) -> np.ndarray:
    """Random 50:50 split; ``True`` marks training polygons."""
    order = rng.permutation(len(polys))
    train = np.zeros(len(polys), dtype=bool)
    train[order[: (len(polys) + 1) // 2]] = True
    return train


def sample_polygon(poly: Polygon, per_poly: int, min_dist: float, rng, restarts: int = 16, warn: bool = True) -> np.ndarray:
    """Random pixels of one polygon, pairwise at least ``min_dist`` apart.

    Greedy acceptance over a random pixel order, repeated ``restarts`` times;
    the largest draw is kept.
    """
    pixels = poly.pixels()
    best = np.zeros((0, 2), dtype=np.int64)
    for _ in range(restarts):
        cand = pixels[rng.permutation(len(pixels))]
        taken = []
        for px in cand:
            if all(np.hypot(*(px - q)) >= min_dist for q in taken):
                taken.append(px)
                if len(taken) == per_poly:
                    break
        if len(taken) > len(best):
            best = np.array(taken, dtype=np.int64).reshape(-1, 2)
        if len(best) == per_poly:
            break
    if len(best) < per_poly and warn:
        log.warning("polygon %d holds only %d of %d samples at spacing %g", poly.id, len(best), per_poly, min_dist)
    return best


@dataclass
class SampleSet:
    """Sampled pixels of one run: ``(polygon, row, col)`` plus the polygon roles."""

    polygon: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    train_polygon: np.ndarray  # bool per polygon

    @property
    def is_train(self) -> np.ndarray:
        return self.train_polygon[self.polygon]

    def labels(self, polys, t: int) -> np.ndarray:
        return np.array([polys[p].classes[t] for p in self.polygon], dtype=np.int64)


def sample_polygons(
    polys,
    per_poly: int = 15,
    min_dist: float = 6.0,
    seed: int = 0,
    min_train: int = 1,
    max_tries: int = 1000,
) -> SampleSet:
    """Split polygons 50:50 and draw spaced samples from each.

    The split is redrawn (with an incremented sub-seed) until, at every date,
    every class carried by some polygon has at least ``min_train`` training
    samples.
    """
    if per_poly < 1:
        raise ValueError("per_poly must be >= 1")
    if min_dist < 0:
        raise ValueError("min_dist must be >= 0")
    if not polys:
        raise ValueError("no polygons to sample")
    rng = np.random.default_rng([seed, 3])
    picks = [sample_polygon(p, per_poly, min_dist, rng, warn=False) for p in polys]
    counts = np.array([len(x) for x in picks])
    short = int((counts < per_poly).sum())
    if short:
        log.warning("%d of %d polygons cannot hold %d samples at spacing %g", short, len(polys), per_poly, min_dist)
    classes = np.array([p.classes for p in polys])  # (n_polys, T)
    for sub in range(max_tries):
        train = split_polygons(polys, np.random.default_rng([seed, 4, sub]))
        if _covers(classes, counts, train, min_train):
            if sub:
                log.info("polygon split accepted with sub-seed %d", sub)
            break
    else:
        missing = _missing(classes, counts, np.ones(len(polys), bool), min_train)
        raise ValueError(f"cannot cover classes {missing} with >= {min_train} training samples")
    poly_idx = np.concatenate([np.full(len(x), i) for i, x in enumerate(picks)])
    pix = np.concatenate(picks)
    return SampleSet(poly_idx, pix[:, 0], pix[:, 1], train)


def _missing(classes, counts, train, min_train):
    out = []
    for t in range(classes.shape[1]):
        present = np.unique(classes[:, t])
        for k in present:
            if counts[train & (classes[:, t] == k)].sum() < min_train:
                out.append((t, int(k)))
    return out


def _covers(classes, counts, train, min_train):
    return not _missing(classes, counts, train, min_train)
