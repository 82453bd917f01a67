"""Gray-level co-occurrence texture features.

Each band is quantized into equal-frequency levels, then a symmetric GLCM
is accumulated over a sliding window using offset-1 pairs in the four
directions 0°, 90°, 45° and 135°. Ten Haralick-style statistics are
derived from every window.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

FEATURE_NAMES = (
    "contrast",
    "dissimilarity",
    "homogeneity",
    "asm",
    "energy",
    "max_prob",
    "entropy",
    "mean",
    "variance",
    "correlation",
)
N_FEATURES = len(FEATURE_NAMES)

DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))

# Windows with (numerically) zero marginal variance get correlation 1.
_ZERO_VAR = 1e-15


@dataclass(frozen=True)
class GlcmConfig:
    window: int = 11
    levels: int = 64
    offset: int = 1
    directions: tuple[tuple[int, int], ...] = DIRECTIONS

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.offset < 1:
            raise ValueError(f"offset must be >= 1, got {self.offset}")
        if not self.directions:
            raise ValueError("at least one direction is required")

    def steps(self) -> np.ndarray:
        return np.array([(dr * self.offset, dc * self.offset) for dr, dc in self.directions], dtype=np.int64)


def quantize_probabilistic(band: np.ndarray, levels: int) -> np.ndarray:
    """Equal-frequency quantization of a whole band into ``levels`` levels.

    Boundaries sit at the ``j / levels`` quantiles; a value gets the number
    of boundaries strictly below it, so a constant band maps to level 0.
    """
    band = np.asarray(band, dtype=np.float64)
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    if not np.isfinite(band).all():
        raise ValueError("band contains non-finite values")
    edges = np.quantile(band.ravel(), np.arange(1, levels) / levels)
    return np.searchsorted(edges, band, side="left").astype(np.int64)


def compute_glcm(window: np.ndarray, cfg: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Normalized symmetric co-occurrence matrix of one window of level indices."""
    w = np.asarray(window, dtype=np.int64)
    if w.ndim != 2:
        raise ValueError("window must be 2-D")
    if w.size and (w.min() < 0 or w.max() >= cfg.levels):
        raise ValueError(f"level indices must lie in [0, {cfg.levels})")
    counts = np.zeros((cfg.levels, cfg.levels), dtype=np.float64)
    h, wd = w.shape
    for dr, dc in cfg.steps():
        r0, r1 = max(0, -dr), min(h, h - dr)
        c0, c1 = max(0, -dc), min(wd, wd - dc)
        if r1 <= r0 or c1 <= c0:
            continue
        a = w[r0:r1, c0:c1].ravel()
        b = w[r0 + dr : r1 + dr, c0 + dc : c1 + dc].ravel()
        np.add.at(counts, (a, b), 1.0)
        np.add.at(counts, (b, a), 1.0)
    total = counts.sum()
    if total == 0:
        raise ValueError("no pairs: window too small for the configured offset")
    return counts / total


def glcm_features(P: np.ndarray) -> np.ndarray:
    """The ten texture statistics of a normalized GLCM, in FEATURE_NAMES order."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    i, j = np.indices((n, n), dtype=np.float64)
    d = i - j
    contrast = np.sum(P * d * d)
    dissimilarity = np.sum(P * np.abs(d))
    homogeneity = np.sum(P / (1.0 + d * d))
    asm = np.sum(P * P)
    nz = P[P > 0]
    entropy = -np.sum(nz * np.log(nz))
    mean = np.sum(i * P)
    variance = np.sum((i - mean) ** 2 * P)
    if variance <= _ZERO_VAR:
        correlation = 1.0
    else:
        correlation = np.sum(P * (i - mean) * (j - mean)) / variance
    return np.array(
        [contrast, dissimilarity, homogeneity, asm, np.sqrt(asm), P.max(), entropy, mean, variance, correlation]
    )


@numba.njit(cache=True)
def _features_from_counts(counts, total, out):
    n = counts.shape[0]
    inv = 1.0 / total
    contrast = 0.0
    dissim = 0.0
    homog = 0.0
    asm = 0.0
    pmax = 0.0
    entropy = 0.0
    mean = 0.0
    for a in range(n):
        for b in range(n):
            c = counts[a, b]
            if c == 0:
                continue
            p = c * inv
            d = a - b
            contrast += p * d * d
            dissim += p * abs(d)
            homog += p / (1.0 + d * d)
            asm += p * p
            if p > pmax:
                pmax = p
            entropy -= p * np.log(p)
            mean += a * p
    var = 0.0
    cov = 0.0
    for a in range(n):
        for b in range(n):
            c = counts[a, b]
            if c == 0:
                continue
            p = c * inv
            var += (a - mean) * (a - mean) * p
            cov += p * (a - mean) * (b - mean)
    out[0] = contrast
    out[1] = dissim
    out[2] = homog
    out[3] = asm
    out[4] = np.sqrt(asm)
    out[5] = pmax
    out[6] = entropy
    out[7] = mean
    out[8] = var
    out[9] = 1.0 if var <= 1e-15 else cov / var


@numba.njit(cache=True)
def _add_column(q, counts, steps, r0, win, col, c_lo, c_hi, sign):
    # Add (sign=1) or remove (sign=-1) every pair anchored in column ``col``
    # whose partner also lies inside the window columns [c_lo, c_hi).
    n_total = 0
    for s in range(steps.shape[0]):
        dr = steps[s, 0]
        dc = steps[s, 1]
        pc = col + dc
        if pc < c_lo or pc >= c_hi:
            continue
        for r in range(r0, r0 + win):
            pr = r + dr
            if pr < r0 or pr >= r0 + win:
                continue
            a = q[r, col]
            b = q[pr, pc]
            counts[a, b] += sign
            counts[b, a] += sign
            n_total += 2
    return n_total


@numba.njit(cache=True, nogil=True)
def _sliding_features(q, levels, win, steps, out):
    # out has shape (H - win + 1, W - win + 1, 10): features of the window
    # whose top-left corner is (i, j). Windows slide left to right; the pairs
    # of the departing column are removed and those of the arriving column added.
    nr, nc = out.shape[0], out.shape[1]
    counts = np.zeros((levels, levels), dtype=np.int64)
    for i in range(nr):
        counts[:, :] = 0
        total = 0
        for col in range(0, win):
            total += _add_column(q, counts, steps, i, win, col, 0, win, 1)
        _features_from_counts(counts, total, out[i, 0])
        for j in range(1, nc):
            # pairs anchored in column j-1 (partner anywhere in the old window)
            total -= _add_column(q, counts, steps, i, win, j - 1, j - 1, j - 1 + win, -1)
            # pairs anchored elsewhere whose partner sits in column j-1
            for s in range(steps.shape[0]):
                dc = steps[s, 1]
                ac = j - 1 - dc
                if dc != 0 and ac >= j and ac < j - 1 + win:
                    total -= _pairs_to_column(q, counts, steps[s, 0], dc, i, win, ac, -1)
            # pairs anchored in the new column with partner in the new window
            total += _add_column(q, counts, steps, i, win, j + win - 1, j, j + win, 1)
            for s in range(steps.shape[0]):
                dc = steps[s, 1]
                ac = j + win - 1 - dc
                if dc != 0 and ac >= j and ac < j + win - 1:
                    total += _pairs_to_column(q, counts, steps[s, 0], dc, i, win, ac, 1)
            _features_from_counts(counts, total, out[i, j])


@numba.njit(cache=True)
def _pairs_to_column(q, counts, dr, dc, r0, win, col, sign):
    n_total = 0
    for r in range(r0, r0 + win):
        pr = r + dr
        if pr < r0 or pr >= r0 + win:
            continue
        a = q[r, col]
        b = q[pr, col + dc]
        counts[a, b] += sign
        counts[b, a] += sign
        n_total += 2
    return n_total


def window_features(levels_band: np.ndarray, cfg: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Features for every full window position, shape ``(H-w+1, W-w+1, 10)``."""
    q = np.ascontiguousarray(levels_band, dtype=np.int64)
    h, w = q.shape
    win = cfg.window
    if win > h or win > w:
        raise ValueError(f"window {win} larger than band {h}x{w}")
    steps = cfg.steps()
    if all(abs(dr) >= win or abs(dc) >= win for dr, dc in steps):
        raise ValueError("no pairs: window too small for the configured offset")
    out = np.empty((h - win + 1, w - win + 1, N_FEATURES), dtype=np.float64)
    _sliding_features(q, cfg.levels, win, steps, out)
    return out


def level_texture(levels_band: np.ndarray, cfg: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Texture planes ``(H, W, 10)`` of an already quantized band.

    Every output pixel uses a full window; near the border the window is
    shifted inwards (edge-clamped) so it stays inside the image.
    """
    q = np.asarray(levels_band)
    h, w = q.shape
    if cfg.window > h or cfg.window > w:
        raise ValueError(f"window {cfg.window} larger than scene {h}x{w}")
    per_window = window_features(q, cfg)
    half = cfg.window // 2
    rows = np.clip(np.arange(h) - half, 0, h - cfg.window)
    cols = np.clip(np.arange(w) - half, 0, w - cfg.window)
    return per_window[rows[:, None], cols[None, :]]


def band_texture(band: np.ndarray, cfg: GlcmConfig = GlcmConfig()) -> np.ndarray:
    """Quantize one band and return its ``(H, W, 10)`` texture planes."""
    band = np.asarray(band, dtype=np.float64)
    if cfg.window > band.shape[0] or cfg.window > band.shape[1]:
        raise ValueError(f"window {cfg.window} larger than scene {band.shape[0]}x{band.shape[1]}")
    return level_texture(quantize_probabilistic(band, cfg.levels), cfg)


def texture_feature_stack(scene: np.ndarray, cfg: GlcmConfig = GlcmConfig(), threads: int = 1) -> np.ndarray:
    """Texture features of a ``(H, W, B)`` scene as ``(H, W, 10*B)``.

    Columns are grouped per band: the ten features of band 0, then band 1, ...
    """
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim == 2:
        scene = scene[..., None]
    bands = [scene[..., b] for b in range(scene.shape[-1])]
    if threads > 1 and len(bands) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            planes = list(pool.map(lambda b: band_texture(b, cfg), bands))
    else:
        planes = [band_texture(b, cfg) for b in bands]
    return np.concatenate(planes, axis=-1)
