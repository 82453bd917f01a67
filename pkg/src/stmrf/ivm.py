"""Import vector machine: sparse multiclass kernel logistic regression.

The discriminant of class ``k`` is

    f_k(x) = b_k + sum_s alpha[k, s] * rbf(x, x_s)

over a small set of *import points* ``x_s`` drawn from the training set.
Training minimizes the softmax negative log-likelihood plus
``1/(2C) * sum_k alpha_k^T K_S alpha_k`` and grows the import set greedily:
each step adds the training point whose inclusion lowers the objective most,
then refits every coefficient by Newton's method.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stmrf.core import ClassSet, NumericalError

log = logging.getLogger(__name__)

MAGIC = b"IVM1"
PREDICT_CHUNK = 4096


class IvmError(ValueError):
    pass


@dataclass
class TrainSet:
    features: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise IvmError("features must be (N, F) with one label per row")
        if not np.isfinite(self.features).all():
            raise IvmError("training features contain non-finite values")
        if self.provenance is None:
            self.provenance = np.full(len(self.labels), -1, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "TrainSet":
        return TrainSet(self.features[idx], self.labels[idx], self.provenance[idx])


@dataclass
class IvmModel:
    import_points: np.ndarray  # (S, F), raw feature units
    alpha: np.ndarray  # (K, S + 1); last column is the bias
    sigma: float
    C: float
    class_set: ClassSet
    present: np.ndarray  # (K,) bool, classes seen in training
    mean: np.ndarray  # (F,) standardization offset
    scale: np.ndarray  # (F,) standardization scale
    import_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    objective_trace: list = field(default_factory=list)

    @property
    def n_import(self) -> int:
        return len(self.import_points)

    @property
    def n_features(self) -> int:
        return len(self.mean)


def rbf_kernel(a, b, sigma: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = a - b
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def rbf_matrix(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-sq / (2.0 * sigma * sigma))


def logsumexp(F: np.ndarray, axis: int = -1) -> np.ndarray:
    m = F.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(F - m).sum(axis=axis))


def softmax(F: np.ndarray, axis: int = -1) -> np.ndarray:
    E = np.exp(F - F.max(axis=axis, keepdims=True))
    return E / E.sum(axis=axis, keepdims=True)


def _standardize_stats(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def median_distance(X: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance of the standardized features."""
    mean, scale = _standardize_stats(X)
    Z = (X - mean) / scale
    if len(Z) > max_points:
        Z = Z[np.random.default_rng(seed).choice(len(Z), max_points, replace=False)]
    sq = (Z * Z).sum(1)[:, None] + (Z * Z).sum(1)[None, :] - 2 * Z @ Z.T
    iu = np.triu_indices(len(Z), 1)
    d = np.sqrt(np.maximum(sq[iu], 0))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


# ---------------------------------------------------------------------------
# objective, gradient and Hessian for a fixed import set


def objective(theta, Phi, Y, K_S, C):
    """Regularized softmax NLL. ``theta`` is (K, S+1), ``Phi`` is (N, S+1)."""
    F = Phi @ theta.T
    nll = np.sum(logsumexp(F, axis=1) - np.sum(F * Y, axis=1))
    A = theta[:, :-1]
    reg = 0.5 / C * np.sum((A @ K_S) * A)
    return float(nll + reg)


def gradient(theta, Phi, Y, K_S, C):
    P = softmax(Phi @ theta.T, axis=1)
    G = (P - Y).T @ Phi
    G[:, :-1] += (theta[:, :-1] @ K_S) / C
    return G


def hessian(theta, Phi, K_S, C):
    P = softmax(Phi @ theta.T, axis=1)
    K, D = theta.shape
    Hm = np.empty((K, D, K, D))
    for k in range(K):
        for l in range(k, K):
            w = (P[:, k] if k == l else 0.0) - P[:, k] * P[:, l]
            block = (Phi * w[:, None]).T @ Phi
            Hm[k, :, l, :] = block
            Hm[l, :, k, :] = block.T
    for k in range(K):
        Hm[k, :-1, k, :-1] += K_S / C
    return Hm.reshape(K * D, K * D)


def newton_fit(theta, Phi, Y, K_S, C, max_iter=100, rtol=1e-13):
    """Damped Newton with backtracking; returns (theta, objective)."""
    f = objective(theta, Phi, Y, K_S, C)
    n = theta.size
    for _ in range(max_iter):
        g = gradient(theta, Phi, Y, K_S, C).ravel()
        Hm = hessian(theta, Phi, K_S, C)
        ridge = 1e-10 * max(1.0, float(np.abs(np.diag(Hm)).max()))
        step = None
        for _attempt in range(8):
            try:
                step = np.linalg.solve(Hm + ridge * np.eye(n), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.isfinite(step).all():
                break
            step = None
            ridge *= 100.0
        if step is None:
            raise NumericalError("singular Newton system even after ridge damping")
        slope = float(g @ step)
        if slope >= 0:
            step, slope = -g, -float(g @ g)
        t = 1.0
        while True:
            cand = theta + t * step.reshape(theta.shape)
            fc = objective(cand, Phi, Y, K_S, C)
            if fc <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if fc > f:
            break
        done = f - fc <= rtol * max(1.0, abs(f))
        theta, f = cand, fc
        if done:
            break
    return theta, f


# ---------------------------------------------------------------------------
# training


def _one_hot(labels, classes):
    Y = np.zeros((len(labels), len(classes)))
    Y[np.arange(len(labels)), np.searchsorted(classes, labels)] = 1.0
    return Y


def _candidate_objectives(theta, Kc, Kc_S, Phi, Y, K_S, C, base_reg):
    """Objective after a one-step Newton update of each candidate's new column.

    ``Kc`` is (N, M) kernel columns of M candidates, ``Kc_S`` is (M, S).
    Returns (objectives, gammas) with gammas shaped (M, K).
    """
    F = Phi @ theta.T
    P = softmax(F, axis=1)
    R = P - Y
    A = theta[:, :-1]
    cross = Kc_S @ A.T  # (M, K): K(c, S) alpha_k
    g = Kc.T @ R + cross / C
    K = theta.shape[0]
    Kc2 = Kc * Kc
    H = -np.einsum("nm,nk,nl->mkl", Kc2, P, P)
    H[:, np.arange(K), np.arange(K)] += Kc2.T @ P
    H[:, np.arange(K), np.arange(K)] += 1.0 / C  # K(c, c) = 1 for the RBF kernel
    gamma = -np.linalg.solve(H + 1e-12 * np.eye(K), g[..., None])[..., 0]
    Fn = F[:, None, :] + Kc[:, :, None] * gamma[None, :, :]
    nll = np.sum(logsumexp(Fn, axis=2) - np.einsum("nmk,nk->nm", Fn, Y), axis=0)
    reg = base_reg + np.sum(gamma * cross, axis=1) / C + 0.5 / C * np.sum(gamma * gamma, axis=1)
    return nll + reg, gamma


def train_ivm(
    train: TrainSet,
    sigma: float,
    C: float,
    max_import: int = 100,
    tol: float = 1e-3,
    class_set: ClassSet | None = None,
    n_candidates: int | None = None,
    seed: int = 0,
) -> IvmModel:
    """Fit an import vector machine by greedy forward selection.

    Stops when the relative objective decrease of a step falls below ``tol``
    or ``max_import`` points are selected. ``n_candidates`` limits the
    candidates scored per step to a seeded random subset.
    """
    if max_import < 1:
        raise IvmError("max_import must be >= 1")
    if tol < 0:
        raise IvmError("tol must be >= 0")
    if sigma <= 0 or C <= 0:
        raise IvmError("sigma and C must be > 0")
    classes = np.unique(train.labels)
    if class_set is None:
        class_set = ClassSet(tuple(f"class_{k}" for k in range(int(classes.max()) + 1)))
    n_cls = len(class_set)
    if classes.min() < 0 or classes.max() >= n_cls:
        raise IvmError("training labels outside the class set")
    if len(classes) < 2:
        raise IvmError("need >= 2 classes in the training set")
    X = train.features
    N = len(X)
    mean, scale = _standardize_stats(X)
    Z = (X - mean) / scale
    Y = _one_hot(train.labels, classes)
    Kfull_cache: dict[int, np.ndarray] = {}
    rng = np.random.default_rng(seed)

    def column(i):
        col = Kfull_cache.get(i)
        if col is None:
            col = rbf_matrix(Z, Z[i : i + 1], sigma)[:, 0]
            Kfull_cache[i] = col
        return col

    selected: list[int] = []
    Kc_all = rbf_matrix(Z, Z, sigma) if N <= 4000 else None
    Phi = np.ones((N, 1))
    K_S = np.zeros((0, 0))
    theta = np.zeros((len(classes), 1))
    theta, f = newton_fit(theta, Phi, Y, K_S, C)
    trace = [f]
    remaining = np.ones(N, dtype=bool)
    while len(selected) < min(max_import, N):
        cand = np.flatnonzero(remaining)
        if n_candidates is not None and len(cand) > n_candidates:
            cand = np.sort(rng.choice(cand, n_candidates, replace=False))
        if Kc_all is not None:
            Kc = Kc_all[:, cand]
        else:
            Kc = np.stack([column(i) for i in cand], axis=1)
        Kc_S = Kc[selected].T if selected else np.zeros((len(cand), 0))
        A = theta[:, :-1]
        base_reg = 0.5 / C * np.sum((A @ K_S) * A)
        scores, gammas = _candidate_objectives(theta, Kc, Kc_S, Phi, Y, K_S, C, base_reg)
        j = int(np.argmin(scores))
        best = int(cand[j])
        selected.append(best)
        remaining[best] = False
        Phi = np.concatenate([Phi[:, :-1], Kc[:, j : j + 1], np.ones((N, 1))], axis=1)
        ZS = Z[selected]
        K_S = rbf_matrix(ZS, ZS, sigma)
        theta = np.concatenate([theta[:, :-1], gammas[j][:, None], theta[:, -1:]], axis=1)
        if objective(theta, Phi, Y, K_S, C) > f:
            theta[:, -2] = 0.0
        theta, f_new = newton_fit(theta, Phi, Y, K_S, C)
        rel = (f - f_new) / max(abs(f), 1e-300)
        trace.append(f_new)
        f = f_new
        if rel < tol:
            break

    alpha = np.zeros((n_cls, len(selected) + 1))
    alpha[classes] = theta
    present = np.zeros(n_cls, dtype=bool)
    present[classes] = True
    log.debug("ivm sigma=%g C=%g imports=%d objective=%.6g", sigma, C, len(selected), f)
    return IvmModel(
        import_points=X[selected].copy(),
        alpha=alpha,
        sigma=float(sigma),
        C=float(C),
        class_set=class_set,
        present=present,
        mean=mean,
        scale=scale,
        import_index=np.array(selected, dtype=np.int64),
        objective_trace=trace,
    )


def model_objective(model: IvmModel, train: TrainSet) -> float:
    """Regularized objective of a trained model on (its) training set."""
    classes = np.flatnonzero(model.present)
    Z = (train.features - model.mean) / model.scale
    ZS = (model.import_points - model.mean) / model.scale
    Phi = np.concatenate([rbf_matrix(Z, ZS, model.sigma), np.ones((len(Z), 1))], axis=1)
    K_S = rbf_matrix(ZS, ZS, model.sigma)
    return objective(model.alpha[classes], Phi, _one_hot(train.labels, classes), K_S, model.C)


def decision_function(model: IvmModel, X: np.ndarray) -> np.ndarray:
    Z = (X - model.mean) / model.scale
    ZS = (model.import_points - model.mean) / model.scale
    Phi = np.concatenate([rbf_matrix(Z, ZS, model.sigma), np.ones((len(Z), 1))], axis=1)
    return Phi @ model.alpha.T


def _predict_rows(model: IvmModel, X: np.ndarray) -> np.ndarray:
    F = decision_function(model, X)
    F[:, ~model.present] = -np.inf
    return softmax(F, axis=1)


def predict_proba(model: IvmModel, features: np.ndarray, threads: int = 1) -> np.ndarray:
    """Class probabilities for any ``(..., F)`` array of feature vectors.

    Classes absent from training get probability 0. Pixels are processed in
    fixed-size chunks so results do not depend on ``threads``.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != model.n_features:
        raise IvmError(f"expected {model.n_features} features, got {features.shape[-1]}")
    X = features.reshape(-1, features.shape[-1])
    out = np.empty((len(X), len(model.class_set)))
    chunks = [(s, min(s + PREDICT_CHUNK, len(X))) for s in range(0, len(X), PREDICT_CHUNK)]

    def run(bounds):
        s, e = bounds
        out[s:e] = _predict_rows(model, X[s:e])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, chunks))
    else:
        for b in chunks:
            run(b)
    return out.reshape(*features.shape[:-1], len(model.class_set))


def predict_labels(model: IvmModel, X: np.ndarray) -> np.ndarray:
    return np.argmax(predict_proba(model, X), axis=-1)


# ---------------------------------------------------------------------------
# model selection


def stratified_folds(labels: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per sample; each class is spread round-robin after a seeded shuffle."""
    if folds < 2:
        raise IvmError("folds must be >= 2")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(labels), dtype=np.int64)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        if len(idx) < folds:
            raise IvmError(f"class {int(k)} has {len(idx)} samples, fewer than {folds} folds")
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % folds
    return fold


def default_sigma_grid(X: np.ndarray) -> list[float]:
    med = median_distance(X)
    return [med * 2.0**e for e in range(-2, 5)]


def default_c_grid() -> list[float]:
    return [2.0**e for e in range(-3, 8)]


def grid_search_cv(
    train: TrainSet,
    sigma_grid,
    c_grid,
    folds: int = 5,
    seed: int = 0,
    class_set: ClassSet | None = None,
    **train_kw,
) -> tuple[float, float]:
    """Pick (sigma, C) maximizing mean validation accuracy over stratified folds.

    Ties go to the smaller C, then the smaller sigma.
    """
    sigma_grid = sorted(float(s) for s in sigma_grid)
    c_grid = sorted(float(c) for c in c_grid)
    if not sigma_grid or not c_grid:
        raise IvmError("parameter grids must be non-empty")
    fold = stratified_folds(train.labels, folds, seed)
    best, best_score = None, -np.inf
    for C in c_grid:
        for sigma in sigma_grid:
            accs = []
            for f in range(folds):
                tr, va = train.subset(fold != f), train.subset(fold == f)
                model = train_ivm(tr, sigma, C, class_set=class_set, seed=seed, **train_kw)
                accs.append(np.mean(predict_labels(model, va.features) == va.labels))
            score = float(np.mean(accs))
            log.debug("grid sigma=%g C=%g cv_acc=%.4f", sigma, C, score)
            if score > best_score:
                best, best_score = (sigma, C), score
    return best


# ---------------------------------------------------------------------------
# serialization
#
# little-endian: b"IVM1", K, S, F (u32), sigma, C (f64), then f64 arrays
# alpha (K x (S+1), bias last), import points (S x F), feature mean (F),
# feature scale (F) and a class-present flag per class (K, 1.0 / 0.0).


def save_model(model: IvmModel, path) -> None:
    K, S, F = len(model.class_set), model.n_import, model.n_features
    parts = [
        MAGIC,
        struct.pack("<3I2d", K, S, F, model.sigma, model.C),
        np.ascontiguousarray(model.alpha, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.import_points, dtype="<f8").reshape(S, F).tobytes(),
        np.ascontiguousarray(model.mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.scale, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.present, dtype="<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_model(path, class_set: ClassSet | None = None) -> IvmModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise IvmError(f"{path}: not an IVM1 model file")
    K, S, F, sigma, C = struct.unpack_from("<3I2d", buf, 4)
    off = 4 + struct.calcsize("<3I2d")
    expected = off + 8 * (K * (S + 1) + S * F + 2 * F + K)
    if len(buf) != expected:
        raise IvmError(f"{path}: size {len(buf)} does not match header (expected {expected})")

    def take(n):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    alpha = take(K * (S + 1)).reshape(K, S + 1)
    imports = take(S * F).reshape(S, F)
    mean, scale = take(F), take(F)
    present = take(K) != 0
    if class_set is None:
        class_set = ClassSet(tuple(f"class_{k}" for k in range(K)))
    elif len(class_set) != K:
        raise IvmError(f"{path}: model has {K} classes, class set has {len(class_set)}")
    return IvmModel(imports, alpha, sigma, C, class_set, present, mean, scale)
