"""Linear support-vector baseline (one-vs-rest, class-weighted hinge loss).

Categorical columns are reduced to low-cardinality tokens (common-port list
plus two range buckets per port column, collapsed HTTP methods), one-hot
encoded together with the other categorical columns, and every feature is
scaled to [-1, 1].  Each one-vs-rest problem minimises

    0.5 * ||w||^2 + C * sum_i s_i * max(0, 1 - y_i * (w . x_i + b))

with ``s_i`` the class weight of row i's true class.  The bias is handled as
an extra constant feature and is therefore regularised too.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
import pandas as pd

from .pipeline import (
    CLASS_NAMES, NUMERIC_COLUMNS, ONEHOT, PORT_MISSING, TooFewRows, _category_sort_key,
    _category_text, class_weights, encode_labels, scale,
)
from .store import ArchMismatch, read_container, write_container

log = logging.getLogger(__name__)

COMMON_PORTS = (20, 21, 22, 23, 25, 42, 43, 53, 80, 161, 443)
OTHER_PORT = "other"
KEPT_METHODS = ("POST", "GET", "OPTIONS", "PROPFIND", "HEAD", "TRACE", "0")
C_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)


def bucket_ports(ports) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(token, well-known-bucket, high-bucket) per port.

    Ports on the common list keep their number as token.  Other ports below
    1024 set the first bucket, ports >= 1024 (and the missing code) set the
    second; both get the reserved token ``"other"``.
    """
    p = np.asarray(ports, dtype=np.int64)
    common = np.isin(p, COMMON_PORTS)
    low = (~common) & (p >= 0) & (p <= 1023)
    high = (~common) & ((p >= 1024) | (p == PORT_MISSING))
    tokens = np.where(common, p.astype(str), OTHER_PORT).astype(object)
    return tokens, low.astype(np.int64), high.astype(np.int64)


def collapse_methods(methods) -> np.ndarray:
    out = []
    for m in methods:
        m = "0" if m is None or (isinstance(m, float) and np.isnan(m)) else str(m)
        if "," in m:
            out.append("MULTIPLE")
        elif m in KEPT_METHODS:
            out.append(m)
        else:
            out.append("0")
    return np.asarray(out, dtype=object)


def categorical_frame(table: pd.DataFrame) -> pd.DataFrame:
    """Low-cardinality categorical columns used by the baseline."""
    cat = pd.DataFrame(index=table.index)
    for c in ONEHOT:
        cat[c] = _category_text(table[c]).fillna("0").to_numpy()
    for c in ("src.port", "dst.port"):
        tok, low, high = bucket_ports(table[c].to_numpy())
        cat[c] = tok
        cat[c + "_wellknown"] = low.astype(str)
        cat[c + "_registered"] = high.astype(str)
    cat["http.request.method"] = collapse_methods(table["http.request.method"].to_numpy())
    return cat


@dataclass
class SvmEncoder:
    """One-hot dictionaries plus per-feature min/max, fitted on training rows."""
    numeric: list[str]
    categories: dict[str, list[str]]
    mins: np.ndarray = field(repr=False, default=None)
    maxs: np.ndarray = field(repr=False, default=None)

    @classmethod
    def fit(cls, table: pd.DataFrame) -> "SvmEncoder":
        cat = categorical_frame(table)
        enc = cls(list(NUMERIC_COLUMNS),
                  {c: sorted(set(cat[c]), key=_category_sort_key) for c in cat.columns})
        raw = enc._raw(table, cat)
        enc.mins, enc.maxs = raw.min(axis=0), raw.max(axis=0)
        return enc

    @property
    def feature_names(self) -> list[str]:
        names = list(self.numeric)
        for c, vals in self.categories.items():
            names.extend(f"{c}={v}" for v in vals)
        return names

    def _raw(self, table, cat=None) -> np.ndarray:
        cat = categorical_frame(table) if cat is None else cat
        blocks = [table[list(self.numeric)].to_numpy(dtype=np.float64)]
        for c, vals in self.categories.items():
            lookup = {v: i for i, v in enumerate(vals)}
            codes = np.array([lookup.get(v, -1) for v in cat[c]], dtype=np.int64)
            hot = np.zeros((len(table), len(vals)))
            ok = codes >= 0
            hot[np.flatnonzero(ok), codes[ok]] = 1.0
            blocks.append(hot)
        return np.hstack(blocks)

    def transform(self, table: pd.DataFrame) -> np.ndarray:
        raw = self._raw(table)
        out = np.empty_like(raw)
        for j in range(raw.shape[1]):
            out[:, j] = scale(raw[:, j], self.mins[j], self.maxs[j])
        return out


# ------------------------------------------------------------ solvers

@numba.njit(cache=True)
def _xorshift(state):
    x = state[0]
    x ^= (x << np.uint64(13)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(7)
    x ^= (x << np.uint64(17)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    state[0] = x
    return x


@numba.njit(cache=True)
def _primal(w, X, y, upper):
    f = 0.0
    for j in range(w.shape[0]):
        f += 0.5 * w[j] * w[j]
    for i in range(X.shape[0]):
        m = 0.0
        for j in range(X.shape[1]):
            m += w[j] * X[i, j]
        m = 1.0 - y[i] * m
        if m > 0.0:
            f += upper[i] * m
    return f


@numba.njit(cache=True)
def _dcd(X, y, upper, max_iter, tol, seed, window):
    """Dual coordinate descent for the L1-loss linear SVM (bias in X).

    One epoch is a sweep over all rows in a fresh seeded order.  Stops when
    the best primal objective seen improved by at most ``tol`` (relative)
    over the last ``window`` epochs, or when the projected-gradient gap
    closes.  Returns the best iterate.
    """
    n, d = X.shape
    w = np.zeros(d)
    alpha = np.zeros(n)
    qd = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qd[i] = s
    order = np.arange(n)
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed) * np.uint64(2654435761) + np.uint64(88172645463325252)
    best = _primal(w, X, y, upper)
    best_w = w.copy()
    trail = np.full(window, best)
    it = 0
    converged = False
    while it < max_iter:
        for k in range(n - 1, 0, -1):
            r = int(_xorshift(state) % np.uint64(k + 1))
            tmp = order[k]
            order[k] = order[r]
            order[r] = tmp
        pg_max = -np.inf
        pg_min = np.inf
        for s in range(n):
            i = order[s]
            if qd[i] <= 0.0:
                continue
            g = 0.0
            for j in range(d):
                g += w[j] * X[i, j]
            g = y[i] * g - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a >= upper[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if abs(pg) > 1e-12:
                na = min(max(a - g / qd[i], 0.0), upper[i])
                delta = (na - a) * y[i]
                alpha[i] = na
                for j in range(d):
                    w[j] += delta * X[i, j]
        it += 1
        f = _primal(w, X, y, upper)
        if f < best:
            best = f
            best_w[:] = w
        old = trail[it % window]
        trail[it % window] = best
        if pg_max - pg_min <= tol:
            converged = True
            best_w[:] = w
            break
        if it >= window and old - best <= tol * max(1.0, abs(best)):
            converged = True
            break
    return best_w, it, converged


def _subgradient(X, y, upper, max_iter, tol, seed, batch=256):
    """Averaged mini-batch stochastic subgradient (Pegasos form) on the primal."""
    n, d = X.shape
    C_eff = upper / upper.mean()  # per-sample weights relative to C
    lam = 1.0 / (upper.mean() * n)
    w = np.zeros(d)
    avg = np.zeros(d)
    radius = np.sqrt(2.0 * C_eff.mean() / lam)
    t = 0
    prev = np.inf
    for epoch in range(max_iter):
        perm = np.random.default_rng(seed + epoch).permutation(n)
        for i in range(0, n, batch):
            b = perm[i:i + batch]
            t += 1
            margin = y[b] * (X[b] @ w)
            coef = np.where(margin < 1, C_eff[b] * y[b], 0.0)
            w *= 1.0 - 1.0 / t
            w += (1.0 / (lam * t * len(b))) * (X[b].T @ coef)
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        f = primal_objective(avg, X, y, upper)
        if abs(prev - f) <= tol * max(1.0, abs(f)):
            return avg, epoch + 1, True
        prev = f
    return avg, max_iter, False


def primal_objective(w, X, y, upper) -> float:
    """0.5||w||^2 + sum_i upper_i * hinge_i, with upper_i = C * s_i."""
    return float(0.5 * w @ w + np.sum(upper * np.maximum(0.0, 1.0 - y * (X @ w))))


@dataclass
class SvmModel:
    weights: np.ndarray       # (K, D)
    biases: np.ndarray        # (K,)
    C: float
    iterations: list[int]
    converged: bool
    solver: str = "dcd"

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X) @ self.weights.T + self.biases

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


def fit_linear_svc(X, y, C: float, class_weights=None, max_iter: int = 10000, seed: int = 0,
                   tol: float = 1e-4, n_classes: Optional[int] = None,
                   solver: str = "dcd", window: int = 10) -> SvmModel:
    """One-vs-rest class-weighted linear SVC.

    ``solver="dcd"`` runs dual coordinate descent and stops when the primal
    objective stalls or the projected-gradient gap closes (see ``_dcd``);
    ``solver="subgradient"`` runs
    averaged stochastic subgradient descent and stops when the relative
    objective improvement drops below ``tol``.  Either stops after
    ``max_iter`` epochs, reported via ``converged``.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if class_weights is None:
        cw = np.ones(k)
    elif hasattr(class_weights, "as_array"):
        cw = class_weights.as_array()
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
    upper = C * cw[y]
    Xa = np.hstack([X, np.ones((len(X), 1))])
    W = np.zeros((k, X.shape[1]))
    b = np.zeros(k)
    iters, conv = [], True
    classes = [1] if k == 2 else range(k)
    for c in classes:
        yc = np.where(y == c, 1.0, -1.0)
        if solver == "dcd":
            w, it, ok = _dcd(Xa, yc, upper, max_iter, tol, seed + c, window)
        elif solver == "subgradient":
            w, it, ok = _subgradient(Xa, yc, upper, max_iter, tol, seed + c)
        else:
            raise ValueError(f"unknown solver {solver!r}")
        W[c], b[c] = w[:-1], w[-1]
        iters.append(int(it))
        conv &= bool(ok)
    if k == 2:
        W[0], b[0] = -W[1], -b[1]
    if not conv:
        log.warning("linear SVC (C=%g) did not converge within %d iterations", C, max_iter)
    return SvmModel(W, b, float(C), iters, conv, solver)


# ------------------------------------------------------------ model selection

def stratified_folds(labels, folds: int, seed: int) -> np.ndarray:
    """Fold id per row; each class is dealt round-robin after a seeded shuffle."""
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if (counts < folds).any():
        raise TooFewRows(f"every class needs at least {folds} rows for {folds}-fold CV")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = (np.arange(len(idx)) + offset) % folds
        offset += len(idx)
    return fold


@dataclass
class GridResult:
    best_C: float
    mean_accuracy: dict[float, float]
    fold_accuracy: dict[float, list[float]]
    fit_seconds: dict[float, float]


def grid_search_cv(table: pd.DataFrame, labels, C_grid: Sequence[float] = C_GRID, folds: int = 5,
                   seed: int = 0, max_iter: int = 10000, tol: float = 1e-4,
                   n_classes: int = len(CLASS_NAMES), solver: str = "dcd") -> GridResult:
    """k-fold CV over C; best by mean validation accuracy, ties to the smaller C."""
    y = np.asarray(labels)
    if len(y) < folds:
        raise TooFewRows("fewer rows than folds")
    fold = stratified_folds(y, folds, seed)
    prepared = []
    for f in range(folds):
        tr, va = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
        enc = SvmEncoder.fit(table.iloc[tr])
        cw = class_weights(y[tr], n_classes=n_classes)
        prepared.append((enc.transform(table.iloc[tr]), y[tr], enc.transform(table.iloc[va]), y[va], cw))
    mean, per_fold, secs = {}, {}, {}
    for C in sorted(C_grid):
        accs, t0 = [], time.perf_counter()
        for Xtr, ytr, Xva, yva, cw in prepared:
            model = fit_linear_svc(Xtr, ytr, C, cw, max_iter=max_iter, seed=seed, tol=tol,
                                   n_classes=n_classes, solver=solver)
            accs.append(float(np.mean(model.predict(Xva) == yva)))
        per_fold[C], mean[C] = accs, float(np.mean(accs))
        secs[C] = time.perf_counter() - t0
        log.info("C=%g mean CV accuracy %.5f (%.1fs)", C, mean[C], secs[C])
    best = None
    for C in sorted(C_grid):
        if best is None or mean[C] > mean[best]:
            best = C
    return GridResult(best, mean, per_fold, secs)


def proportional_subsample(labels, size: int, seed: int) -> np.ndarray:
    """Row indices of a fixed-size sample following the class proportions."""
    y = np.asarray(labels)
    if size > len(y):
        raise ValueError(f"sample size {size} exceeds {len(y)} rows")
    classes, counts = np.unique(y, return_counts=True)
    exact = counts * size / len(y)
    take = np.floor(exact).astype(int)
    for j in np.argsort(-(exact - take), kind="stable")[: size - take.sum()]:
        take[j] += 1
    rng = np.random.default_rng(seed)
    picked = [rng.choice(np.flatnonzero(y == c), size=t, replace=False)
              for c, t in zip(classes, take)]
    return np.sort(np.concatenate(picked))


@dataclass
class BaselineResult:
    sample_size: int
    class_sizes: list[int]
    grid: GridResult
    model: SvmModel
    encoder: SvmEncoder
    train_index: np.ndarray
    test_index: np.ndarray
    test_actual: np.ndarray
    test_predicted: np.ndarray
    accuracy: float
    runtime_seconds: float


def run_baseline(table: pd.DataFrame, sample_size: int, seed: int = 0,
                 C_grid: Sequence[float] = C_GRID, folds: int = 5, max_iter: int = 10000,
                 solver: str = "dcd") -> BaselineResult:
    """Subsample -> 80/20 split -> CV grid search on the 80% -> refit -> test."""
    y_all, _, _ = encode_labels(table)
    sample = proportional_subsample(y_all, sample_size, seed)
    y = y_all[sample]
    fold = stratified_folds(y, 5, seed)
    tr, te = sample[fold != 0], sample[fold == 0]
    sub = table.iloc[tr]
    grid = grid_search_cv(sub, y_all[tr], C_grid, folds, seed, max_iter, solver=solver)
    enc = SvmEncoder.fit(sub)
    cw = class_weights(y_all[tr], n_classes=len(CLASS_NAMES))
    t0 = time.perf_counter()
    model = fit_linear_svc(enc.transform(sub), y_all[tr], grid.best_C, cw, max_iter=max_iter,
                           seed=seed, n_classes=len(CLASS_NAMES), solver=solver)
    runtime = time.perf_counter() - t0
    pred = model.predict(enc.transform(table.iloc[te]))
    acc = float(np.mean(pred == y_all[te]))
    sizes = np.bincount(y, minlength=len(CLASS_NAMES)).tolist()
    return BaselineResult(sample_size, sizes, grid, model, enc, tr, te, y_all[te], pred, acc, runtime)


def save_svm(model: SvmModel, path) -> None:
    arch = {"kind": "linear_svc", "n_classes": int(model.weights.shape[0]),
            "n_features": int(model.weights.shape[1]), "C": model.C,
            "iterations": model.iterations, "converged": model.converged, "solver": model.solver}
    write_container(path, arch, {"weights": model.weights, "biases": model.biases})


def load_svm(path) -> SvmModel:
    arch, arrays = read_container(path)
    if arch.get("kind") != "linear_svc":
        raise ArchMismatch(f"{path}: not a linear SVC file")
    return SvmModel(arrays["weights"], arrays["biases"], arch["C"], arch["iterations"],
                    arch["converged"], arch["solver"])
