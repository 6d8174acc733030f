"""Binary kernel SVM trained with SMO, plus Platt-sigmoid calibration.

The solver works on the standard dual

    max  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j K(x_i, x_j)
    s.t. 0 <= a_i <= C_i,  y^T a = 0

by SMO. The first multiplier of every pair is the maximal KKT violator; the
second is either its maximal violating partner or, by default, the partner
with the largest second-order objective gain (Fan, Chen & Lin 2005), which
converges far faster for large C. Both stop on the same maximal-violation gap.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from . import pfv

PROBA_EPS = 1e-7
FULL_GRAM_LIMIT = 8000


class SvmError(ValueError):
    pass


@dataclass(frozen=True)
class SvmParams:
    C: float = 5.0e4
    gamma: float = 1.0e-5
    kernel: str = "rbf"
    class_weighting: bool = True
    kkt_tol: float = 1e-3
    max_iter: int | None = None  # default: max(10^7, 100 n)
    calibration_folds: int = 3
    working_set: str = "second-order"

    def __post_init__(self):
        if not self.C > 0:
            raise SvmError(f"C must be positive, got {self.C}")
        if not self.gamma > 0:
            raise SvmError(f"gamma must be positive, got {self.gamma}")
        if self.kernel not in ("rbf", "linear"):
            raise SvmError(f"unknown kernel {self.kernel!r}")
        if self.working_set not in ("second-order", "max-violating"):
            raise SvmError(f"unknown working-set rule {self.working_set!r}")


def kernel_matrix(a: np.ndarray, b: np.ndarray, params: SvmParams) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    dot = a @ b.T
    if params.kernel == "linear":
        return dot
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2 * dot
    return np.exp(-params.gamma * np.maximum(sq, 0.0))


class _KernelRows:
    """Row access to the Gram matrix: precomputed when small, LRU-cached otherwise."""

    def __init__(self, x: np.ndarray, params: SvmParams, cache_rows: int = 2000):
        self.x = x
        self.params = params
        n = x.shape[0]
        if n <= FULL_GRAM_LIMIT:
            self.full = kernel_matrix(x, x, params)
            self.diag = np.diag(self.full).copy()
        else:
            self.full = None
            self.cache: OrderedDict[int, np.ndarray] = OrderedDict()
            self.cache_rows = cache_rows
            if params.kernel == "rbf":
                self.diag = np.ones(n)
            else:
                self.diag = np.sum(x * x, axis=1)

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        hit = self.cache.get(i)
        if hit is not None:
            self.cache.move_to_end(i)
            return hit
        r = kernel_matrix(self.x[i], self.x, self.params)[0]
        self.cache[i] = r
        if len(self.cache) > self.cache_rows:
            self.cache.popitem(last=False)
        return r


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    params: SvmParams
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    c_pos: float = 0.0
    c_neg: float = 0.0
    objective: float = 0.0
    n_iter: int = 0
    platt_a: float | None = None
    platt_b: float | None = None

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]

    @property
    def calibrated(self) -> bool:
        return self.platt_a is not None and self.platt_b is not None


def class_costs(y: np.ndarray, params: SvmParams) -> tuple[float, float]:
    """(C for +1, C for -1). With weighting the minority positives get C * n_neg / n_pos."""
    n_pos = int(np.sum(y > 0))
    n_neg = len(y) - n_pos
    if params.class_weighting:
        return params.C * n_neg / n_pos, params.C
    return params.C, params.C


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def _validate(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise SvmError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise SvmError(f"{X.shape[0]} samples but {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise SvmError("need at least two samples")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("labels must be +1 or -1")
    if np.all(y > 0) or np.all(y < 0):
        raise SvmError("training data contains a single class")
    if not np.all(np.isfinite(X)):
        raise SvmError("non-finite feature values")
    return X, y


def svm_train(X: np.ndarray, y: np.ndarray, params: SvmParams | None = None) -> SvmModel:
    """Solve the SVM dual by SMO.

    Stops once the maximal violating pair is within ``params.kkt_tol``
    (``max_{I_up} -y G - min_{I_low} -y G <= kkt_tol``).
    """
    params = params or SvmParams()
    X, y = _validate(X, y)
    n = len(y)
    c_pos, c_neg = class_costs(y, params)
    C = np.where(y > 0, c_pos, c_neg)
    rows = _KernelRows(X, params)
    max_iter = params.max_iter or max(10_000_000, 100 * n)
    second_order = params.working_set == "second-order"
    if rows.full is not None:
        alpha, grad, it, done = _smo_full(rows.full, y, C, params.kkt_tol, max_iter, second_order)
    else:
        alpha, grad, it, done = _smo_rows(rows, y, C, params.kkt_tol, max_iter, second_order)
    if not done:
        raise SvmError(f"SMO did not converge within {max_iter} iterations")

    bias = _bias(alpha, grad, y, C)
    support = np.flatnonzero(alpha > 0)
    if rows.full is not None:
        objective = dual_objective(alpha, y, rows.full)
    else:
        # grad = Q a - e
        objective = float(alpha.sum() - 0.5 * alpha @ (grad + 1.0))
    return SvmModel(
        support_vectors=X[support].copy(),
        dual_coef=(alpha * y)[support],
        bias=bias,
        params=params,
        support=support,
        c_pos=c_pos,
        c_neg=c_neg,
        objective=objective,
        n_iter=it,
    )


_TAU = 1e-12


@njit(cache=True)
def _solve_pair(ai, aj, yi, yj, gi, gj, quad, ci, cj):
    """Analytic optimum of the two-variable subproblem, clipped to the box."""
    if yi != yj:
        delta = (-gi - gj) / quad
        diff = ai - aj
        ai += delta
        aj += delta
        if diff > 0:
            if aj < 0:
                aj = 0.0
                ai = diff
        else:
            if ai < 0:
                ai = 0.0
                aj = -diff
        if diff > ci - cj:
            if ai > ci:
                ai = ci
                aj = ci - diff
        else:
            if aj > cj:
                aj = cj
                ai = cj + diff
    else:
        delta = (gi - gj) / quad
        total = ai + aj
        ai -= delta
        aj += delta
        if total > ci:
            if ai > ci:
                ai = ci
                aj = total - ci
        else:
            if aj < 0:
                aj = 0.0
                ai = total
        if total > cj:
            if aj > cj:
                aj = cj
                ai = total - cj
        else:
            if ai < 0:
                ai = 0.0
                aj = total
    return ai, aj


@njit(cache=True)
def _smo_full(K, y, C, tol, max_iter, second_order):
    n = y.shape[0]
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a^T Q a - e^T a
    it = 0
    while it < max_iter:
        # i: maximal violator in I_up; j: minimal -yG in I_low
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(n):
            v = -y[t] * grad[t]
            if (y[t] > 0 and alpha[t] < C[t]) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (y[t] < 0 and alpha[t] < C[t]) or (y[t] > 0 and alpha[t] > 0):
                if v < gmin:
                    gmin = v
                    j = t
        if i < 0 or j < 0 or gmax - gmin <= tol:
            return alpha, grad, it, True
        it += 1
        if second_order:
            best = np.inf
            for t in range(n):
                if (y[t] < 0 and alpha[t] < C[t]) or (y[t] > 0 and alpha[t] > 0):
                    b = gmax + y[t] * grad[t]
                    if b > 0:
                        a = K[i, i] + K[t, t] - 2.0 * K[i, t]
                        if a <= 0:
                            a = _TAU
                        g = -(b * b) / a
                        if g < best:
                            best = g
                            j = t
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = _TAU
        old_i = alpha[i]
        old_j = alpha[j]
        ai, aj = _solve_pair(old_i, old_j, y[i], y[j], grad[i], grad[j], quad, C[i], C[j])
        alpha[i] = ai
        alpha[j] = aj
        di = (ai - old_i) * y[i]
        dj = (aj - old_j) * y[j]
        for t in range(n):
            grad[t] += y[t] * (di * K[i, t] + dj * K[j, t])
    return alpha, grad, it, False


def _smo_rows(rows: _KernelRows, y, C, tol, max_iter, second_order):
    """Same iteration as :func:`_smo_full`, vectorized over cached kernel rows."""
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    pos = y > 0
    diag = rows.diag
    it = 0
    while it < max_iter:
        minus_yg = -y * grad
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = np.where(pos, ~at_upper, ~at_lower)
        low = np.where(pos, ~at_lower, ~at_upper)
        up_vals = np.where(up, minus_yg, -np.inf)
        low_vals = np.where(low, minus_yg, np.inf)
        i = int(np.argmax(up_vals))
        j = int(np.argmin(low_vals))
        gmax = up_vals[i]
        if gmax - low_vals[j] <= tol:
            return alpha, grad, it, True
        it += 1
        Ki = rows.row(i)
        if second_order:
            b = gmax - low_vals
            a = diag[i] + diag - 2.0 * Ki
            a = np.where(a <= 0, _TAU, a)
            gain = np.where(np.isfinite(low_vals) & (b > 0), -(b * b) / a, np.inf)
            j = int(np.argmin(gain))
        Kj = rows.row(j)
        quad = diag[i] + diag[j] - 2.0 * Ki[j]
        if quad <= 0:
            quad = _TAU
        old_i, old_j = alpha[i], alpha[j]
        ai, aj = _solve_pair(old_i, old_j, y[i], y[j], grad[i], grad[j], quad, C[i], C[j])
        alpha[i], alpha[j] = ai, aj
        grad += y * ((ai - old_i) * y[i] * Ki + (aj - old_j) * y[j] * Kj)
    return alpha, grad, it, False


def _bias(alpha, grad, y, C) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        rho = float(np.mean(yg[free]))
    else:
        at_upper = alpha >= C
        pos = y > 0
        # bounds on rho from multipliers stuck at 0 or C
        ub_mask = (at_upper & ~pos) | (~at_upper & pos)
        lb_mask = (at_upper & pos) | (~at_upper & ~pos)
        ub = float(np.min(yg[ub_mask])) if np.any(ub_mask) else np.inf
        lb = float(np.max(yg[lb_mask])) if np.any(lb_mask) else -np.inf
        rho = (ub + lb) / 2
    return -rho


def decision(model: SvmModel, x: np.ndarray) -> np.ndarray | float:
    """``sum_i alpha_i y_i K(x_i, x) + b`` for one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[1] != model.dim:
        raise SvmError(f"input dim {xb.shape[1]} does not match model dim {model.dim}")
    out = kernel_matrix(xb, model.support_vectors, model.params) @ model.dual_coef + model.bias
    return float(out[0]) if single else out


# --- calibration -----------------------------------------------------------


def platt_fit(margins: np.ndarray, labels: np.ndarray, max_iter: int = 100) -> tuple[float, float]:
    """Fit ``p(+|m) = 1 / (1 + exp(A m + B))`` by Newton's method with backtracking.

    Uses Platt's smoothed targets; a correctly oriented classifier gives A < 0.
    """
    f = np.asarray(margins, dtype=np.float64).ravel()
    yl = np.asarray(labels).ravel() > 0
    n_pos = int(yl.sum())
    n_neg = len(yl) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SvmError("Platt calibration needs both classes")
    prior_b = math.log((n_neg + 1.0) / (n_pos + 1.0))
    if np.ptp(f) == 0:
        return 0.0, prior_b

    hi, lo = (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0)
    t = np.where(yl, hi, lo)

    def nll(a: float, b: float) -> float:
        z = f * a + b
        return float(np.sum(np.maximum(z, 0) - (1 - t) * z + np.log1p(np.exp(-np.abs(z)))))

    a, b = 0.0, prior_b
    fval = nll(a, b)
    sigma = 1e-12
    for _ in range(max_iter):
        z = f * a + b
        ez = np.exp(-np.abs(z))
        p = np.where(z >= 0, ez / (1 + ez), 1 / (1 + ez))  # 1 / (1 + exp(z))
        q = 1 - p
        d2 = p * q
        h11 = sigma + np.dot(f * f, d2)
        h22 = sigma + d2.sum()
        h21 = np.dot(f, d2)
        d1 = t - p
        g1 = np.dot(f, d1)
        g2 = d1.sum()
        if abs(g1) < 1e-5 and abs(g2) < 1e-5:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= 1e-10:
            na, nb = a + step * da, b + step * db
            nf = nll(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2
        else:
            break
    return float(a), float(b)


def sigmoid_proba(margin, a: float, b: float):
    z = np.asarray(margin, dtype=np.float64) * a + b
    ez = np.exp(-np.abs(z))
    p = np.where(z >= 0, ez / (1 + ez), 1 / (1 + ez))
    return np.clip(p, PROBA_EPS, 1 - PROBA_EPS)


def predict_proba(model: SvmModel, x: np.ndarray):
    """Calibrated probability of the positive (winner) class."""
    if not model.calibrated:
        raise SvmError("model has no Platt calibration")
    p = sigmoid_proba(decision(model, x), model.platt_a, model.platt_b)
    return float(p) if np.ndim(p) == 0 else p


def _group_folds(y: np.ndarray, groups: np.ndarray, n_folds: int) -> list[np.ndarray]:
    """Deterministic stratified split that keeps every group in one fold."""
    order = []
    seen = set()
    for g in groups:
        if g not in seen:
            seen.add(g)
            order.append(g)
    group_label = {}
    for g, label in zip(groups, y):
        group_label[g] = group_label.get(g, False) or label > 0
    assignment = {}
    counters = {True: 0, False: 0}
    for g in order:
        lab = group_label[g]
        assignment[g] = counters[lab] % n_folds
        counters[lab] += 1
    fold_of = np.array([assignment[g] for g in groups])
    return [np.flatnonzero(fold_of == k) for k in range(n_folds)]


def out_of_fold_margins(
    X: np.ndarray, y: np.ndarray, params: SvmParams, groups=None, n_folds: int = 3
) -> np.ndarray | None:
    """Margins for every sample from a model that never saw it; None if a split is single-class."""
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    margins = np.empty(len(y))
    for test_idx in _group_folds(y, groups, n_folds):
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        yt = y[train_mask]
        if len(test_idx) == 0 or np.all(yt > 0) or np.all(yt < 0):
            return None
        sub = svm_train(X[train_mask], yt, params)
        margins[test_idx] = decision(sub, X[test_idx])
    return margins


def fit_calibrated(X: np.ndarray, y: np.ndarray, params: SvmParams | None = None, groups=None) -> SvmModel:
    """Train on everything, then fit Platt on out-of-fold margins.

    Falls back to in-sample margins when the data cannot be split into
    ``params.calibration_folds`` two-class training sets.
    """
    params = params or SvmParams()
    X, y = _validate(X, y)
    model = svm_train(X, y, params)
    margins = None
    if params.calibration_folds >= 2:
        margins = out_of_fold_margins(X, y, params, groups, params.calibration_folds)
    if margins is None:
        margins = decision(model, X)
    a, b = platt_fit(margins, y)
    return replace(model, platt_a=a, platt_b=b)


# --- persistence -----------------------------------------------------------

_BUNDLE_VERSION = 1


def save_model(model: SvmModel, path: Path | str, channel: str = "", extra: dict | None = None) -> None:
    """Write ``<path>.txt`` (header) and ``<path>.pfv`` (support vectors).

    Coefficients, bias and Platt parameters are stored as ``repr`` floats and
    round-trip exactly; support vectors go through PFV's float32.
    """
    path = Path(path)
    p = model.params
    header = {
        "format": f"posterlab-svm {_BUNDLE_VERSION}",
        "channel": channel,
        "kernel": p.kernel,
        "C": repr(p.C),
        "gamma": repr(p.gamma),
        "class_weighting": str(p.class_weighting).lower(),
        "kkt_tol": repr(p.kkt_tol),
        "calibration_folds": str(p.calibration_folds),
        "bias": repr(model.bias),
        "platt_a": repr(model.platt_a),
        "platt_b": repr(model.platt_b),
        "dim": str(model.dim),
        "n_support": str(len(model.dual_coef)),
        "dual_coef": ",".join(repr(float(c)) for c in model.dual_coef),
    }
    for key, value in (extra or {}).items():
        header[f"x.{key}"] = value
    lines = [f"{k}={v}" for k, v in header.items()]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ids = [f"sv{i:06d}" for i in range(len(model.dual_coef))]
    pfv.write(path.with_suffix(".pfv"), f"svm:{channel}", ids, model.support_vectors.reshape(len(ids), -1))


def load_model(path: Path | str) -> tuple[SvmModel, dict]:
    """Inverse of :func:`save_model`; returns the model and any ``extra`` header entries."""
    path = Path(path)
    header = {}
    for line in path.with_suffix(".txt").read_text(encoding="utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            header[key] = value
    if header.get("format") != f"posterlab-svm {_BUNDLE_VERSION}":
        raise SvmError(f"{path}: not a model bundle")

    def opt_float(s: str) -> float | None:
        return None if s == "None" else float(s)

    params = SvmParams(
        C=float(header["C"]),
        gamma=float(header["gamma"]),
        kernel=header["kernel"],
        class_weighting=header["class_weighting"] == "true",
        kkt_tol=float(header["kkt_tol"]),
        calibration_folds=int(header["calibration_folds"]),
    )
    coef = header["dual_coef"]
    dual = np.array([float(c) for c in coef.split(",")] if coef else [], dtype=np.float64)
    _, _, sv = pfv.read(path.with_suffix(".pfv"))
    dim = int(header["dim"])
    model = SvmModel(
        support_vectors=sv.astype(np.float64).reshape(len(dual), dim),
        dual_coef=dual,
        bias=float(header["bias"]),
        params=params,
        platt_a=opt_float(header["platt_a"]),
        platt_b=opt_float(header["platt_b"]),
    )
    extra = {k[2:]: v for k, v in header.items() if k.startswith("x.")}
    return model, extra
