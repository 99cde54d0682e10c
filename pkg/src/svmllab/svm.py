"""Kernel SVM trained as a hard-margin problem on a ridged kernel.

Adding ``(1/C) I`` to the training kernel and solving the hard-margin dual is
equivalent to an L2-slack soft margin with weight ``C``.  Every support vector
then satisfies the margin equality exactly, so on the support set the solution
``(alpha, b)`` is characterized by one symmetric linear system

    [[Kbar, y], [y^T, 0]] (alpha, b) = (1, ..., 1, 0),   Kbar_ij = y_i y_j K_ij

with ``K`` the ridged kernel.  The solver iterates that observation as an
active-set fixed point: solve on the current candidate set, drop points whose
coefficient went nonpositive, admit margin violators, repeat.  ``Kbar`` is
positive definite (minimum eigenvalue at least ``1/C``), so the bordered
system is solved by Cholesky block elimination with one step of iterative
refinement.

Note the two kernels in play: training-side margins use the ridged kernel;
predictions at new points always use the plain cross kernel.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, ClassifierMixin

from .kernels import kernel_matrix
from .metrics import LinearMetric, default_metric
from .validation import check_features, check_labels, check_same_dim

SUPPORT_THRESHOLD = 1e-10


@dataclass
class SolverOptions:
    tolerance: float = 1e-8       # max allowed KKT margin residual
    max_rounds: int = 100         # active-set rounds before giving up
    jitter: float = 1e-10         # diagonal bump on factorization failure


class SvmFitError(RuntimeError):
    """Raised when the active-set iteration fails; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class BorderedSystem:
    """The margin-equality system over the support set."""

    matrix: np.ndarray            # (s+1) x (s+1), [[Kbar, y], [y^T, 0]]
    rhs: np.ndarray               # (1, ..., 1, 0)
    support_idx: np.ndarray
    condition_estimate: float

    def solve(self):
        return np.linalg.solve(self.matrix, self.rhs)


class _CholBordered:
    """Cholesky block-elimination solver for [[Kbar, y], [y^T, 0]]."""

    def __init__(self, kbar, y, jitter=1e-10):
        self.y = y
        last_err = None
        bump = 0.0
        for _ in range(4):
            try:
                self.factor = cho_factor(kbar + bump * np.eye(kbar.shape[0]) if bump else kbar,
                                         lower=True)
                break
            except np.linalg.LinAlgError as err:  # pragma: no cover - degenerate
                last_err = err
                bump = jitter if bump == 0.0 else bump * 100.0
        else:  # pragma: no cover - degenerate
            raise SvmFitError("kernel block could not be factorized",
                              {"jitter": bump, "cause": repr(last_err)})
        self.w = cho_solve(self.factor, y)      # Kbar^{-1} y
        self.yKinvy = float(y @ self.w)

    def solve(self, top, bottom=0.0):
        """Solve [[Kbar, y], [y^T, 0]] (v, mu) = (top, bottom)."""
        z = cho_solve(self.factor, top)
        mu = (float(self.y @ z) - bottom) / self.yKinvy
        return z - mu * self.w, mu


def _solve_margin_system(kbar, y, jitter=1e-10):
    """Solve for (alpha, b) on a candidate support set, with one step of
    iterative refinement to push residuals to machine level."""
    chol = _CholBordered(kbar, y, jitter=jitter)
    ones = np.ones_like(y, dtype=np.float64)
    alpha, b = chol.solve(ones, 0.0)
    r_top = ones - (kbar @ alpha + y * b)
    r_bot = -float(y @ alpha)
    d_alpha, d_b = chol.solve(r_top, -r_bot)
    return alpha + d_alpha, b + d_b, chol


def solve_svm(K_train: np.ndarray, y: np.ndarray, C: float, options: SolverOptions | None = None):
    """Active-set solve of the ridged hard-margin SVM on a precomputed
    (un-ridged) training kernel.

    Returns ``(alpha, b, rounds)`` with ``alpha`` over all points (exact
    zeros off the final active set).
    """
    options = options or SolverOptions()
    n = y.shape[0]
    ridge = 1.0 / C
    Kbar_full = K_train * np.outer(y, y)
    active = np.ones(n, dtype=bool)
    seen = set()
    single_move = False
    alpha = np.zeros(n)
    b = 0.0
    for rounds in range(1, options.max_rounds + 1):
        idx = np.flatnonzero(active)
        kbar = Kbar_full[np.ix_(idx, idx)].copy()
        kbar[np.arange(idx.size), np.arange(idx.size)] += ridge
        alpha_a, b, _ = _solve_margin_system(kbar, y[idx].astype(np.float64),
                                             jitter=options.jitter)
        alpha = np.zeros(n)
        alpha[idx] = alpha_a
        # margins on the plain kernel; for active i this equals 1 - alpha_i/C
        f0 = K_train @ (alpha * y) + b
        margins = y * f0
        keep = active & (alpha > 0.0)
        violators = (~active) & (margins < 1.0 - 1e-12)
        new_active = keep | violators
        if not new_active.any():
            raise SvmFitError("active set emptied; labels may be degenerate",
                              {"round": rounds})
        if np.array_equal(new_active, active):
            return alpha, float(b), rounds
        if single_move:
            # adjust one point at a time to break a cycle
            changed = np.zeros(n, dtype=bool)
            dropped = active & ~new_active
            if dropped.any():
                worst = np.flatnonzero(dropped)[np.argmin(alpha[dropped])]
            else:
                worst = np.flatnonzero(violators)[np.argmin(margins[violators])]
            changed[worst] = True
            new_active = np.where(changed, ~active, active)
        key = new_active.tobytes()
        if key in seen:
            single_move = True
        seen.add(key)
        active = new_active
    raise SvmFitError(
        f"active-set iteration did not converge in {options.max_rounds} rounds",
        {"n": n, "C": C, "last_active_size": int(active.sum()),
         "max_margin_residual": float(np.max(np.abs(y * f0 + alpha / C - 1.0)[active]))
         if active.any() else None},
    )


def _digest(X, y):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return "sha256:" + h.hexdigest()


class RbfSvm(BaseEstimator, ClassifierMixin):
    """RBF-kernel SVM under an arbitrary linear metric.

    Parameters
    ----------
    metric : LinearMetric or None
        Kernel metric; ``None`` selects the width heuristic
        ``sigma^2 = n_features`` (spherical ``1/sqrt(d)``).
    c : float
        Slack weight ``C`` of the ridge ``K + (1/C) I``.
    tolerance, max_rounds, jitter : solver options, see ``SolverOptions``.

    Attributes after ``fit``: ``alpha_`` (length-n dual coefficients),
    ``bias_``, ``support_idx_`` (indices with ``alpha > 1e-10``),
    ``metric_`` (resolved metric), ``n_rounds_``.
    """

    def __init__(self, metric=None, c=1.0, tolerance=1e-8, max_rounds=100, jitter=1e-10):
        self.metric = metric
        self.c = c
        self.tolerance = tolerance
        self.max_rounds = max_rounds
        self.jitter = jitter

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, X.shape[0], require_both_classes=True)
        if not (self.c > 0):
            raise ValueError("C must be positive")
        metric = self.metric if self.metric is not None else default_metric("sphere", X.shape[1])
        if metric.d != X.shape[1]:
            raise ValueError(f"metric dimension {metric.d} does not match data {X.shape[1]}")
        K = kernel_matrix(metric, X)
        options = SolverOptions(self.tolerance, self.max_rounds, self.jitter)
        alpha, bias, rounds = solve_svm(K.values, y.astype(np.float64), float(self.c), options)
        self.X_ = X
        self.y_ = y
        self.metric_ = metric
        self.alpha_ = alpha
        self.bias_ = bias
        self.n_rounds_ = rounds
        self.support_idx_ = np.flatnonzero(alpha > SUPPORT_THRESHOLD)
        self._train_kernel = K
        self._support_cache = None
        self._check_kkt(K.values)
        return self

    def _check_kkt(self, K_train):
        yf = self.y_ * (K_train @ (self.alpha_ * self.y_) + self.bias_)
        sv = self.alpha_ > 0.0
        residual = 0.0
        if sv.any():
            # ridged margin equality on the active set
            residual = float(np.max(np.abs(yf[sv] + self.alpha_[sv] / self.c - 1.0)))
        if residual > self.tolerance:
            raise SvmFitError(f"KKT margin residual {residual:.3e} exceeds tolerance",
                              {"residual": residual})
        self.kkt_residual_ = residual

    # -- prediction ---------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "alpha_"):
            raise RuntimeError("model is not fitted")

    def decision_embedded(self, Z):
        """Decision values from already-transformed coordinates ``Z = L x``.

        This is the single code path for all decision values; kernels depend
        on the inputs only through ``L x``.
        """
        self._require_fitted()
        Z = np.asarray(Z, dtype=np.float64)
        single = Z.ndim == 1
        Z = np.atleast_2d(Z)
        sv = self.support_idx_
        Z_sv = self.metric_.transform(self.X_[sv])
        d_sq = (np.einsum("ij,ij->i", Z, Z)[:, None]
                + np.einsum("ij,ij->i", Z_sv, Z_sv)[None, :]
                - 2.0 * (Z @ Z_sv.T))
        K_cross = np.exp(-np.maximum(d_sq, 0.0))
        h = K_cross @ (self.alpha_[sv] * self.y_[sv]) + self.bias_
        return float(h[0]) if single else h

    def decision_function(self, X):
        """Raw decision value(s) ``sum_j alpha_j y_j k(x_j, x) + b`` using the
        plain (un-ridged) cross kernel."""
        self._require_fitted()
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = check_same_dim(np.atleast_2d(X), self.metric_.d)
        h = self.decision_embedded(self.metric_.transform(X))
        return float(h[0]) if single else h

    def predict(self, X):
        """Class labels; the sign convention resolves exact zeros to +1."""
        h = self.decision_function(X)
        h = np.atleast_1d(h)
        return np.where(h >= 0.0, 1, -1)

    def error_rate(self, X, y):
        """Fraction of sign mismatches on an evaluation set."""
        y = check_labels(y)
        pred = self.predict(X)
        return float(np.mean(pred != y))

    # -- support-set system (differentiated by the metric learner) ----------

    def _train_kernel_values(self):
        if self._train_kernel is None:
            self._train_kernel = kernel_matrix(self.metric_, self.X_)
        return self._train_kernel.values

    def _support_system(self):
        """Cached Cholesky solver for the bordered system restricted to the
        support set, plus the plain support-block kernel values."""
        self._require_fitted()
        if self._support_cache is None:
            sv = self.support_idx_
            if sv.size == 0:
                raise SvmFitError("support set is empty")
            K_sv = self._train_kernel_values()[np.ix_(sv, sv)]
            y_sv = self.y_[sv].astype(np.float64)
            kbar = K_sv * np.outer(y_sv, y_sv)
            kbar[np.arange(sv.size), np.arange(sv.size)] += 1.0 / self.c
            chol = _CholBordered(kbar, y_sv, jitter=self.jitter)
            self._support_cache = (chol, K_sv, kbar)
        return self._support_cache

    def solve_bordered(self, g):
        """Solve ``H u = g`` on the support set (``g`` has s+1 entries)."""
        chol, _, _ = self._support_system()
        top, bottom = g[:-1], float(g[-1])
        u_top, u_last = chol.solve(top, bottom)
        return np.concatenate([u_top, [u_last]])

    def bordered_system(self):
        """Materialized bordered system over the support set."""
        _, _, kbar = self._support_system()
        sv = self.support_idx_
        s = sv.size
        H = np.zeros((s + 1, s + 1))
        H[:s, :s] = kbar
        H[:s, s] = self.y_[sv]
        H[s, :s] = self.y_[sv]
        rhs = np.concatenate([np.ones(s), [0.0]])
        cond = float(np.linalg.cond(H))
        return BorderedSystem(H, rhs, sv.copy(), cond)

    # -- serialization -------------------------------------------------------

    def to_json_dict(self):
        self._require_fitted()
        return {
            "alpha": self.alpha_.tolist(),
            "b": self.bias_,
            "support_idx": self.support_idx_.tolist(),
            "C": float(self.c),
            "metric": self.metric_.to_json_dict(),
            "train_digest": _digest(self.X_, self.y_),
        }

    @classmethod
    def from_json_dict(cls, data, X, y):
        """Rebuild a fitted model from its JSON dict plus the original
        training arrays (verified against the recorded digest)."""
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        digest = _digest(X, y)
        if digest != data["train_digest"]:
            raise ValueError("training data does not match the recorded digest")
        metric = LinearMetric.from_json_dict(data["metric"])
        model = cls(metric=metric, c=data["C"])
        model.X_ = X
        model.y_ = y
        model.metric_ = metric
        model.alpha_ = np.asarray(data["alpha"], dtype=np.float64)
        model.bias_ = float(data["b"])
        model.support_idx_ = np.asarray(data["support_idx"], dtype=np.int64)
        model.n_rounds_ = 0
        model._train_kernel = None
        model._support_cache = None
        model.kkt_residual_ = float("nan")
        return model

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)


def train_digest(X, y):
    """Content digest of a training set (features as float64 bytes plus
    labels as int64 bytes)."""
    return _digest(check_features(X), check_labels(y))
