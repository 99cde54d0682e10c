"""Reference metric learners and the kNN rule used for comparisons.

NCA maximizes the expected leave-one-out accuracy under softmax neighbor
sampling, ITML projects a LogDet-regularized metric onto sampled pair
constraints with cyclic Bregman updates, and LMNN minimizes the
pull-plus-hinge objective by projected subgradient descent with eigenvalue
clamping.  All three hand back a ``LinearMetric`` (factoring ``M`` when they
optimize the quadratic form directly), so their output drops straight into
the same kernel and kNN code paths as the jointly learned metrics.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import LinearMetric, default_metric
from .optimize import minimize
from .svml import _project_to_shape, weighted_difference_outer
from .validation import check_features, check_labels


# -- kNN ------------------------------------------------------------------------

def knn_predict(X_train, y_train, X_query, k, metric=None):
    """Majority vote among the k nearest training points.

    Distance ties at the k-th neighbor break toward the lowest index; voting
    ties resolve to +1 (same convention as the SVM sign rule).
    """
    X_train = check_features(X_train)
    y_train = check_labels(y_train, X_train.shape[0])
    if not (1 <= k <= X_train.shape[0]):
        raise ValueError(f"k={k} must lie in [1, n_train]")
    X_query = np.asarray(X_query, dtype=np.float64)
    single = X_query.ndim == 1
    X_query = np.atleast_2d(X_query)
    if metric is None:
        Z_train, Z_query = X_train, X_query
    else:
        Z_train = metric.transform(X_train)
        Z_query = metric.transform(X_query)
    d_sq = (np.einsum("ij,ij->i", Z_query, Z_query)[:, None]
            + np.einsum("ij,ij->i", Z_train, Z_train)[None, :]
            - 2.0 * Z_query @ Z_train.T)
    # lexicographic (distance, index): stable argsort over rounded-free keys
    order = np.lexsort((np.broadcast_to(np.arange(X_train.shape[0]), d_sq.shape), d_sq),
                       axis=1)
    votes = y_train[order[:, :k]].sum(axis=1)
    labels = np.where(votes >= 0, 1, -1)
    return int(labels[0]) if single else labels


# -- NCA --------------------------------------------------------------------------

def nca_sampling_probabilities(metric, X):
    """Softmax neighbor-sampling matrix: ``p_ij ~ exp(-d2(i, j))``, ``p_ii=0``."""
    Z = metric.transform(check_features(X))
    d_sq = (np.einsum("ij,ij->i", Z, Z)[:, None]
            + np.einsum("ij,ij->i", Z, Z)[None, :]
            - 2.0 * Z @ Z.T)
    np.fill_diagonal(d_sq, np.inf)
    shifted = -(d_sq - d_sq.min(axis=1, keepdims=True))
    P = np.exp(shifted)
    np.fill_diagonal(P, 0.0)
    return P / P.sum(axis=1, keepdims=True)


def nca_loo_accuracy(metric, X, y):
    """Expected leave-one-out accuracy under the sampling distribution."""
    y = check_labels(y)
    P = nca_sampling_probabilities(metric, X)
    same = (y[:, None] == y[None, :]) & ~np.eye(y.size, dtype=bool)
    return float(np.mean(np.sum(P * same, axis=1)))


def nca_accuracy_gradient(metric, X, y):
    """Gradient of the leave-one-out accuracy in the metric's parameters."""
    X = check_features(X)
    y = check_labels(y, X.shape[0])
    n = X.shape[0]
    P = nca_sampling_probabilities(metric, X)
    same = (y[:, None] == y[None, :]) & ~np.eye(n, dtype=bool)
    p_i = np.sum(P * same, axis=1)
    W_all = P * p_i[:, None]
    W_same = P * same
    Q = weighted_difference_outer(X, X, W_all) - weighted_difference_outer(X, X, W_same)
    G = (2.0 / n) * (metric.matrix @ Q)
    return _project_to_shape(G, metric)


class NCA(BaseEstimator, TransformerMixin):
    """Neighborhood component analysis via conjugate-gradient ascent.

    The accuracy objective is non-convex and the exact softmax makes every
    evaluation O(n^2 d), which does not scale past a few thousand points;
    inputs beyond ``max_n`` rows are rejected rather than subsampled.
    """

    def __init__(self, shape="full", init=None, max_iter=100, grad_tol=1e-7,
                 max_n=5000):
        self.shape = shape
        self.init = init
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.max_n = max_n

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        if X.shape[0] < 2:
            raise ValueError("NCA needs at least two points")
        if X.shape[0] > self.max_n:
            raise ValueError(f"n={X.shape[0]} exceeds max_n={self.max_n}")
        metric0 = self.init if self.init is not None else default_metric(self.shape, X.shape[1])

        def fun(entries):
            metric = metric0.with_entries_vector(entries)
            return -nca_loo_accuracy(metric, X, y), metric

        def jac(entries, metric):
            return -nca_accuracy_gradient(metric, X, y)

        result = minimize(fun, metric0.entries_vector(), jac, method="cg",
                          max_iter=self.max_iter, grad_tol=self.grad_tol)
        self.metric_ = metric0.with_entries_vector(result.x)
        self.loo_accuracy_ = -result.value
        self.initial_accuracy_ = nca_loo_accuracy(metric0, X, y)
        self.n_iterations_ = result.n_iterations
        self.stop_reason_ = result.stop_reason
        return self

    def transform(self, X):
        return self.metric_.transform(X)


# -- ITML -------------------------------------------------------------------------

@dataclass
class _PairConstraint:
    i: int
    j: int
    delta: int      # +1 similar (d2 <= upper), -1 dissimilar (d2 >= lower)
    bound: float


def _sample_index_pairs(rng, n, count):
    i = rng.integers(0, n, size=3 * count)
    j = rng.integers(0, n, size=3 * count)
    keep = i != j
    pairs = np.unique(np.sort(np.stack([i[keep], j[keep]], axis=1), axis=1), axis=0)
    rng.shuffle(pairs)
    return pairs[:count]


class ITML(BaseEstimator, TransformerMixin):
    """Information-theoretic metric learning with cyclic Bregman projections.

    Similar pairs are pushed under ``upper``, dissimilar pairs over ``lower``;
    unset bounds default to the 5th/95th percentiles of the squared prior
    distances over a 10n-pair sample.  Rank-one LogDet updates keep the
    quadratic form positive definite without any eigendecompositions.
    """

    def __init__(self, upper=None, lower=None, gamma=1.0, max_sweeps=50,
                 pair_sample_factor=10, pair_budget_factor=20, prior=None,
                 seed=20110101, tol=1e-3):
        self.upper = upper
        self.lower = lower
        self.gamma = gamma
        self.max_sweeps = max_sweeps
        self.pair_sample_factor = pair_sample_factor
        self.pair_budget_factor = pair_budget_factor
        self.prior = prior
        self.seed = seed
        self.tol = tol

    def _resolve_bounds(self, rng, X, M0):
        if self.upper is not None and self.lower is not None:
            return float(self.upper), float(self.lower)
        pairs = _sample_index_pairs(rng, X.shape[0], self.pair_sample_factor * X.shape[0])
        diffs = X[pairs[:, 0]] - X[pairs[:, 1]]
        d_sq = np.einsum("ij,jk,ik->i", diffs, M0, diffs)
        upper = self.upper if self.upper is not None else float(np.percentile(d_sq, 5))
        lower = self.lower if self.lower is not None else float(np.percentile(d_sq, 95))
        return float(upper), float(lower)

    def _sample_constraints(self, rng, X, y, upper, lower):
        budget = self.pair_budget_factor * X.shape[0]
        pairs = _sample_index_pairs(rng, X.shape[0], 4 * budget)
        same = y[pairs[:, 0]] == y[pairs[:, 1]]
        nonzero = np.einsum("ij,ij->i", X[pairs[:, 0]] - X[pairs[:, 1]],
                            X[pairs[:, 0]] - X[pairs[:, 1]]) > 1e-18
        sim = pairs[same & nonzero][: budget // 2]
        dis = pairs[~same & nonzero][: budget // 2]
        constraints = [_PairConstraint(int(i), int(j), 1, upper) for i, j in sim]
        constraints += [_PairConstraint(int(i), int(j), -1, lower) for i, j in dis]
        return constraints

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        rng = np.random.default_rng(self.seed)
        if self.prior is not None:
            M0 = self.prior.psd_matrix() if isinstance(self.prior, LinearMetric) \
                else np.asarray(self.prior, dtype=np.float64)
        else:
            M0 = default_metric("full", X.shape[1]).psd_matrix()
        if np.linalg.eigvalsh(M0).min() <= 0:
            raise ValueError("the prior metric must be positive definite")
        upper, lower = self._resolve_bounds(rng, X, M0)
        self.upper_, self.lower_ = upper, lower
        constraints = self._sample_constraints(rng, X, y, upper, lower)
        self.n_constraints_ = len(constraints)

        M = M0.copy()
        if constraints:
            lam = np.zeros(len(constraints))
            xi = np.array([c.bound for c in constraints])
            gamma = float(self.gamma)
            converged = False
            for sweep in range(self.max_sweeps):
                lam_before = lam.copy()
                for idx, c in enumerate(constraints):
                    v = X[c.i] - X[c.j]
                    Mv = M @ v
                    p = float(v @ Mv)
                    if p <= 1e-15:
                        continue
                    delta = c.delta
                    alpha = min(lam[idx], delta / 2.0 * (1.0 / p - gamma / xi[idx]))
                    lam[idx] -= alpha
                    beta = delta * alpha / (1.0 - delta * alpha * p)
                    xi[idx] = gamma * xi[idx] / (gamma + delta * alpha * xi[idx])
                    M += beta * np.outer(Mv, Mv)
                change = float(np.linalg.norm(lam - lam_before))
                if change <= self.tol * max(1.0, float(np.linalg.norm(lam))):
                    converged = True
                    break
            self.n_sweeps_ = sweep + 1
            self.converged_ = converged
        else:
            self.n_sweeps_ = 0
            self.converged_ = True

        M = (M + M.T) / 2.0
        bounds = [c.bound for c in constraints]
        slack_bounds = xi.tolist() if constraints else []
        self.violation_ = self._max_violation(M, X, constraints, bounds)
        self.slack_violation_ = self._max_violation(M, X, constraints, slack_bounds)
        if not self.converged_:
            warnings.warn(f"ITML did not converge in {self.max_sweeps} sweeps "
                          f"(max constraint violation {self.violation_:.3e})",
                          RuntimeWarning)
        self.quadratic_form_ = M
        self.metric_ = LinearMetric.full(np.linalg.cholesky(M).T)
        return self

    @staticmethod
    def _max_violation(M, X, constraints, bounds):
        """Largest relative violation, either against the configured bounds or
        against the learned slack variables (which the projections enforce)."""
        worst = 0.0
        for c, bound in zip(constraints, bounds):
            v = X[c.i] - X[c.j]
            d_sq = float(v @ M @ v)
            if c.delta == 1:
                worst = max(worst, (d_sq - bound) / bound)
            else:
                worst = max(worst, (bound - d_sq) / bound)
        return worst

    def transform(self, X):
        return self.metric_.transform(X)


# -- LMNN -------------------------------------------------------------------------

def target_neighbors(X, y, k):
    """For each point, its k nearest same-class neighbors under the Euclidean
    metric of the given (standardized) features; ties break to lower index."""
    X = check_features(X)
    y = check_labels(y, X.shape[0])
    n = X.shape[0]
    for label in (-1, 1):
        if 0 < np.sum(y == label) <= k:
            raise ValueError(f"class {label} has <= k_targets={k} members")
    d_sq = (np.einsum("ij,ij->i", X, X)[:, None]
            + np.einsum("ij,ij->i", X, X)[None, :]
            - 2.0 * X @ X.T)
    targets = np.empty((n, k), dtype=np.int64)
    index = np.arange(n)
    for i in range(n):
        candidates = index[(y == y[i]) & (index != i)]
        order = np.lexsort((candidates, d_sq[i, candidates]))
        targets[i] = candidates[order[:k]]
    return targets


def _pairwise_quadratic(M, X):
    G = X @ M @ X.T
    diag = np.diag(G)
    return np.maximum(diag[:, None] + diag[None, :] - G - G.T, 0.0)


def lmnn_objective(M, X, y, targets, mu):
    """Pull term plus mu-weighted hinge over (target, impostor) triples."""
    D = _pairwise_quadratic(M, X)
    n, k = targets.shape
    pull = float(D[np.repeat(np.arange(n), k), targets.ravel()].sum())
    push = 0.0
    for i in range(n):
        impostors = np.flatnonzero(y != y[i])
        for j in targets[i]:
            margins = 1.0 + D[i, j] - D[i, impostors]
            push += float(np.sum(margins[margins > 0.0]))
    return pull + mu * push


def _lmnn_gradient_weights(M, X, y, targets, mu):
    D = _pairwise_quadratic(M, X)
    n, k = targets.shape
    W = np.zeros((n, n))
    for i in range(n):
        impostors = np.flatnonzero(y != y[i])
        for j in targets[i]:
            W[i, j] += 1.0
            active = impostors[1.0 + D[i, j] - D[i, impostors] > 0.0]
            W[i, j] += mu * active.size
            W[i, active] -= mu
    return W


def _project_psd(M):
    eigvals, eigvecs = np.linalg.eigh((M + M.T) / 2.0)
    clipped = np.maximum(eigvals, 0.0)
    return (eigvecs * clipped) @ eigvecs.T


class LMNN(BaseEstimator, TransformerMixin):
    """Large-margin nearest neighbor by projected subgradient descent.

    Target neighbors are fixed up front; each accepted step decreases the
    objective and every iterate is projected back onto the PSD cone by
    eigenvalue clamping.
    """

    def __init__(self, mu=1.0, k_targets=3, max_iter=100, tol=1e-7, init=None):
        self.mu = mu
        self.k_targets = k_targets
        self.max_iter = max_iter
        self.tol = tol
        self.init = init

    def fit(self, X, y):
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        targets = target_neighbors(X, y, self.k_targets)
        self.targets_ = targets
        if self.init is not None:
            M = self.init.psd_matrix() if isinstance(self.init, LinearMetric) \
                else np.asarray(self.init, dtype=np.float64)
        else:
            M = default_metric("full", X.shape[1]).psd_matrix()
        M = _project_psd(M)
        value = lmnn_objective(M, X, y, targets, self.mu)
        history = [value]
        step = 1.0 / (1.0 + float(np.linalg.norm(X, "fro")) ** 2)
        for _ in range(self.max_iter):
            grad = weighted_difference_outer(
                X, X, _lmnn_gradient_weights(M, X, y, targets, self.mu))
            accepted = False
            t = step
            for _ in range(30):
                candidate = _project_psd(M - t * grad)
                candidate_value = lmnn_objective(candidate, X, y, targets, self.mu)
                if candidate_value < value:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                break
            improvement = value - candidate_value
            M, value = candidate, candidate_value
            history.append(value)
            step = min(t * 1.5, 1e3)
            if improvement <= self.tol * max(1.0, abs(value)):
                break
        self.objective_history_ = history
        self.quadratic_form_ = M
        eigvals, eigvecs = np.linalg.eigh(M)
        L = (eigvecs * np.sqrt(np.maximum(eigvals, 0.0))).T
        self.metric_ = LinearMetric.full(L)
        return self

    def transform(self, X):
        return self.metric_.transform(X)
