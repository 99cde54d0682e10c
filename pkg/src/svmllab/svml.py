"""Joint gradient training of the kernel metric and the SVM slack weight.

The training objective is the sigmoid-smoothed validation error of an SVM
that is refit for every candidate metric:

    F(L, log C) = (1/|V|) sum_{(x,y) in V} s_a(y h(x)) + lambda ||L - L0||_F^2

with ``s_a(z) = 1 / (1 + exp(a z))``, the mirrored logistic that approaches
the 0-1 loss as ``a`` grows.  ``h`` depends on ``L`` both directly through the
cross kernel and indirectly through the fitted ``(alpha, b)``.  Because every
support vector of the ridged hard-margin problem sits exactly on the margin,
``(alpha, b)`` solves the bordered system ``H (alpha, b) = (1, 0)`` and the
indirect term follows from the matrix-inverse rule,

    d(alpha, b)/dt = -H^{-1} (dH/dt) (alpha, b),

so one linear solve ``u = H^{-1} g`` per gradient serves every parameter.
The kernel derivative is ``dk/dL = -2 k L (x - x') (x - x')^T``; all the
pair sums are accumulated as weighted difference-outer-product contractions,
never entry by entry.  The slack weight is learned as ``log C``; its gradient
touches only the ridge on the diagonal of the training block.

The outer loop is standard descent (conjugate-gradient or plain gradient,
both with backtracking) plus early stopping on a held-out error: the returned
parameters are the best hold-out iterate seen, not the last one.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .kernels import kernel_matrix
from .metrics import LinearMetric, default_metric
from .optimize import EvaluationError, minimize
from .svm import RbfSvm, SvmFitError
from .validation import check_features, check_labels

_LOG_C_BOUND = 30.0


# -- smoothed loss -----------------------------------------------------------

def sigmoid_loss(z, a):
    """Mirrored sigmoid ``1 / (1 + exp(a z))``, evaluated stably.

    Strictly decreasing, 0.5 at z=0, and ``s(z) + s(-z) = 1``.
    """
    az = np.multiply(a, z, dtype=np.float64)
    scalar = np.ndim(az) == 0
    az = np.atleast_1d(az)
    out = np.empty_like(az)
    pos = az >= 0
    e = np.exp(-az[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(az[~pos]))
    return float(out[0]) if scalar else out


def sigmoid_loss_grad(z, a):
    """d/dz of ``sigmoid_loss``: ``-a s(z) (1 - s(z))``."""
    s = sigmoid_loss(z, a)
    return -a * s * (1.0 - s)


def smooth_objective(model, X_val, y_val, *, steepness, reg_weight=0.0, initial_metric=None):
    """Mean sigmoid loss of validation margins plus the metric penalty."""
    X_val = check_features(X_val)
    y_val = check_labels(y_val, X_val.shape[0])
    h = model.decision_function(X_val)
    data_term = float(np.mean(sigmoid_loss(y_val * h, steepness)))
    if reg_weight:
        if initial_metric is None:
            raise ValueError("reg_weight > 0 requires the initial metric")
        data_term += reg_weight * model.metric_.frobenius_gap(initial_metric)
    return data_term


# -- gradient ----------------------------------------------------------------

def weighted_difference_outer(X_a, X_b, W):
    """``sum_ab W_ab (x_a - x_b)(x_a - x_b)^T`` via four matrix products."""
    row = W.sum(axis=1)
    col = W.sum(axis=0)
    cross = X_a.T @ W @ X_b
    return (X_a * row[:, None]).T @ X_a - cross - cross.T + (X_b * col[:, None]).T @ X_b


def _project_to_shape(G, metric):
    """Restrict a materialized (r x d) gradient to the shape's parameters."""
    if metric.shape == "sphere":
        return np.array([np.trace(G)])
    if metric.shape == "diag":
        return np.diag(G).copy()
    return G.ravel().copy()


def svml_gradient(model, X_val, y_val, *, steepness, reg_weight=0.0,
                  initial_metric=None, learn_c=True):
    """Gradient of the smoothed objective at a fitted model.

    Returns ``(d_entries, d_log_c)`` where ``d_entries`` matches the metric's
    flat parameter vector and ``d_log_c`` is 0.0 when ``learn_c`` is off.
    """
    X_val = check_features(X_val)
    y_val = check_labels(y_val, X_val.shape[0]).astype(np.float64)
    metric = model.metric_
    sv = model.support_idx_
    if sv.size == 0:
        raise SvmFitError("support set is empty; cannot differentiate")
    X_s = model.X_[sv]
    y_s = model.y_[sv].astype(np.float64)
    alpha_s = model.alpha_[sv]

    K_cross = kernel_matrix(metric, X_s, X_val).values          # s x |V|, plain
    h = K_cross.T @ (alpha_s * y_s) + model.bias_
    w_tilde = sigmoid_loss_grad(y_val * h, steepness) * y_val / y_val.shape[0]

    # direct path through the cross kernel
    C_weights = (alpha_s * y_s)[:, None] * K_cross * w_tilde[None, :]
    Q = weighted_difference_outer(X_s, X_val, C_weights)

    # indirect path through (alpha, b) via the bordered system
    g = np.concatenate([y_s * (K_cross @ w_tilde), [w_tilde.sum()]])
    u = model.solve_bordered(g)
    _, K_ss, _ = model._support_system()                        # plain support block
    E_weights = (u[:-1] * y_s)[:, None] * (alpha_s * y_s)[None, :] * K_ss
    Q -= weighted_difference_outer(X_s, X_s, E_weights)

    G = -2.0 * (metric.matrix @ Q)
    if reg_weight:
        if initial_metric is None:
            raise ValueError("reg_weight > 0 requires the initial metric")
        G = G + 2.0 * reg_weight * (metric.matrix - initial_metric.matrix)
    d_entries = _project_to_shape(G, metric)

    d_log_c = float(u[:-1] @ alpha_s) / model.c if learn_c else 0.0
    return d_entries, d_log_c


# -- outer loop ---------------------------------------------------------------

@dataclass
class SvmlConfig:
    """Knobs of the joint training loop."""

    steepness: float = 5.0            # sigmoid steepness a
    reg_weight: float = 0.0           # lambda of the Frobenius penalty
    learn_c: bool = True
    shape: str = "full"
    rank: int | None = None           # only for shape="rect"
    initial_metric: LinearMetric | None = None
    initial_c: float = 1.0
    optimizer: str = "cg"             # "cg" or "gd"
    max_outer_iter: int = 200
    patience: int = 5                 # hold-out evaluations without improvement
    finite_diff_mode: str = "off"     # "off" | "check" (verify first gradient)
    svm_tolerance: float = 1e-8
    svm_max_rounds: int = 100

    def __post_init__(self):
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("cg", "gd"):
            raise ValueError("optimizer must be 'cg' or 'gd'")
        if self.finite_diff_mode not in ("off", "check"):
            raise ValueError("finite_diff_mode must be 'off' or 'check'")

    @classmethod
    def from_json_dict(cls, data):
        data = dict(data)
        if "initial_metric" in data and data["initial_metric"] is not None:
            data["initial_metric"] = LinearMetric.from_json_dict(data["initial_metric"])
        return cls(**data)


@dataclass
class SvmlTrace:
    """Per-iteration history of the outer loop."""

    iterations: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    val_error: list = field(default_factory=list)
    holdout_error: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    c: list = field(default_factory=list)
    step: list = field(default_factory=list)

    def append(self, iteration, loss, val_error, holdout_error, grad_norm, c, step):
        self.iterations.append(iteration)
        self.loss.append(loss)
        self.val_error.append(val_error)
        self.holdout_error.append(holdout_error)
        self.grad_norm.append(grad_norm)
        self.c.append(c)
        self.step.append(step)

    def __len__(self):
        return len(self.iterations)

    def to_csv(self):
        lines = ["iteration,loss,val_error,holdout_error,grad_norm,C,step"]
        for row in zip(self.iterations, self.loss, self.val_error,
                       self.holdout_error, self.grad_norm, self.c, self.step):
            lines.append("%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g" % row)
        return "\n".join(lines) + "\n"

    def save_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


@dataclass
class SvmlResult:
    metric: LinearMetric
    c: float
    model: RbfSvm
    trace: SvmlTrace
    stop_reason: str
    best_iteration: int


def _resolve_initial_metric(config, X_train):
    if config.initial_metric is not None:
        return config.initial_metric
    return default_metric(config.shape, X_train.shape[1], rank=config.rank,
                          reference=X_train)


def fit_svml(X_train, y_train, X_val, y_val, X_holdout, y_holdout, config: SvmlConfig):
    """Run the joint metric/SVM training loop.

    ``X_train`` fits the SVM, ``X_val`` carries the smoothed loss, and
    ``X_holdout`` is consulted once per outer iteration for early stopping.
    The result holds the metric and C of the best hold-out iterate, the SVM
    refit with them, and the full trace.
    """
    X_train = check_features(X_train)
    y_train = check_labels(y_train, X_train.shape[0], require_both_classes=True)
    X_val = check_features(X_val)
    y_val = check_labels(y_val, X_val.shape[0])
    X_holdout = check_features(X_holdout)
    y_holdout = check_labels(y_holdout, X_holdout.shape[0])

    metric0 = _resolve_initial_metric(config, X_train)
    n_metric = metric0.n_parameters()
    theta0 = metric0.entries_vector()
    if config.learn_c:
        theta0 = np.concatenate([theta0, [math.log(config.initial_c)]])

    def unpack(theta):
        metric = metric0.with_entries_vector(theta[:n_metric])
        if config.learn_c:
            log_c = float(theta[n_metric])
            if abs(log_c) > _LOG_C_BOUND:
                raise EvaluationError("log C out of range")
            c = math.exp(log_c)
        else:
            c = config.initial_c
        return metric, c

    def fun(theta):
        metric, c = unpack(theta)
        try:
            model = RbfSvm(metric=metric, c=c, tolerance=config.svm_tolerance,
                           max_rounds=config.svm_max_rounds).fit(X_train, y_train)
        except SvmFitError as err:
            raise EvaluationError(str(err)) from err
        value = smooth_objective(model, X_val, y_val, steepness=config.steepness,
                                 reg_weight=config.reg_weight, initial_metric=metric0)
        return value, model

    def jac(theta, model):
        d_entries, d_log_c = svml_gradient(
            model, X_val, y_val, steepness=config.steepness,
            reg_weight=config.reg_weight, initial_metric=metric0,
            learn_c=config.learn_c)
        if config.learn_c:
            return np.concatenate([d_entries, [d_log_c]])
        return d_entries

    trace = SvmlTrace()
    state = {"best_error": np.inf, "best_theta": theta0.copy(), "best_iteration": 0,
             "stale": 0}

    def callback(iteration, theta, value, model, grad, step):
        _, c = unpack(theta)
        val_error = model.error_rate(X_val, y_val)
        holdout_error = model.error_rate(X_holdout, y_holdout)
        trace.append(iteration, value, val_error, holdout_error,
                     float(np.linalg.norm(grad)), c, step)
        if holdout_error < state["best_error"]:
            state["best_error"] = holdout_error
            state["best_theta"] = theta.copy()
            state["best_iteration"] = iteration
            state["stale"] = 0
        else:
            state["stale"] += 1
        return state["stale"] >= config.patience

    if config.finite_diff_mode == "check":
        errors = gradient_check_at(fun, jac, theta0)
        if errors.max() >= 1e-4:
            raise RuntimeError(f"gradient check failed at the initial point: "
                               f"max relative error {errors.max():.3e}")

    result = minimize(fun, theta0, jac, method=config.optimizer,
                      max_iter=config.max_outer_iter, callback=callback)

    best_metric, best_c = unpack(state["best_theta"])
    final_model = RbfSvm(metric=best_metric, c=best_c, tolerance=config.svm_tolerance,
                         max_rounds=config.svm_max_rounds).fit(X_train, y_train)
    return SvmlResult(best_metric, best_c, final_model, trace, result.stop_reason,
                      state["best_iteration"])


def gradient_check_at(fun, jac, theta, step=1e-5):
    """Relative errors between the analytic gradient and central differences
    of ``fun`` at ``theta`` (used by the self-check mode and the CLI gate)."""
    value, aux = fun(theta)
    analytic = jac(theta, aux)
    numeric = np.zeros_like(analytic)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += step
        down = theta.copy()
        down[i] -= step
        numeric[i] = (fun(up)[0] - fun(down)[0]) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_error: float
    support_stable: bool
    seed: int
    shape: str
    steepness: float
    learn_c: bool

    @property
    def passed(self):
        return self.support_stable and self.max_rel_error < 1e-4


def run_gradient_check(seed=20110101, shape="full", steepness=5.0, learn_c=True,
                       n_train=30, d=3, n_val=15, reg_weight=0.5, c0=1.5,
                       step=1e-5, corrupt=False, max_attempts=10):
    """Compare the analytic gradient against central differences of the full
    objective (one SVM refit per perturbation) on a generated problem.

    The comparison is only meaningful where the support set does not change
    across the perturbations, so seeds are retried until a support-stable
    point is found; the report records whether one was.
    """
    report = None
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed + attempt)
        X = rng.normal(size=(n_train, d))
        y = np.where(rng.random(n_train) < 0.5, 1, -1)
        y[:2] = [1, -1]
        X_val = rng.normal(size=(n_val, d))
        y_val = np.where(rng.random(n_val) < 0.5, 1, -1)
        y_val[:2] = [1, -1]
        rank = max(1, d - 1) if shape == "rect" else None
        metric0 = default_metric(shape, d, rank=rank, reference=X)
        start = metric0.with_entries_vector(
            metric0.entries_vector() + 0.1 * rng.standard_normal(metric0.n_parameters()))
        n_metric = start.n_parameters()
        theta = start.entries_vector()
        if learn_c:
            theta = np.concatenate([theta, [math.log(c0)]])

        supports = []

        def fun(t):
            metric = start.with_entries_vector(t[:n_metric])
            c = math.exp(float(t[n_metric])) if learn_c else c0
            model = RbfSvm(metric=metric, c=c).fit(X, y)
            supports.append(model.support_idx_.tobytes())
            value = smooth_objective(model, X_val, y_val, steepness=steepness,
                                     reg_weight=reg_weight, initial_metric=metric0)
            return value, model

        def jac(t, model):
            d_entries, d_log_c = svml_gradient(
                model, X_val, y_val, steepness=steepness, reg_weight=reg_weight,
                initial_metric=metric0, learn_c=learn_c)
            if corrupt:
                d_entries = 1.02 * d_entries
            if learn_c:
                return np.concatenate([d_entries, [d_log_c]])
            return d_entries

        try:
            errors = gradient_check_at(fun, jac, theta, step=step)
        except SvmFitError:
            continue
        stable = len(set(supports)) == 1
        report = GradCheckReport(float(errors.max()), stable, seed + attempt,
                                 shape, steepness, learn_c)
        if stable:
            return report
    return report


# -- estimator ----------------------------------------------------------------

class SVML(BaseEstimator, ClassifierMixin):
    """Classifier that learns the kernel metric and C on internal splits.

    ``fit(X, y)`` splits its input 50/50 into an SVM-training part and a
    validation part, then splits the validation part 50/50 again into the
    loss set and the early-stopping hold-out, mirroring the benchmark
    protocol.  ``reg_weight=None`` selects 100 for inputs below 1000 rows
    and 10 otherwise.
    """

    def __init__(self, shape="full", rank=None, steepness=5.0, reg_weight=None,
                 learn_c=True, initial_c=1.0, optimizer="cg", max_outer_iter=200,
                 patience=5, seed=20110101):
        self.shape = shape
        self.rank = rank
        self.steepness = steepness
        self.reg_weight = reg_weight
        self.learn_c = learn_c
        self.initial_c = initial_c
        self.optimizer = optimizer
        self.max_outer_iter = max_outer_iter
        self.patience = patience
        self.seed = seed

    def fit(self, X, y):
        from .datasets import two_way_split

        X = check_features(X)
        y = check_labels(y, X.shape[0], require_both_classes=True)
        reg_weight = self.reg_weight
        if reg_weight is None:
            reg_weight = 100.0 if X.shape[0] < 1000 else 10.0
        train_idx, val_idx = two_way_split(y, 0.5, self.seed)
        loss_idx, stop_idx = two_way_split(y[val_idx], 0.5, self.seed + 1)
        config = SvmlConfig(steepness=self.steepness, reg_weight=reg_weight,
                            learn_c=self.learn_c, shape=self.shape, rank=self.rank,
                            initial_c=self.initial_c, optimizer=self.optimizer,
                            max_outer_iter=self.max_outer_iter, patience=self.patience)
        result = fit_svml(X[train_idx], y[train_idx],
                          X[val_idx][loss_idx], y[val_idx][loss_idx],
                          X[val_idx][stop_idx], y[val_idx][stop_idx], config)
        self.metric_ = result.metric
        self.c_ = result.c
        self.svm_ = result.model
        self.trace_ = result.trace
        self.stop_reason_ = result.stop_reason
        self.train_indices_ = train_idx
        self._fit_X = X
        self._fit_y = y
        return self

    def decision_function(self, X):
        return self.svm_.decision_function(X)

    def predict(self, X):
        return self.svm_.predict(X)

    def error_rate(self, X, y):
        return self.svm_.error_rate(X, y)

    def export_svm(self):
        """The fitted SVM re-indexed to the full ``fit`` input.

        Rows the inner splits held out get dual coefficient zero, so decision
        values are unchanged but the model serializes (and reloads) against
        the complete training CSV.
        """
        inner = self.svm_
        n = self._fit_X.shape[0]
        alpha = np.zeros(n)
        alpha[self.train_indices_] = inner.alpha_
        model = RbfSvm(metric=self.metric_, c=self.c_)
        model.X_ = self._fit_X
        model.y_ = self._fit_y
        model.metric_ = self.metric_
        model.alpha_ = alpha
        model.bias_ = inner.bias_
        model.support_idx_ = self.train_indices_[inner.support_idx_]
        model.n_rounds_ = inner.n_rounds_
        model._train_kernel = None
        model._support_cache = None
        model.kkt_residual_ = inner.kkt_residual_
        return model
