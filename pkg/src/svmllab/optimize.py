"""Deterministic first-order minimizers with Armijo backtracking.

The objectives minimized here (validation loss through an SVM refit, negative
leave-one-out accuracy) are expensive and only piecewise smooth, so the line
search treats any evaluation failure or loss increase as an ordinary rejected
step.  ``fun`` returns ``(value, aux)`` where ``aux`` carries whatever the
caller needs to compute the gradient at an accepted point without re-solving;
``jac(x, aux)`` is called only on accepted iterates.
"""

from dataclasses import dataclass, field

import numpy as np


class EvaluationError(RuntimeError):
    """Objective evaluation failed at a trial point (e.g. inner solver)."""


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    n_iterations: int
    stop_reason: str
    values: list = field(default_factory=list)


def minimize(fun, x0, jac, *, method="cg", max_iter=200, grad_tol=1e-10,
             armijo_c1=1e-4, shrink=0.5, max_backtracks=40, initial_step=1.0,
             max_eval_failures=10, callback=None):
    """Minimize ``fun`` from ``x0`` by gradient descent or Polak-Ribiere
    conjugate gradient, both with backtracking Armijo line search.

    ``callback(iteration, x, value, aux, grad, step)`` runs at iteration 0 and
    after every accepted step; returning True stops the optimization.  The
    accepted-value sequence is non-increasing by construction.
    """
    if method not in ("cg", "gd"):
        raise ValueError(f"unknown method {method!r}")
    x = np.asarray(x0, dtype=np.float64).copy()
    value, aux = fun(x)
    if not np.isfinite(value):
        raise EvaluationError("objective is not finite at the initial point")
    grad = jac(x, aux)
    values = [value]
    direction = -grad
    step = initial_step
    consecutive_failures = 0
    stop_reason = "max_iterations"
    if callback is not None and callback(0, x, value, aux, grad, 0.0):
        return MinimizeResult(x, value, float(np.linalg.norm(grad)), 0, "callback", values)
    n_done = 0
    for iteration in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= grad_tol:
            stop_reason = "gradient"
            break
        slope = float(direction @ grad)
        if slope >= 0.0:  # not a descent direction: restart on the gradient
            direction = -grad
            slope = -gnorm**2
        # backtracking Armijo
        t = step
        accepted = False
        for _ in range(max_backtracks):
            try:
                trial_value, trial_aux = fun(x + t * direction)
            except EvaluationError:
                consecutive_failures += 1
                if consecutive_failures >= max_eval_failures:
                    stop_reason = "evaluation_failures"
                    return MinimizeResult(x, value, gnorm, n_done, stop_reason, values)
                t *= shrink
                continue
            if np.isfinite(trial_value) and trial_value <= value + armijo_c1 * t * slope:
                accepted = True
                consecutive_failures = 0
                break
            t *= shrink
        if not accepted:
            stop_reason = "line_search"
            break
        x = x + t * direction
        prev_grad = grad
        value, aux = trial_value, trial_aux
        grad = jac(x, aux)
        values.append(value)
        n_done = iteration
        if method == "cg":
            denom = float(prev_grad @ prev_grad)
            beta = max(0.0, float(grad @ (grad - prev_grad)) / denom) if denom > 0 else 0.0
            direction = -grad + beta * direction
        else:
            direction = -grad
        # reuse the accepted step as the next starting guess, gently growing
        step = min(t * 2.0, 1e6)
        if callback is not None and callback(iteration, x, value, aux, grad, t):
            stop_reason = "callback"
            break
    return MinimizeResult(x, value, float(np.linalg.norm(grad)), n_done, stop_reason, values)
