"""Input validation helpers shared by the estimators and low-level routines."""

import numpy as np


def check_features(X, *, name="X"):
    """Coerce ``X`` to a 2-D float64 array with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={X.ndim}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_labels(y, n=None, *, require_both_classes=False, name="y"):
    """Coerce ``y`` to an int array over {+1, -1}."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got ndim={y.ndim}")
    y = y.astype(np.int64, copy=False)
    values = set(np.unique(y).tolist())
    if not values <= {-1, 1}:
        raise ValueError(f"{name} must take values in {{+1, -1}}, got {sorted(values)}")
    if n is not None and y.shape[0] != n:
        raise ValueError(f"{name} has length {y.shape[0]}, expected {n}")
    if require_both_classes and values != {-1, 1}:
        raise ValueError(f"{name} must contain both classes")
    return y


def check_point(x, d, *, name="x"):
    """Coerce ``x`` to a length-``d`` float64 vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != d:
        raise ValueError(f"{name} has dimension {x.shape[0]}, expected {d}")
    return x


def check_same_dim(X, d, *, name="X"):
    X = check_features(X, name=name)
    if X.shape[1] != d:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {d}")
    return X
