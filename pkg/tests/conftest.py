import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20110101)


def make_blobs(rng, n_per_class=10, d=2, separation=3.0, scale=1.0):
    """Two Gaussian blobs with labels +1 / -1."""
    center = separation * np.ones(d) / np.sqrt(d)
    X_pos = rng.normal(size=(n_per_class, d)) * scale + center
    X_neg = rng.normal(size=(n_per_class, d)) * scale - center
    X = np.vstack([X_pos, X_neg])
    y = np.concatenate([np.ones(n_per_class, dtype=int), -np.ones(n_per_class, dtype=int)])
    perm = rng.permutation(X.shape[0])
    return X[perm], y[perm]
