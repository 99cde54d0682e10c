"""Linear (pseudo-)metric parameterizations.

A metric is represented by the linear map ``L`` with squared distance
``d2(x, x') = ||L (x - x')||^2``, i.e. the quadratic form with the
positive-semidefinite matrix ``M = L^T L``.  Four structural families are
supported:

- ``"full"``: unconstrained square ``L`` in R^{d x d}
- ``"diag"``: diagonal ``L`` stored as a length-d vector (feature re-weighing)
- ``"sphere"``: ``L = s * I`` stored as one scalar (kernel-width estimation)
- ``"rect"``: rectangular ``L`` in R^{r x d} with r < d (projection metrics)

``L`` may be singular; distinct points can then have distance zero.  That is
intentional: all learners here only ever need the quadratic form.
"""

import json

import numpy as np

from .validation import check_features, check_point

SHAPES = ("full", "diag", "sphere", "rect")


class LinearMetric:
    """Immutable container for the linear map of one metric shape.

    Parameters
    ----------
    shape : str
        One of ``"full"``, ``"diag"``, ``"sphere"``, ``"rect"``.
    entries : array-like or float
        ``(d, d)`` matrix for full, length-d vector for diag, one scalar for
        sphere, ``(r, d)`` matrix with ``1 <= r < d`` for rect.
    d : int, optional
        Ambient dimension; required for sphere, inferred otherwise.
    """

    __slots__ = ("shape", "entries", "d", "r")

    def __init__(self, shape, entries, d=None):
        if shape not in SHAPES:
            raise ValueError(f"unknown metric shape {shape!r}; expected one of {SHAPES}")
        if shape == "sphere":
            entries = float(entries)
            if d is None:
                raise ValueError("sphere metric requires explicit dimension d")
            if not np.isfinite(entries):
                raise ValueError("metric entries must be finite")
            r = int(d)
        else:
            entries = np.array(entries, dtype=np.float64)
            if not np.all(np.isfinite(entries)):
                raise ValueError("metric entries must be finite")
            if shape == "diag":
                if entries.ndim != 1:
                    raise ValueError("diag metric expects a 1-D entries vector")
                d = entries.shape[0] if d is None else d
                if d != entries.shape[0]:
                    raise ValueError("diag entries length does not match d")
                r = d
            else:
                if entries.ndim != 2:
                    raise ValueError(f"{shape} metric expects a 2-D entries matrix")
                r, cols = entries.shape
                d = cols if d is None else d
                if d != cols:
                    raise ValueError("entries column count does not match d")
                if shape == "full" and r != d:
                    raise ValueError("full metric requires a square matrix")
                if shape == "rect" and not (1 <= r < d):
                    raise ValueError("rect metric requires 1 <= r < d")
            entries.setflags(write=False)
        if d < 1:
            raise ValueError("dimension d must be >= 1")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "r", int(r))

    def __setattr__(self, name, value):
        raise AttributeError("LinearMetric is immutable")

    def __repr__(self):
        return f"LinearMetric(shape={self.shape!r}, d={self.d}, r={self.r})"

    # -- constructors ------------------------------------------------------

    @classmethod
    def full(cls, matrix):
        return cls("full", matrix)

    @classmethod
    def diagonal(cls, values):
        return cls("diag", values)

    @classmethod
    def spherical(cls, scale, d):
        return cls("sphere", scale, d=d)

    @classmethod
    def rectangular(cls, matrix):
        return cls("rect", matrix)

    # -- core linear algebra ----------------------------------------------

    @property
    def matrix(self):
        """Materialize ``L`` as an ``(r, d)`` array."""
        if self.shape == "sphere":
            return self.entries * np.eye(self.d)
        if self.shape == "diag":
            return np.diag(self.entries)
        return np.asarray(self.entries)

    def psd_matrix(self):
        """``M = L^T L``, symmetric PSD by construction."""
        L = self.matrix
        M = L.T @ L
        return (M + M.T) / 2.0

    def transform(self, X):
        """Map points to the metric's embedding space, ``x -> L x``.

        Accepts a single d-vector or an ``(n, d)`` array; returns the same
        arrangement with r columns.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = check_point(X, self.d).reshape(1, -1)
        elif X.shape[1] != self.d:
            raise ValueError(f"points have dimension {X.shape[1]}, expected {self.d}")
        if self.shape == "sphere":
            Z = X * self.entries
        elif self.shape == "diag":
            Z = X * self.entries[None, :]
        else:
            Z = X @ np.asarray(self.entries).T
        return Z[0] if single else Z

    def distance_sq(self, x_i, x_j):
        """Squared distance ``||L (x_i - x_j)||^2`` (>= 0)."""
        x_i = check_point(x_i, self.d, name="x_i")
        x_j = check_point(x_j, self.d, name="x_j")
        z = self.transform(x_i - x_j)
        return float(max(z @ z, 0.0))

    def frobenius_gap(self, reference):
        """Squared Frobenius distance ``||L - L_ref||_F^2`` between two
        metrics of identical shape and dimensions."""
        if not isinstance(reference, LinearMetric):
            raise TypeError("reference must be a LinearMetric")
        if (self.shape, self.d, self.r) != (reference.shape, reference.d, reference.r):
            raise ValueError("metrics must share shape and dimensions")
        if self.shape == "sphere":
            return self.d * (self.entries - reference.entries) ** 2
        diff = np.asarray(self.entries) - np.asarray(reference.entries)
        return float(np.sum(diff * diff))

    # -- flat-parameter view used by gradient-based learners ---------------

    def entries_vector(self):
        if self.shape == "sphere":
            return np.array([self.entries])
        return np.asarray(self.entries).ravel().copy()

    def with_entries_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if self.shape == "sphere":
            if vec.size != 1:
                raise ValueError("sphere metric expects exactly one entry")
            return LinearMetric("sphere", float(vec[0]), d=self.d)
        if self.shape == "diag":
            return LinearMetric("diag", vec.reshape(self.d))
        return LinearMetric(self.shape, vec.reshape(self.r, self.d))

    def n_parameters(self):
        return self.entries_vector().size

    # -- serialization ------------------------------------------------------

    def to_json_dict(self):
        return {
            "shape": self.shape,
            "r": self.r,
            "d": self.d,
            "entries": self.entries_vector().tolist() if self.shape != "sphere" else [self.entries],
        }

    @classmethod
    def from_json_dict(cls, data):
        shape = data["shape"]
        d = int(data["d"])
        entries = np.asarray(data["entries"], dtype=np.float64)
        if shape == "sphere":
            return cls("sphere", float(entries[0]), d=d)
        if shape == "diag":
            return cls("diag", entries.reshape(d))
        r = int(data["r"])
        return cls(shape, entries.reshape(r, d))

    def to_json(self):
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_json_dict(json.loads(text))


def default_metric(shape, d, *, rank=None, reference=None, literal_inverse_d=False):
    """Default initialization for each shape.

    Full, diag and sphere start at ``L = (1/sqrt(d)) I`` so that
    ``L^T L = (1/d) I``, i.e. the common RBF width heuristic
    ``sigma^2 = d`` on standardized features.  With
    ``literal_inverse_d=True`` the scale becomes ``1/d`` instead (some
    conventions initialize the map itself at ``(1/d) I``).

    Rect starts at the top-``rank`` principal directions of ``reference``
    (rows of points), scaled by ``1/sqrt(d)``; without a reference it falls
    back to the first ``rank`` rows of ``(1/sqrt(d)) I``.
    """
    if d < 1:
        raise ValueError("dimension d must be >= 1")
    scale = (1.0 / d) if literal_inverse_d else (1.0 / np.sqrt(d))
    if shape == "sphere":
        return LinearMetric.spherical(scale, d)
    if shape == "diag":
        return LinearMetric.diagonal(np.full(d, scale))
    if shape == "full":
        return LinearMetric.full(scale * np.eye(d))
    if shape == "rect":
        if rank is None or not (1 <= rank < d):
            raise ValueError("rect initialization requires 1 <= rank < d")
        if reference is None:
            return LinearMetric.rectangular(scale * np.eye(d)[:rank])
        X = check_features(reference, name="reference")
        if X.shape[1] != d:
            raise ValueError("reference dimension does not match d")
        centered = X - X.mean(axis=0, keepdims=True)
        # SVD right-singular vectors = principal directions; fix signs so the
        # largest-magnitude coordinate of each direction is positive.
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        if vt.shape[0] < rank:
            raise ValueError("reference has too few rows for the requested rank")
        rows = vt[:rank]
        signs = np.sign(rows[np.arange(rank), np.argmax(np.abs(rows), axis=1)])
        signs[signs == 0] = 1.0
        rows = rows * signs[:, None]
        return LinearMetric.rectangular(scale * rows)
    raise ValueError(f"unknown metric shape {shape!r}; expected one of {SHAPES}")
