"""Metric-parameterized RBF kernels.

The kernel of a metric ``L`` is ``k(x, x') = exp(-||L(x - x')||^2)``; with a
spherical ``L = (1/sigma) I`` this is the usual Gaussian RBF of width
``sigma``.  Entries are computed by transforming the points once and taking
squared Euclidean norms in the embedding space, which is equivalent to the
quadratic form and cheaper for rectangular maps.
"""

from dataclasses import dataclass

import numpy as np

from .metrics import LinearMetric
from .validation import check_point, check_same_dim


@dataclass(frozen=True)
class KernelMatrix:
    """An ``n x m`` kernel block, optionally ridged.

    ``ridge_c`` records the regularization constant ``C`` when ``1/C`` has
    been added to the diagonal of a square training block; it stays ``None``
    for plain and cross-kernel blocks.
    """

    values: np.ndarray
    ridge_c: float | None = None

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape

    def is_square(self):
        return self.values.shape[0] == self.values.shape[1]


def kernel_value(metric: LinearMetric, x_i, x_j) -> float:
    """Scalar kernel entry ``exp(-d2(x_i, x_j))``, always in (0, 1]."""
    x_i = check_point(x_i, metric.d, name="x_i")
    x_j = check_point(x_j, metric.d, name="x_j")
    return float(np.exp(-metric.distance_sq(x_i, x_j)))


def _sq_dists(Z_a, Z_b):
    """Pairwise squared Euclidean distances between row sets, clipped at 0."""
    sq_a = np.einsum("ij,ij->i", Z_a, Z_a)
    sq_b = np.einsum("ij,ij->i", Z_b, Z_b)
    D = sq_a[:, None] + sq_b[None, :] - 2.0 * (Z_a @ Z_b.T)
    return np.maximum(D, 0.0)


def kernel_matrix(metric: LinearMetric, A, B=None) -> KernelMatrix:
    """Kernel block between row sets ``A`` and ``B`` (``B=None`` means ``A``).

    Square self-kernels are made exactly symmetric with a unit diagonal by
    mirroring the strict upper triangle, so symmetry never depends on
    floating-point cancellation.
    """
    A = check_same_dim(A, metric.d, name="A")
    Z_a = metric.transform(A)
    if B is None:
        K = np.exp(-_sq_dists(Z_a, Z_a))
        upper = np.triu(K, 1)
        K = upper + upper.T + np.eye(A.shape[0])
        return KernelMatrix(K)
    B = check_same_dim(B, metric.d, name="B")
    Z_b = metric.transform(B)
    return KernelMatrix(np.exp(-_sq_dists(Z_a, Z_b)))


def add_ridge(K: KernelMatrix, C: float) -> KernelMatrix:
    """Return ``K + (1/C) I``, recording ``C``.

    The ridge turns the hard-margin SVM on the modified kernel into an
    L2-slack soft margin with weight ``C``; it applies to square training
    blocks only and must not be applied twice.
    """
    if not isinstance(K, KernelMatrix):
        raise TypeError("K must be a KernelMatrix")
    if K.ridge_c is not None:
        raise ValueError("kernel matrix is already ridged")
    if not K.is_square():
        raise ValueError("only square training kernels can be ridged")
    if not (C > 0):
        raise ValueError("C must be positive")
    values = K.values.copy()
    idx = np.arange(values.shape[0])
    values[idx, idx] += 1.0 / C
    return KernelMatrix(values, ridge_c=float(C))
