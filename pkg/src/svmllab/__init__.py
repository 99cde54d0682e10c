"""svmllab: Mahalanobis metric learning for RBF-kernel SVMs.

Joint gradient-based training of a linear metric and an L2-slack kernel SVM,
classic metric-learning baselines (NCA, ITML, LMNN), and a repeated-split
benchmark harness for tabular binary classification.
"""

from .baselines import ITML, LMNN, NCA, knn_predict, target_neighbors
from .datasets import (
    Dataset,
    FeatureScaler,
    SplitPlan,
    StandardizationParams,
    apply_standardization,
    fetch,
    load_csv,
    load_source,
    split_dataset,
    standardize,
    two_way_split,
)
from .evaluation import (
    BenchmarkSpec,
    GridSpec,
    ResultRow,
    cv_select,
    render_table,
    run_benchmark,
    surface_grid,
)
from .kernels import KernelMatrix, add_ridge, kernel_matrix, kernel_value
from .metrics import LinearMetric, default_metric
from .svm import BorderedSystem, RbfSvm, SolverOptions, SvmFitError, solve_svm, train_digest
from .svml import (
    SVML,
    SvmlConfig,
    SvmlTrace,
    fit_svml,
    run_gradient_check,
    sigmoid_loss,
    smooth_objective,
    svml_gradient,
)

__all__ = [
    "BenchmarkSpec",
    "BorderedSystem",
    "Dataset",
    "FeatureScaler",
    "GridSpec",
    "ITML",
    "KernelMatrix",
    "LMNN",
    "LinearMetric",
    "NCA",
    "RbfSvm",
    "ResultRow",
    "SVML",
    "SolverOptions",
    "SplitPlan",
    "StandardizationParams",
    "SvmFitError",
    "SvmlConfig",
    "SvmlTrace",
    "add_ridge",
    "apply_standardization",
    "cv_select",
    "default_metric",
    "fetch",
    "fit_svml",
    "kernel_matrix",
    "kernel_value",
    "knn_predict",
    "load_csv",
    "load_source",
    "render_table",
    "run_benchmark",
    "run_gradient_check",
    "sigmoid_loss",
    "smooth_objective",
    "solve_svm",
    "split_dataset",
    "standardize",
    "surface_grid",
    "svml_gradient",
    "target_neighbors",
    "train_digest",
    "two_way_split",
]
