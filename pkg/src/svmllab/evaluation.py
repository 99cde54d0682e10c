"""Experiment protocol engine: grid search, repeated-split benchmarks,
decision-surface export, and report tables.

The benchmark follows the repeated-random-split protocol: standardize, split
80/20, run each method's own pipeline on the train side only (metric learning
and cross-validation included), and score once on the test side.  Per-repeat
results stream into a newline-delimited JSON journal so long runs resume
where they stopped; aggregation is a deterministic fold over the journal.
Paired seeds across methods make per-split comparisons meaningful.

Method names: ``euclid-cv[-k]``, ``itml-svm[-k]``, ``nca-svm[-k]``,
``lmnn-svm[-k]`` (k-fold model selection, k in {1, 3, 5}, default 5),
``svml``, ``svml-diag``, ``svml-sphere``, ``svml-rect-<r>``, and ``knn[-k]``
optionally prefixed by a metric learner (``lmnn-knn-3``).
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

from .baselines import ITML, LMNN, NCA, knn_predict
from .datasets import (
    apply_standardization,
    load_csv,
    load_source,
    standardize,
    two_way_split,
)
from .metrics import LinearMetric
from .svm import RbfSvm, SvmFitError, solve_svm
from .svml import SVML
from .validation import check_features, check_labels


# -- grid search -----------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Model-selection grid: kernel widths as multiples of the feature count,
    slack weights as-is, and the fold count (1 means one 80/20 split)."""

    sigma_sq_multipliers: tuple = (4.0, 2.0, 1.0, 0.5, 0.25)
    c_candidates: tuple = (0.1, 1.0, 10.0, 100.0)
    folds: int = 5

    def __post_init__(self):
        if not self.sigma_sq_multipliers or not self.c_candidates:
            raise ValueError("grids must be nonempty")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        object.__setattr__(self, "sigma_sq_multipliers", tuple(self.sigma_sq_multipliers))
        object.__setattr__(self, "c_candidates", tuple(self.c_candidates))

    @classmethod
    def from_json_dict(cls, data):
        return cls(tuple(data.get("sigma_sq_multipliers", (4.0, 2.0, 1.0, 0.5, 0.25))),
                   tuple(data.get("c_candidates", (0.1, 1.0, 10.0, 100.0))),
                   int(data.get("folds", 5)))


@dataclass(frozen=True)
class CvSelection:
    sigma_sq: float
    c: float
    cv_error: float


def _sq_dists(A, B):
    D = (np.einsum("ij,ij->i", A, A)[:, None]
         + np.einsum("ij,ij->i", B, B)[None, :]
         - 2.0 * A @ B.T)
    return np.maximum(D, 0.0)


def _fold_assignments(y, folds, seed, max_retries=50):
    n = y.shape[0]
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        assignment = rng.permutation(n) % folds
        ok = True
        for f in range(folds):
            val = assignment == f
            for part in (val, ~val):
                if len(set(y[part].tolist())) != 2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return assignment
    raise SvmFitError(f"could not build {folds} two-class folds")


def cv_select(X, y, grid: GridSpec, seed=20110101):
    """Exhaustive (sigma^2, C) grid search by cross validation on the given
    training set; never sees any test data by construction.

    Ties break toward the larger width, then the smaller C (maximal
    regularization).  A failed cell scores error 1.0.
    """
    X = check_features(X)
    y = check_labels(y, X.shape[0], require_both_classes=True)
    d = X.shape[1]
    sigma_sqs = [m * d for m in grid.sigma_sq_multipliers]

    if grid.folds == 1:
        fit_idx, val_idx = two_way_split(y, 0.8, seed)
        splits = [(fit_idx, val_idx)]
    else:
        assignment = _fold_assignments(y, grid.folds, seed)
        splits = [(np.flatnonzero(assignment != f), np.flatnonzero(assignment == f))
                  for f in range(grid.folds)]

    errors = np.zeros((len(sigma_sqs), len(grid.c_candidates)))
    for fit_idx, val_idx in splits:
        X_fit, y_fit = X[fit_idx], y[fit_idx].astype(np.float64)
        X_val, y_val = X[val_idx], y[val_idx]
        D_fit = _sq_dists(X_fit, X_fit)
        D_cross = _sq_dists(X_fit, X_val)
        for i, sigma_sq in enumerate(sigma_sqs):
            K = np.exp(-D_fit / sigma_sq)
            upper = np.triu(K, 1)
            K = upper + upper.T + np.eye(K.shape[0])
            K_cross = np.exp(-D_cross / sigma_sq)
            for j, c in enumerate(grid.c_candidates):
                try:
                    alpha, bias, _ = solve_svm(K, y_fit, c)
                except SvmFitError as err:
                    logger.warning("grid cell (sigma_sq=%g, C=%g) failed: %s",
                                   sigma_sq, c, err)
                    errors[i, j] += 1.0
                    continue
                h = K_cross.T @ (alpha * y_fit) + bias
                pred = np.where(h >= 0.0, 1, -1)
                errors[i, j] += float(np.mean(pred != y_val))
    errors /= len(splits)

    cells = [(errors[i, j], -sigma_sqs[i], grid.c_candidates[j], i, j)
             for i in range(len(sigma_sqs)) for j in range(len(grid.c_candidates))]
    cells.sort()
    best = cells[0]
    return CvSelection(sigma_sqs[best[3]], grid.c_candidates[best[4]], float(best[0]))


# -- benchmark --------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkSpec:
    """What to run: dataset ids (or {"path": ..., "label_column": ...,
    "positive_label": ...} entries), method names, and the protocol knobs."""

    datasets: tuple
    methods: tuple
    repeats: int | None = None          # None: 200 if n<1000, 20 if n<10000, else 1
    base_seed: int = 20110101
    grid: GridSpec = field(default_factory=GridSpec)
    cache_dir: str | None = None
    standardize_on: str = "full"        # scaling fit on "full" data or "train" only

    def __post_init__(self):
        if self.repeats is not None and self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.standardize_on not in ("full", "train"):
            raise ValueError("standardize_on must be 'full' or 'train'")
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "methods", tuple(self.methods))

    @classmethod
    def from_json_dict(cls, data):
        grid = GridSpec.from_json_dict(data.get("grid", {}))
        datasets = tuple(entry if isinstance(entry, str) else dict(entry)
                         for entry in data["datasets"])
        return cls(datasets, tuple(data["methods"]),
                   repeats=data.get("repeats"),
                   base_seed=int(data.get("base_seed", 20110101)),
                   grid=grid, cache_dir=data.get("cache_dir"),
                   standardize_on=data.get("standardize_on", "full"))

    @classmethod
    def from_json_file(cls, path):
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    method: str
    mean_error_pct: float
    std_error_pct: float
    mean_fit_seconds: float
    repeats: int


def auto_repeats(n):
    """Repeat tiers by dataset size: 200 small, 20 medium, 1 large."""
    if n < 1000:
        return 200
    if n < 10000:
        return 20
    return 1


def auto_reg_weight(n):
    """Metric-penalty tiers by dataset size."""
    return 100.0 if n < 1000 else 10.0


def resolve_dataset(entry, cache_dir=None):
    """Turn a spec entry (registered id, CSV path, or dict) into a Dataset."""
    if isinstance(entry, dict):
        ds = load_csv(entry["path"], entry.get("label_column", -1),
                      entry["positive_label"])
        return ds
    entry = str(entry)
    path = Path(entry)
    if path.suffix == ".csv" or path.exists():
        raise ValueError("plain paths need a label config; pass a dict entry with "
                         "'path', 'label_column' and 'positive_label'")
    return load_source(entry, cache_dir=cache_dir)


def _parse_method(method):
    """Split a method name into (family, learner, parameter)."""
    parts = method.split("-")
    if parts[0] == "euclid" and parts[1:2] == ["cv"]:
        folds = int(parts[2]) if len(parts) > 2 else 5
        return ("cv", None, folds)
    if len(parts) >= 2 and parts[1] == "svm" and parts[0] in ("itml", "nca", "lmnn"):
        folds = int(parts[2]) if len(parts) > 2 else 5
        return ("cv", parts[0], folds)
    if parts[0] == "svml":
        if len(parts) == 1:
            return ("svml", "full", None)
        if parts[1] in ("diag", "sphere"):
            return ("svml", parts[1], None)
        if parts[1] == "rect":
            return ("svml", "rect", int(parts[2]) if len(parts) > 2 else 2)
    if parts[0] == "knn":
        k = int(parts[1]) if len(parts) > 1 else 3
        return ("knn", None, k)
    if len(parts) >= 2 and parts[1] == "knn" and parts[0] in ("itml", "nca", "lmnn"):
        k = int(parts[2]) if len(parts) > 2 else 3
        return ("knn", parts[0], k)
    raise ValueError(f"unknown method {method!r}")


def _make_learner(name, seed):
    if name == "itml":
        return ITML(seed=seed)
    if name == "nca":
        return NCA(max_iter=50)
    if name == "lmnn":
        return LMNN(k_targets=3, max_iter=50)
    raise ValueError(f"unknown metric learner {name!r}")


def run_method(method, X_train, y_train, X_test, y_test, seed, grid, dataset_n):
    """One method pipeline on one split.  Returns (test_error, fit_seconds);
    the timer covers metric learning, model selection and training."""
    family, learner_name, param = _parse_method(method)
    started = time.perf_counter()
    if family == "cv":
        if learner_name is None:
            Z_train, Z_test = X_train, X_test
            base = None
        else:
            learner = _make_learner(learner_name, seed)
            base = learner.fit(X_train, y_train).metric_
            Z_train = base.transform(X_train)
            Z_test = base.transform(X_test)
        selection = cv_select(Z_train, y_train, replace(grid, folds=param), seed=seed)
        scale = 1.0 / math.sqrt(selection.sigma_sq)
        if base is None:
            metric = LinearMetric.spherical(scale, d=X_train.shape[1])
        else:
            metric = LinearMetric.full(base.matrix * scale)
        model = RbfSvm(metric=metric, c=selection.c).fit(X_train, y_train)
        seconds = time.perf_counter() - started
        return model.error_rate(X_test, y_test), seconds
    if family == "svml":
        rank = param if learner_name == "rect" else None
        model = SVML(shape=learner_name, rank=rank, seed=seed,
                     reg_weight=auto_reg_weight(dataset_n)).fit(X_train, y_train)
        seconds = time.perf_counter() - started
        return model.error_rate(X_test, y_test), seconds
    # kNN family
    metric = None
    if learner_name is not None:
        metric = _make_learner(learner_name, seed).fit(X_train, y_train).metric_
    seconds = time.perf_counter() - started
    pred = knn_predict(X_train, y_train, X_test, k=param, metric=metric)
    return float(np.mean(pred != y_test)), seconds


def _run_cell(payload):
    """Worker entry: one (dataset, method, repeat) cell."""
    ds_name, method, repeat, seed, grid, standardize_on, features, labels = payload
    try:
        X = np.asarray(features)
        y = np.asarray(labels)
        train_idx, test_idx = two_way_split(y, 0.8, seed)
        if standardize_on == "train":
            params = standardize(X[train_idx])
            X = X * params.per_feature_scale[None, :]
        error, seconds = run_method(method, X[train_idx], y[train_idx],
                                    X[test_idx], y[test_idx], seed, grid, y.shape[0])
        return {"dataset": ds_name, "method": method, "repeat": repeat,
                "seed": seed, "error": error, "seconds": seconds}
    except Exception as err:  # recorded, not fatal
        return {"dataset": ds_name, "method": method, "repeat": repeat,
                "seed": seed, "error": None, "seconds": 0.0, "failure": str(err)}


def _read_journal(path):
    entries = []
    if path is not None and Path(path).exists():
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
    return entries


def run_benchmark(spec: BenchmarkSpec, journal_path=None, jobs=1, progress=None):
    """Execute the protocol, resuming any completed cells found in the
    journal, and return aggregated rows (means over repeats)."""
    datasets = {}
    for entry in spec.datasets:
        ds = resolve_dataset(entry, cache_dir=spec.cache_dir)
        if spec.standardize_on == "full":
            ds = apply_standardization(standardize(ds), ds)
        datasets[ds.source_id] = ds

    done = {(e["dataset"], e["method"], e["repeat"], e["seed"])
            for e in _read_journal(journal_path)}
    tasks = []
    for name, ds in datasets.items():
        repeats = spec.repeats if spec.repeats is not None else auto_repeats(ds.n)
        for method in spec.methods:
            _parse_method(method)  # validate early
            for repeat in range(repeats):
                if (name, method, repeat, spec.base_seed + repeat) in done:
                    continue
                tasks.append((name, method, repeat, spec.base_seed + repeat,
                              spec.grid, spec.standardize_on,
                              ds.features, ds.labels))

    journal_file = open(journal_path, "a", encoding="utf-8") if journal_path else None
    try:
        if jobs > 1 and len(tasks) > 1:
            with get_context("fork").Pool(jobs) as pool:
                iterator = pool.imap_unordered(_run_cell, tasks, chunksize=1)
                results = _collect(iterator, journal_file, progress)
        else:
            results = _collect(map(_run_cell, tasks), journal_file, progress)
    finally:
        if journal_file is not None:
            journal_file.close()

    entries = _read_journal(journal_path) if journal_path else results
    return aggregate_rows(entries)


def _collect(iterator, journal_file, progress):
    results = []
    for record in iterator:
        results.append(record)
        if journal_file is not None:
            journal_file.write(json.dumps(record) + "\n")
            journal_file.flush()
        if progress is not None:
            progress(record)
    return results


def aggregate_rows(entries):
    """Deterministic fold from journal entries to one row per cell group."""
    groups = {}
    for entry in entries:
        if entry.get("error") is None:
            continue
        groups.setdefault((entry["dataset"], entry["method"]), []).append(entry)
    rows = []
    for (dataset, method), cells in sorted(groups.items()):
        cells = sorted(cells, key=lambda e: e["repeat"])
        errors = np.array([c["error"] for c in cells])
        seconds = np.array([c["seconds"] for c in cells])
        std = float(np.std(errors, ddof=1)) if errors.size > 1 else 0.0
        rows.append(ResultRow(dataset, method, float(np.mean(errors)) * 100.0,
                              std * 100.0, float(np.mean(seconds)), errors.size))
    return rows


# -- decision-surface export ------------------------------------------------------

@dataclass(frozen=True)
class SurfaceGrid:
    """Plot-ready decision surface in the 2-D embedding of a rank-2 metric."""

    grid: np.ndarray       # (resolution^2, 3) rows of (u, v, h)
    support: np.ndarray    # (n_sv, 3) rows of (sv_u, sv_v, label)

    def grid_csv(self):
        lines = ["u,v,h"]
        lines += ["%.12g,%.12g,%.12g" % tuple(row) for row in self.grid]
        return "\n".join(lines) + "\n"

    def support_csv(self):
        lines = ["sv_u,sv_v,label"]
        lines += ["%.12g,%.12g,%d" % (row[0], row[1], int(row[2])) for row in self.support]
        return "\n".join(lines) + "\n"


def surface_grid(model: RbfSvm, resolution: int):
    """Decision values over a padded lattice spanning the transformed training
    points.  The kernel depends on inputs only through the 2-D embedding, so
    decision values are computed there, by the same code path that serves
    ``decision_function``."""
    metric = model.metric_
    if metric.shape != "rect" or metric.r != 2:
        raise ValueError("surface export requires a rectangular rank-2 metric")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    Z = metric.transform(model.X_)
    lo, hi = Z.min(axis=0), Z.max(axis=0)
    span = hi - lo
    pad = 0.1 * np.where(span > 0, span, 5.0)
    us = np.linspace(lo[0] - pad[0], hi[0] + pad[0], resolution)
    vs = np.linspace(lo[1] - pad[1], hi[1] + pad[1], resolution)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    lattice = np.column_stack([uu.ravel(), vv.ravel()])
    h = model.decision_embedded(lattice)
    grid = np.column_stack([lattice, h])
    sv = model.support_idx_
    support = np.column_stack([Z[sv], model.y_[sv].astype(np.float64)])
    return SurfaceGrid(grid, support)


# -- report tables ------------------------------------------------------------------

_COLUMNS = ("dataset", "method", "mean_error_pct", "std_error_pct",
            "mean_fit_seconds", "repeats")


def render_table(rows, fmt="markdown"):
    """Serialize result rows with a stable column order; markdown bolds the
    best mean per dataset."""
    if fmt == "csv":
        lines = [",".join(_COLUMNS)]
        for r in rows:
            lines.append("%s,%s,%.2f,%.2f,%.3f,%d" %
                         (r.dataset, r.method, r.mean_error_pct, r.std_error_pct,
                          r.mean_fit_seconds, r.repeats))
        return "\n".join(lines) + "\n"
    if fmt == "json":
        payload = [{c: getattr(r, c) for c in _COLUMNS} for r in rows]
        return json.dumps(payload, indent=2) + "\n"
    if fmt == "markdown":
        best = {}
        for r in rows:
            if r.dataset not in best or r.mean_error_pct < best[r.dataset]:
                best[r.dataset] = r.mean_error_pct
        lines = ["| dataset | method | mean error % | std % | fit seconds | repeats |",
                 "|---|---|---|---|---|---|"]
        for r in rows:
            mean = "%.2f" % r.mean_error_pct
            if r.mean_error_pct == best[r.dataset]:
                mean = f"**{mean}**"
            lines.append("| %s | %s | %s | %.2f | %.3f | %d |" %
                         (r.dataset, r.method, mean, r.std_error_pct,
                          r.mean_fit_seconds, r.repeats))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")
