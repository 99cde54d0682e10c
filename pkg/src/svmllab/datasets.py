"""Tabular binary-classification data: loading, scaling, splitting, fetching.

CSV ingestion follows RFC 4180 with an auto-detected optional header (a header
is assumed exactly when the first row has a non-numeric feature cell).  Rows
with missing or non-numeric feature cells are dropped and counted rather than
imputed.  Standardization rescales every feature to unit standard deviation
(no mean centering); parameters are fit once on a reference set and applied
unchanged elsewhere.

Splits are seeded and reproducible.  A plan describes the experiment protocol
chain: an outer train/test split, then optional nested splits inside the
train part (train -> T/V, then V -> V_loss/V_stop, and so on), each retried
with an incremented seed until every part contains both classes.

The fetch registry knows the nine benchmark datasets by short id, caches raw
downloads under ``<cache>/<source_id>/``, records content digests in a JSON
manifest, and normalizes each raw file into a plain numeric CSV (column
drops, label filtering/grouping, ordinal encoding of categorical cells;
missing markers become empty cells for the loader to drop).
"""

import csv
import fcntl
import hashlib
import io
import json
import os
import urllib.request
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlparse

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_features, check_labels


class UnknownSourceError(ValueError):
    pass


class FetchError(RuntimeError):
    pass


class DigestMismatchError(RuntimeError):
    pass


class SplitError(RuntimeError):
    pass


# -- core containers -----------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """An immutable feature matrix with +1/-1 labels."""

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple
    source_id: str
    n_dropped: int = 0

    def __post_init__(self):
        features = check_features(self.features)
        labels = check_labels(self.labels, features.shape[0])
        if features.shape[0] < 2:
            raise ValueError("a dataset needs at least two rows")
        if len(self.feature_names) != features.shape[1]:
            raise ValueError("feature_names length does not match the feature count")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, indices, suffix=""):
        idx = np.asarray(indices)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(),
                       self.feature_names, self.source_id + suffix)


# -- CSV loading ----------------------------------------------------------------

def _is_number(cell):
    try:
        value = float(cell)
    except ValueError:
        return False
    return np.isfinite(value)


def load_csv(path, label_column, positive_label):
    """Load an RFC-4180 CSV into a Dataset.

    ``label_column`` is a header name or a 0-based column index;
    ``positive_label`` (compared as a string) maps to +1 and the single other
    observed value to -1.  Rows with missing or non-numeric feature cells are
    dropped; the count lands in ``n_dropped``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    if not rows:
        raise ValueError(f"{path} has no rows")

    first = [cell.strip() for cell in rows[0]]
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if label_column not in first:
            raise ValueError(f"label column {label_column!r} not present in the header")
        label_idx = first.index(label_column)
        has_header = True
    else:
        label_idx = int(label_column)
        if label_idx < 0:
            label_idx += len(first)
        if not (0 <= label_idx < len(first)):
            raise ValueError(f"label column index {label_column} out of range")
        has_header = any(not _is_number(cell)
                         for i, cell in enumerate(first) if i != label_idx)
    header = first if has_header else None
    data_rows = rows[1:] if has_header else rows

    n_columns = len(first)
    feature_names = tuple(
        (header[i] if header else f"f{i}") for i in range(n_columns) if i != label_idx)

    features, raw_labels = [], []
    n_dropped = 0
    for row in data_rows:
        cells = [cell.strip() for cell in row]
        if len(cells) != n_columns:
            n_dropped += 1
            continue
        label_cell = cells[label_idx]
        feature_cells = [cells[i] for i in range(n_columns) if i != label_idx]
        if not label_cell or not all(_is_number(cell) for cell in feature_cells):
            n_dropped += 1
            continue
        features.append([float(cell) for cell in feature_cells])
        raw_labels.append(label_cell)

    if not features:
        raise ValueError(f"{path} has no usable rows")
    values = sorted(set(raw_labels))
    if len(values) > 2:
        raise ValueError(f"label column has {len(values)} distinct values, expected 2: {values}")
    if len(values) == 2 and str(positive_label) not in values:
        raise ValueError(f"positive label {positive_label!r} not among observed values {values}")
    labels = np.array([1 if cell == str(positive_label) else -1 for cell in raw_labels])
    return Dataset(np.asarray(features, dtype=np.float64), labels, feature_names,
                   source_id=path.stem, n_dropped=n_dropped)


# -- standardization --------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationParams:
    """Per-feature reciprocal standard deviations (constant features get 1)."""

    per_feature_scale: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.per_feature_scale, dtype=np.float64)
        if scale.ndim != 1 or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValueError("scales must be finite positive reals")
        scale.setflags(write=False)
        object.__setattr__(self, "per_feature_scale", scale)

    def to_json_dict(self):
        return {"per_feature_scale": self.per_feature_scale.tolist()}

    @classmethod
    def from_json_dict(cls, data):
        return cls(np.asarray(data["per_feature_scale"], dtype=np.float64))


def standardize(reference):
    """Estimate unit-standard-deviation scales on a reference set (unbiased
    n-1 estimator; zero-variance features keep scale 1)."""
    X = reference.features if isinstance(reference, Dataset) else check_features(reference)
    std = X.std(axis=0, ddof=1)
    scale = np.ones(X.shape[1])
    positive = std > 0
    scale[positive] = 1.0 / std[positive]
    if not np.all(np.isfinite(scale)):
        scale[~np.isfinite(scale)] = 1.0
    return StandardizationParams(scale)


def apply_standardization(params, dataset):
    """Apply fixed scales; never refit on the target set."""
    if isinstance(dataset, Dataset):
        return Dataset(dataset.features * params.per_feature_scale[None, :],
                       dataset.labels.copy(), dataset.feature_names,
                       dataset.source_id, dataset.n_dropped)
    X = check_features(dataset)
    return X * params.per_feature_scale[None, :]


class FeatureScaler(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around ``standardize``/``apply_standardization``."""

    def fit(self, X, y=None):
        self.params_ = standardize(X)
        return self

    def transform(self, X):
        return apply_standardization(self.params_, X)


# -- splitting ----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    """Seeded protocol chain: train/test, then nested splits inside train."""

    seed: int
    train_fraction: float = 0.8
    nested_fractions: tuple = ()

    def __post_init__(self):
        fractions = (self.train_fraction, *self.nested_fractions)
        if not all(0.0 < f < 1.0 for f in fractions):
            raise ValueError("all fractions must lie strictly between 0 and 1")
        object.__setattr__(self, "nested_fractions", tuple(self.nested_fractions))

    def to_json(self):
        return json.dumps({"seed": self.seed, "train_fraction": self.train_fraction,
                           "nested_fractions": list(self.nested_fractions)})

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(int(data["seed"]), float(data["train_fraction"]),
                   tuple(data.get("nested_fractions", ())))


def _first_part_size(fraction, n):
    # nearest integer (ties to even); clamp so both parts stay nonempty
    return int(min(max(np.rint(fraction * n), 1), n - 1))


def two_way_split(labels, fraction, seed, *, require_both=True, max_retries=50):
    """Split indices 0..n-1 into (first, rest) with |first| = rint(fraction*n).

    ``labels`` is a label array, or a plain integer count when no class
    balance needs checking.  When ``require_both`` holds and labels are
    given, partitions leaving a part single-class are rejected and retried
    with seed+1, seed+2, ... up to the cap.
    """
    if isinstance(labels, (int, np.integer)):
        n, labels = int(labels), None
    else:
        labels = np.asarray(labels)
        n = int(labels.shape[0])
    size = _first_part_size(fraction, n)
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        perm = rng.permutation(n)
        first = np.sort(perm[:size])
        rest = np.sort(perm[size:])
        if not require_both or labels is None:
            return first, rest
        if (len(set(labels[first].tolist())) == 2 and len(set(labels[rest].tolist())) == 2):
            return first, rest
    raise SplitError(f"could not produce a two-class split in {max_retries} attempts "
                     f"(n={n}, fraction={fraction})")


def split_dataset(dataset, plan: SplitPlan, *, require_both=True):
    """Materialize a plan into disjoint, exhaustive index arrays.

    Returns ``(train, test)`` with no nested fractions; the first nested
    fraction splits the train part, every further fraction splits the second
    part of the previous split.  E.g. with ``nested_fractions=(0.5, 0.5)``:
    ``(T, V_loss, V_stop, test)``.
    """
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset)
    train, test = two_way_split(labels, plan.train_fraction, plan.seed,
                                require_both=require_both)
    if not plan.nested_fractions:
        return train, test
    parts = []
    current = train
    for level, fraction in enumerate(plan.nested_fractions):
        seed = plan.seed + 1009 * (level + 1)
        a, b = two_way_split(labels[current], fraction, seed, require_both=require_both)
        parts.append(current[a])
        current = current[b]
    parts.append(current)
    parts.append(test)
    return tuple(parts)


# -- fetch registry ------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    """How to obtain and normalize one benchmark dataset."""

    source_id: str
    urls: tuple
    filename: str
    label_column: int                      # raw 0-based index, before drops
    positive_label: str
    whitespace_delimited: bool = False
    arff: bool = False
    drop_columns: tuple = ()
    keep_label_values: tuple | None = None     # filter to these classes
    label_group_positive: tuple | None = None  # group multi-class to binary
    missing_tokens: tuple = ("?",)
    digest: str | None = None              # configured sha256 of the raw file
    expected_shape: tuple | None = None    # (n, d) after load, documentation


SOURCES = {
    "haber": SourceSpec(
        "haber",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/haberman/haberman.data",),
        "haberman.data", label_column=3, positive_label="2", expected_shape=(306, 3)),
    "credit": SourceSpec(
        "credit",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/credit-screening/crx.data",),
        "crx.data", label_column=15, positive_label="+", expected_shape=(653, 15)),
    "acredit": SourceSpec(
        "acredit",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/statlog/australian/australian.dat",),
        "australian.dat", label_column=14, positive_label="1",
        whitespace_delimited=True, expected_shape=(690, 14)),
    "trans": SourceSpec(
        "trans",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/blood-transfusion/transfusion.data",),
        "transfusion.data", label_column=4, positive_label="1", expected_shape=(748, 4)),
    "diabts": SourceSpec(
        "diabts",
        ("https://raw.githubusercontent.com/jbrownlee/Datasets/master/pima-indians-diabetes.data.csv",),
        "pima-indians-diabetes.csv", label_column=8, positive_label="1",
        expected_shape=(768, 8)),
    "mammo": SourceSpec(
        "mammo",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/mammographic-masses/mammographic_masses.data",),
        "mammographic_masses.data", label_column=5, positive_label="1",
        expected_shape=(830, 5)),
    "cmc": SourceSpec(
        "cmc",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/cmc/cmc.data",),
        "cmc.data", label_column=9, positive_label="2",
        keep_label_values=("1", "2"), expected_shape=(962, 9)),
    "page": SourceSpec(
        "page",
        ("https://www.openml.org/data/download/30/dataset_30_page-blocks.arff",),
        "page-blocks.arff", label_column=10, positive_label="text",
        arff=True, label_group_positive=("text",), expected_shape=(5473, 10)),
    "gamma": SourceSpec(
        "gamma",
        ("https://archive.ics.uci.edu/ml/machine-learning-databases/magic/magic04.data",),
        "magic04.data", label_column=10, positive_label="g",
        expected_shape=(19020, 10)),
}


def _default_cache_dir():
    env = os.environ.get("SVMLLAB_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "svmllab"


def _sha256(data: bytes):
    return hashlib.sha256(data).hexdigest()


@contextmanager
def _cache_lock(cache_dir: Path):
    cache_dir.mkdir(parents=True, exist_ok=True)
    lock_path = cache_dir / ".lock"
    with open(lock_path, "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _read_manifest(cache_dir: Path):
    path = cache_dir / "manifest.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


def _write_manifest(cache_dir: Path, manifest):
    (cache_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                             encoding="utf-8")


def _http_get(url):
    try:
        with urllib.request.urlopen(url, timeout=60) as response:
            return response.read()
    except Exception as err:  # URLError, timeout, HTTPError
        raise FetchError(f"download failed for {url}: {err}") from err


def _resolve_source(source):
    if source in SOURCES:
        return SOURCES[source]
    parsed = urlparse(str(source))
    if parsed.scheme in ("http", "https", "file"):
        name = Path(parsed.path).name or "download.csv"
        slug = _sha256(str(source).encode())[:12]
        return SourceSpec(f"url-{slug}", (str(source),), name,
                          label_column=-1, positive_label="")
    raise UnknownSourceError(
        f"unknown dataset id {source!r}; known ids: {sorted(SOURCES)} (or pass a URL)")


def _parse_raw_rows(spec: SourceSpec, raw: bytes):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    if spec.arff:
        lines, in_data = [], False
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped or stripped.startswith("%"):
                continue
            if in_data:
                lines.append(stripped)
            elif stripped.lower().startswith("@data"):
                in_data = True
        return [next(csv.reader([line])) for line in lines]
    if spec.whitespace_delimited:
        return [line.split() for line in text.splitlines() if line.strip()]
    return [row for row in csv.reader(io.StringIO(text)) if any(c.strip() for c in row)]


def prepare_source_csv(spec: SourceSpec, raw: bytes):
    """Normalize a raw download into a header-less numeric CSV.

    Applies configured column drops and label filtering/grouping, ordinally
    encodes categorical feature columns (distinct values sorted, missing
    markers exempt), and writes missing cells as empty so the loader's
    drop-and-count rule applies.  The label becomes the last column.
    """
    rows = _parse_raw_rows(spec, raw)
    if not rows:
        raise FetchError(f"{spec.source_id}: raw file is empty")
    width = len(rows[0])
    # tolerate a single header row in raw files (e.g. transfusion.data)
    body = rows
    if all(not _is_number(c) for c in rows[0]) and len(rows) > 1:
        body = rows[1:]
    body = [r for r in body if len(r) == width]
    label_idx = spec.label_column
    keep_cols = [i for i in range(width) if i != label_idx and i not in spec.drop_columns]

    out_rows = []
    for row in body:
        cells = [c.strip() for c in row]
        label = cells[label_idx]
        if spec.keep_label_values is not None and label not in spec.keep_label_values:
            continue
        if spec.label_group_positive is not None:
            label = "pos" if label in spec.label_group_positive else "neg"
        out_rows.append([cells[i] for i in keep_cols] + [label])
    if not out_rows:
        raise FetchError(f"{spec.source_id}: no rows survive label filtering")

    n_features = len(keep_cols)
    for col in range(n_features):
        column = [r[col] for r in out_rows]
        present = [c for c in column if c not in spec.missing_tokens and c != ""]
        if all(_is_number(c) for c in present):
            codes = None
        else:
            codes = {value: str(code) for code, value in enumerate(sorted(set(present)))}
        for r in out_rows:
            if r[col] in spec.missing_tokens or r[col] == "":
                r[col] = ""
            elif codes is not None:
                r[col] = codes[r[col]]

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(out_rows)
    return buffer.getvalue()


def fetch(source, cache_dir=None, downloader=None):
    """Return the local prepared-CSV path for a dataset id or raw URL.

    Downloads at most once per content: a cached raw file short-circuits the
    network entirely.  The raw file's sha256 is checked against the
    configured digest when one exists, otherwise against the digest recorded
    in the cache manifest on first download.
    """
    spec = _resolve_source(source)
    cache_dir = Path(cache_dir) if cache_dir is not None else _default_cache_dir()
    downloader = downloader or _http_get
    src_dir = cache_dir / spec.source_id
    raw_path = src_dir / spec.filename
    prepared_path = src_dir / "prepared.csv"

    with _cache_lock(cache_dir):
        manifest = _read_manifest(cache_dir)
        entry = manifest.get(spec.source_id, {})
        if raw_path.exists():
            digest = _sha256(raw_path.read_bytes())
            recorded = spec.digest or entry.get("sha256")
            if recorded and digest != recorded:
                raise DigestMismatchError(
                    f"{spec.source_id}: cached file digest {digest} != recorded {recorded}")
        else:
            errors = []
            data = None
            for url in spec.urls:
                try:
                    data = downloader(url)
                    used_url = url
                    break
                except FetchError as err:
                    errors.append(str(err))
            if data is None:
                raise FetchError(f"{spec.source_id}: all downloads failed: {errors}")
            digest = _sha256(data)
            if spec.digest and digest != spec.digest:
                raise DigestMismatchError(
                    f"{spec.source_id}: downloaded digest {digest} != configured {spec.digest}")
            src_dir.mkdir(parents=True, exist_ok=True)
            raw_path.write_bytes(data)
            entry = {"filename": spec.filename, "url": used_url}
        if not prepared_path.exists() or entry.get("sha256") != digest:
            if spec.label_column < 0:
                prepared_path.parent.mkdir(parents=True, exist_ok=True)
                prepared_path.write_bytes(raw_path.read_bytes())
            else:
                prepared_path.write_text(prepare_source_csv(spec, raw_path.read_bytes()),
                                         encoding="utf-8")
        entry["sha256"] = digest
        manifest[spec.source_id] = entry
        _write_manifest(cache_dir, manifest)
    return prepared_path


def load_source(source_id, cache_dir=None, downloader=None):
    """Fetch (or reuse) a registered dataset and load it as a Dataset."""
    if source_id not in SOURCES:
        raise UnknownSourceError(f"load_source requires a registered id, got {source_id!r}")
    spec = SOURCES[source_id]
    path = fetch(source_id, cache_dir=cache_dir, downloader=downloader)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    n_columns = len(next(csv.reader([first])))
    dataset = load_csv(path, label_column=n_columns - 1,
                       positive_label="pos" if spec.label_group_positive else spec.positive_label)
    return Dataset(dataset.features, dataset.labels, dataset.feature_names,
                   source_id=source_id, n_dropped=dataset.n_dropped)
