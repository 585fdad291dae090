"""Tabular datasets: schema, CSV ingestion, normalization, splits and weights."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError, DataError

NUMERICAL = "numerical"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSchema:
    name: str
    kind: Literal["numerical", "categorical"]
    categories: tuple[str, ...] = ()
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if not self.name:
            raise DataError("feature name must be nonempty")
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise DataError(f"categorical feature {self.name!r} has no categories")
            if len(set(self.categories)) != len(self.categories):
                raise DataError(f"categorical feature {self.name!r} has duplicate categories")
        elif self.categories:
            raise DataError(f"numerical feature {self.name!r} cannot list categories")

    @property
    def is_categorical(self):
        return self.kind == CATEGORICAL

    @property
    def has_stats(self):
        return self.mean is not None and self.std is not None

    def to_json(self):
        out = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            out["categories"] = list(self.categories)
        return out


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    """One table. Numerical columns hold floats, categorical columns hold
    integer codes into ``features[j].categories``; ``missing`` marks absent cells.
    """

    id: str
    description: str
    features: tuple[FeatureSchema, ...]
    columns: tuple[np.ndarray, ...]
    missing: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.features:
            raise DataError(f"dataset {self.id!r} has no features")
        if len(self.columns) != len(self.features):
            raise DataError(f"dataset {self.id!r}: {len(self.columns)} columns for {len(self.features)} features")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise DataError(f"dataset {self.id!r}: columns have unequal lengths {sorted(lengths)}")
        if self.missing.shape != (self.n_rows, self.n_features):
            raise DataError(f"dataset {self.id!r}: missing mask shape {self.missing.shape} does not match table")
        for feat, col, miss in zip(self.features, self.columns, self.missing.T):
            if feat.is_categorical:
                present = col[~miss]
                if present.size and (present.min() < 0 or present.max() >= len(feat.categories)):
                    raise DataError(f"dataset {self.id!r}: feature {feat.name!r} has codes outside its categories")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError(f"dataset {self.id!r}: duplicate feature names")
        for arr in self.columns:
            arr.setflags(write=False)
        self.missing.setflags(write=False)

    @property
    def n_rows(self):
        return len(self.columns[0]) if self.columns else 0

    @property
    def n_features(self):
        return len(self.features)

    def __len__(self):
        return self.n_rows

    def feature_index(self, name):
        for j, f in enumerate(self.features):
            if f.name == name:
                return j
        raise DataError(f"dataset {self.id!r} has no feature {name!r}")

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return replace(self, columns=tuple(c[rows] for c in self.columns), missing=self.missing[rows])

    def permute_features(self, perm):
        perm = list(perm)
        return replace(
            self,
            features=tuple(self.features[i] for i in perm),
            columns=tuple(self.columns[i] for i in perm),
            missing=self.missing[:, perm],
        )

    def denormalized(self):
        """Return values on the original scale (inverse of :func:`fit_normalization`)."""
        if not self.normalized:
            return self
        cols = []
        for f, c, m in zip(self.features, self.columns, self.missing.T):
            if f.is_categorical:
                cols.append(c)
            else:
                cols.append(np.where(m, 0.0, c * f.std + f.mean))
        return replace(self, columns=tuple(cols), normalized=False)

    def cell(self, i, j):
        """Cell value as it would appear in a CSV, or None when missing."""
        if self.missing[i, j]:
            return None
        f = self.features[j]
        v = self.columns[j][i]
        return f.categories[int(v)] if f.is_categorical else float(v)

    def schema_json(self):
        return {"id": self.id, "description": self.description, "features": [f.to_json() for f in self.features]}

    def stats_json(self):
        return {f.name: {"mean": f.mean, "std": f.std} for f in self.features if not f.is_categorical and f.has_stats}


def parse_schema(obj):
    try:
        features = tuple(
            FeatureSchema(name=f["name"], kind=f["kind"], categories=tuple(f.get("categories", ())))
            for f in obj["features"]
        )
        return str(obj["id"]), str(obj.get("description", "")), features
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed schema: {exc}") from exc


def read_schema(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return parse_schema(obj)


def apply_stats(features, stats):
    """Attach ``{name: {mean, std}}`` statistics to numerical features."""
    out = []
    for f in features:
        if not f.is_categorical and f.name in stats:
            s = stats[f.name]
            out.append(replace(f, mean=float(s["mean"]), std=float(s["std"])))
        else:
            out.append(f)
    return tuple(out)


def load_bundle(schema_path, csv_path) -> DatasetBundle:
    """Read a schema file and an RFC-4180 CSV into a bundle in schema order."""
    ds_id, description, features = read_schema(schema_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: missing header row") from None
        records = list(reader)
    return bundle_from_records(ds_id, description, features, header, records, source=str(csv_path))


def bundle_from_records(ds_id, description, features, header, records, source="<records>"):
    names = [f.name for f in features]
    unknown = [h for h in header if h not in names]
    if unknown:
        raise DataError(f"{source}: unknown column(s) {unknown}")
    absent = [n for n in names if n not in header]
    if absent:
        raise DataError(f"{source}: schema feature(s) missing from header: {absent}")
    if len(set(header)) != len(header):
        raise DataError(f"{source}: duplicate column in header")
    pos = [header.index(n) for n in names]
    n, d = len(records), len(features)
    missing = np.zeros((n, d), dtype=bool)
    columns = []
    for j, f in enumerate(features):
        if f.is_categorical:
            lookup = {c: k for k, c in enumerate(f.categories)}
            col = np.zeros(n, dtype=np.int64)
        else:
            col = np.zeros(n, dtype=np.float64)
        for i, rec in enumerate(records):
            if len(rec) != len(header):
                raise DataError(f"{source}: row {i} has {len(rec)} fields, expected {len(header)}")
            raw = rec[pos[j]]
            if raw == "":
                missing[i, j] = True
                continue
            if f.is_categorical:
                if raw not in lookup:
                    raise DataError(f"{source}: row {i}, column {f.name!r}: {raw!r} is not one of {list(f.categories)}")
                col[i] = lookup[raw]
            else:
                try:
                    col[i] = float(raw)
                except ValueError:
                    raise DataError(f"{source}: row {i}, column {f.name!r}: cannot parse {raw!r} as a number") from None
                if not math.isfinite(col[i]):
                    raise DataError(f"{source}: row {i}, column {f.name!r}: non-finite value {raw!r}")
        columns.append(col)
    return DatasetBundle(ds_id, description, features, tuple(columns), missing)


def format_value(v):
    return f"{v:.9g}"


def write_csv(bundle: DatasetBundle, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f.name for f in bundle.features])
        for i in range(bundle.n_rows):
            row = []
            for j in range(bundle.n_features):
                v = bundle.cell(i, j)
                row.append("" if v is None else (v if isinstance(v, str) else format_value(v)))
            writer.writerow(row)


def write_bundle(bundle: DatasetBundle, directory):
    """Write ``schema.json``, ``data.csv`` (original scale) and, if fitted, ``stats.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "schema.json", "w", encoding="utf-8") as fh:
        json.dump(bundle.schema_json(), fh, indent=2)
    write_csv(bundle.denormalized(), directory / "data.csv")
    stats = bundle.stats_json()
    if stats:
        with open(directory / "stats.json", "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=2)
    return directory


def read_bundle_dir(directory, normalize=True):
    """Load a bundle directory; with stats.json present and ``normalize`` the
    numerical columns come back z-scored with those statistics."""
    directory = Path(directory)
    bundle = load_bundle(directory / "schema.json", directory / "data.csv")
    stats_path = directory / "stats.json"
    if stats_path.exists():
        with open(stats_path, encoding="utf-8") as fh:
            stats = json.load(fh)
        bundle = replace(bundle, features=apply_stats(bundle.features, stats))
        if normalize:
            bundle = normalize_with_stats(bundle)
    return bundle


def normalize_with_stats(bundle: DatasetBundle) -> DatasetBundle:
    if bundle.normalized:
        return bundle
    cols = []
    for f, c, m in zip(bundle.features, bundle.columns, bundle.missing.T):
        if f.is_categorical:
            cols.append(c)
        else:
            if not f.has_stats:
                raise DataError(f"feature {f.name!r} has no normalization statistics")
            cols.append(np.where(m, 0.0, (c - f.mean) / f.std))
    return replace(bundle, columns=tuple(cols), normalized=True)


def fit_normalization(bundle: DatasetBundle, train_rows=None) -> DatasetBundle:
    """Z-score numerical columns with population mean/std from ``train_rows``.

    Missing numerical cells are stored as 0 afterwards.
    """
    if bundle.normalized:
        bundle = bundle.denormalized()
    rows = np.arange(bundle.n_rows) if train_rows is None else np.asarray(train_rows, dtype=np.intp)
    feats = []
    for f, c, m in zip(bundle.features, bundle.columns, bundle.missing.T):
        if f.is_categorical:
            feats.append(f)
            continue
        values = c[rows][~m[rows]]
        if values.size < 2:
            raise DataError(f"feature {f.name!r}: need at least 2 observed training values to normalize")
        mean = float(values.mean())
        std = float(values.std())
        if not std > 0:
            raise DataError(f"constant feature {f.name!r}: standard deviation is 0")
        feats.append(replace(f, mean=mean, std=std))
    return normalize_with_stats(replace(bundle, features=tuple(feats)))


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0:
            raise ConfigError(f"split fractions must be positive, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fr)}")
        if self.seed < 0:
            raise ConfigError("split seed must be nonnegative")


def split(n_or_bundle, spec: SplitSpec):
    """Shuffle row indices with ``spec.seed`` and cut into train/val/test."""
    n = n_or_bundle if isinstance(n_or_bundle, (int, np.integer)) else len(n_or_bundle)
    n_val = int(round(n * spec.val))
    n_test = int(round(n * spec.test))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"{n} rows are too few for split fractions {(spec.train, spec.val, spec.test)}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


@dataclass(frozen=True, eq=False)
class MetaDataset:
    datasets: tuple[DatasetBundle, ...]
    weights: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate dataset ids in metadataset: {ids}")
        if not self.weights:
            object.__setattr__(self, "weights", tuple(1.0 for _ in self.datasets))
        elif len(self.weights) != len(self.datasets):
            raise DataError("one weight per dataset is required")

    def __len__(self):
        return len(self.datasets)

    def __iter__(self):
        return iter(self.datasets)

    def sizes(self):
        return np.array([d.n_rows for d in self.datasets])


def compute_weights(meta: MetaDataset) -> MetaDataset:
    """w_k proportional to 1/sqrt(n_k), scaled so the mean per-row weight is 1."""
    sizes = meta.sizes().astype(np.float64)
    if sizes.size and sizes.min() <= 0:
        empty = [d.id for d in meta.datasets if d.n_rows == 0]
        raise DataError(f"empty dataset(s): {empty}")
    if not sizes.size:
        return meta
    raw = 1.0 / np.sqrt(sizes)
    raw *= sizes.sum() / float((sizes * raw).sum())
    return replace(meta, weights=tuple(float(w) for w in raw))
