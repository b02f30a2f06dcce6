"""Tabular datasets, feature selection/reduction and train/test splitting."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError

log = logging.getLogger(__name__)

# Upper angle is 2*pi*(1 - ANGLE_EPS) so scaled features stay in [0, 2*pi).
ANGLE_EPS = 1e-9
ANGLE_MAX = 2.0 * np.pi * (1.0 - ANGLE_EPS)


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels).astype(int).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx, dtype=int)
        return TabularDataset(
            self.features[idx], self.labels[idx], self.num_classes, self.feature_names
        )

    def to_csv(self, path) -> None:
        names = self.feature_names or [f"f{j}" for j in range(self.d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(names) + ["label"])
            for row, y in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(y)])


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int | str = -1, num_classes: int | None = None) -> TabularDataset:
    """Read a numeric CSV with one integer label column and an optional header."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    header = None
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    width = len(header) if header is not None else len(rows[0])
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise ParseError(f"{path}: label column {label_column!r} not found")
        col = header.index(label_column)
    else:
        col = int(label_column)
        if not -width <= col < width:
            raise ParseError(f"{path}: label column {col} out of range for {width} columns")
        col %= width
    first_row = 2 if header is not None else 1
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        lineno = i + first_row
        if len(row) != width:
            raise ParseError(f"{path}: row {lineno} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {lineno} column {j}: non-numeric {cell!r}") from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: row {lineno} column {j}: non-finite value {cell!r}")
            values[i, j] = v
    y = values[:, col]
    if np.any(y != np.round(y)) or np.any(y < 0):
        bad = int(np.flatnonzero((y != np.round(y)) | (y < 0))[0]) + first_row
        raise ParseError(f"{path}: row {bad}: label must be a non-negative integer")
    X = np.delete(values, col, axis=1)
    names = None if header is None else [h for k, h in enumerate(header) if k != col]
    R = int(y.max()) + 1 if num_classes is None else int(num_classes)
    return TabularDataset(X, y.astype(int), R, names)


# -- mutual information ------------------------------------------------------

def discretize(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency bin codes; tied values always share a bin."""
    x = np.asarray(x, dtype=float)
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    return np.searchsorted(edges, x, side="right")


def mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) of two discrete code vectors."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


@dataclass
class FeatureSelector:
    """Fitted map from ``d`` raw features to ``p`` angle-scaled features.

    ``indices`` is set for mRMR, ``components``/``mean`` for PCA.  ``lo``/``hi``
    are the per-output min/max on the fitting data, used for the angle scaling.
    """

    method: str
    input_dim: int
    output_dim: int
    lo: np.ndarray
    hi: np.ndarray
    indices: np.ndarray | None = None
    components: np.ndarray | None = None
    mean: np.ndarray | None = None

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise DimensionError(f"selector expects {self.input_dim} features, got {X.shape[1]}")
        if self.method == "mrmr":
            return X[:, self.indices]
        if self.method == "pca":
            return (X - self.mean) @ self.components
        raise ValueError(f"unknown selector method {self.method!r}")

    def transform(self, X: np.ndarray) -> np.ndarray:
        z = self.project(X)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        scaled = np.where(span > 0, (z - self.lo) / safe, 0.0) * ANGLE_MAX
        return np.clip(scaled, 0.0, ANGLE_MAX)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
        }
        if self.indices is not None:
            out["indices"] = [int(i) for i in self.indices]
        if self.components is not None:
            out["components"] = self.components.tolist()
            out["mean"] = self.mean.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSelector":
        arr = lambda k: None if k not in d else np.asarray(d[k], dtype=float)
        return cls(
            d["method"],
            int(d["input_dim"]),
            int(d["output_dim"]),
            np.asarray(d["lo"], dtype=float),
            np.asarray(d["hi"], dtype=float),
            None if "indices" not in d else np.asarray(d["indices"], dtype=int),
            arr("components"),
            arr("mean"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FeatureSelector":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _with_range(selector: FeatureSelector, X: np.ndarray) -> FeatureSelector:
    z = selector.project(X)
    selector.lo = z.min(axis=0)
    selector.hi = z.max(axis=0)
    return selector


def mrmr_order(X: np.ndarray, y: np.ndarray, p: int, bins: int = 8) -> list[int]:
    """Greedy mRMR (difference form) ranking of the first ``p`` features."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    codes = [discretize(X[:, j], bins) for j in range(d)]
    relevance = np.array([mutual_information(c, y) for c in codes])
    selected = [int(np.argmax(relevance))]
    redundancy = np.zeros(d)
    while len(selected) < p:
        last = selected[-1]
        for j in range(d):
            if j not in selected:
                redundancy[j] += mutual_information(codes[j], codes[last])
        score = relevance - redundancy / len(selected)
        score[selected] = -np.inf
        selected.append(int(np.argmax(score)))
    return selected


def mrmr_select(data: TabularDataset, p: int, bins: int = 8) -> FeatureSelector:
    if not 1 <= p <= data.d:
        raise ValueError(f"p={p} outside [1, {data.d}]")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    order = np.array(mrmr_order(data.features, data.labels, p, bins), dtype=int)
    sel = FeatureSelector("mrmr", data.d, p, np.zeros(p), np.zeros(p), indices=order)
    return _with_range(sel, data.features)


def pca_reduce(data: TabularDataset, p: int) -> FeatureSelector:
    if not 1 <= p <= min(data.n, data.d):
        raise ValueError(f"p={p} outside [1, min(n, d)={min(data.n, data.d)}]")
    mean = data.features.mean(axis=0)
    centered = data.features - mean
    cov = centered.T @ centered / max(data.n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:p]
    comps = evecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[pivot, np.arange(p)])
    sel = FeatureSelector("pca", data.d, p, np.zeros(p), np.zeros(p), components=comps, mean=mean)
    return _with_range(sel, data.features)


def apply_selector(selector: FeatureSelector, data: TabularDataset) -> TabularDataset:
    """Project ``data`` and rescale each output feature into ``[0, 2*pi)``.

    Values outside the fitting range are clipped.
    """
    if data.d != selector.input_dim:
        raise DimensionError(f"selector expects {selector.input_dim} features, got {data.d}")
    names = None
    if selector.method == "mrmr" and data.feature_names is not None:
        names = [data.feature_names[i] for i in selector.indices]
    return TabularDataset(selector.transform(data.features), data.labels, data.num_classes, names)


def stratified_split(
    data: TabularDataset, train_fraction: float, seed: int | None = None
) -> tuple[TabularDataset, TabularDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction={train_fraction} must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            log.warning("class %d has %d member(s); kept whole in the training split", c, idx.size)
            train.extend(idx)
            continue
        idx = rng.permutation(idx)
        k = min(max(int(round(train_fraction * idx.size)), 1), idx.size - 1)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return data.subset(np.sort(train)), data.subset(np.sort(test))


def first_columns(data: TabularDataset, p: int) -> TabularDataset:
    """Keep the first ``p`` feature columns (for already-ranked datasets)."""
    if not 1 <= p <= data.d:
        raise ValueError(f"p={p} outside [1, {data.d}]")
    names = None if data.feature_names is None else data.feature_names[:p]
    return TabularDataset(data.features[:, :p], data.labels, data.num_classes, names)


def scale_to_angles(X: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Min-max scale columns of ``X`` to ``[0, 2*pi)`` using ``reference`` ranges."""
    ref = X if reference is None else reference
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (X - lo) / np.where(span > 0, span, 1.0), 0.0) * ANGLE_MAX
    return np.clip(scaled, 0.0, ANGLE_MAX)
