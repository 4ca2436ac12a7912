"""Datasets, the synthetic generator, a tabular CSV loader and device partitioning.

Primary-task labels live behind :meth:`LabeledDataset.labels`, which logs
every access. Training code only ever receives :class:`DeviceShard`
views, which carry features and the private attribute but no labels.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .trainer import DeviceShard


@dataclass
class LabelAccess:
    purpose: str
    n: int


LABEL_ACCESS_LOG: list[LabelAccess] = []


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    u: int
    y: int


class LabeledDataset:
    """Features ``x``, private attribute ``u`` and primary label ``y``."""

    def __init__(self, x, u, y, attribute_arity: int | None = None, label_arity: int | None = None,
                 meta: Optional[dict] = None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.intp)
        y = np.asarray(y, dtype=np.intp)
        if x.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {x.shape}")
        if u.shape != (x.shape[0],) or y.shape != (x.shape[0],):
            raise ValueError("x, u and y must have the same number of rows")
        self.x = x
        self.u = u
        self._y = y
        self.attribute_arity = int(attribute_arity if attribute_arity is not None else max(2, u.max() + 1))
        self.label_arity = int(label_arity if label_arity is not None else max(2, y.max() + 1))
        if u.size and (u.min() < 0 or u.max() >= self.attribute_arity):
            raise ValueError(f"attribute values outside 0..{self.attribute_arity - 1}")
        if y.size and (y.min() < 0 or y.max() >= self.label_arity):
            raise ValueError(f"label values outside 0..{self.label_arity - 1}")
        self.meta = dict(meta or {})

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def labels(self, purpose: str) -> np.ndarray:
        """Primary labels; every call is recorded in ``LABEL_ACCESS_LOG``."""
        LABEL_ACCESS_LOG.append(LabelAccess(purpose, len(self)))
        return self._y.copy()

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.x[i].copy(), int(self.u[i]), int(self._y[i]))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.x[idx], self.u[idx], self._y[idx], self.attribute_arity,
                              self.label_arity, self.meta)

    def training_view(self, idx=None) -> DeviceShard:
        if idx is None:
            return DeviceShard(self.x, self.u, self.attribute_arity)
        idx = np.asarray(idx, dtype=np.intp)
        return DeviceShard(self.x[idx], self.u[idx], self.attribute_arity)

    def to_csv(self, path) -> None:
        path = Path(path)
        cols = [f"x{j}" for j in range(self.dim)] + ["u", "y"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i in range(len(self)):
                w.writerow([format(v, ".17g") for v in self.x[i]] + [int(self.u[i]), int(self._y[i])])


@dataclass(frozen=True)
class DataSplit:
    train: LabeledDataset
    test: LabeledDataset


# -- synthetic data -------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 5000
    d: int = 20
    attr_leak: float = 1.0
    label_signal: float = 1.0
    attr_label_corr: float = 0.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 2 or self.d < 2:
            raise ValueError("need n >= 2 and d >= 2")
        for name in ("attr_leak", "label_signal"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not -1.0 <= self.attr_label_corr <= 1.0:
            raise ValueError("attr_label_corr must lie in [-1, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


SYNTHETIC_RECIPE = (
    "u ~ Bernoulli(1/2); y = u with probability (1 + attr_label_corr)/2, else 1 - u; "
    "x = label_signal*(2y-1)*e_y + attr_leak*(2u-1)*e_u + noise_std*N(0, I_d), "
    "with e_y, e_u orthonormal directions drawn from the seed"
)


def gen_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Binary attribute and label imprinted on fixed orthogonal directions of x.

    ``attr_label_corr`` is the correlation between ``u`` and ``y``; a value
    away from 0 means destroying attribute information must cost utility.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    q, _ = np.linalg.qr(rng.standard_normal((spec.d, 2)))
    e_y, e_u = q[:, 0], q[:, 1]
    u = rng.integers(0, 2, size=spec.n)
    agree = rng.random(spec.n) < (1.0 + spec.attr_label_corr) / 2.0
    y = np.where(agree, u, 1 - u)
    noise = rng.standard_normal((spec.n, spec.d)) * spec.noise_std
    x = (spec.label_signal * (2 * y - 1))[:, None] * e_y + (spec.attr_leak * (2 * u - 1))[:, None] * e_u + noise
    meta = {"source": "synthetic", "recipe": SYNTHETIC_RECIPE, "spec": asdict(spec)}
    return LabeledDataset(x, u, y, 2, 2, meta)


def train_test_split(ds: LabeledDataset, test_fraction: float = 0.2, seed: int = 0) -> DataSplit:
    """Seeded shuffle, then the last ``test_fraction`` of rows become the test split."""
    rng = np.random.default_rng([seed, 0x5B17])
    order = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return DataSplit(ds.subset(order[: len(ds) - n_test]), ds.subset(order[len(ds) - n_test:]))


# -- tabular CSV ------------------------------------------------------------------

class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    """Column roles. Unlisted columns are features; ``categorical`` forces encoding."""

    label: str
    attribute: str
    categorical: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()


def frequency_codes(values: Sequence[str]) -> dict[str, int]:
    """Codes by descending frequency, ties broken by lexicographic value."""
    counts = Counter(values)
    ordered = sorted(counts, key=lambda v: (-counts[v], v))
    return {v: k for k, v in enumerate(ordered)}


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _int_codes(values: list[str]) -> Optional[np.ndarray]:
    try:
        ints = [int(v) for v in values]
    except ValueError:
        return None
    if min(ints) < 0:
        return None
    return np.asarray(ints, dtype=np.intp)


def load_csv(path, schema: CsvSchema, test_fraction: float = 0.2, seed: int = 0) -> DataSplit:
    """Read a tabular CSV into a standardized train/test split.

    Categorical feature columns (declared, or containing any non-numeric
    cell) become integer codes by descending frequency. Numeric feature
    columns are standardized with train-split mean and standard deviation.
    Label and attribute columns holding non-negative integers are used
    as-is; otherwise they are frequency-encoded too.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            rows.append((lineno, [c.strip() for c in row]))
    for col in (schema.label, schema.attribute, *schema.categorical, *schema.drop):
        if col not in header:
            raise CsvFormatError(f"{path}: missing column {col!r}")
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    for lineno, row in rows:
        for name, cell in zip(header, row):
            if cell == "" and name not in schema.drop:
                raise CsvFormatError(f"{path}: row {lineno}, column {name!r}: empty cell")

    columns = {name: [row[j] for _, row in rows] for j, name in enumerate(header)}
    linenos = [ln for ln, _ in rows]
    feature_cols = [c for c in header if c not in (schema.label, schema.attribute, *schema.drop)]

    encodings: dict[str, dict[str, int]] = {}

    def target(name: str) -> np.ndarray:
        ints = _int_codes(columns[name])
        if ints is not None:
            return ints
        encodings[name] = frequency_codes(columns[name])
        return np.asarray([encodings[name][v] for v in columns[name]], dtype=np.intp)

    y = target(schema.label)
    u = target(schema.attribute)

    raw = np.zeros((len(rows), len(feature_cols)))
    numeric: list[int] = []
    for j, name in enumerate(feature_cols):
        cells = columns[name]
        declared = name in schema.categorical
        if not declared and all(_is_float(c) for c in cells):
            raw[:, j] = [float(c) for c in cells]
            numeric.append(j)
        elif not declared and sum(_is_float(c) for c in cells) > len(cells) // 2:
            bad = next(k for k, c in enumerate(cells) if not _is_float(c))
            raise CsvFormatError(f"{path}: row {linenos[bad]}, column {name!r}: cannot parse {cells[bad]!r}")
        else:
            encodings[name] = frequency_codes(cells)
            raw[:, j] = [encodings[name][c] for c in cells]

    rng = np.random.default_rng([seed, 0x5B17])
    order = rng.permutation(len(rows))
    n_test = int(round(len(rows) * test_fraction))
    train_idx, test_idx = order[: len(rows) - n_test], order[len(rows) - n_test:]

    stats = {}
    x = raw.copy()
    for j in numeric:
        mu = float(raw[train_idx, j].mean())
        sd = float(raw[train_idx, j].std())
        sd = sd if sd > 0 else 1.0
        x[:, j] = (raw[:, j] - mu) / sd
        stats[feature_cols[j]] = {"mean": mu, "std": sd}

    meta = {"source": str(path), "features": feature_cols, "encodings": encodings, "standardization": stats}
    full = LabeledDataset(x, u, y, meta=meta)
    return DataSplit(full.subset(train_idx), full.subset(test_idx))


# -- partitioning -------------------------------------------------------------------

def partition(ds: LabeledDataset, num_devices: int, mode: str = "iid", alpha: float = 1.0,
              seed: int = 0, max_tries: int = 100) -> list[np.ndarray]:
    """Split row indices across devices.

    ``iid``: seeded shuffle into equal shards, remainder to the last one.
    ``attr_skew``: for each attribute value, device proportions drawn
    from Dirichlet(alpha); redrawn until every device holds two samples.
    """
    n = len(ds)
    if n < 2 * num_devices:
        raise ValueError(f"{n} samples cannot give {num_devices} devices two samples each")
    rng = np.random.default_rng([seed, 0x9A27])
    if mode == "iid":
        order = rng.permutation(n)
        size = n // num_devices
        cuts = [size * k for k in range(1, num_devices)]
        return [np.sort(part) for part in np.split(order, cuts)]
    if mode != "attr_skew":
        raise ValueError(f"unknown partition mode {mode!r}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    for _ in range(max_tries):
        parts: list[list[int]] = [[] for _ in range(num_devices)]
        for a in range(ds.attribute_arity):
            idx = rng.permutation(np.flatnonzero(ds.u == a))
            props = rng.dirichlet(np.full(num_devices, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].extend(chunk.tolist())
        if min(len(p) for p in parts) >= 2:
            return [np.sort(np.asarray(p, dtype=np.intp)) for p in parts]
    raise ValueError(f"attr_skew with alpha={alpha} kept leaving a device with fewer than two samples")


def shards_for(ds: LabeledDataset, parts: Sequence[np.ndarray]) -> list[DeviceShard]:
    return [ds.training_view(p) for p in parts]


def read_dataset_csv(path) -> LabeledDataset:
    """Read back a file written by :meth:`LabeledDataset.to_csv`."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = [row for row in reader if row]
    if header[-2:] != ["u", "y"]:
        raise CsvFormatError(f"{path}: expected trailing u,y columns")
    x = np.array([[float(v) for v in row[:-2]] for row in body])
    u = np.array([int(row[-2]) for row in body])
    y = np.array([int(row[-1]) for row in body])
    return LabeledDataset(x, u, y)


def write_meta(path, ds: LabeledDataset) -> None:
    Path(path).write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def attribute_proportions(u: np.ndarray, arity: int) -> np.ndarray:
    counts = np.bincount(u, minlength=arity).astype(float)
    return counts / max(1.0, counts.sum())
