"""From raw multivariate series to training structures.

A series is stored feature-major, ``values[d, n_total]``. An instance starting
at time ``s`` has input ``x = values[features, s:s+T_x]``, target
``y = values[targets, s+T_x:s+T_x+T_y]`` and history ``[0, s)``; the
historical set is every length-``T`` window fully inside the history. Nothing
at or after ``s`` ever enters a historical window.
"""
import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DataError

HISTORY_POLICIES = ("recent", "uniform")
MISSING_POLICIES = ("ffill", "drop")


@dataclass
class RawSeries:
    values: np.ndarray
    timestamps: list = None
    feature_names: list = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        if self.values.ndim != 2:
            raise DataError(f"series must be [features, time], got shape {self.values.shape}")
        if self.feature_names is None:
            self.feature_names = [f"f{i}" for i in range(self.values.shape[0])]
        if len(self.feature_names) != self.values.shape[0]:
            raise DataError("feature_names length does not match series")
        if self.timestamps is not None:
            if len(self.timestamps) != self.n_total:
                raise DataError("timestamps length does not match series")
            for i in range(1, len(self.timestamps)):
                if not self.timestamps[i] > self.timestamps[i - 1]:
                    raise DataError("timestamps must be strictly increasing", row=i + 1)

    @property
    def n_total(self):
        return self.values.shape[1]

    def index(self, names):
        """Column indices for feature names (or pass-through integers)."""
        out = []
        for n in names:
            if isinstance(n, (int, np.integer)):
                out.append(int(n))
            elif n in self.feature_names:
                out.append(self.feature_names.index(n))
            else:
                raise ConfigurationError(f"unknown column {n!r}; have {self.feature_names}")
        return out


@dataclass
class Instance:
    """One (x, y) pair plus the span of its history, as indices into a series."""

    start: int
    T_x: int
    T_y: int
    values: np.ndarray = field(repr=False)
    features: tuple = (0,)
    targets: tuple = (0,)

    @property
    def history_range(self):
        return (0, self.start)

    @property
    def x_range(self):
        return (self.start, self.start + self.T_x)

    @property
    def y_range(self):
        return (self.start + self.T_x, self.start + self.T_x + self.T_y)

    @property
    def x(self):
        return self.values[list(self.features), self.start:self.start + self.T_x]

    @property
    def y(self):
        lo, hi = self.y_range
        return self.values[list(self.targets), lo:hi]


@dataclass
class HistoricalSet:
    windows: np.ndarray  # [L, d_x, T]
    starts: np.ndarray   # window start indices, increasing

    @property
    def L(self):
        return len(self.starts)

    def __len__(self):
        return self.L

    def __getitem__(self, i):
        return self.windows[i]


def segment(raw, T, T_x=None, T_y=1, stride=1, features=None, targets=None):
    """Instances left to right; the first starts at ``T`` so its history holds one window."""
    T_x = T if T_x is None else T_x
    if min(T, T_x, T_y, stride) < 1:
        raise ConfigurationError("T, T_x, T_y and stride must be positive")
    features = tuple(range(raw.values.shape[0])) if features is None else tuple(features)
    targets = features if targets is None else tuple(targets)
    minimum = T + T_x + T_y
    if raw.n_total < minimum:
        raise ConfigurationError(
            f"series of length {raw.n_total} too short: need at least T + T_x + T_y = {minimum}")
    last = raw.n_total - T_x - T_y
    return [Instance(s, T_x, T_y, raw.values, features, targets)
            for s in range(T, last + 1, stride)]


def history_starts(span, T, L_max=None, policy="recent"):
    """Start indices of the windows kept from a history of length ``span``."""
    if policy not in HISTORY_POLICIES:
        raise ConfigurationError(f"history policy must be one of {HISTORY_POLICIES}")
    if span < T:
        raise ContractError(f"history span {span} shorter than window T={T}")
    L = span - T + 1
    if L_max is None or L <= L_max:
        return np.arange(L)
    if policy == "recent":
        return np.arange(L - L_max, L)
    if L_max == 1:
        return np.array([L - 1])
    return np.round(np.linspace(0, L - 1, L_max)).astype(np.int64)


def build_history(inst, raw, T, L_max=128, policy="recent", values=None):
    """Sliding windows of length T over the instance's history."""
    values = raw.values if values is None else values
    lo, hi = inst.history_range
    starts = lo + history_starts(hi - lo, T, L_max, policy)
    feats = list(inst.features)
    windows = np.stack([values[feats, s:s + T] for s in starts])
    return HistoricalSet(windows, starts)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Per-feature min/max fitted on the training split only."""

    minimum: np.ndarray
    maximum: np.ndarray
    source: str = "train"

    def _check(self):
        if self.source != "train":
            raise ContractError(f"normalizer fitted on {self.source!r} split, not train")

    def apply(self, values, rows=None):
        """Map to [0, 1] on training data; constant features map to 0."""
        self._check()
        lo, hi = self._pick(rows)
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = (np.asarray(values, dtype=np.float64) - lo) / safe
        return np.where(span > 0, out, 0.0)

    def invert(self, values, rows=None):
        self._check()
        lo, hi = self._pick(rows)
        span = hi - lo
        return np.asarray(values, dtype=np.float64) * np.where(span > 0, span, 0.0) + lo

    def _pick(self, rows):
        lo, hi = self.minimum, self.maximum
        if rows is not None:
            lo, hi = lo[list(rows)], hi[list(rows)]
        return lo[:, None], hi[:, None]


def fit_normalizer(train_instances, values=None):
    """Min/max of every feature over the time span the training split touches."""
    if not train_instances:
        raise ContractError("need at least one training instance")
    values = train_instances[0].values if values is None else values
    end = max(inst.y_range[1] for inst in train_instances)
    seen = values[:, :end]
    return NormStats(seen.min(axis=1), seen.max(axis=1), source="train")


def chronological_split(instances, fractions=(0.6, 0.2, 0.2)):
    """Time-ordered split; train and valid sizes are floored, test takes the rest."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"split fractions must be three non-negatives summing to 1: {fractions}")
    n = len(instances)
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_valid = math.floor(fractions[1] * n + 1e-9)
    parts = (instances[:n_train], instances[n_train:n_train + n_valid],
             instances[n_train + n_valid:])
    for name, part in zip(("train", "valid", "test"), parts):
        if not part:
            raise ConfigurationError(f"{name} split is empty ({n} instances, fractions {fractions})")
    return parts


# ---------------------------------------------------------------------------
# CSV and manifests

def load_csv(path, features=None, targets=None, timestamp=None, delimiter=",",
             missing="ffill"):
    """Read a headed CSV into a RawSeries of the requested feature/target columns.

    Missing cells: ``ffill`` carries the previous value forward (rows before
    the first complete row are dropped); ``drop`` removes incomplete rows.
    """
    if missing not in MISSING_POLICIES:
        raise ConfigurationError(f"missing-value policy must be one of {MISSING_POLICIES}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(features or [h for h in header if h != timestamp])
        for t in targets or []:
            if t not in wanted:
                wanted.append(t)
        for name in wanted + ([timestamp] if timestamp else []):
            if name not in header:
                raise DataError(f"{path}: missing column", column=name)
        cols = [header.index(n) for n in wanted]
        tcol = header.index(timestamp) if timestamp else None
        rows, stamps = [], []
        prev = None
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            vals = []
            for name, c in zip(wanted, cols):
                cell = rec[c].strip() if c < len(rec) else ""
                if cell == "":
                    vals.append(None)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: cannot parse {cell!r}", row=lineno,
                                    column=name) from None
            if any(v is None for v in vals):
                if missing == "drop" or prev is None:
                    continue
                vals = [p if v is None else v for v, p in zip(vals, prev)]
            if tcol is not None:
                raw_t = rec[tcol].strip()
                try:
                    stamps.append(float(raw_t))
                except ValueError:
                    stamps.append(raw_t)
            rows.append(vals)
            prev = vals
    if not rows:
        raise DataError(f"{path}: no usable rows")
    return RawSeries(np.array(rows, dtype=np.float64).T, stamps if tcol is not None else None,
                     wanted)


def write_csv(raw, path, delimiter=","):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        head = (["timestamp"] if raw.timestamps is not None else []) + list(raw.feature_names)
        writer.writerow(head)
        for t in range(raw.n_total):
            row = [repr(float(v)) for v in raw.values[:, t]]
            if raw.timestamps is not None:
                row.insert(0, raw.timestamps[t])
            writer.writerow(row)


_MANIFEST_INT = {"T", "T_x", "T_y", "k", "stride", "L_max"}
_MANIFEST_LIST = {"features", "targets", "split"}


@dataclass
class DatasetManifest:
    """key=value description of a dataset run; relative paths resolve against the file."""

    file: str
    features: list = None
    targets: list = None
    timestamp: str = None
    T: int = 64
    T_x: int = None
    T_y: int = 1
    k: int = 8
    stride: int = 1
    split: tuple = (0.6, 0.2, 0.2)
    L_max: int = 128
    history: str = "recent"
    delimiter: str = ","
    missing: str = "ffill"
    task: str = "regression"

    @classmethod
    def read(cls, path):
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataError(f"{path}: expected key=value", row=lineno)
                key, _, val = (s.strip() for s in line.partition("="))
                if key not in cls.__dataclass_fields__:
                    raise DataError(f"{path}: unknown key {key!r}", row=lineno)
                try:
                    if key in _MANIFEST_INT:
                        values[key] = int(val)
                    elif key == "split":
                        values[key] = tuple(float(v) for v in val.replace(":", ",").split(","))
                    elif key in _MANIFEST_LIST:
                        values[key] = [v.strip() for v in val.split(",") if v.strip()]
                    else:
                        values[key] = val
                except ValueError:
                    raise DataError(f"{path}: bad value for {key}: {val!r}", row=lineno) from None
        if "file" not in values:
            raise DataError(f"{path}: manifest needs a 'file' entry")
        if not os.path.isabs(values["file"]):
            values["file"] = os.path.join(os.path.dirname(os.path.abspath(path)), values["file"])
        return cls(**values)

    def to_text(self):
        lines = []
        for key in self.__dataclass_fields__:
            val = getattr(self, key)
            if val is None:
                continue
            if key == "split":
                val = ",".join(repr(float(v)) for v in val)
            elif isinstance(val, (list, tuple)):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


# ---------------------------------------------------------------------------
# assembled dataset

class WindowedDataset:
    """Normalized series, its instances split chronologically, and batch assembly."""

    def __init__(self, raw, T, T_x=None, T_y=1, stride=1, features=None, targets=None,
                 split=(0.6, 0.2, 0.2), L_max=128, history="recent", task="regression"):
        self.raw = raw
        self.task = task
        self.T = T
        self.T_x = T if T_x is None else T_x
        self.T_y = T_y
        self.L_max = L_max
        self.history = history
        self.features = tuple(raw.index(features)) if features else tuple(range(raw.values.shape[0]))
        self.targets = tuple(raw.index(targets)) if targets else self.features
        instances = segment(raw, T, self.T_x, T_y, stride, self.features, self.targets)
        train, _, _ = chronological_split(instances, split)
        self.norm = fit_normalizer(train, raw.values)
        self.values = self.norm.apply(raw.values)
        if task == "classification":
            # class labels stay integers
            self.values[list(self.targets)] = raw.values[list(self.targets)]
        instances = segment(RawSeries(self.values, None, raw.feature_names), T, self.T_x, T_y,
                            stride, self.features, self.targets)
        self.train, self.valid, self.test = chronological_split(instances, split)

    @classmethod
    def from_manifest(cls, manifest, **overrides):
        raw = load_csv(manifest.file, manifest.features, manifest.targets, manifest.timestamp,
                       manifest.delimiter, manifest.missing)
        kw = dict(T=manifest.T, T_x=manifest.T_x, T_y=manifest.T_y, stride=manifest.stride,
                  features=manifest.features, targets=manifest.targets, split=manifest.split,
                  L_max=manifest.L_max, history=manifest.history, task=manifest.task)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(raw, **kw)

    @property
    def d_x(self):
        return len(self.features)

    @property
    def d_y(self):
        return len(self.targets)

    def split(self, name):
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]

    def history_for(self, inst, L_max=None):
        return build_history(inst, None, self.T, self.L_max if L_max is None else L_max,
                             self.history, values=self.values)

    def batch(self, instances, L_max=None, with_history=True):
        """Flattened rows for a list of instances.

        Returns (x [N, T_x, d_x], xhat [N, d_x, T] or None, y [N, d_y*T_y],
        owner [N]) where ``owner`` maps each row to its instance position.
        """
        xs, hs, ys, owner = [], [], [], []
        for pos, inst in enumerate(instances):
            y = inst.y.reshape(-1)
            if with_history:
                hist = self.history_for(inst, L_max)
                hs.append(hist.windows)
                n = hist.L
            else:
                n = 1
            xs.append(np.broadcast_to(inst.x.T, (n, self.T_x, self.d_x)))
            ys.append(np.broadcast_to(y, (n, y.size)))
            owner.extend([pos] * n)
        x = np.ascontiguousarray(np.concatenate(xs))
        y = np.ascontiguousarray(np.concatenate(ys))
        xhat = np.ascontiguousarray(np.concatenate(hs)) if with_history else None
        return x, xhat, y, np.asarray(owner)
