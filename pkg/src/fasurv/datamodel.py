"""Cohorts on a uniform interval grid.

Observations arrive in long format (``subject_id,time,feature,value``) and are
binned into intervals ``j = floor(time / width) + 1``. Within an interval the
last observation of a feature wins. Trajectories are then filled by
last-observation-carried-forward, with a mask (1 = no observation in that
interval) and a staleness count in intervals.

Interval numbers are 1-based everywhere in this module; array rows are
0-based, so row ``s`` holds interval ``s + 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kernels import locf_fill

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Malformed input data; the message carries the offending location."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = NUMERIC
    cardinality: int = 0
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and self.cardinality < 2:
            raise ValueError(f"feature {self.name!r}: categorical cardinality must be >= 2")
        if self.kind == NUMERIC and not self.std > 0:
            raise ValueError(f"feature {self.name!r}: std must be positive")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if not names:
            raise ValueError("schema has no features")

    def __len__(self):
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise KeyError(name)

    @property
    def numeric_idx(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind == NUMERIC]

    @property
    def categorical_idx(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind == CATEGORICAL]

    def neutral_fill(self) -> np.ndarray:
        # standardized numeric 0, category 0
        return np.zeros(len(self.features))

    def standardize(self, feat: np.ndarray, values: np.ndarray) -> np.ndarray:
        mean = np.array([f.mean for f in self.features])
        std = np.array([f.std for f in self.features])
        numeric = np.array([f.kind == NUMERIC for f in self.features])
        out = values.astype(np.float64).copy()
        sel = numeric[feat]
        out[sel] = (values[sel] - mean[feat[sel]]) / std[feat[sel]]
        return out

    def with_stats(self, stats: dict[str, tuple[float, float]]) -> "FeatureSchema":
        feats = []
        for f in self.features:
            if f.kind == NUMERIC and f.name in stats:
                m, s = stats[f.name]
                feats.append(Feature(f.name, f.kind, f.cardinality, float(m), float(s)))
            else:
                feats.append(f)
        return FeatureSchema(tuple(feats))

    def to_dict(self) -> list[dict]:
        return [dict(name=f.name, kind=f.kind, cardinality=f.cardinality, mean=f.mean, std=f.std)
                for f in self.features]

    @classmethod
    def from_dict(cls, items: list[dict]) -> "FeatureSchema":
        return cls(tuple(Feature(**it) for it in items))


@dataclass(frozen=True)
class DiscretizationGrid:
    width: float
    n_intervals: int

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("interval width must be positive")
        if self.n_intervals < 1:
            raise ValueError("grid needs at least one interval")

    @property
    def horizon_time(self) -> float:
        return self.width * self.n_intervals

    def interval(self, time: float) -> int:
        if time < 0 or not math.isfinite(time):
            raise DataError(f"time {time} outside grid")
        j = int(math.floor(time / self.width)) + 1
        if j > self.n_intervals:
            raise DataError(f"time {time} beyond grid end {self.horizon_time}")
        return j


@dataclass
class Subject:
    """Sparse interval-indexed observations plus the discrete outcome."""

    subject_id: str
    obs_interval: np.ndarray  # 1-based, deduplicated per (interval, feature)
    obs_feature: np.ndarray
    obs_value: np.ndarray     # raw (unstandardized) values
    event_interval: int
    event_cause: int
    event_time: float = float("nan")

    @property
    def last_observed(self) -> int:
        return int(self.obs_interval.max()) if self.obs_interval.size else 0


@dataclass
class Cohort:
    schema: FeatureSchema
    grid: DiscretizationGrid
    subjects: list[Subject]
    n_causes: int

    def __len__(self):
        return len(self.subjects)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return Cohort(self.schema, self.grid, [s for s in self.subjects if s.subject_id in keep],
                      self.n_causes)

    def outcomes(self) -> tuple[np.ndarray, np.ndarray]:
        T = np.array([s.event_interval for s in self.subjects], dtype=np.int64)
        e = np.array([s.event_cause for s in self.subjects], dtype=np.int64)
        return T, e

    def fit_standardization(self) -> FeatureSchema:
        """Schema with numeric mean/std taken from this cohort's observations."""
        stats = {}
        for d in self.schema.numeric_idx:
            vals = np.concatenate([s.obs_value[s.obs_feature == d] for s in self.subjects]
                                  + [np.empty(0)])
            if vals.size == 0:
                stats[self.schema.features[d].name] = (0.0, 1.0)
                continue
            std = float(vals.std())
            stats[self.schema.features[d].name] = (float(vals.mean()), std if std > 0 else 1.0)
        return self.schema.with_stats(stats)


@dataclass
class SubjectTrajectory:
    """Dense per-interval inputs for rows 0..tau-1 (intervals 1..tau)."""

    subject_id: str
    X: np.ndarray
    M: np.ndarray
    delta: np.ndarray
    event_interval: int
    event_cause: int
    last_observed: int
    landmark: int = 0

    @property
    def length(self) -> int:
        return self.X.shape[0]

    def truncate(self, tau: int) -> "SubjectTrajectory":
        return SubjectTrajectory(self.subject_id, self.X[:tau], self.M[:tau], self.delta[:tau],
                                 self.event_interval, self.event_cause, self.last_observed, tau)


@dataclass
class Batch:
    X: np.ndarray          # (B, S, D)
    M: np.ndarray          # (B, S, D)
    delta: np.ndarray      # (B, S, D)
    valid: np.ndarray      # (B, S) bool
    lengths: np.ndarray    # (B,)
    labels: np.ndarray     # (B, H, K)
    loss_mask: np.ndarray  # (B, H)
    horizon: int
    subject_ids: list[str] = field(default_factory=list)
    landmarks: np.ndarray | None = None


# -- discretization ---------------------------------------------------------

def discretize(observations: Iterable[tuple[str, float, int, float]], grid: DiscretizationGrid
               ) -> dict[str, dict[tuple[int, int], float]]:
    """Bin raw ``(subject_id, time, feature_index, value)`` records.

    Returns ``{subject: {(interval, feature): value}}``. Later observations
    win within an interval; equal times fall back to input order.
    """
    out: dict[str, dict[tuple[int, int], tuple[float, int, float]]] = {}
    for order, (sid, time, feat, value) in enumerate(observations):
        try:
            j = grid.interval(float(time))
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from None
        cells = out.setdefault(sid, {})
        key = (j, int(feat))
        prev = cells.get(key)
        if prev is None or (time, order) >= (prev[0], prev[1]):
            cells[key] = (float(time), order, float(value))
    return {sid: {k: v[2] for k, v in cells.items()} for sid, cells in out.items()}


def make_subject(subject_id: str, cells: dict[tuple[int, int], float], event_interval: int,
                 event_cause: int, event_time: float = float("nan")) -> Subject:
    keys = sorted(cells)
    obs_interval = np.array([k[0] for k in keys], dtype=np.int64)
    obs_feature = np.array([k[1] for k in keys], dtype=np.int64)
    obs_value = np.array([cells[k] for k in keys], dtype=np.float64)
    return Subject(subject_id, obs_interval, obs_feature, obs_value,
                   int(event_interval), int(event_cause), float(event_time))


def build_trajectory(subject: Subject, schema: FeatureSchema, n_steps: int | None = None
                     ) -> SubjectTrajectory:
    """LOCF-filled X with mask and staleness over intervals 1..n_steps.

    ``n_steps`` defaults to the last interval any landmark could reach,
    ``max(last observed, event interval - 1)``. Numeric values are
    standardized with the schema statistics before filling.
    """
    if n_steps is None:
        n_steps = max(subject.last_observed, subject.event_interval - 1, 1)
    values = schema.standardize(subject.obs_feature, subject.obs_value)
    X, M, delta = locf_fill(n_steps, schema.neutral_fill(), subject.obs_interval - 1,
                            subject.obs_feature, values)
    return SubjectTrajectory(subject.subject_id, X, M, delta, subject.event_interval,
                             subject.event_cause, subject.last_observed)


# -- landmarks --------------------------------------------------------------

def landmark_range(traj: SubjectTrajectory) -> int:
    """Largest valid landmark; 0 when the subject has none."""
    return min(traj.event_interval - 1, traj.last_observed, traj.length)


def landmark_labels(event_interval: int, event_cause: int, tau: int, horizon: int, n_causes: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Labels (H, K) and loss mask (H,) for offsets 1..H after landmark ``tau``.

    Offset h covers interval ``tau + h``; it is in the loss while
    ``tau + h <= min(T, tau + H)``.
    """
    labels = np.zeros((horizon, n_causes))
    mask = np.zeros(horizon)
    last = min(event_interval - tau, horizon)
    if last > 0:
        mask[:last] = 1.0
    rel = event_interval - tau
    if event_cause != 0 and 1 <= rel <= horizon:
        labels[rel - 1, event_cause - 1] = 1.0
    return labels, mask


def sample_landmark(traj: SubjectTrajectory, horizon: int, rng: np.random.Generator, n_causes: int
                    ) -> tuple[SubjectTrajectory, np.ndarray, np.ndarray] | None:
    """Uniform landmark over ``1..min(T - 1, last observed)``; ``None`` if there is none."""
    hi = landmark_range(traj)
    if hi < 1:
        return None
    tau = int(rng.integers(1, hi + 1))
    labels, mask = landmark_labels(traj.event_interval, traj.event_cause, tau, horizon, n_causes)
    return traj.truncate(tau), labels, mask


def last_landmark(traj: SubjectTrajectory, horizon: int, n_causes: int):
    """Deterministic policy: the latest valid landmark."""
    hi = landmark_range(traj)
    if hi < 1:
        return None
    labels, mask = landmark_labels(traj.event_interval, traj.event_cause, hi, horizon, n_causes)
    return traj.truncate(hi), labels, mask


def fixed_landmark(traj: SubjectTrajectory, tau: int, horizon: int, n_causes: int):
    """Landmark at ``tau`` if it is valid for this subject, else ``None``."""
    if tau < 1 or tau > landmark_range(traj):
        return None
    labels, mask = landmark_labels(traj.event_interval, traj.event_cause, tau, horizon, n_causes)
    return traj.truncate(tau), labels, mask


# -- batching ---------------------------------------------------------------

def make_batch(items: Sequence[tuple[SubjectTrajectory, np.ndarray, np.ndarray]]) -> Batch:
    """Right-pad landmarked trajectories to the longest one.

    Padded cells get ``M = 1``, ``delta = 0``, ``valid = False``.
    """
    if not items:
        raise ValueError("make_batch needs at least one trajectory")
    n_feat = items[0][0].X.shape[1]
    horizon, n_causes = items[0][1].shape
    for traj, labels, _ in items:
        if traj.X.shape[1] != n_feat or labels.shape != (horizon, n_causes):
            raise ValueError("make_batch: trajectories do not share a schema/horizon")
    B = len(items)
    S = max(t.length for t, _, _ in items)
    X = np.zeros((B, S, n_feat))
    M = np.ones((B, S, n_feat))
    delta = np.zeros((B, S, n_feat))
    valid = np.zeros((B, S), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    labels = np.zeros((B, horizon, n_causes))
    mask = np.zeros((B, horizon))
    for b, (traj, y, m) in enumerate(items):
        n = traj.length
        X[b, :n] = traj.X
        M[b, :n] = traj.M
        delta[b, :n] = traj.delta
        valid[b, :n] = True
        lengths[b] = n
        labels[b] = y
        mask[b] = m
    return Batch(X, M, delta, valid, lengths, labels, mask, horizon,
                 [t.subject_id for t, _, _ in items],
                 np.array([t.landmark for t, _, _ in items], dtype=np.int64))


# -- CSV I/O ----------------------------------------------------------------

def read_schema(path) -> FeatureSchema:
    """Schema file: one ``name,kind[,cardinality]`` per line."""
    feats = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "name":
                continue
            try:
                name, kind = row[0].strip(), row[1].strip()
                card = int(row[2]) if len(row) > 2 and row[2].strip() else 0
                feats.append(Feature(name, kind, card))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad schema row {row!r} ({exc})") from None
    if not feats:
        raise DataError(f"{path}: empty schema")
    return FeatureSchema(tuple(feats))


def write_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w", newline="") as fh:
        for f in schema.features:
            fh.write(f"{f.name},{f.kind},{f.cardinality}\n" if f.kind == CATEGORICAL
                     else f"{f.name},{f.kind}\n")


def _float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: non-finite value {text!r}")
    return v


def ingest_csv(observations_path, outcomes_path, schema: FeatureSchema, grid: DiscretizationGrid,
               n_causes: int | None = None) -> Cohort:
    """Read long-format observations and outcomes into a :class:`Cohort`.

    Values stay raw; standardization happens when trajectories are built
    (see :meth:`Cohort.fit_standardization`).
    """
    names = {f.name: i for i, f in enumerate(schema.features)}
    records = []
    with open(observations_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{observations_path}: empty file")
        if [h.strip() for h in header] != ["subject_id", "time", "feature", "value"]:
            raise DataError(f"{observations_path}:1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{observations_path}:{lineno}"
            if len(row) != 4:
                raise DataError(f"{where}: expected 4 fields, got {len(row)}")
            sid, time, feat, value = (c.strip() for c in row)
            if feat not in names:
                raise DataError(f"{where}: unknown feature {feat!r}")
            d = names[feat]
            v = _float(value, where)
            f = schema.features[d]
            if f.kind == CATEGORICAL and (v != int(v) or not 0 <= v < f.cardinality):
                raise DataError(f"{where}: category {value!r} out of range for {feat!r}")
            t = _float(time, where)
            if t < 0:
                raise DataError(f"{where}: negative time")
            records.append((sid, t, d, v))

    outcomes: dict[str, tuple[float, int]] = {}
    with open(outcomes_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{outcomes_path}: empty file")
        if [h.strip() for h in header] != ["subject_id", "event_time", "event_cause"]:
            raise DataError(f"{outcomes_path}:1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{outcomes_path}:{lineno}"
            if len(row) != 3:
                raise DataError(f"{where}: expected 3 fields, got {len(row)}")
            sid = row[0].strip()
            t = _float(row[1], where)
            try:
                e = int(row[2])
            except ValueError:
                raise DataError(f"{where}: bad cause {row[2]!r}") from None
            if e < 0 or (n_causes is not None and e > n_causes):
                raise DataError(f"{where}: cause {e} out of range")
            outcomes[sid] = (t, e)

    cells = discretize(records, grid)
    for lineno, (sid, *_rest) in enumerate(records, start=2):
        if sid not in outcomes:
            raise DataError(f"{observations_path}:{lineno}: subject {sid} has no outcome row")
    if n_causes is None:
        n_causes = max([e for _, e in outcomes.values()] + [1])
    subjects = []
    for sid, (t, e) in outcomes.items():
        try:
            T = grid.interval(t)
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from None
        subjects.append(make_subject(sid, cells.get(sid, {}), T, e, t))
    return Cohort(schema, grid, subjects, n_causes)


def emit_csv(cohort: Cohort, observations_path, outcomes_path, times=None) -> None:
    """Write a cohort back to the long CSV format.

    Observation times are placed at the start of their interval unless
    ``times`` (``{subject_id: array}`` aligned with the sparse arrays) is given.
    """
    w = cohort.grid.width
    with open(observations_path, "w", newline="") as fh:
        fh.write("subject_id,time,feature,value\n")
        names = cohort.schema.names
        for s in cohort.subjects:
            ts = times[s.subject_id] if times is not None else (s.obs_interval - 1) * w
            for t, d, v in zip(ts, s.obs_feature, s.obs_value):
                fh.write(f"{s.subject_id},{_fmt(t)},{names[d]},{_fmt(v)}\n")
    with open(outcomes_path, "w", newline="") as fh:
        fh.write("subject_id,event_time,event_cause\n")
        for s in cohort.subjects:
            t = s.event_time if math.isfinite(s.event_time) else (s.event_interval - 1) * w
            fh.write(f"{s.subject_id},{_fmt(t)},{s.event_cause}\n")


def _fmt(x: float) -> str:
    return repr(float(x))
