"""Dataset directories, splits, landmark policies and prediction/evaluation steps.

A dataset directory holds ``observations.csv``, ``outcomes.csv``,
``schema.csv`` and ``grid.cfg`` (``interval_width``, ``n_intervals``,
``n_causes`` in the flat config format).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datamodel import (Cohort, DataError, DiscretizationGrid, build_trajectory, fixed_landmark,
                        ingest_csv, last_landmark, make_batch, read_schema, sample_landmark)
from .hazardheads import cif, conservation_error, survival
from .model import SurvivalModel

log = logging.getLogger(__name__)

CONSERVATION_TOL = 1e-9


def write_grid(path, width: float, n_intervals: int, n_causes: int) -> None:
    Path(path).write_text(f"interval_width = {float(width)!r}\nn_intervals = {n_intervals}\nn_causes = {n_causes}\n")


def read_grid(data_dir) -> dict:
    p = Path(data_dir) / "grid.cfg"
    return cfgmod.parse(p.read_text(), str(p)) if p.exists() else {}


def load_dataset(data_dir, width: float | None = None, n_intervals: int | None = None,
                 n_causes: int | None = None) -> Cohort:
    """Read a dataset directory; explicit arguments override ``grid.cfg``."""
    d = Path(data_dir)
    for name in ("observations.csv", "outcomes.csv", "schema.csv"):
        if not (d / name).exists():
            raise DataError(f"{d / name}: missing")
    g = read_grid(d)
    width = width or g.get("interval_width")
    n_intervals = n_intervals or g.get("n_intervals")
    n_causes = n_causes or g.get("n_causes") or None
    if not width or not n_intervals:
        raise DataError(f"{d}: no grid.cfg; interval width and count must be given")
    schema = read_schema(d / "schema.csv")
    return ingest_csv(d / "observations.csv", d / "outcomes.csv", schema,
                      DiscretizationGrid(float(width), int(n_intervals)), n_causes)


# -- splits -----------------------------------------------------------------

def assign_splits(subject_ids, seed: int, test_fraction: float, val_fraction: float = 0.0,
                  folds: int = 0) -> dict[str, str]:
    """Deterministic split labels: ``test``, then ``val``/``train``, or ``fold<i>``."""
    if not 0 <= test_fraction < 1 or not 0 <= val_fraction < 1:
        raise ValueError("split fractions must lie in [0, 1)")
    ids = list(subject_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    labels = {ids[i]: "test" for i in order[:n_test]}
    rest = order[n_test:]
    if folds:
        if folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        for pos, i in enumerate(rest):
            labels[ids[i]] = f"fold{pos % folds}"
    else:
        n_val = int(round(val_fraction * len(rest)))
        for pos, i in enumerate(rest):
            labels[ids[i]] = "val" if pos < n_val else "train"
    return {sid: labels[sid] for sid in ids}


def write_split(labels: dict[str, str], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("subject_id,split\n")
        for sid, lab in labels.items():
            fh.write(f"{sid},{lab}\n")


def read_split(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "subject_id,split":
            raise DataError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields")
            out[parts[0]] = parts[1]
    return out


def select(cohort: Cohort, labels: dict[str, str], *names: str) -> Cohort:
    keep = set(names)
    return cohort.subset([s.subject_id for s in cohort.subjects if labels.get(s.subject_id) in keep])


# -- prediction -------------------------------------------------------------

@dataclass
class Predictions:
    subject_ids: list[str]
    landmarks: np.ndarray      # (N,) landmark interval tau
    event_interval: np.ndarray
    event_cause: np.ndarray
    hazards: np.ndarray        # (N, H, K)

    @property
    def rel_times(self) -> np.ndarray:
        return self.event_interval - self.landmarks

    def cif(self) -> np.ndarray:
        return cif(self.hazards)


def parse_policy(policy: str):
    if policy in ("first", "last", "random"):
        return policy
    try:
        tau = int(policy)
    except ValueError:
        raise ValueError(f"landmark policy must be first, last, random or an interval, got {policy!r}") from None
    if tau < 1:
        raise ValueError("fixed landmark must be >= 1")
    return tau


def landmark_items_for(model: SurvivalModel, cohort: Cohort, policy, seed: int = 0):
    """Landmarked items under ``policy`` plus the number of subjects skipped."""
    policy = parse_policy(str(policy))
    H, K = model.config.horizon, model.config.n_causes
    rng = np.random.default_rng(seed)
    items, skipped = [], 0
    for s in cohort.subjects:
        traj = build_trajectory(s, model.schema)
        if policy == "first":
            it = fixed_landmark(traj, 1, H, K)
        elif policy == "last":
            it = last_landmark(traj, H, K)
        elif policy == "random":
            it = sample_landmark(traj, H, rng, K)
        else:
            it = fixed_landmark(traj, policy, H, K)
        if it is None:
            skipped += 1
        else:
            items.append(it)
    if skipped:
        log.info("%d subjects without a valid landmark skipped", skipped)
    return items, skipped


def predict(model: SurvivalModel, cohort: Cohort, policy="first", seed: int = 0,
            batch_size: int = 256) -> Predictions:
    items, _ = landmark_items_for(model, cohort, policy, seed)
    if not items:
        raise DataError("no subject has a valid landmark under this policy")
    lam = np.concatenate([model.predict(make_batch(items[i:i + batch_size]))
                          for i in range(0, len(items), batch_size)])
    err = conservation_error(lam)
    if not err <= CONSERVATION_TOL:
        raise RuntimeError(f"conservation check failed: max error {err:.3g}")
    trajs = [t for t, _, _ in items]
    return Predictions([t.subject_id for t in trajs], np.array([t.landmark for t in trajs]),
                       np.array([t.event_interval for t in trajs]),
                       np.array([t.event_cause for t in trajs]), lam)


def write_landmarks(pred: Predictions, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("subject_id,landmark\n")
        for sid, tau in zip(pred.subject_ids, pred.landmarks):
            fh.write(f"{sid},{int(tau)}\n")


def read_landmarks(path) -> dict[str, int]:
    out = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "subject_id,landmark":
            raise DataError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            try:
                out[parts[0]] = int(parts[1])
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: bad landmark row") from None
    return out


def relative_outcomes(cohort: Cohort, subject_ids, landmarks: dict[str, int] | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Event interval relative to each subject's landmark (0 when none) and cause."""
    by_id = {s.subject_id: s for s in cohort.subjects}
    T, e = [], []
    for sid in subject_ids:
        if sid not in by_id:
            raise DataError(f"subject {sid} has predictions but no outcome")
        s = by_id[sid]
        tau = landmarks.get(sid, 0) if landmarks else 0
        if s.event_interval <= tau:
            raise DataError(f"subject {sid}: landmark {tau} not before event interval {s.event_interval}")
        T.append(s.event_interval - tau)
        e.append(s.event_cause)
    return np.array(T, dtype=np.int64), np.array(e, dtype=np.int64)


def check_conservation(lam, F, S) -> None:
    """Fatal unless the stored CIF and survival agree and sum to one at H."""
    err = float(np.max(np.abs(F[:, -1, :].sum(axis=-1) + S[:, -1] - 1.0)))
    if not err <= CONSERVATION_TOL:
        raise RuntimeError(f"conservation check failed: max |sum F + S - 1| = {err:.3g}")
    if not np.allclose(cif(lam), F, atol=1e-9) or not np.allclose(survival(lam), S, atol=1e-9):
        raise RuntimeError("stored CIF/survival do not match the stored hazards")
