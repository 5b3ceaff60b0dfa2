"""Synthetic longitudinal competing-risk cohorts with known hazards.

Every subject has static latent covariates: one binary risk driver per cause
and ``n_numeric`` standard-normal latents. Hazards are constant over time and
multiplicative in the covariates::

    hazard_k = base_k * prod_d effect[d, k] ** x_d

with the cause hazards scaled down together whenever they would sum past
0.95. Each interval is one multinomial trial over {cause 1..K, censor,
survive}. Drivers are observed as categorical values, latents as noisy
numeric measurements, each cell kept with probability ``1 - missing_rate``.
Everything is observed at baseline (time 0).

The ``"staleness"`` scenario ties the measurement process to risk: the
cause-1 driver is never reported directly. Instead, high-risk subjects are
measured far less often, so time since last measurement carries the signal.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import (CATEGORICAL, NUMERIC, Cohort, DiscretizationGrid, Feature, FeatureSchema,
                        Subject, emit_csv, write_schema)
from .kernels import simulate_outcomes

HAZARD_CAP = 0.95


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2000
    n_causes: int = 2
    n_intervals: int = 40
    interval_width: float = 1.0
    base_hazards: tuple = (0.012, 0.012)
    driver_multiplier: float = 3.0
    driver_prevalence: float = 0.5
    n_numeric: int = 2
    numeric_effect: float = 3.0
    measurement_noise: float = 0.5
    missing_rate: tuple | None = None
    censor_hazard: float = 0.0
    scenario: str = "standard"
    effects: tuple | None = field(default=None)
    seed: int = 0

    @property
    def n_features(self) -> int:
        return self.n_causes + self.n_numeric

    def effect_matrix(self) -> np.ndarray:
        """(D, K) hazard multipliers per unit of each covariate.

        Default: driver k multiplies cause k by ``driver_multiplier``;
        numeric latent i multiplies cause ``i % K`` by ``numeric_effect`` per SD.
        """
        if self.effects is not None:
            return np.array(self.effects, dtype=np.float64).reshape(self.n_features, self.n_causes)
        eff = np.ones((self.n_features, self.n_causes))
        for k in range(self.n_causes):
            eff[k, k] = self.driver_multiplier
        for i in range(self.n_numeric):
            eff[self.n_causes + i, i % self.n_causes] = self.numeric_effect
        return eff

    def missing_rates(self) -> np.ndarray:
        if self.missing_rate is None:
            return np.array([0.0] * self.n_causes + [0.3] * self.n_numeric)
        rates = np.array(self.missing_rate, dtype=np.float64).reshape(-1)
        if rates.size == 1:
            rates = np.full(self.n_features, rates[0])
        return rates

    def validate(self) -> None:
        base = np.asarray(self.base_hazards, dtype=np.float64)
        if self.n_subjects < 1 or self.n_causes < 1 or self.n_intervals < 1:
            raise SynthConfigError("n_subjects, n_causes and n_intervals must be positive")
        if base.shape != (self.n_causes,):
            raise SynthConfigError(f"base_hazards needs {self.n_causes} entries, got {base.size}")
        if np.any(base < 0) or np.any(base >= 1):
            raise SynthConfigError("base hazards must lie in [0, 1)")
        if not 0 <= self.censor_hazard < 1 - HAZARD_CAP:
            raise SynthConfigError(
                f"censor hazard must lie in [0, {1 - HAZARD_CAP:g}) so that cause hazards "
                f"(capped at {HAZARD_CAP}) plus censoring stay below 1")
        if base.sum() + self.censor_hazard >= 1:
            raise SynthConfigError("sum of base hazards plus censoring must be < 1")
        if np.any(self.effect_matrix() <= 0):
            raise SynthConfigError("hazard multipliers must be positive")
        rates = self.missing_rates()
        if rates.shape != (self.n_features,) or np.any(rates < 0) or np.any(rates >= 1):
            raise SynthConfigError("missing rates must be in [0, 1), one per feature")
        if not 0 <= self.driver_prevalence <= 1:
            raise SynthConfigError("driver prevalence must be a probability")
        if self.scenario not in ("standard", "staleness"):
            raise SynthConfigError(f"unknown scenario {self.scenario!r}")
        if self.interval_width <= 0:
            raise SynthConfigError("interval width must be positive")


@dataclass
class GroundTruth:
    subject_ids: list[str]
    covariates: np.ndarray  # (N, D) latent covariates (drivers 0/1, numeric latents)
    hazards: np.ndarray     # (N, K), constant over intervals
    survival: np.ndarray    # (N, J)
    cif: np.ndarray         # (N, J, K)

    def risk_groups(self, n_causes: int) -> np.ndarray:
        """Integer code of the driver pattern, ``sum_k driver_k * 2**k``."""
        drivers = self.covariates[:, :n_causes].astype(np.int64)
        return (drivers * (1 << np.arange(n_causes))).sum(axis=1)


def covariate_hazards(config: SynthConfig, covariates: np.ndarray) -> np.ndarray:
    """Constant per-interval cause hazards for covariate rows (N, D) -> (N, K)."""
    cov = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
    eff = config.effect_matrix()
    lam = np.asarray(config.base_hazards, dtype=np.float64)[None, :] * np.exp(cov @ np.log(eff))
    total = lam.sum(axis=1, keepdims=True)
    scale = np.where(total > HAZARD_CAP, HAZARD_CAP / np.where(total > 0, total, 1.0), 1.0)
    return lam * scale


def closed_form_cif(hazards: np.ndarray, n_intervals: int) -> tuple[np.ndarray, np.ndarray]:
    """Survival (N, J) and CIF (N, J, K) for hazards constant over intervals.

    ``S_j = (1 - L)**j`` and ``F_j^k = h_k * (1 - (1 - L)**j) / L`` with
    ``L = sum_k h_k``.
    """
    hz = np.atleast_2d(hazards)
    total = hz.sum(axis=1, keepdims=True)
    j = np.arange(1, n_intervals + 1)[None, :]
    surv = (1.0 - total) ** j
    frac = np.where(total > 0, hz / np.where(total > 0, total, 1.0), 0.0)
    cif = (1.0 - surv)[:, :, None] * frac[:, None, :]
    return surv, cif


def true_cif(config: SynthConfig, covariates) -> np.ndarray:
    """CIF (J, K) of one covariate vector, or (N, J, K) for a matrix."""
    cov = np.asarray(covariates, dtype=np.float64)
    _, cif = closed_form_cif(covariate_hazards(config, cov), config.n_intervals)
    return cif[0] if cov.ndim == 1 else cif


def schema_for(config: SynthConfig) -> FeatureSchema:
    feats = [Feature(f"driver{k + 1}", CATEGORICAL, 2) for k in range(config.n_causes)]
    feats += [Feature(f"marker{i + 1}", NUMERIC) for i in range(config.n_numeric)]
    return FeatureSchema(tuple(feats))


def generate(config: SynthConfig, seed: int | None = None) -> tuple[Cohort, GroundTruth, dict]:
    """Draw a cohort. Returns (cohort, ground truth, observation times by subject).

    Deterministic in ``seed`` (falls back to ``config.seed``).
    """
    config.validate()
    if seed is not None:
        config = replace(config, seed=seed)
    rng = np.random.default_rng(config.seed)
    N, K, J, D = config.n_subjects, config.n_causes, config.n_intervals, config.n_features
    w = config.interval_width

    drivers = (rng.random((N, K)) < config.driver_prevalence).astype(np.float64)
    latents = rng.standard_normal((N, config.n_numeric))
    cov = np.concatenate([drivers, latents], axis=1)
    hz = covariate_hazards(config, cov)

    T, e = simulate_outcomes(hz, config.censor_hazard, rng.random((N, J)))
    event_time = (T - 1 + rng.random(N)) * w

    keep_prob = np.broadcast_to(1.0 - config.missing_rates(), (N, D)).copy()
    if config.scenario == "staleness":
        # measurement frequency, not the reported value, reveals cause-1 risk
        high = drivers[:, 0] == 1
        keep_prob[:, 0] = 0.0
        keep_prob[:, K:] = np.where(high[:, None], 0.2, 0.8)

    subjects, times = [], {}
    width = len(str(N - 1))
    for i in range(N):
        sid = f"s{i:0{width}d}"
        observed = rng.random((J, D)) < keep_prob[i][None, :]
        observed[0] = True
        if config.scenario == "staleness":
            observed[0, 0] = False
        offsets = rng.random((J, D))
        noise = rng.standard_normal((J, D))
        steps, feats = np.nonzero(observed)
        t_obs = (steps + offsets[steps, feats]) * w
        t_obs[steps == 0] = 0.0
        ok = t_obs < event_time[i]
        steps, feats, t_obs = steps[ok], feats[ok], t_obs[ok]
        vals = cov[i, feats].copy()
        numeric = feats >= K
        vals[numeric] += config.measurement_noise * noise[steps[numeric], feats[numeric]]
        subjects.append(Subject(sid, steps + 1, feats, vals, int(T[i]), int(e[i]),
                                float(event_time[i])))
        times[sid] = t_obs

    surv, cif = closed_form_cif(hz, J)
    cohort = Cohort(schema_for(config), DiscretizationGrid(w, J), subjects, K)
    truth = GroundTruth([s.subject_id for s in subjects], cov, hz, surv, cif)
    return cohort, truth, times


def write_cohort(out_dir, cohort: Cohort, truth: GroundTruth, times: dict) -> None:
    """``observations.csv``, ``outcomes.csv``, ``schema.csv``, ``ground_truth.csv``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(cohort, out / "observations.csv", out / "outcomes.csv", times)
    write_schema(cohort.schema, out / "schema.csv")
    write_ground_truth(truth, out / "ground_truth.csv")


def write_ground_truth(truth: GroundTruth, path) -> None:
    N, J, K = truth.cif.shape
    with open(path, "w", newline="") as fh:
        fh.write("subject_id,interval,cause,true_cif\n")
        for i, sid in enumerate(truth.subject_ids):
            for j in range(J):
                for k in range(K):
                    fh.write(f"{sid},{j + 1},{k + 1},{float(truth.cif[i, j, k])!r}\n")


def read_ground_truth(path) -> tuple[list[str], np.ndarray]:
    """Inverse of :func:`write_ground_truth`: (subject ids, CIF array (N, J, K))."""
    rows: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            rows.setdefault(r["subject_id"], {})[(int(r["interval"]), int(r["cause"]))] = float(r["true_cif"])
    ids = list(rows)
    J = max(j for cells in rows.values() for j, _ in cells)
    K = max(k for cells in rows.values() for _, k in cells)
    cif = np.zeros((len(ids), J, K))
    for i, sid in enumerate(ids):
        for (j, k), v in rows[sid].items():
            cif[i, j - 1, k - 1] = v
    return ids, cif
