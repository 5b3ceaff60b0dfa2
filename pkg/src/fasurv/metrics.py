"""Censoring-aware evaluation on the discrete grid.

Times are integer intervals (relative to the prediction origin), events are
0 for censored and 1..K for causes. Prediction arrays are indexed by offset:
column ``j - 1`` holds the prediction for interval ``j``.

IPCW weights at evaluation interval ``j``:

* ``1 / G(T - 1)`` for an event at ``T <= j``  (left limit of G at T),
* ``1 / G(j)`` for anyone still event-free past ``j``,
* ``0`` for subjects censored at or before ``j``.

The integrated Brier score is the plain mean of the Brier score over the
evaluation grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hazardheads import cif as cif_from_hazards
from .kernels import concordance_counts, km_censoring_curve

log = logging.getLogger(__name__)


@dataclass
class CensoringEstimate:
    """G[t] = P(still uncensored after interval t), t = 0..n_grid; G[0] = 1."""

    G: np.ndarray

    @property
    def n_grid(self) -> int:
        return len(self.G) - 1

    def at(self, t) -> np.ndarray:
        t = np.clip(np.asarray(t, dtype=np.int64), 0, self.n_grid)
        return self.G[t]

    def left(self, t) -> np.ndarray:
        """G(t-), i.e. G at the end of the previous interval."""
        return self.at(np.asarray(t, dtype=np.int64) - 1)


# Hand-computed product-limit fixtures: (label, times, events, G[0..max T]).
KM_FIXTURES = (
    ("no censoring", (2, 3, 5), (1, 2, 1), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)),
    ("both censored at 5", (5, 5), (0, 0), (1.0, 1.0, 1.0, 1.0, 1.0, 0.0)),
    # risk sets 3, 2, 1; censor factors (1 - 1/3) at t=1 and (1 - 1/1) at t=3
    ("censor, event, censor", (1, 2, 3), (0, 1, 0), (1.0, 1.0 - 1.0 / 3.0, 1.0 - 1.0 / 3.0, 0.0)),
)


def km_censoring(times, events) -> CensoringEstimate:
    """Product-limit estimate of the censoring survival function.

    Censorings (``e == 0``) are the "events" here. At tied times, true
    events leave the risk set before censorings are counted.
    """
    times = np.asarray(times, dtype=np.int64)
    if times.size == 0:
        raise ValueError("km_censoring needs at least one subject")
    return CensoringEstimate(km_censoring_curve(times, events, int(times.max())))


def ipcw_weights(times, events, G: CensoringEstimate, j: int) -> tuple[np.ndarray, np.ndarray]:
    """(weights, usable) at interval ``j``.

    ``usable`` is False where the needed G value is 0; those subjects are
    dropped from the average instead of dividing by zero.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=np.int64)
    event_by_j = (times <= j) & (events != 0)
    past_j = times > j
    g = np.where(event_by_j, G.left(times), np.where(past_j, G.at(j), 1.0))
    usable = g > 0
    needs = event_by_j | past_j
    w = np.zeros(times.shape)
    ok = needs & usable
    w[ok] = 1.0 / g[ok]
    return w, usable | ~needs


def brier_k(pred_j, times, events, G: CensoringEstimate, j: int, k: int) -> float:
    """Cause-k IPCW Brier score at interval ``j``; NaN when no subject carries weight."""
    pred_j = np.asarray(pred_j, dtype=np.float64)
    w, usable = ipcw_weights(times, events, G, j)
    dropped = int((~usable).sum())
    if dropped:
        log.info("brier_k: %d subjects dropped at j=%d (G = 0)", dropped, j)
    if not np.any(w > 0):
        return float("nan")
    y = ((np.asarray(times) <= j) & (np.asarray(events) == k)).astype(np.float64)
    n = int(usable.sum())
    return float(np.sum(w[usable] * (y[usable] - pred_j[usable]) ** 2) / n)


def ibs_k(pred, times, events, G: CensoringEstimate, grid, k: int) -> float:
    """Mean of :func:`brier_k` over ``grid``; ``pred`` is (N, H) for cause k."""
    grid = list(grid)
    if not grid:
        raise ValueError("evaluation grid is empty")
    scores = np.array([brier_k(pred[:, j - 1], times, events, G, j, k) for j in grid])
    if np.all(np.isnan(scores)):
        return float("nan")
    return float(np.nanmean(scores))


def ctd_k(pred, times, events, k: int, convention: str = "ta") -> float:
    """Cause-specific time-dependent concordance.

    Pairs (a, b) with ``e_a = k``, ``T_a <= H`` and ``T_a < T_b``. With the
    default ``"ta"`` convention both risks are read at ``T_a`` from ``pred``
    (N, H); ``"tb"`` reads b's risk at ``min(T_b, H)`` instead. Ties count
    one half. NaN without pairs.
    """
    if convention == "ta":
        num, den = concordance_counts(times, events, pred, k)
    elif convention == "tb":
        num, den = _concordance_tb(times, events, pred, k)
    else:
        raise ValueError(f"unknown C_td convention {convention!r}")
    return float(num / den) if den > 0 else float("nan")


def _concordance_tb(times, events, pred, k):
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.float64)
    H = pred.shape[1]
    own = pred[np.arange(len(times)), np.clip(times, 1, H) - 1]
    num = den = 0.0
    for a in np.flatnonzero((events == k) & (times >= 1) & (times <= H)):
        later = times > times[a]
        rb = own[later]
        den += rb.size
        num += np.sum(own[a] > rb) + 0.5 * np.sum(own[a] == rb)
    return num, den


@dataclass
class CalibrationTable:
    cause: int
    interval: int
    mean_pred: np.ndarray
    obs_rate: np.ndarray
    se: np.ndarray
    n_eff: np.ndarray

    def rows(self):
        for b in range(len(self.mean_pred)):
            yield b + 1, self.mean_pred[b], self.obs_rate[b], self.se[b], self.n_eff[b]


def equal_frequency_bins(pred: np.ndarray, bins: int) -> np.ndarray:
    """Bin index per prediction from quantile edges. Tied predictions share a bin."""
    if bins < 2:
        raise ValueError("need at least two bins")
    edges = np.unique(np.quantile(pred, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    return np.searchsorted(edges, pred, side="left")


def calibration_curve(pred_j, times, events, G: CensoringEstimate, j: int, k: int,
                      bins: int = 10) -> CalibrationTable:
    """IPCW observed cause-k incidence by ``j`` against mean prediction, per bin.

    The standard error is the weighted binomial ``sqrt(p (1 - p) sum w^2) / sum w``.
    Bins without weight report NaN rates.
    """
    pred_j = np.asarray(pred_j, dtype=np.float64)
    times = np.asarray(times)
    events = np.asarray(events)
    w, usable = ipcw_weights(times, events, G, j)
    y = ((times <= j) & (events == k)).astype(np.float64)
    idx = equal_frequency_bins(pred_j, bins)
    used = np.unique(idx)
    mean_pred, obs, se, n_eff = [], [], [], []
    for b in used:
        sel = (idx == b) & usable
        wb = w[sel]
        mean_pred.append(float(pred_j[idx == b].mean()))
        tot = wb.sum()
        n_eff.append(float(tot))
        if tot <= 0:
            obs.append(float("nan"))
            se.append(float("nan"))
            continue
        p = float(np.sum(wb * y[sel]) / tot)
        obs.append(p)
        se.append(float(np.sqrt(p * (1.0 - p) * np.sum(wb ** 2)) / tot))
    return CalibrationTable(k, j, np.array(mean_pred), np.array(obs), np.array(se), np.array(n_eff))


def marginal_incidence(times, events, horizon: int, n_causes: int) -> np.ndarray:
    """Population CIF (H, K) from pooled discrete hazards ``d_jk / n_j``.

    The same curve for every subject, ignoring covariates.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=np.int64)
    lam = np.zeros((horizon, n_causes))
    for j in range(1, horizon + 1):
        n_j = np.sum(times >= j)
        if n_j == 0:
            continue
        for k in range(1, n_causes + 1):
            lam[j - 1, k - 1] = np.sum((times == j) & (events == k)) / n_j
    return cif_from_hazards(lam)


@dataclass
class EvalReport:
    horizon: int
    grid: list[int]
    ibs: dict[int, float] = field(default_factory=dict)
    ctd: dict[int, float] = field(default_factory=dict)
    calibration: dict[int, CalibrationTable] = field(default_factory=dict)

    def metric_rows(self):
        for k in sorted(self.ibs):
            yield k, "ibs", self.ibs[k]
            yield k, "ctd", self.ctd[k]


def evaluate(pred_cif, times, events, grid=None, bins: int = 10, calib_interval: int | None = None,
             censoring: CensoringEstimate | None = None, ctd_convention: str = "ta") -> EvalReport:
    """All metrics for CIF predictions (N, H, K) against relative outcomes."""
    pred_cif = np.asarray(pred_cif, dtype=np.float64)
    N, H, K = pred_cif.shape
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=np.int64)
    grid = list(range(1, H + 1)) if grid is None else list(grid)
    G = censoring if censoring is not None else km_censoring(times, events)
    j_cal = calib_interval or H
    report = EvalReport(H, grid)
    for k in range(1, K + 1):
        report.ibs[k] = ibs_k(pred_cif[:, :, k - 1], times, events, G, grid, k)
        report.ctd[k] = ctd_k(pred_cif[:, :, k - 1], times, events, k, ctd_convention)
        report.calibration[k] = calibration_curve(pred_cif[:, j_cal - 1, k - 1], times, events,
                                                  G, j_cal, k, bins)
    return report


def write_metrics_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("cause,metric,value\n")
        for k, name, v in report.metric_rows():
            fh.write(f"{k},{name},{float(v)!r}\n")


def write_calibration_csv(table: CalibrationTable, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("bin,mean_pred,obs_rate,se,n_eff\n")
        for b, m, o, s, n in table.rows():
            fh.write(f"{b},{float(m)!r},{float(o)!r},{float(s)!r},{float(n)!r}\n")
