"""Hot loops with a numba path and a pure-numpy fallback.

Each public kernel dispatches on :data:`fasurv._jit.USE_NUMBA`. Both paths
are kept importable (``*_loops`` / ``*_numpy``) so tests can check that they
agree and ``benchmarks/bench_kernels.py`` can time them side by side.
"""
import numpy as np

from ._jit import USE_NUMBA, njit

__all__ = [
    "locf_fill",
    "km_censoring_curve",
    "concordance_counts",
    "simulate_outcomes",
]


# --------------------------------------------------------------------------
# LOCF imputation, missingness mask, staleness
# --------------------------------------------------------------------------

def _locf_fill_loops(n_steps, fill, obs_step, obs_feat, obs_val):
    n_feat = fill.shape[0]
    X = np.empty((n_steps, n_feat))
    M = np.ones((n_steps, n_feat))
    delta = np.empty((n_steps, n_feat))
    has = np.zeros((n_steps, n_feat), dtype=np.bool_)
    grid = np.zeros((n_steps, n_feat))
    for i in range(obs_step.shape[0]):
        s = obs_step[i]
        if s < n_steps:
            has[s, obs_feat[i]] = True
            grid[s, obs_feat[i]] = obs_val[i]
    for d in range(n_feat):
        last = -1
        for s in range(n_steps):
            if has[s, d]:
                last = s
                X[s, d] = grid[s, d]
                M[s, d] = 0.0
                delta[s, d] = 0.0
            elif last >= 0:
                X[s, d] = grid[last, d]
                delta[s, d] = s - last
            else:
                X[s, d] = fill[d]
                delta[s, d] = s
    return X, M, delta


_locf_fill_jit = njit(_locf_fill_loops)


def _locf_fill_numpy(n_steps, fill, obs_step, obs_feat, obs_val):
    n_feat = fill.shape[0]
    keep = obs_step < n_steps
    has = np.zeros((n_steps, n_feat), dtype=bool)
    grid = np.zeros((n_steps, n_feat))
    has[obs_step[keep], obs_feat[keep]] = True
    grid[obs_step[keep], obs_feat[keep]] = obs_val[keep]
    steps = np.arange(n_steps)[:, None]
    last = np.maximum.accumulate(np.where(has, steps, -1), axis=0)
    seen = last >= 0
    X = np.where(seen, grid[np.maximum(last, 0), np.arange(n_feat)[None, :]], fill[None, :])
    delta = np.where(seen, steps - last, steps).astype(np.float64)
    M = (~has).astype(np.float64)
    return X, M, delta


def locf_fill(n_steps, fill, obs_step, obs_feat, obs_val):
    """Dense (X, M, delta) grids from deduplicated sparse observations.

    ``obs_step`` is 0-based. Cells without an observation carry the last
    observed value forward (``fill`` before the first one) with ``M = 1``;
    ``delta`` counts steps since the last observation, or since step 0 for a
    feature not yet seen.
    """
    args = (
        int(n_steps),
        np.ascontiguousarray(fill, dtype=np.float64),
        np.ascontiguousarray(obs_step, dtype=np.int64),
        np.ascontiguousarray(obs_feat, dtype=np.int64),
        np.ascontiguousarray(obs_val, dtype=np.float64),
    )
    if USE_NUMBA:
        return _locf_fill_jit(*args)
    return _locf_fill_numpy(*args)


# --------------------------------------------------------------------------
# Kaplan-Meier of the censoring distribution
# --------------------------------------------------------------------------

def _km_censoring_loops(times, events, n_grid):
    at_time = np.zeros(n_grid + 2)
    cens = np.zeros(n_grid + 2)
    evts = np.zeros(n_grid + 2)
    for i in range(times.shape[0]):
        t = min(times[i], n_grid + 1)
        at_time[t] += 1.0
        if events[i] == 0:
            cens[t] += 1.0
        else:
            evts[t] += 1.0
    G = np.ones(n_grid + 1)
    at_risk = float(times.shape[0])
    for t in range(n_grid + 2):
        if t == 0:
            at_risk -= at_time[0]
            continue
        # events at t leave the risk set before censorings at t are counted
        n_c = at_risk - evts[t]
        factor = 1.0
        if cens[t] > 0.0 and n_c > 0.0:
            factor = 1.0 - cens[t] / n_c
        if t <= n_grid:
            G[t] = G[t - 1] * factor
        at_risk -= at_time[t]
    return G


_km_censoring_jit = njit(_km_censoring_loops)


def _km_censoring_numpy(times, events, n_grid):
    t = np.minimum(times, n_grid + 1)
    at_time = np.bincount(t, minlength=n_grid + 2).astype(np.float64)
    cens = np.bincount(t[events == 0], minlength=n_grid + 2).astype(np.float64)
    evts = at_time - cens
    # risk set at t: subjects with time >= t
    at_risk = at_time[::-1].cumsum()[::-1]
    n_c = at_risk - evts
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where((cens > 0) & (n_c > 0), 1.0 - cens / np.where(n_c > 0, n_c, 1.0), 1.0)
    factor[0] = 1.0
    return np.cumprod(factor[: n_grid + 1])


def km_censoring_curve(times, events, n_grid):
    """G[t] for t = 0..n_grid, product-limit over censorings (e == 0)."""
    times = np.ascontiguousarray(times, dtype=np.int64)
    events = np.ascontiguousarray(events, dtype=np.int64)
    if USE_NUMBA:
        return _km_censoring_jit(times, events, int(n_grid))
    return _km_censoring_numpy(times, events, int(n_grid))


# --------------------------------------------------------------------------
# Time-dependent concordance pair counting
# --------------------------------------------------------------------------

def _concordance_loops(times, events, risk, cause):
    n, horizon = risk.shape
    num = 0.0
    den = 0.0
    for a in range(n):
        ta = times[a]
        if events[a] != cause or ta < 1 or ta > horizon:
            continue
        col = ta - 1
        ra = risk[a, col]
        for b in range(n):
            if times[b] > ta:
                den += 1.0
                rb = risk[b, col]
                if ra > rb:
                    num += 1.0
                elif ra == rb:
                    num += 0.5
    return num, den


_concordance_jit = njit(_concordance_loops)


def _concordance_numpy(times, events, risk, cause):
    horizon = risk.shape[1]
    num = 0.0
    den = 0.0
    anchors = np.flatnonzero((events == cause) & (times >= 1) & (times <= horizon))
    for a in anchors:
        ta = times[a]
        later = times > ta
        if not later.any():
            continue
        col = risk[later, ta - 1]
        ra = risk[a, ta - 1]
        den += float(later.sum())
        num += float((ra > col).sum()) + 0.5 * float((ra == col).sum())
    return num, den


def concordance_counts(times, events, risk, cause):
    """(concordant weight, comparable pairs) for one cause.

    Pairs (a, b) with ``events[a] == cause`` and ``times[b] > times[a]``; both
    risks read at column ``times[a] - 1`` of ``risk``. Prediction ties add 0.5.
    Anchors whose time falls outside ``1..risk.shape[1]`` are skipped.
    """
    times = np.ascontiguousarray(times, dtype=np.int64)
    events = np.ascontiguousarray(events, dtype=np.int64)
    risk = np.ascontiguousarray(risk, dtype=np.float64)
    if USE_NUMBA:
        return _concordance_jit(times, events, risk, int(cause))
    return _concordance_numpy(times, events, risk, int(cause))


# --------------------------------------------------------------------------
# Discrete-time multinomial outcome simulation
# --------------------------------------------------------------------------

def _simulate_loops(hazards, censor, uniforms):
    n, n_causes = hazards.shape
    n_steps = uniforms.shape[1]
    T = np.full(n, n_steps, dtype=np.int64)
    e = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n_steps):
            u = uniforms[i, j]
            acc = 0.0
            outcome = -1
            for k in range(n_causes):
                acc += hazards[i, k]
                if u < acc:
                    outcome = k + 1
                    break
            if outcome < 0 and u < acc + censor:
                outcome = 0
            if outcome >= 0:
                T[i] = j + 1
                e[i] = outcome
                break
    return T, e


_simulate_jit = njit(_simulate_loops)


def _simulate_numpy(hazards, censor, uniforms):
    n, n_causes = hazards.shape
    n_steps = uniforms.shape[1]
    cum = np.cumsum(hazards, axis=1)
    thresholds = np.concatenate([cum, cum[:, -1:] + censor], axis=1)
    # category per (subject, step): 0..K-1 cause, K censor, K+1 survive
    cat = (uniforms[:, :, None] >= thresholds[:, None, :]).sum(axis=2)
    stopped = cat <= n_causes
    any_stop = stopped.any(axis=1)
    first = np.argmax(stopped, axis=1)
    T = np.where(any_stop, first + 1, n_steps).astype(np.int64)
    c = cat[np.arange(n), first]
    e = np.where(any_stop, np.where(c < n_causes, c + 1, 0), 0).astype(np.int64)
    return T, e


def simulate_outcomes(hazards, censor, uniforms):
    """First-outcome interval and cause per subject.

    Each step is one multinomial trial over {cause 1..K, censor, survive}
    driven by ``uniforms[i, j]``. Subjects surviving every step are
    administratively censored at the last step.
    """
    hazards = np.ascontiguousarray(hazards, dtype=np.float64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if USE_NUMBA:
        return _simulate_jit(hazards, float(censor), uniforms)
    return _simulate_numpy(hazards, float(censor), uniforms)
