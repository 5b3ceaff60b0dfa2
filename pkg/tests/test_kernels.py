"""Numba and pure-numpy kernel paths must agree exactly."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fasurv import kernels as kn


@st.composite
def sparse_obs(draw):
    n_steps = draw(st.integers(1, 12))
    n_feat = draw(st.integers(1, 4))
    n = draw(st.integers(0, 20))
    cells = draw(st.lists(st.tuples(st.integers(0, n_steps - 1), st.integers(0, n_feat - 1)),
                          min_size=n, max_size=n, unique=True))
    vals = draw(st.lists(st.floats(-5, 5), min_size=len(cells), max_size=len(cells)))
    step = np.array([c[0] for c in cells], dtype=np.int64)
    feat = np.array([c[1] for c in cells], dtype=np.int64)
    return n_steps, np.zeros(n_feat), step, feat, np.array(vals, dtype=np.float64)


@settings(max_examples=60, deadline=None)
@given(args=sparse_obs())
def test_locf_paths_agree(args):
    for a, b in zip(kn._locf_fill_jit(*args), kn._locf_fill_numpy(*args)):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(kn._locf_fill_loops(*args), kn._locf_fill_numpy(*args)):
        np.testing.assert_array_equal(a, b)


@st.composite
def outcomes(draw, max_n=40):
    n = draw(st.integers(1, max_n))
    times = np.array(draw(st.lists(st.integers(1, 15), min_size=n, max_size=n)), dtype=np.int64)
    events = np.array(draw(st.lists(st.integers(0, 2), min_size=n, max_size=n)), dtype=np.int64)
    return times, events


@settings(max_examples=60, deadline=None)
@given(data=outcomes())
def test_km_paths_agree(data):
    times, events = data
    grid = int(times.max())
    a = kn._km_censoring_jit(times, events, grid)
    b = kn._km_censoring_numpy(times, events, grid)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(data=outcomes(), seed=st.integers(0, 2**16), ties=st.booleans())
def test_concordance_paths_agree(data, seed, ties):
    times, events = data
    risk = np.random.default_rng(seed).random((len(times), 10))
    if ties:
        risk = np.round(risk, 1)
    for cause in (1, 2):
        a = kn._concordance_jit(times, events, risk, cause)
        b = kn._concordance_numpy(times, events, risk, cause)
        assert a == b


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), censor=st.floats(0, 0.04))
def test_simulation_paths_agree(seed, censor):
    rng = np.random.default_rng(seed)
    hz = rng.random((30, 2)) * 0.45
    u = rng.random((30, 12))
    for a, b in zip(kn._simulate_jit(hz, censor, u), kn._simulate_numpy(hz, censor, u)):
        np.testing.assert_array_equal(a, b)


def test_simulation_survivors_are_admin_censored():
    T, e = kn.simulate_outcomes(np.zeros((5, 2)), 0.0, np.random.default_rng(0).random((5, 7)))
    assert T.tolist() == [7] * 5 and e.tolist() == [0] * 5


def test_env_flag_selects_numpy(monkeypatch):
    import importlib

    import fasurv._jit as jit

    monkeypatch.setenv("FASURV_DISABLE_NUMBA", "1")
    reloaded = importlib.reload(jit)
    try:
        assert reloaded.USE_NUMBA is False
        f = lambda x: x + 1  # noqa: E731
        assert reloaded.njit(f) is f
    finally:
        monkeypatch.delenv("FASURV_DISABLE_NUMBA")
        importlib.reload(jit)


def test_whole_package_agrees_across_paths():
    import os
    import subprocess
    import sys

    code = ("from fasurv.synthgen import SynthConfig, generate\n"
            "from fasurv.metrics import km_censoring\n"
            "from fasurv._jit import USE_NUMBA\n"
            "c, t, _ = generate(SynthConfig(n_subjects=50, censor_hazard=0.02))\n"
            "T, e = c.outcomes()\n"
            "print(USE_NUMBA, repr(km_censoring(T, e).G.sum()), T.sum())\n")
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, FASURV_DISABLE_NUMBA=flag)
        outs[flag] = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                                    text=True, check=True).stdout.split()
    assert outs["0"][0] == "True" and outs["1"][0] == "False"
    assert outs["0"][1:] == outs["1"][1:]
