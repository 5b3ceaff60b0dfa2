import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf

from fasurv import diffcore as dc
from fasurv.datamodel import CATEGORICAL, NUMERIC, Feature, FeatureSchema, build_trajectory, \
    fixed_landmark, make_batch, make_subject
from fasurv.embedding import decay_rates, embed, embed_cell, init_embedding
from fasurv.encoder import (covariate_attention, init_encoder, mha, sinusoidal_table, summarize,
                            temporal_attention, time_mask)
from fasurv.hazardheads import (cif, conservation_error, hazards, hazards_t, read_predictions,
                                survival, write_predictions)
from fasurv.model import ModelConfig, SurvivalModel

SCHEMA = FeatureSchema((Feature("a", NUMERIC), Feature("b", CATEGORICAL, 3), Feature("c", NUMERIC)))
E = 8


def gelu_ref(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


@pytest.fixture
def emb():
    return {k: p.value for k, p in init_embedding(SCHEMA, E, np.random.default_rng(0)).items()}


# -- embedding --------------------------------------------------------------

def test_missing_cell_decays_with_staleness(emb):
    gamma = np.logaddexp(0.0, emb["embed.decay_raw"][0])
    for delta in (0.0, 1.0, 5.0):
        out = embed_cell(0.0, 1, delta, 0, SCHEMA, emb)
        np.testing.assert_allclose(out, emb["embed.missing"][0] * math.exp(-gamma * delta), atol=1e-15)


def test_no_cet_ignores_staleness(emb):
    a = embed_cell(0.0, 1, 0.0, 2, SCHEMA, emb, no_cet=True)
    b = embed_cell(0.0, 1, 9.0, 2, SCHEMA, emb, no_cet=True)
    np.testing.assert_array_equal(a, emb["embed.missing"][2])
    np.testing.assert_array_equal(a, b)


def test_numeric_cell_two_layer_map(emb):
    x = 0.7
    # feature "c" is the second numeric feature
    h = gelu_ref(x * emb["embed.num.w1"][1] + emb["embed.num.b1"][1])
    ref = h @ emb["embed.num.w2"][1] + emb["embed.num.b2"][1]
    np.testing.assert_allclose(embed_cell(x, 0, 0.0, 2, SCHEMA, emb), ref, atol=1e-13)


def test_categorical_cell_is_table_row(emb):
    np.testing.assert_array_equal(embed_cell(2.0, 0, 0.0, 1, SCHEMA, emb), emb["embed.cat.table"][2])


def test_categorical_out_of_range(emb):
    with pytest.raises(ValueError, match="out of range"):
        embed_cell(3.0, 0, 0.0, 1, SCHEMA, emb)


def test_negative_staleness_rejected(emb):
    with pytest.raises(ValueError):
        embed(np.zeros((1, 3)), np.ones((1, 3)), -np.ones((1, 3)), SCHEMA, emb)


@settings(max_examples=50, deadline=None)
@given(raw=arrays(np.float64, 3, elements=st.floats(-30, 30)))
def test_decay_rates_positive(raw):
    assert np.all(decay_rates({"embed.decay_raw": raw}) > 0)


# -- encoder ----------------------------------------------------------------

def test_sinusoidal_table():
    P = sinusoidal_table(50, 6)
    np.testing.assert_array_equal(P[0], [0, 1, 0, 1, 0, 1])
    assert np.all(np.abs(P) <= 1)
    assert P[1, 0] == pytest.approx(math.sin(1.0))
    assert P[1, 2] == pytest.approx(math.sin(1.0 / 10000 ** (2 / 6)))


def mha_loops(x, w, prefix, n_heads, mask):
    """Per-head reference with explicit loops over batch and group."""
    B, G, L, Em = x.shape
    dh = Em // n_heads
    out = np.zeros_like(x)
    for b in range(B):
        for g in range(G):
            xs = x[b, g]
            q = xs @ w[f"{prefix}.wq"] + w[f"{prefix}.bq"]
            k = xs @ w[f"{prefix}.wk"] + w[f"{prefix}.bk"]
            v = xs @ w[f"{prefix}.wv"] + w[f"{prefix}.bv"]
            cat = np.zeros((L, Em))
            for h in range(n_heads):
                sl = slice(h * dh, (h + 1) * dh)
                s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
                m = np.broadcast_to(mask[b, 0, 0] if mask is not None else True, (L, L))
                s = np.where(m, s, -np.inf)
                a = np.exp(s - s.max(axis=1, keepdims=True))
                a /= a.sum(axis=1, keepdims=True)
                cat[:, sl] = a @ v[:, sl]
            out[b, g] = cat @ w[f"{prefix}.wo"] + w[f"{prefix}.bo"]
    return out


def encoder_params(D=3, no_fa=False, seed=1):
    p = init_encoder(D, E, 1, np.random.default_rng(seed), no_fa=no_fa)
    return {k: v.value for k, v in p.items()}


@pytest.mark.parametrize("causal", [True, False])
def test_mha_matches_loop_reference(causal):
    w = encoder_params()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, E))
    valid = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    mask = time_mask(valid, causal)
    got = mha(dc.constant(x), w, "block0.time", 2, mask).value
    np.testing.assert_allclose(got, mha_loops(x, w, "block0.time", 2, mask), atol=1e-12)


def test_temporal_attention_is_causal():
    w = encoder_params()
    rng = np.random.default_rng(3)
    z = rng.normal(size=(1, 5, 3, E))
    z2 = z.copy()
    z2[:, 3:] = rng.normal(size=(1, 2, 3, E))
    valid = np.ones((1, 5), dtype=bool)
    a = temporal_attention(dc.constant(z), w, "block0.time", 2, valid).value
    b = temporal_attention(dc.constant(z2), w, "block0.time", 2, valid).value
    np.testing.assert_allclose(a[:, :3], b[:, :3], atol=1e-13)
    assert not np.allclose(a[:, 3:], b[:, 3:])


def test_covariate_attention_permutation_equivariant():
    w = encoder_params()
    z = np.random.default_rng(4).normal(size=(2, 3, 3, E))
    perm = [2, 0, 1]
    a = covariate_attention(dc.constant(z), w, "block0.cov", 2).value
    b = covariate_attention(dc.constant(z[:, :, perm]), w, "block0.cov", 2).value
    np.testing.assert_allclose(a[:, :, perm], b, atol=1e-12)


def test_summary_ignores_padding():
    w = encoder_params()
    rng = np.random.default_rng(5)
    z = rng.normal(size=(1, 4, 3, E))
    padded = np.concatenate([z, rng.normal(size=(1, 3, 3, E))], axis=1)
    valid = np.array([[True] * 4 + [False] * 3])
    a = summarize(dc.constant(z), w, np.ones((1, 4), dtype=bool)).value
    b = summarize(dc.constant(padded), w, valid).value
    np.testing.assert_allclose(a, b, atol=1e-13)
    assert a.shape == (1, 3 * E)


def test_summary_single_step_is_value_projection():
    w = encoder_params()
    z = np.random.default_rng(6).normal(size=(1, 1, 3, E))
    got = summarize(dc.constant(z), w, np.ones((1, 1), dtype=bool)).value.reshape(3, E)
    ref = (z[0, 0] @ w["summary.wv"] + w["summary.bv"]) @ w["summary.wo"] + w["summary.bo"]
    np.testing.assert_allclose(got, ref, atol=1e-13)


def test_empty_sequence_rejected():
    w = encoder_params()
    with pytest.raises(ValueError, match="valid step"):
        summarize(dc.constant(np.zeros((1, 2, 3, E))), w, np.zeros((1, 2), dtype=bool))


def test_heads_not_dividing_dim():
    w = encoder_params()
    with pytest.raises(ValueError, match="not divisible"):
        mha(dc.constant(np.zeros((1, 1, 2, E))), w, "block0.time", 3)


# -- hazards ----------------------------------------------------------------

def test_zero_logits_hazards():
    np.testing.assert_allclose(hazards(np.zeros((1, 2))), [[1 / 3, 1 / 3]], atol=1e-15)


def test_single_cause_is_sigmoid():
    f = np.array([[-2.0], [0.5], [3.0]])
    np.testing.assert_allclose(hazards(f), 1 / (1 + np.exp(-f)), atol=1e-15)


def test_cif_hand_values():
    lam = np.array([[0.5, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(survival(lam), [0.5, 0.0])
    np.testing.assert_allclose(cif(lam), [[0.5, 0.0], [0.75, 0.25]])


def test_hazards_stable_for_extreme_logits():
    lam = hazards(np.array([[800.0, -800.0], [-800.0, -800.0]]))
    assert np.all(np.isfinite(lam)) and np.all(lam.sum(axis=1) <= 1.0)
    with pytest.raises(ValueError):
        hazards(np.array([[np.nan, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(f=arrays(np.float64, (6, 3), elements=st.floats(-30, 30)))
def test_probability_invariants(f):
    lam = hazards(f)
    np.testing.assert_allclose(hazards_t(f).value, lam, rtol=1e-12, atol=1e-300)
    assert np.all(lam >= 0) and np.all(lam.sum(axis=1) <= 1.0)
    S, F = survival(lam), cif(lam)
    assert np.all(np.diff(S) <= 1e-15)
    assert np.all(np.diff(F, axis=0) >= -1e-15)
    assert conservation_error(lam) < 1e-12


def test_predictions_roundtrip(tmp_path):
    lam = hazards(np.random.default_rng(0).normal(size=(3, 4, 2)))
    write_predictions(tmp_path / "p.csv", ["x", "y", "z"], lam)
    ids, lam2, F, S = read_predictions(tmp_path / "p.csv")
    assert ids == ["x", "y", "z"]
    np.testing.assert_array_equal(lam2, lam)
    np.testing.assert_array_equal(F, cif(lam))
    np.testing.assert_array_equal(S, survival(lam))


def test_empty_prediction_file(tmp_path):
    (tmp_path / "p.csv").write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_predictions(tmp_path / "p.csv")


# -- whole network ----------------------------------------------------------

def small_batch():
    subs = [make_subject("s0", {(1, 0): 0.3, (1, 1): 2.0, (2, 2): -1.0}, 6, 1),
            make_subject("s1", {(1, 1): 0.0}, 6, 0)]
    items = [fixed_landmark(build_trajectory(s, SCHEMA), tau, 4, 2) for s, tau in zip(subs, (2, 1))]
    return make_batch(items)


@pytest.mark.parametrize("no_fa,no_cet", [(False, False), (True, False), (False, True)])
def test_model_output_shapes(no_fa, no_cet):
    model = SurvivalModel.init(SCHEMA, ModelConfig(n_causes=2, horizon=4, d_emb=E, no_fa=no_fa,
                                                   no_cet=no_cet), seed=0)
    lam = model.predict(small_batch())
    assert lam.shape == (2, 4, 2)
    assert conservation_error(lam) < 1e-12


def test_padding_does_not_change_prediction():
    model = SurvivalModel.init(SCHEMA, ModelConfig(n_causes=2, horizon=4, d_emb=E), seed=0)
    batch = small_batch()
    alone = make_batch([fixed_landmark(build_trajectory(make_subject("s1", {(1, 1): 0.0}, 6, 0),
                                                        SCHEMA), 1, 4, 2)])
    np.testing.assert_allclose(model.predict(batch)[1], model.predict(alone)[0], atol=1e-12)


def test_model_gradients_match_finite_differences():
    model = SurvivalModel.init(SCHEMA, ModelConfig(n_causes=2, horizon=4, d_emb=E), seed=0)
    batch = small_batch()

    def loss(tape):
        lam = model.hazards(batch, tape)
        return dc.sum(dc.log(lam))

    assert dc.grad_check(loss, model.params.values(), max_coords=4) < 1e-5
