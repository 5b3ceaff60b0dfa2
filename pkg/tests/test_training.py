import math

import numpy as np
import pytest

from fasurv import diffcore as dc
from fasurv.datamodel import make_batch
from fasurv.diffcore import Parameter
from fasurv.hazardheads import hazards
from fasurv.model import SurvivalModel
from fasurv.synthgen import SynthConfig, generate
from fasurv.training import (AdamW, TrainConfig, build_trajectories, class_weights, init_head_bias,
                             landmark_items, landmark_spans, load_checkpoint, nll_loss,
                             pooled_head_bias, save_checkpoint, train, write_training_log)


def tiny_cohort(n=120, seed=0):
    cohort, _, _ = generate(SynthConfig(n_subjects=n, n_intervals=12, base_hazards=(0.05, 0.05),
                                        censor_hazard=0.02, seed=seed))
    ids = [s.subject_id for s in cohort.subjects]
    cut = int(0.8 * n)
    return cohort.subset(ids[:cut]), cohort.subset(ids[cut:])


FAST = TrainConfig(epochs=2, batch_size=32, horizon=6, seed=3)


# -- loss -------------------------------------------------------------------

def test_class_weights_hand_value():
    w = class_weights([1, 1, 1, 2], 2)
    raw = np.array([math.log(1 + 4 / 3), math.log(5.0)])
    np.testing.assert_allclose(w, raw / raw[0], rtol=0, atol=1e-15)
    assert w.min() == 1.0


def test_class_weights_need_every_cause():
    with pytest.raises(ValueError, match="cause 2"):
        class_weights([1, 1, 0], 2)


def test_nll_hand_values():
    lam = np.array([[[0.2], [0.5], [0.1]]])
    event = np.array([[[0.0], [1.0], [0.0]]])
    mask = np.array([[1.0, 1.0, 0.0]])
    got = nll_loss(lam, event, mask, [2.0]).value
    assert got == pytest.approx(-(math.log(0.8) + 2.0 * math.log(0.5)), abs=1e-14)
    censored = nll_loss(lam, np.zeros_like(event), mask, [2.0]).value
    assert censored == pytest.approx(-(math.log(0.8) + math.log(0.5)), abs=1e-14)
    assert nll_loss(lam, event, mask, [2.0], sample_weight=[3.0]).value == pytest.approx(3 * got)


def test_nll_clamps_degenerate_hazards():
    lam = np.array([[[0.0, 1.0]]])
    v = nll_loss(lam, np.array([[[1.0, 0.0]]]), np.ones((1, 1)), [1.0, 1.0]).value
    assert v == pytest.approx(-math.log(1e-12))


def test_nll_rejects_non_finite():
    with pytest.raises(ValueError):
        nll_loss(np.full((1, 1, 1), np.nan), np.zeros((1, 1, 1)), np.ones((1, 1)), [1.0])


def test_nll_gradient_through_hazards():
    rng = np.random.default_rng(0)
    f = Parameter("f", rng.normal(size=(3, 4, 2)))
    labels = np.zeros((3, 4, 2))
    labels[0, 1, 0] = labels[2, 3, 1] = 1
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]], dtype=float)

    def loss(tape):
        from fasurv.hazardheads import hazards_t
        return nll_loss(hazards_t(dc.bind({"f": f}, tape)["f"]), labels, mask, [1.0, 1.3], [1.0, 0.5, 2.0])

    assert dc.grad_check(loss, [f], max_coords=None) < 1e-7


# -- optimizer --------------------------------------------------------------

def test_adamw_first_step():
    p = Parameter("p", np.array([1.0, -2.0, 0.5]))
    p.grad = np.array([0.3, -4.0, 0.0])
    AdamW(lr=0.1, weight_decay=0.01).step([p])
    # bias-corrected first step moves each coordinate by lr * sign(g) after decay
    decayed = np.array([1.0, -2.0, 0.5]) * (1 - 0.1 * 0.01)
    np.testing.assert_allclose(p.value, decayed - 0.1 * np.array([1.0, -1.0, 0.0]), atol=1e-7)


def test_adamw_minimizes_quadratic():
    p = Parameter("p", np.array([3.0, -1.0]))
    opt = AdamW(lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        p.grad = 2 * (p.value - np.array([1.0, 2.0]))
        opt.step([p])
    np.testing.assert_allclose(p.value, [1.0, 2.0], atol=1e-3)
    assert opt.step_count == 2000


# -- data plumbing ----------------------------------------------------------

def test_pooled_head_bias_reproduces_pooled_hazard():
    tr, _ = tiny_cohort()
    schema = tr.fit_standardization()
    items, _ = landmark_items(build_trajectories(tr, schema), 6, 2, np.random.default_rng(0))
    b = pooled_head_bias(items, 2)
    events = sum(y.sum(axis=0) for _, y, _ in items)
    at_risk = sum(m.sum() for _, _, m in items)
    np.testing.assert_allclose(hazards(b), events / at_risk, rtol=1e-12)


def test_init_head_bias_matches_mean_logit():
    tr, _ = tiny_cohort()
    schema = tr.fit_standardization()
    model = SurvivalModel.init(schema, FAST.model_config(2), seed=0)
    items, _ = landmark_items(build_trajectories(tr, schema), 6, 2, np.random.default_rng(0))
    init_head_bias(model, items)
    f = model.logits(make_batch(items)).value
    np.testing.assert_allclose(f.mean(axis=(0, 1)), pooled_head_bias(items, 2), atol=1e-12)


def test_landmark_weighting_removes_short_survivor_bias():
    """With true hazards, weighted expected events match weighted observed events."""
    cfg = SynthConfig(n_subjects=3000, n_intervals=40, seed=4)
    cohort, truth, _ = generate(cfg)
    trajs = build_trajectories(cohort, cohort.schema)
    spans = landmark_spans(trajs)
    sw = spans / spans.mean()
    rows = {sid: i for i, sid in enumerate(truth.subject_ids)}
    ratios = {True: [], False: []}
    for seed in range(3):
        items, _ = landmark_items(trajs, 20, 2, np.random.default_rng(seed))
        lam = np.stack([truth.hazards[rows[t.subject_id]] for t, _, _ in items])
        obs = np.array([y.sum() for _, y, _ in items])
        exp = np.array([m.sum() for _, _, m in items]) * lam.sum(axis=1)
        for weighted in (True, False):
            w = sw if weighted else np.ones_like(sw)
            ratios[weighted].append((w * obs).sum() / (w * exp).sum())
    assert abs(np.mean(ratios[True]) - 1.0) < 0.06
    assert np.mean(ratios[False]) > 1.3


# -- training loop ----------------------------------------------------------

def test_training_reduces_loss_and_is_deterministic(tmp_path):
    tr, va = tiny_cohort()
    cfg = TrainConfig(epochs=3, batch_size=32, horizon=6, lr=1e-3, seed=3)
    a = train(tr, va, cfg)
    b = train(tr, va, cfg)
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"] * 1.05
    save_checkpoint(a.model, tmp_path / "a.ckpt")
    save_checkpoint(b.model, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert [h["val_loss"] for h in a.history] == [h["val_loss"] for h in b.history]


def test_checkpoint_roundtrip(tmp_path):
    tr, va = tiny_cohort()
    res = train(tr, va, FAST)
    save_checkpoint(res.model, tmp_path / "m.ckpt", extra={"best_epoch": res.best_epoch})
    model, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"best_epoch": res.best_epoch}
    assert model.config == res.model.config and model.schema == res.model.schema
    for k, p in res.model.params.items():
        np.testing.assert_array_equal(model.params[k].value, p.value)
    (tmp_path / "bad.ckpt").write_bytes(b"nope\n")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_training_log_columns(tmp_path):
    tr, va = tiny_cohort()
    res = train(tr, va, FAST)
    write_training_log(res.history, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr,seconds"
    assert len(lines) == 1 + len(res.history)


def test_config_validation():
    with pytest.raises(ValueError, match="depth"):
        TrainConfig(depth=9).validate()
    TrainConfig(depth=9).validate(strict=False)
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(d_emb=16, n_heads=3).validate(strict=False)
    with pytest.raises(ValueError, match="ema_decay"):
        TrainConfig(ema_decay=1.0).validate()


def test_ablation_variants_train():
    tr, va = tiny_cohort()
    for kw in (dict(no_fa=True), dict(no_cet=True), dict(ema_decay=0.0, landmark_correction=False)):
        res = train(tr, va, TrainConfig(epochs=1, batch_size=32, horizon=6, **kw))
        assert np.isfinite(res.history[0]["val_loss"])
