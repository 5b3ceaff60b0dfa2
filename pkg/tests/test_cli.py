import csv

import numpy as np
import pytest
from click.testing import CliRunner

from fasurv import config as cfgmod
from fasurv import pipeline as pl
from fasurv.cli import main
from fasurv.datamodel import DataError
from fasurv.hazardheads import read_predictions

# -- config -----------------------------------------------------------------


def test_config_parse_and_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nepochs = 7\nno_cet = yes  # trailing\nlr=0.01\n")
    cfg = cfgmod.load(p, {"epochs": 9, "seed": None})
    assert cfg["epochs"] == 9 and cfg["no_cet"] is True and cfg["lr"] == 0.01
    assert cfg["seed"] == 0
    assert cfgmod.parse(cfgmod.dump(cfg)) == cfg


@pytest.mark.parametrize("text,match", [("epoch = 3", "unknown"), ("epochs = x", "cannot parse"),
                                        ("no_fa = maybe", "cannot parse"), ("epochs", "key = value")])
def test_config_errors_name_the_line(text, match):
    with pytest.raises(cfgmod.ConfigError, match=match):
        cfgmod.parse("\n" + text, "f.cfg")
    with pytest.raises(cfgmod.ConfigError, match="f.cfg:2"):
        cfgmod.parse("\n" + text, "f.cfg")


# -- splits and outcomes ----------------------------------------------------

def test_assign_splits_deterministic_and_sized():
    ids = [f"s{i}" for i in range(100)]
    a = pl.assign_splits(ids, 1, 0.2, 0.1)
    assert a == pl.assign_splits(ids, 1, 0.2, 0.1)
    counts = {lab: list(a.values()).count(lab) for lab in set(a.values())}
    assert counts == {"test": 20, "val": 8, "train": 72}
    folds = pl.assign_splits(ids, 1, 0.2, folds=5)
    assert sorted(set(folds.values())) == ["fold0", "fold1", "fold2", "fold3", "fold4", "test"]
    with pytest.raises(ValueError):
        pl.assign_splits(ids, 1, 0.2, folds=1)


def test_split_file_roundtrip(tmp_path):
    labels = {"a": "train", "b": "test"}
    pl.write_split(labels, tmp_path / "split.csv")
    assert pl.read_split(tmp_path / "split.csv") == labels


def test_policy_parsing():
    assert pl.parse_policy("first") == "first"
    assert pl.parse_policy("4") == 4
    for bad in ("0", "soon"):
        with pytest.raises(ValueError):
            pl.parse_policy(bad)


def test_conservation_check_rejects_tampered_files():
    lam = np.full((2, 3, 2), 0.1)
    from fasurv.hazardheads import cif, survival
    pl.check_conservation(lam, cif(lam), survival(lam))
    bad = cif(lam)
    bad[0, -1, 0] += 1e-6
    with pytest.raises(RuntimeError, match="conservation"):
        pl.check_conservation(lam, bad, survival(lam))


# -- end to end -------------------------------------------------------------

def run(args):
    res = CliRunner().invoke(main, args, catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    run(["synth", "--out", str(out), "--n-subjects", "150", "--censor-hazard", "0.02", "--seed", "2"])
    return out


def test_synth_outputs(synth_dir):
    for name in ("observations.csv", "outcomes.csv", "schema.csv", "ground_truth.csv", "grid.cfg",
                 "truth_predictions.csv"):
        assert (synth_dir / name).exists()
    cohort = pl.load_dataset(synth_dir)
    assert len(cohort) == 150


def test_evaluate_truth_predictions(synth_dir, tmp_path):
    run(["evaluate", "--out", str(tmp_path), "--predictions", str(synth_dir / "truth_predictions.csv"),
         "--data", str(synth_dir)])
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert {(r["cause"], r["metric"]) for r in rows} == {(c, m) for c in "12" for m in ("ibs", "ctd")}
    assert (tmp_path / "calibration_1.csv").exists()


def test_train_predict_evaluate(synth_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 2\nbatch_size = 32\nhorizon = 8\nlr = 0.001\n")
    train_dir, pred_dir, eval_dir = tmp_path / "t", tmp_path / "p", tmp_path / "e"
    run(["train", "--config", str(cfg), "--out", str(train_dir), "--data", str(synth_dir), "--seed", "1"])
    for name in ("model.ckpt", "training_log.csv", "split.csv", "run.cfg"):
        assert (train_dir / name).exists()
    run(["predict", "--config", str(cfg), "--out", str(pred_dir), "--checkpoint", str(train_dir / "model.ckpt"),
         "--data", str(synth_dir), "--split", str(train_dir / "split.csv")])
    ids, lam, F, S = read_predictions(pred_dir / "predictions.csv")
    assert lam.shape[1:] == (8, 2)
    split = pl.read_split(train_dir / "split.csv")
    assert all(split[i] == "test" for i in ids)
    run(["evaluate", "--config", str(cfg), "--out", str(eval_dir), "--predictions", str(pred_dir / "predictions.csv"),
         "--data", str(synth_dir), "--landmarks", str(pred_dir / "landmarks.csv")])
    assert (eval_dir / "metrics.csv").read_text().startswith("cause,metric,value\n")


def test_ablation_flags_reach_the_model(synth_dir, tmp_path):
    from fasurv.training import load_checkpoint
    run(["train", "--out", str(tmp_path), "--data", str(synth_dir), "--epochs", "1", "--horizon", "6",
         "--no-cet", "--no-fa"])
    model, _ = load_checkpoint(tmp_path / "model.ckpt")
    assert model.config.no_cet and model.config.no_fa
    assert "no_cet = True" in (tmp_path / "run.cfg").read_text()


def test_crossval(synth_dir, tmp_path):
    cfg = tmp_path / "cv.cfg"
    cfg.write_text("epochs = 1\nhorizon = 6\nbatch_size = 32\n")
    run(["crossval", "--config", str(cfg), "--out", str(tmp_path), "--data", str(synth_dir), "--folds", "2"])
    rows = list(csv.DictReader(open(tmp_path / "crossval.csv")))
    assert {r["fold"] for r in rows} == {"0", "1", "mean", "sd"}
    assert (tmp_path / "fold0" / "metrics.csv").exists()


def test_errors_are_reported_not_raised(synth_dir, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    res = CliRunner().invoke(main, ["train", "--config", str(bad), "--out", str(tmp_path), "--data", str(synth_dir)])
    assert res.exit_code != 0 and "unknown config key" in res.output
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    res = CliRunner().invoke(main, ["evaluate", "--out", str(tmp_path), "--predictions", str(empty),
                                    "--data", str(synth_dir)])
    assert res.exit_code != 0 and "empty" in res.output


def test_missing_dataset_file(tmp_path):
    with pytest.raises(DataError, match="missing"):
        pl.load_dataset(tmp_path)
