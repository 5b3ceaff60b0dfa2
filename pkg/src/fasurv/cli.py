"""``fasurv`` command line: synth, train, predict, evaluate, crossval."""
from __future__ import annotations

import functools
import logging
import os
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from . import metrics as mt
from . import pipeline as pl
from .datamodel import DataError
from .hazardheads import read_predictions, write_predictions
from .synthgen import SynthConfig, SynthConfigError, generate, write_cohort
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_training_log

log = logging.getLogger("fasurv")

LOG_ENV = "FASURV_LOG_LEVEL"


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def common_options(fn):
    """Flags shared by every command; values land in the resolved config."""
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="Flat key = value config file.")
    @click.option("--seed", type=int, help="Random seed (overrides config).")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True,
                  help="Output directory.")
    @click.option("--no-fa", is_flag=True, default=None, help="Ablation: flattened attention.")
    @click.option("--no-cet", is_flag=True, default=None, help="Ablation: no time decay.")
    @click.option("--horizon", type=int, help="Prediction horizon H in intervals.")
    @click.option("--bins", type=int, help="Calibration bins.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, out_dir, no_fa, no_cet, horizon, bins, **kw):
        try:
            cfg = cfgmod.load(config_path, dict(seed=seed, no_fa=no_fa, no_cet=no_cet,
                                                horizon=horizon, bins=bins))
        except (cfgmod.ConfigError, OSError) as exc:
            raise click.UsageError(str(exc)) from None
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        try:
            return fn(cfg, out, **kw)
        except (DataError, SynthConfigError, ValueError, RuntimeError, OSError) as exc:
            raise click.ClickException(str(exc)) from None
    return wrapper


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_mapping(cfg)


def synth_config(cfg: dict) -> SynthConfig:
    """Generator settings from a resolved run config (two causes)."""
    return SynthConfig(n_subjects=cfg["n_subjects"], n_intervals=cfg["n_intervals"],
                       interval_width=cfg["interval_width"],
                       base_hazards=(cfg["base_hazard"],) * 2,
                       driver_multiplier=cfg["driver_multiplier"], numeric_effect=cfg["numeric_effect"],
                       n_numeric=cfg["n_numeric"],
                       missing_rate=None if cfg["missing_rate"] < 0 else (cfg["missing_rate"],),
                       censor_hazard=cfg["censor_hazard"], scenario=cfg["scenario"], seed=cfg["seed"])


def _load(data_dir, cfg):
    return pl.load_dataset(data_dir, n_causes=cfg["n_causes"] or None)


@click.group()
def main():
    """Competing-risk survival modelling on irregular longitudinal data."""
    _setup_logging()


@main.command()
@common_options
@click.option("--n-subjects", type=int)
@click.option("--censor-hazard", type=float)
@click.option("--scenario", type=click.Choice(["standard", "staleness"]))
def synth(cfg, out, n_subjects, censor_hazard, scenario):
    """Write a synthetic cohort with its ground-truth CIFs."""
    for key, val in (("n_subjects", n_subjects), ("censor_hazard", censor_hazard), ("scenario", scenario)):
        if val is not None:
            cfg[key] = val
    sc = synth_config(cfg)
    cohort, truth, times = generate(sc)
    write_cohort(out, cohort, truth, times)
    pl.write_grid(out / "grid.cfg", sc.interval_width, sc.n_intervals, sc.n_causes)
    J = sc.n_intervals
    lam = np.broadcast_to(truth.hazards[:, None, :], (len(truth.subject_ids), J, sc.n_causes))
    write_predictions(out / "truth_predictions.csv", truth.subject_ids, lam)
    click.echo(f"wrote {len(cohort)} subjects to {out}")


@main.command("train")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False),
              help="Reuse an existing split.csv instead of drawing one.")
@click.option("--epochs", type=int)
@click.option("--lr", type=float)
def train_cmd(cfg, out, data_dir, split_path, epochs, lr):
    """Fit a model; writes model.ckpt, training_log.csv, split.csv, run.cfg."""
    if epochs is not None:
        cfg["epochs"] = epochs
    if lr is not None:
        cfg["lr"] = lr
    cohort = _load(data_dir, cfg)
    labels = (pl.read_split(split_path) if split_path else
              pl.assign_splits([s.subject_id for s in cohort.subjects], cfg["seed"],
                               cfg["test_fraction"], cfg["val_fraction"]))
    tc = train_config(cfg)
    res = train(pl.select(cohort, labels, "train"), pl.select(cohort, labels, "val"), tc,
                strict=cfg["strict_ranges"])
    save_checkpoint(res.model, out / "model.ckpt", extra=dict(best_epoch=res.best_epoch, seed=cfg["seed"]))
    write_training_log(res.history, out / "training_log.csv")
    pl.write_split(labels, out / "split.csv")
    (out / "run.cfg").write_text(cfgmod.dump(cfg))
    click.echo(f"best epoch {res.best_epoch}; checkpoint {out / 'model.ckpt'}")


@main.command("predict")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--subset", default="test", show_default=True, help="Split label to predict.")
@click.option("--landmark", "policy", help="first, last, random or a fixed interval.")
def predict_cmd(cfg, out, checkpoint, data_dir, split_path, subset, policy):
    """Hazards, CIF and survival per subject; writes predictions.csv and landmarks.csv."""
    model, _ = load_checkpoint(checkpoint)
    cohort = pl.load_dataset(data_dir, n_causes=model.config.n_causes)
    if split_path:
        cohort = pl.select(cohort, pl.read_split(split_path), subset)
    pred = pl.predict(model, cohort, policy or cfg["landmark"], seed=cfg["seed"])
    write_predictions(out / "predictions.csv", pred.subject_ids, pred.hazards)
    pl.write_landmarks(pred, out / "landmarks.csv")
    click.echo(f"predicted {len(pred.subject_ids)} subjects")


def _evaluate(cfg, F, T, e):
    return mt.evaluate(F, T, e, bins=cfg["bins"], calib_interval=cfg["calib_interval"] or None,
                       ctd_convention=cfg["ctd_convention"])


def _write_report(report, out: Path):
    mt.write_metrics_csv(report, out / "metrics.csv")
    for k, table in report.calibration.items():
        mt.write_calibration_csv(table, out / f"calibration_{k}.csv")


@main.command("evaluate")
@common_options
@click.option("--predictions", "pred_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Dataset directory with outcomes.csv and grid.cfg.")
@click.option("--landmarks", "landmark_path", type=click.Path(exists=True, dir_okay=False),
              help="landmarks.csv from predict; without it predictions start at time 0.")
def evaluate_cmd(cfg, out, pred_path, data_dir, landmark_path):
    """IBS, C_td and calibration; writes metrics.csv and calibration_<cause>.csv."""
    ids, lam, F, S = read_predictions(pred_path)
    pl.check_conservation(lam, F, S)
    cohort = _load(data_dir, cfg)
    landmarks = pl.read_landmarks(landmark_path) if landmark_path else None
    T, e = pl.relative_outcomes(cohort, ids, landmarks)
    report = _evaluate(cfg, F, T, e)
    _write_report(report, out)
    for k, name, v in report.metric_rows():
        click.echo(f"cause {k} {name} {v:.4f}")


@main.command("crossval")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--folds", type=int)
def crossval_cmd(cfg, out, data_dir, folds):
    """k-fold cross-validation beside a held-out test set; writes crossval.csv."""
    if folds is not None:
        cfg["folds"] = folds
    k_folds = cfg["folds"]
    cohort = _load(data_dir, cfg)
    labels = pl.assign_splits([s.subject_id for s in cohort.subjects], cfg["seed"],
                              cfg["test_fraction"], folds=k_folds)
    pl.write_split(labels, out / "split.csv")
    tc = train_config(cfg)
    rows = []
    for f in range(k_folds):
        held = f"fold{f}"
        rest = [f"fold{i}" for i in range(k_folds) if i != f]
        pool = pl.select(cohort, labels, *rest)
        inner = pl.assign_splits([s.subject_id for s in pool.subjects], cfg["seed"] + f + 1,
                                 0.0, cfg["val_fraction"])
        res = train(pl.select(pool, inner, "train"), pl.select(pool, inner, "val"), tc,
                    strict=cfg["strict_ranges"])
        pred = pl.predict(res.model, pl.select(cohort, labels, held), cfg["landmark"], seed=cfg["seed"])
        report = _evaluate(cfg, pred.cif(), pred.rel_times, pred.event_cause)
        fold_dir = out / held
        fold_dir.mkdir(exist_ok=True)
        _write_report(report, fold_dir)
        rows.extend((str(f), k, name, v) for k, name, v in report.metric_rows())
        log.info("fold %d done", f)
    with open(out / "crossval.csv", "w", newline="") as fh:
        fh.write("fold,cause,metric,value\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{float(r[3])!r}\n")
        for k, name in sorted({(r[1], r[2]) for r in rows}):
            vals = np.array([r[3] for r in rows if r[1] == k and r[2] == name])
            fh.write(f"mean,{k},{name},{float(np.mean(vals))!r}\n")
            fh.write(f"sd,{k},{name},{float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0!r}\n")
    click.echo(f"wrote {out / 'crossval.csv'}")


if __name__ == "__main__":
    main()
