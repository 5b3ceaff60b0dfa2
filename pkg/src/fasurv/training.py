"""Weighted discrete-time competing-risk likelihood, AdamW and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datamodel import (Cohort, FeatureSchema, SubjectTrajectory, build_trajectory, landmark_range,
                        last_landmark, make_batch, sample_landmark)
from .diffcore import Parameter, Tape, Tensor
from .hazardheads import HAZARD_FLOOR
from .model import ModelConfig, SurvivalModel

log = logging.getLogger(__name__)

DEPTH_RANGE = range(1, 7)
D_EMB_CHOICES = (16, 32, 64)
HEAD_CHOICES = (2, 4, 8)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    horizon: int = 20
    depth: int = 1
    d_emb: int = 16
    n_heads: int = 2
    no_fa: bool = False
    no_cet: bool = False
    causal: bool = True
    shared_query: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5
    freeze_landmarks: bool = False
    landmark_correction: bool = True
    init_head_bias: bool = True
    ema_decay: float = 0.99
    seed: int = 0

    def validate(self, strict: bool = True) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.horizon < 1:
            raise ValueError("epochs, batch_size and horizon must be positive")
        if self.d_emb % self.n_heads:
            raise ValueError("d_emb must be divisible by n_heads")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if strict:
            if self.depth not in DEPTH_RANGE:
                raise ValueError(f"depth {self.depth} outside 1..6")
            if self.d_emb not in D_EMB_CHOICES:
                raise ValueError(f"d_emb {self.d_emb} not in {D_EMB_CHOICES}")
            if self.n_heads not in HEAD_CHOICES:
                raise ValueError(f"n_heads {self.n_heads} not in {HEAD_CHOICES}")

    def model_config(self, n_causes: int) -> ModelConfig:
        return ModelConfig(n_causes=n_causes, horizon=self.horizon, d_emb=self.d_emb,
                           n_heads=self.n_heads, depth=self.depth, causal=self.causal,
                           shared_query=self.shared_query, no_fa=self.no_fa, no_cet=self.no_cet)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# -- loss -------------------------------------------------------------------

def class_weights(event_causes, n_causes: int, n_subjects: int | None = None) -> np.ndarray:
    """``ln(1 + N / N_k)`` per cause, divided by its minimum."""
    e = np.asarray(event_causes, dtype=np.int64)
    N = len(e) if n_subjects is None else n_subjects
    counts = np.array([(e == k).sum() for k in range(1, n_causes + 1)], dtype=np.float64)
    for k, c in enumerate(counts, start=1):
        if c == 0:
            raise ValueError(f"cause {k} has no events in the training data")
    raw = np.log1p(N / counts)
    return raw / raw.min()


def nll_loss(lam, labels: np.ndarray, mask: np.ndarray, weights, sample_weight=None) -> Tensor:
    """Summed negative log-likelihood over subjects and masked offsets.

    ``lam`` is (B, H, K); ``labels`` (B, H, K) one-hot event indicators;
    ``mask`` (B, H) selects the offsets that enter the likelihood. Event
    terms carry the cause weight; survival terms are unweighted. Hazards are
    clamped to ``[1e-12, 1 - 1e-12]`` before the logarithms. An optional
    ``sample_weight`` (B,) scales each subject's whole contribution.
    """
    lam = lam if isinstance(lam, Tensor) else dc.constant(lam)
    if not np.all(np.isfinite(lam.value)):
        raise ValueError("nll_loss: non-finite hazards")
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if sample_weight is not None:
        mask = mask * np.asarray(sample_weight, dtype=np.float64)[:, None]
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = HAZARD_FLOOR, 1.0 - HAZARD_FLOOR
    event_coef = labels * w * mask[..., None]
    surv_coef = (1.0 - labels.sum(axis=-1)) * mask
    event_term = dc.sum(dc.log(dc.clip(lam, lo, hi)) * event_coef)
    surv = dc.clip(1.0 - dc.sum(lam, axis=-1), lo, hi)
    surv_term = dc.sum(dc.log(surv) * surv_coef)
    return dc.neg(event_term + surv_term)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params) -> None:
        """One decoupled-weight-decay Adam update from each parameter's ``.grad``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            g = p.grad
            if p.name not in self.m:
                self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            m, v = self.m[p.name], self.v[p.name]
            if m.shape != p.value.shape or g.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {p.name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, state: AdamW) -> AdamW:
    state.step(params)
    return state


# -- data plumbing ----------------------------------------------------------

def build_trajectories(cohort: Cohort, schema: FeatureSchema) -> list[SubjectTrajectory]:
    return [build_trajectory(s, schema) for s in cohort.subjects]


def landmark_items(trajs, horizon: int, n_causes: int, rng=None):
    """Landmarked (trajectory, labels, mask) items; random when ``rng`` is given.

    Returns the items and the number of subjects skipped for lack of a valid
    landmark.
    """
    items, skipped = [], 0
    for t in trajs:
        it = sample_landmark(t, horizon, rng, n_causes) if rng is not None else last_landmark(t, horizon, n_causes)
        if it is None:
            skipped += 1
        else:
            items.append(it)
    return items, skipped


def landmark_spans(trajs) -> np.ndarray:
    """Number of valid landmarks per subject that has at least one."""
    spans = np.array([landmark_range(t) for t in trajs], dtype=np.float64)
    return spans[spans >= 1]


def batches(items, batch_size: int, sample_weight=None):
    """Yield (batch, sample weights or None)."""
    for start in range(0, len(items), batch_size):
        sw = None if sample_weight is None else sample_weight[start:start + batch_size]
        yield make_batch(items[start:start + batch_size]), sw


def pooled_head_bias(items, n_causes: int, sample_weight=None) -> np.ndarray:
    """Logits matching the pooled per-offset cause hazards of ``items``."""
    events = np.zeros(n_causes)
    at_risk = 0.0
    for i, (_, y, m) in enumerate(items):
        w = 1.0 if sample_weight is None else sample_weight[i]
        events += w * y.sum(axis=0)
        at_risk += w * m.sum()
    lam = np.clip(events / max(at_risk, 1.0), 1e-6, None)
    return np.log(lam / max(1.0 - lam.sum(), 1e-6))


def evaluate_loss(model: SurvivalModel, items, weights, batch_size: int, sample_weight=None) -> float:
    total, n = 0.0, 0
    for batch, sw in batches(items, batch_size, sample_weight):
        lam = model.hazards(batch)
        total += float(nll_loss(lam, batch.labels, batch.loss_mask, weights, sw).value)
        n += len(batch.lengths)
    return total / max(n, 1)


# -- training loop ----------------------------------------------------------

def init_head_bias(model: SurvivalModel, probe, sample_weight=None, n_probe: int = 256) -> None:
    """Set ``heads.b2`` so the untrained network's mean logit per cause equals
    the pooled hazard logit of ``probe``."""
    b2 = model.params["heads.b2"].value
    K = b2.shape[0]
    b2[:] = 0.0
    offset = model.logits(make_batch(probe[:n_probe])).value.mean(axis=(0, 1))
    b2[:] = pooled_head_bias(probe, K, sample_weight) - offset


@contextmanager
def _swapped(model: SurvivalModel, values):
    """Temporarily load ``values`` into the model's parameters."""
    if values is None:
        yield
        return
    live = {k: p.value for k, p in model.params.items()}
    for k, p in model.params.items():
        p.value = values[k].copy()
    try:
        yield
    finally:
        for k, p in model.params.items():
            p.value = live[k]


@dataclass
class TrainResult:
    model: SurvivalModel
    weights: np.ndarray
    history: list[dict]
    best_epoch: int
    skipped: int


def train(train_cohort: Cohort, val_cohort: Cohort | None, config: TrainConfig,
          strict: bool = True) -> TrainResult:
    """Fit a model; returns the parameters from the best validation epoch.

    Standardization statistics come from ``train_cohort`` only. Each epoch
    draws fresh landmarks (unless ``freeze_landmarks``), shuffles, and steps
    AdamW on the batch-mean loss. Validation draws one fixed set of random
    landmarks so its loss is comparable across epochs.

    With ``landmark_correction`` each sample is weighted by its subject's
    number of valid landmarks (normalized to mean one). Drawing a landmark
    uniformly from ``1..T-1`` picks short-lived subjects' early intervals
    more often; the weight undoes that, leaving the per-interval likelihood
    unbiased.

    With ``ema_decay > 0`` an exponential moving average of the weights is
    kept after every step; validation, model selection and the returned
    model use the averaged weights. Single-step weights swing the overall
    event rate by tens of percent between epochs; the average does not.
    """
    config.validate(strict)
    K = train_cohort.n_causes
    schema = train_cohort.fit_standardization()
    rng = np.random.default_rng(config.seed)
    model = SurvivalModel.init(schema, config.model_config(K), seed=config.seed)
    log.info("model: %d parameters (no_fa=%s, no_cet=%s)", model.n_parameters(),
             config.no_fa, config.no_cet)

    train_trajs = build_trajectories(train_cohort, schema)
    _, e = train_cohort.outcomes()
    weights = class_weights(e, K)
    def span_weights(trajs):
        if not config.landmark_correction:
            return None
        spans = landmark_spans(trajs)
        return spans / spans.mean()

    train_sw = span_weights(train_trajs)
    val_items, val_sw = [], None
    if val_cohort is not None and len(val_cohort):
        val_trajs = build_trajectories(val_cohort, schema)
        val_items, _ = landmark_items(val_trajs, config.horizon, K,
                                      np.random.default_rng(config.seed + 2))
        val_sw = span_weights(val_trajs)

    frozen = None
    if config.freeze_landmarks:
        frozen, _ = landmark_items(train_trajs, config.horizon, K, rng)
    if config.init_head_bias:
        probe, _ = landmark_items(train_trajs, config.horizon, K, np.random.default_rng(config.seed + 1))
        init_head_bias(model, probe, train_sw)

    # running average of the weights; validation and the result use it
    ema = {k: p.value.copy() for k, p in model.params.items()} if config.ema_decay else None
    opt = AdamW(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                weight_decay=config.weight_decay)
    params = list(model.params.values())
    history: list[dict] = []
    best = (math.inf, -1, None)
    stale = 0
    skipped = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if frozen is not None:
            items = list(frozen)
        else:
            items, skipped = landmark_items(train_trajs, config.horizon, K, rng)
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        sw = None if train_sw is None else train_sw[order]
        total, count = 0.0, 0
        for b, (batch, bw) in enumerate(batches(items, config.batch_size, sw)):
            model.zero_grad()
            tape = Tape()
            lam = model.hazards(batch, tape)
            loss_sum = nll_loss(lam, batch.labels, batch.loss_mask, weights, bw)
            n = len(batch.lengths)
            if not math.isfinite(float(loss_sum.value)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(dc.mul(loss_sum, 1.0 / n))
            tape.clear()
            opt.step(params)
            if ema is not None:
                for k, p in model.params.items():
                    ema[k] *= config.ema_decay
                    ema[k] += (1.0 - config.ema_decay) * p.value
            total += float(loss_sum.value)
            count += n
        train_loss = total / max(count, 1)
        with _swapped(model, ema):
            val_loss = evaluate_loss(model, val_items, weights, 256, val_sw) if val_items else train_loss
            snapshot = {k: p.value.copy() for k, p in model.params.items()}
        history.append(dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=config.lr,
                            seconds=time.perf_counter() - t0))
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_loss, val_loss,
                 history[-1]["seconds"])
        if val_loss < best[0]:
            best = (val_loss, epoch, snapshot)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for k, v in best[2].items():
        model.params[k].value = v
    return TrainResult(model, weights, history, best[1], skipped)


def write_training_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        # seconds is wall-clock and the one column that differs between reruns
        fh.write("epoch,train_loss,val_loss,lr,seconds\n")
        for h in history:
            fh.write(f"{h['epoch']},{float(h['train_loss'])!r},{float(h['val_loss'])!r},{float(h['lr'])!r},{h['seconds']:.3f}\n")


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"FASURV-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: SurvivalModel, path, extra: dict | None = None) -> None:
    """Deterministic checkpoint.

    Layout: ``FASURV-CKPT <version>\\n``, one line of JSON header (model
    config, schema, parameter names/shapes/byte offsets, extra metadata),
    then the raw little-endian float64 parameter data in header order.
    """
    names = sorted(model.params)
    entries, offset = [], 0
    for n in names:
        v = model.params[n].value
        entries.append(dict(name=n, shape=list(v.shape), offset=offset))
        offset += v.size * 8
    header = dict(model=model.config.to_dict(), schema=model.schema.to_dict(),
                  params=entries, extra=extra or {})
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + f" {CHECKPOINT_VERSION}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[SurvivalModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").split(b" ")
        if magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1].decode()}")
        header = json.loads(fh.readline())
        blob = fh.read()
    params = {}
    for ent in header["params"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=ent["offset"]).reshape(ent["shape"])
        params[ent["name"]] = Parameter(ent["name"], arr.astype(np.float64))
    schema = FeatureSchema.from_dict(header["schema"])
    model = SurvivalModel(schema, ModelConfig(**header["model"]), params)
    return model, header.get("extra", {})
