"""Cause-specific heads and the hazard / survival / CIF layer.

The context vector is broadcast over the H future offsets, the sinusoidal
table (rows 1..H) is added, and each of the K heads maps every offset
through ``Linear -> GELU -> Linear`` to one logit. Hazards use the
multinomial logit with an implicit zero logit for "no event"::

    hazard[j, k] = exp(f[j, k]) / (1 + sum_m exp(f[j, m]))
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .encoder import sinusoidal_table

HAZARD_FLOOR = 1e-12


def init_heads(context_dim: int, n_causes: int, rng: np.random.Generator,
               hidden: int | None = None) -> dict[str, Parameter]:
    hidden = hidden or max(context_dim // 2, 1)
    p = {
        "heads.w1": rng.normal(0.0, 1.0 / math.sqrt(context_dim), size=(n_causes, context_dim, hidden)),
        "heads.b1": np.zeros((n_causes, hidden)),
        "heads.w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(n_causes, hidden, 1)),
        "heads.b2": np.zeros(n_causes),
    }
    return {name: Parameter(name, v) for name, v in p.items()}


def decoder_table(horizon: int, dim: int) -> np.ndarray:
    """Rows for future offsets 1..H."""
    return sinusoidal_table(horizon + 1, dim)[1:]


def decode_logits(c: Tensor, w, horizon: int, pos_table: np.ndarray | None = None) -> Tensor:
    """Logits (B, H, K) from context (B, C)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    B, C = c.shape
    K = w["heads.w1"].shape[0]
    if pos_table is None:
        pos_table = decoder_table(horizon, C)
    x = dc.reshape(c, (B, 1, 1, C)) + pos_table[None, None, :, :]  # (B, 1, H, C)
    h = dc.gelu(dc.matmul(x, w["heads.w1"]) + dc.reshape(w["heads.b1"], (1, K, 1, -1)))
    out = dc.matmul(h, w["heads.w2"])  # (B, K, H, 1)
    logits = dc.reshape(out, (B, K, horizon)) + dc.reshape(w["heads.b2"], (1, K, 1))
    return dc.transpose(logits, (0, 2, 1))


def hazards_t(logits) -> Tensor:
    """Differentiable hazards (..., H, K).

    Appending a zero logit and taking a max-shifted softmax is exactly the
    stable form: shift by ``max(0, max_m f)``, with ``exp(-shift)`` standing
    in for the 1 in the denominator.
    """
    logits = logits if isinstance(logits, Tensor) else dc.constant(logits)
    K = logits.shape[-1]
    zero = np.zeros(logits.shape[:-1] + (1,))
    probs = dc.softmax_lastdim(dc.concat([logits, zero], axis=-1))
    return dc.take(probs, np.arange(K), axis=probs.ndim - 1)


def hazards(logits) -> np.ndarray:
    f = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("hazards: non-finite logits")
    shift = np.maximum(0.0, f.max(axis=-1, keepdims=True))
    num = np.exp(f - shift)
    return num / (np.exp(-shift) + num.sum(axis=-1, keepdims=True))


def survival(lam) -> np.ndarray:
    """S_j = prod_{l <= j} (1 - sum_k lam[l, k]) over axis -2."""
    lam = np.asarray(lam, dtype=np.float64)
    return np.cumprod(1.0 - lam.sum(axis=-1), axis=-1)


def cif(lam, surv=None) -> np.ndarray:
    """F_j^k = sum_{l <= j} lam[l, k] * S_{l-1}, with S_0 = 1."""
    lam = np.asarray(lam, dtype=np.float64)
    if surv is None:
        surv = survival(lam)
    prev = np.concatenate([np.ones(surv.shape[:-1] + (1,)), surv[..., :-1]], axis=-1)
    return np.cumsum(lam * prev[..., None], axis=-2)


def conservation_error(lam) -> float:
    """max |sum_k F_{H,k} + S_H - 1| over leading axes."""
    s = survival(lam)
    f = cif(lam, s)
    return float(np.max(np.abs(f[..., -1, :].sum(axis=-1) + s[..., -1] - 1.0)))


def write_predictions(path, subject_ids, lam: np.ndarray) -> None:
    """Prediction CSV ``subject_id,interval_offset,cause,hazard,cif,survival``."""
    s = survival(lam)
    f = cif(lam, s)
    _, H, K = lam.shape
    with open(path, "w", newline="") as fh:
        fh.write("subject_id,interval_offset,cause,hazard,cif,survival\n")
        for i, sid in enumerate(subject_ids):
            for h in range(H):
                for k in range(K):
                    fh.write(f"{sid},{h + 1},{k + 1},{float(lam[i, h, k])!r},{float(f[i, h, k])!r},{float(s[i, h])!r}\n")


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """(subject ids, hazards (N, H, K), CIF (N, H, K), survival (N, H))."""
    import csv

    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty prediction file")
        expected = ["subject_id", "interval_offset", "cause", "hazard", "cif", "survival"]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"{path}:1: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields")
            rows.setdefault(row[0], []).append((int(row[1]), int(row[2]), float(row[3]),
                                                float(row[4]), float(row[5])))
    if not rows:
        raise ValueError(f"{path}: no predictions")
    H = max(r[0] for rs in rows.values() for r in rs)
    K = max(r[1] for rs in rows.values() for r in rs)
    ids = list(rows)
    lam = np.zeros((len(ids), H, K))
    F = np.zeros((len(ids), H, K))
    S = np.zeros((len(ids), H))
    for i, sid in enumerate(ids):
        if len(rows[sid]) != H * K:
            raise ValueError(f"{path}: subject {sid} has {len(rows[sid])} rows, expected {H * K}")
        for h, k, hz, c, s in rows[sid]:
            lam[i, h - 1, k - 1] = hz
            F[i, h - 1, k - 1] = c
            S[i, h - 1] = s
    return ids, lam, F, S
