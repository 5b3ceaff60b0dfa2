"""Time-aware covariate embedding.

Observed cells go through a per-feature value embedder: a scalar -> E -> E
GELU map for numeric features, a lookup table for categorical ones. Cells
flagged missing use the feature's learned missing vector, shrunk by
``exp(-gamma_d * delta)`` where ``gamma_d = softplus(rho_d)``.

Parameters::

    embed.num.w1, embed.num.b1   (Dn, E)
    embed.num.w2                 (Dn, E, E)
    embed.num.b2                 (Dn, E)
    embed.cat.table              (sum of cardinalities, E)
    embed.missing                (D, E)
    embed.decay_raw              (D,)
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .datamodel import Batch, FeatureSchema
from .diffcore import Parameter, Tensor

INITIAL_DECAY = 0.1


def init_embedding(schema: FeatureSchema, d_emb: int, rng: np.random.Generator
                   ) -> dict[str, Parameter]:
    D = len(schema)
    n_num = len(schema.numeric_idx)
    cards = [schema.features[i].cardinality for i in schema.categorical_idx]
    scale = 1.0 / math.sqrt(d_emb)
    p = {
        "embed.missing": rng.normal(0.0, scale, size=(D, d_emb)),
        # softplus(rho) = INITIAL_DECAY
        "embed.decay_raw": np.full(D, math.log(math.expm1(INITIAL_DECAY))),
    }
    if n_num:
        p["embed.num.w1"] = rng.normal(0.0, 1.0, size=(n_num, d_emb))
        p["embed.num.b1"] = rng.normal(0.0, 1.0, size=(n_num, d_emb))
        p["embed.num.w2"] = rng.normal(0.0, scale, size=(n_num, d_emb, d_emb))
        p["embed.num.b2"] = np.zeros((n_num, d_emb))
    if cards:
        p["embed.cat.table"] = rng.normal(0.0, scale, size=(sum(cards), d_emb))
    return {name: Parameter(name, v) for name, v in p.items()}


def decay_rates(params) -> np.ndarray:
    raw = params["embed.decay_raw"]
    raw = raw.value if hasattr(raw, "value") else raw
    return np.logaddexp(0.0, raw)


def _category_offsets(schema: FeatureSchema) -> np.ndarray:
    cards = [schema.features[i].cardinality for i in schema.categorical_idx]
    return np.concatenate([[0], np.cumsum(cards)[:-1]]).astype(np.int64) if cards else np.zeros(0, np.int64)


def value_embedding(X: np.ndarray, schema: FeatureSchema, w) -> Tensor:
    """Embed_d(x) for every cell of X (..., D) -> (..., D, E), ignoring the mask."""
    lead = X.shape[:-1]
    num_idx, cat_idx = schema.numeric_idx, schema.categorical_idx
    parts, order = [], []
    if num_idx:
        x = X[..., num_idx][..., None]  # (..., Dn, 1)
        h = dc.gelu(x * w["embed.num.w1"] + w["embed.num.b1"])  # (..., Dn, E)
        n_num, E = w["embed.num.w1"].shape
        flat = dc.reshape(h, (-1, n_num, E))
        hd = dc.transpose(flat, (1, 0, 2))  # (Dn, P, E)
        out = dc.transpose(dc.matmul(hd, w["embed.num.w2"]), (1, 0, 2))  # (P, Dn, E)
        out = dc.reshape(out, lead + (n_num, E)) + w["embed.num.b2"]
        parts.append(out)
        order += num_idx
    if cat_idx:
        table = w["embed.cat.table"]
        idx = X[..., cat_idx]
        cards = np.array([schema.features[i].cardinality for i in cat_idx])
        if np.any(idx != np.round(idx)) or np.any(idx < 0) or np.any(idx >= cards):
            bad = np.argwhere((idx < 0) | (idx >= cards) | (idx != np.round(idx)))[0]
            raise ValueError(f"categorical index {idx[tuple(bad)]} out of range for feature "
                             f"{schema.features[cat_idx[bad[-1]]].name!r}")
        rows = idx.astype(np.int64) + _category_offsets(schema)
        parts.append(dc.take(table, rows, axis=0))
        order += cat_idx
    z = parts[0] if len(parts) == 1 else dc.concat(parts, axis=-2)
    if order != list(range(len(order))):
        z = dc.take(z, np.argsort(order), axis=len(lead))
    return z


def embed(X, M, delta, schema: FeatureSchema, w, no_cet: bool = False) -> Tensor:
    """Time-aware embedding of (..., D) inputs -> (..., D, E).

    With ``no_cet`` the decay factor is fixed at 1, so missing cells map to
    the bare missing vector regardless of staleness.
    """
    X = np.asarray(X, dtype=np.float64)
    M = np.asarray(M)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("staleness must be non-negative")
    values = value_embedding(X, schema, w)
    missing = w["embed.missing"]
    if no_cet:
        missing_cells = dc.mul(missing, np.ones(X.shape + (1,)))
    else:
        gamma = dc.softplus(w["embed.decay_raw"])
        decay = dc.exp(dc.neg(gamma * delta))  # (..., D)
        missing_cells = missing * dc.reshape(decay, X.shape + (1,))
    return dc.where(M[..., None] > 0.5, missing_cells, values)


def embed_batch(batch: Batch, schema: FeatureSchema, w, no_cet: bool = False) -> Tensor:
    """(B, S, D, E). Padded cells follow the missing path with staleness 0."""
    return embed(batch.X, batch.M, batch.delta, schema, w, no_cet)


def embed_cell(x: float, m: int, delta: float, feature: int, schema: FeatureSchema, w,
               no_cet: bool = False) -> np.ndarray:
    """One cell's E-vector, for feature index ``feature``."""
    D = len(schema)
    X = np.zeros((1, D))
    M = np.ones((1, D))
    dl = np.zeros((1, D))
    X[0, feature], M[0, feature], dl[0, feature] = x, m, delta
    return embed(X, M, dl, schema, w, no_cet).value[0, feature]
