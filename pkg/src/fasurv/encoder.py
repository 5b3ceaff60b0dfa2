"""Factorized time x covariate attention over a (B, S, D, E) embedding.

Each block runs self-attention along time for every covariate trajectory,
then along the covariate axis for every time step. Both use a residual
connection and layer norm. The sinusoidal position table is added to the
temporal attention input only; the residual path carries the bare
embedding. Q, K and V all derive from the position-augmented input.

After the blocks, a learned query attends over the valid steps of each
covariate separately. The D summaries concatenate into the context vector of
length ``D * E``.

Parameter names follow ``block{l}.{time|cov}.{wq,bq,wk,bk,wv,bv,wo,bo,ln_g,ln_b}``
and ``summary.{q,wk,bk,wv,bv,wo,bo}``.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed table, rows are positions 0..n_positions-1, values in [-1, 1]."""
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim)[None, :]
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_mha(prefix: str, dim: int, rng: np.random.Generator) -> dict[str, Parameter]:
    p = {}
    for n in ("q", "k", "v", "o"):
        p[f"{prefix}.w{n}"] = Parameter(f"{prefix}.w{n}", _dense(rng, dim, dim))
        p[f"{prefix}.b{n}"] = Parameter(f"{prefix}.b{n}", np.zeros(dim))
    p[f"{prefix}.ln_g"] = Parameter(f"{prefix}.ln_g", np.ones(dim))
    p[f"{prefix}.ln_b"] = Parameter(f"{prefix}.ln_b", np.zeros(dim))
    return p


def init_encoder(n_features: int, d_emb: int, depth: int, rng: np.random.Generator,
                 no_fa: bool = False, shared_query: bool = True) -> dict[str, Parameter]:
    if depth < 1:
        raise ValueError("encoder needs at least one block")
    params: dict[str, Parameter] = {}
    for layer in range(depth):
        if no_fa:
            params.update(init_mha(f"block{layer}.flat", n_features * d_emb, rng))
        else:
            params.update(init_mha(f"block{layer}.time", d_emb, rng))
            params.update(init_mha(f"block{layer}.cov", d_emb, rng))
    q_shape = (d_emb,) if shared_query else (n_features, d_emb)
    params["summary.q"] = Parameter("summary.q", rng.normal(0.0, 1.0 / math.sqrt(d_emb), size=q_shape))
    for n in ("k", "v", "o"):
        params[f"summary.w{n}"] = Parameter(f"summary.w{n}", _dense(rng, d_emb, d_emb))
        params[f"summary.b{n}"] = Parameter(f"summary.b{n}", np.zeros(d_emb))
    return params


def mha(x: Tensor, w: Mapping[str, Tensor], prefix: str, n_heads: int, mask=None,
        record: list | None = None) -> Tensor:
    """Multi-head self-attention over axis 2 of a (B, G, L, E) input.

    ``mask`` broadcasts against the (B, G, heads, L, L) score array; ``True``
    marks keys a query may attend to.
    """
    B, G, L, E = x.shape
    if E % n_heads:
        raise ValueError(f"model dim {E} not divisible by {n_heads} heads")
    dh = E // n_heads

    def heads(t):
        return dc.transpose(dc.reshape(t, (B, G, L, n_heads, dh)), (0, 1, 3, 2, 4))

    q = heads(x @ w[f"{prefix}.wq"] + w[f"{prefix}.bq"])
    k = heads(x @ w[f"{prefix}.wk"] + w[f"{prefix}.bk"])
    v = heads(x @ w[f"{prefix}.wv"] + w[f"{prefix}.bv"])
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 2, 4, 3))) * (1.0 / math.sqrt(dh))
    attn = dc.softmax_lastdim(scores, mask)
    if record is not None:
        record.append((prefix, attn.value))
    out = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 1, 3, 2, 4)), (B, G, L, E))
    return out @ w[f"{prefix}.wo"] + w[f"{prefix}.bo"]


def time_mask(valid: np.ndarray, causal: bool) -> np.ndarray:
    """(B, 1, 1, S, S) permitted-key mask from per-step validity."""
    valid = np.asarray(valid, dtype=bool)
    S = valid.shape[1]
    mask = np.broadcast_to(valid[:, None, None, None, :], (valid.shape[0], 1, 1, S, S))
    if causal:
        mask = mask & np.tril(np.ones((S, S), dtype=bool))
    return mask


def _check_valid(valid):
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid step")
    return valid


def temporal_attention(z: Tensor, w, prefix: str, n_heads: int, valid, causal: bool = True,
                       pos_table: np.ndarray | None = None, record=None) -> Tensor:
    """LayerNorm(z + MHA_time(z + P)) applied per (subject, covariate) trajectory."""
    valid = _check_valid(valid)
    B, S, D, E = z.shape
    zt = dc.transpose(z, (0, 2, 1, 3))  # (B, D, S, E)
    if pos_table is None:
        pos_table = sinusoidal_table(S, E)
    inp = zt + pos_table[:S]
    att = mha(inp, w, prefix, n_heads, time_mask(valid, causal), record)
    out = dc.layer_norm(zt + att, w[f"{prefix}.ln_g"], w[f"{prefix}.ln_b"])
    return dc.transpose(out, (0, 2, 1, 3))


def covariate_attention(z: Tensor, w, prefix: str, n_heads: int, record=None) -> Tensor:
    """LayerNorm(z + MHA_cov(z)) applied per (subject, time step); no positions."""
    att = mha(z, w, prefix, n_heads, None, record)
    return dc.layer_norm(z + att, w[f"{prefix}.ln_g"], w[f"{prefix}.ln_b"])


def flat_temporal_attention(z: Tensor, w, prefix: str, n_heads: int, valid, causal: bool = True,
                            record=None) -> Tensor:
    """Ablation block: covariates folded into the model dimension, time attention only."""
    valid = _check_valid(valid)
    B, S, D, E = z.shape
    flat = dc.reshape(z, (B, 1, S, D * E))
    inp = flat + sinusoidal_table(S, D * E)
    att = mha(inp, w, prefix, n_heads, time_mask(valid, causal), record)
    out = dc.layer_norm(flat + att, w[f"{prefix}.ln_g"], w[f"{prefix}.ln_b"])
    return dc.reshape(out, (B, S, D, E))


def encode(z: Tensor, w, depth: int, n_heads: int, valid, causal: bool = True,
           no_fa: bool = False, record=None) -> Tensor:
    if depth < 1:
        raise ValueError("encoder needs at least one block")
    for layer in range(depth):
        if no_fa:
            z = flat_temporal_attention(z, w, f"block{layer}.flat", n_heads, valid, causal, record)
        else:
            z = temporal_attention(z, w, f"block{layer}.time", n_heads, valid, causal, record=record)
            z = covariate_attention(z, w, f"block{layer}.cov", n_heads, record)
    return z


def summarize(z: Tensor, w, valid, record=None) -> Tensor:
    """Context vector (B, D * E): per-covariate cross-attention from the learned query."""
    valid = _check_valid(valid)
    B, S, D, E = z.shape
    zt = dc.transpose(z, (0, 2, 1, 3))  # (B, D, S, E)
    keys = zt @ w["summary.wk"] + w["summary.bk"]
    vals = zt @ w["summary.wv"] + w["summary.bv"]
    q = w["summary.q"]
    q = dc.reshape(q, (1, 1, 1, E)) if q.ndim == 1 else dc.reshape(q, (1, D, 1, E))
    scores = dc.sum(keys * q, axis=-1) * (1.0 / math.sqrt(E))  # (B, D, S)
    attn = dc.softmax_lastdim(scores, valid[:, None, :])
    if record is not None:
        record.append(("summary", attn.value[:, :, None, None, :]))
    pooled = dc.matmul(dc.reshape(attn, (B, D, 1, S)), vals)  # (B, D, 1, E)
    out = dc.reshape(pooled, (B, D, E)) @ w["summary.wo"] + w["summary.bo"]
    return dc.reshape(out, (B, D * E))


def dump_attention_csv(record: list, path, subject: int = 0) -> None:
    """Attention weights of one subject as ``layer,head,query,key,weight`` rows.

    Layer labels are ``<prefix>/g<group>``, where the group is the covariate
    (temporal attention) or time step (covariate attention). Inspection
    format only.
    """
    with open(path, "w", newline="") as fh:
        fh.write("layer,head,query,key,weight\n")
        for prefix, attn in record:
            a = attn[subject]  # (G, heads, L, L)
            for g in range(a.shape[0]):
                for h in range(a.shape[1]):
                    for qi in range(a.shape[2]):
                        for ki in range(a.shape[3]):
                            fh.write(f"{prefix}/g{g},{h},{qi},{ki},{float(a[g, h, qi, ki])!r}\n")
