"""Full network: embedding -> factorized encoder -> summary -> cause heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .datamodel import Batch, FeatureSchema
from .diffcore import Parameter, Tape, Tensor
from .embedding import embed_batch, init_embedding
from .encoder import encode, init_encoder, summarize
from .hazardheads import decode_logits, decoder_table, hazards_t, init_heads


@dataclass(frozen=True)
class ModelConfig:
    n_causes: int
    horizon: int
    d_emb: int = 16
    n_heads: int = 2
    depth: int = 1
    causal: bool = True
    shared_query: bool = True
    no_fa: bool = False
    no_cet: bool = False

    def to_dict(self):
        return asdict(self)


class SurvivalModel:
    def __init__(self, schema: FeatureSchema, config: ModelConfig, params: dict[str, Parameter]):
        self.schema = schema
        self.config = config
        self.params = params
        D = len(schema)
        self._dec_table = decoder_table(config.horizon, D * config.d_emb)

    @classmethod
    def init(cls, schema: FeatureSchema, config: ModelConfig, seed: int = 0) -> "SurvivalModel":
        if config.d_emb % config.n_heads:
            raise ValueError(f"d_emb {config.d_emb} not divisible by {config.n_heads} heads")
        rng = np.random.default_rng(seed)
        D = len(schema)
        params = {}
        params.update(init_embedding(schema, config.d_emb, rng))
        params.update(init_encoder(D, config.d_emb, config.depth, rng,
                                   no_fa=config.no_fa, shared_query=config.shared_query))
        params.update(init_heads(D * config.d_emb, config.n_causes, rng))
        return cls(schema, config, params)

    def n_parameters(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def logits(self, batch: Batch, tape: Tape | None = None, record=None) -> Tensor:
        cfg = self.config
        w = dc.bind(self.params, tape)
        z = embed_batch(batch, self.schema, w, no_cet=cfg.no_cet)
        z = encode(z, w, cfg.depth, cfg.n_heads, batch.valid, causal=cfg.causal,
                   no_fa=cfg.no_fa, record=record)
        c = summarize(z, w, batch.valid, record=record)
        return decode_logits(c, w, cfg.horizon, self._dec_table)

    def hazards(self, batch: Batch, tape: Tape | None = None) -> Tensor:
        return hazards_t(self.logits(batch, tape))

    def predict(self, batch: Batch) -> np.ndarray:
        return self.hazards(batch).value
