"""Full transducer assembly: encoder + predictor + joiner + checkpointing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tx
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, create_encoder_params
from .predictor_joiner import (
    PredictorJoinerConfig,
    create_predictor_joiner_params,
    joiner_forward,
    predictor_forward_batch,
)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 17
    blank: int = 0
    embed_dim: int = 64
    predictor_hidden: int = 64
    joiner_dim: int = 64

    def predictor_joiner(self) -> PredictorJoinerConfig:
        return PredictorJoinerConfig(
            vocab_size=self.vocab_size, blank=self.blank,
            embed_dim=self.embed_dim, hidden_dim=self.predictor_hidden,
            joiner_dim=self.joiner_dim, encoder_width=self.encoder.width)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class TransducerModel:
    """Owns the named parameter tensors and the forward helpers."""

    def __init__(self, config: ModelConfig, params: dict[str, tx.Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "TransducerModel":
        rng = np.random.default_rng(seed)
        params = create_encoder_params(config.encoder, rng)
        params.update(create_predictor_joiner_params(config.predictor_joiner(), rng))
        return cls(config, params)

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def predict_batch(self, tokens: np.ndarray, lengths=None) -> tx.Tensor:
        return predictor_forward_batch(self.params, tokens,
                                       self.config.predictor_joiner(), lengths)

    def joint(self, enc_frames: tx.Tensor, pred_states: tx.Tensor) -> tx.Tensor:
        return joiner_forward(self.params, enc_frames, pred_states)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model_config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.weights, meta)

    @classmethod
    def load(cls, path) -> tuple["TransducerModel", dict]:
        arrays, meta = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        params = {k: tx.parameter(v) for k, v in arrays.items()}
        return cls(config, params), meta
