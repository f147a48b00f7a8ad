"""Label-history predictor (layer-norm LSTM) and the additive joiner.

The predictor consumes the emitted-token history (never blank) and yields
one state vector per history length, starting from a start-of-sequence
embedding.  The joiner combines encoder frame t with predictor state u into
a normalized log-probability vector over the vocabulary, pointwise in (t, u).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tx

BLANK = 0


@dataclass(frozen=True)
class PredictorJoinerConfig:
    vocab_size: int = 17          # 16 labels + blank at index 0
    blank: int = BLANK
    embed_dim: int = 64
    hidden_dim: int = 64
    joiner_dim: int = 64
    encoder_width: int = 64


def create_predictor_joiner_params(config: PredictorJoinerConfig,
                                   rng: np.random.Generator) -> dict[str, tx.Tensor]:
    def dense(fan_in, fan_out):
        return tx.parameter(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))

    h = config.hidden_dim
    return {
        # row `blank` doubles as the start-of-sequence embedding
        "predictor.embed": tx.parameter(
            0.1 * rng.standard_normal((config.vocab_size, config.embed_dim))),
        "predictor.wx": dense(config.embed_dim, 4 * h),
        "predictor.wh": dense(h, 4 * h),
        "predictor.ln.g": tx.parameter(np.ones(4 * h)),
        "predictor.ln.b": tx.parameter(np.zeros(4 * h)),
        "predictor.bias": tx.parameter(np.zeros(4 * h)),
        "joiner.wf": dense(config.encoder_width, config.joiner_dim),
        "joiner.wg": dense(h, config.joiner_dim),
        "joiner.b": tx.parameter(np.zeros(config.joiner_dim)),
        "joiner.wout": dense(config.joiner_dim, config.vocab_size),
        "joiner.bout": tx.parameter(np.zeros(config.vocab_size)),
    }


def _lstm_cell(params, x: tx.Tensor, h: tx.Tensor, c: tx.Tensor):
    """One layer-norm LSTM step; normalization over the stacked gate
    pre-activations, then a learned affine."""
    gates = tx.add(tx.matmul(x, params["predictor.wx"]),
                   tx.matmul(h, params["predictor.wh"]))
    gates = tx.layer_norm(gates)
    gates = tx.add(tx.multiply(gates, params["predictor.ln.g"]),
                   tx.add(params["predictor.ln.b"], params["predictor.bias"]))
    n = gates.shape[-1] // 4
    i = tx.sigmoid(tx.take(gates, (Ellipsis, slice(0, n))))
    f = tx.sigmoid(tx.take(gates, (Ellipsis, slice(n, 2 * n))))
    g = tx.tanh(tx.take(gates, (Ellipsis, slice(2 * n, 3 * n))))
    o = tx.sigmoid(tx.take(gates, (Ellipsis, slice(3 * n, 4 * n))))
    c_new = tx.add(tx.multiply(f, c), tx.multiply(i, g))
    h_new = tx.multiply(o, tx.tanh(c_new))
    return h_new, c_new


def predictor_forward_batch(params, tokens: np.ndarray, config: PredictorJoinerConfig,
                            lengths: np.ndarray | None = None) -> tx.Tensor:
    """(B, U) token batch -> (B, U+1, hidden) state rows.

    Row u is the state after consuming tokens[:u]; row 0 follows the
    start-of-sequence embedding.  Padded tail positions (beyond ``lengths``)
    produce rows that callers must slice away; causality keeps the valid
    prefix exact.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"predictor: expected (B, U) tokens, got shape {tokens.shape}")
    B, U = tokens.shape
    if lengths is None:
        lengths = np.full(B, U)
    for b in range(B):
        if np.any(tokens[b, :lengths[b]] == config.blank):
            raise ValueError("predictor: blank in label history")
    ids = np.concatenate([np.full((B, 1), config.blank, dtype=np.int64), tokens], axis=1)
    emb = tx.embedding(params["predictor.embed"], ids)          # (B, U+1, e)
    h = tx.constant(np.zeros((B, config.hidden_dim)))
    c = tx.constant(np.zeros((B, config.hidden_dim)))
    rows = []
    for u in range(U + 1):
        x = tx.take(emb, (slice(None), u))
        h, c = _lstm_cell(params, x, h, c)
        rows.append(tx.take(h, (slice(None), None)))            # (B, 1, hidden)
    return tx.concat(rows, axis=1)


def predictor_forward(params, tokens, config: PredictorJoinerConfig) -> tx.Tensor:
    """Single-utterance variant: (U,) tokens -> (U+1, hidden)."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    return tx.take(predictor_forward_batch(params, tokens, config), (0,))


def joiner_forward(params, enc_frames: tx.Tensor, pred_states: tx.Tensor) -> tx.Tensor:
    """(T, enc_w) x (U+1, hidden) -> (T, U+1, V) log-probabilities."""
    if enc_frames.ndim != 2 or pred_states.ndim != 2:
        raise ValueError("joiner: expected 2-D frame and state grids")
    f = tx.matmul(enc_frames, params["joiner.wf"])              # (T, j)
    g = tx.matmul(pred_states, params["joiner.wg"])             # (U+1, j)
    hidden = tx.tanh(tx.add(tx.add(tx.take(f, (slice(None), None)),
                                   tx.take(g, (None,))),
                            params["joiner.b"]))
    logits = tx.add(tx.matmul(hidden, params["joiner.wout"]), params["joiner.bout"])
    return tx.log_softmax(logits, axis=-1)


# ---------------------------------------------------------------------
# numpy inference path
# ---------------------------------------------------------------------

def predictor_init_state(config: PredictorJoinerConfig):
    return (np.zeros(config.hidden_dim), np.zeros(config.hidden_dim))


def predictor_step_np(weights, state, token_id: int, config: PredictorJoinerConfig):
    """Advance the predictor by one consumed token (numpy, no tape)."""
    h, c = state
    x = weights["predictor.embed"][token_id]
    gates = x @ weights["predictor.wx"] + h @ weights["predictor.wh"]
    gates = tx.layer_norm_np(gates)
    gates = gates * weights["predictor.ln.g"] \
        + (weights["predictor.ln.b"] + weights["predictor.bias"])
    n = gates.shape[-1] // 4
    i = tx.sigmoid_np(gates[:n])
    f = tx.sigmoid_np(gates[n:2 * n])
    g = np.tanh(gates[2 * n:3 * n])
    o = tx.sigmoid_np(gates[3 * n:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, (h_new, c_new)


def joiner_project_frames_np(weights, enc_rows: np.ndarray) -> np.ndarray:
    return enc_rows @ weights["joiner.wf"]


def joiner_project_state_np(weights, g_row: np.ndarray) -> np.ndarray:
    return g_row @ weights["joiner.wg"]


def joiner_logprobs_np(weights, f_proj_row: np.ndarray, g_proj_row: np.ndarray) -> np.ndarray:
    hidden = np.tanh(f_proj_row + g_proj_row + weights["joiner.b"])
    logits = hidden @ weights["joiner.wout"] + weights["joiner.bout"]
    return tx.log_softmax_np(logits, axis=-1)
