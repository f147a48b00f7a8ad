"""Transducer lattice loss with per-token emission-window restrictions.

The loss is the negative log probability of the label sequence summed over
all monotone blank/label paths through the (T x U+1) grid of per-frame,
per-history log-probabilities.  An optional restriction band limits each
token's emission to a frame interval around its reference alignment frame:
paths that place token u outside [lo_u, hi_u] are excluded.

Everything here is log-space dynamic programming over plain numpy arrays;
`transducer_loss_node` bridges into the autodiff tape with the analytic
forward-backward gradient.  `brute_force_loss` enumerates paths explicitly
and is the testing oracle for the DP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tx

# Large negative stand-in for log(0); keeps the DP branch-free and NaN-free.
NEG_LOG_ZERO = -1.0e30

BLANK = 0


class InfeasibleBandError(ValueError):
    """No monotone path satisfies the restriction band."""


@dataclass(frozen=True)
class Alignment:
    """Reference emission frames: ``token_end_frames[u]`` is the frame on
    which token u's audio ends.  Frames are on the encoder grid."""

    token_end_frames: np.ndarray
    utterance_end_frame: int

    def __post_init__(self):
        frames = np.asarray(self.token_end_frames, dtype=np.int64)
        object.__setattr__(self, "token_end_frames", frames)
        if frames.size and np.any(np.diff(frames) < 0):
            raise ValueError("alignment: token end frames must be non-decreasing")
        if frames.size and (frames.min() < 0 or frames.max() > self.utterance_end_frame):
            raise ValueError("alignment: frames outside [0, utterance end]")

    def __len__(self):
        return int(self.token_end_frames.size)


@dataclass(frozen=True)
class RestrictionBand:
    """Allowed emission interval [lo[u], hi[u]] per token, frame-indexed."""

    lo: np.ndarray
    hi: np.ndarray
    left_buffer_ms: float = math.inf
    right_buffer_ms: float = math.inf
    frame_ms: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.int64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.int64))
        if self.lo.shape != self.hi.shape:
            raise ValueError("restriction band: lo/hi length mismatch")

    def __len__(self):
        return int(self.lo.size)

    def shrunk(self, token: int, new_lo: int, new_hi: int) -> "RestrictionBand":
        lo = self.lo.copy()
        hi = self.hi.copy()
        lo[token] = max(lo[token], new_lo)
        hi[token] = min(hi[token], new_hi)
        return RestrictionBand(lo, hi, self.left_buffer_ms, self.right_buffer_ms,
                               self.frame_ms)


def ms_to_frames(duration_ms: float, frame_ms: float) -> int:
    """Millisecond-to-frame conversion, round half up (so 90ms at 60ms/frame
    is 2 frames).  Infinity passes through."""
    if math.isinf(duration_ms):
        return duration_ms
    return int(math.floor(duration_ms / frame_ms + 0.5))


def build_band(alignment: Alignment, left_buffer_ms: float, right_buffer_ms: float,
               frame_ms: float, num_frames: int) -> RestrictionBand:
    """Per-token emission windows around the reference end frames.

    ``lo_u = clamp(a_u - round(left/frame))``, ``hi_u = clamp(a_u + round(right/frame))``,
    clamped to [0, num_frames-1].  Infinite buffers give the unrestricted band.
    """
    if frame_ms <= 0:
        raise ValueError("build_band: frame_ms must be positive")
    ends = alignment.token_end_frames
    if ends.size and np.any(np.diff(ends) < 0):
        raise ValueError("build_band: alignment must be monotone")
    left = ms_to_frames(left_buffer_ms, frame_ms)
    right = ms_to_frames(right_buffer_ms, frame_ms)
    if math.isinf(left_buffer_ms):
        lo = np.zeros(ends.size, dtype=np.int64)
    else:
        lo = np.clip(ends - left, 0, num_frames - 1)
    if math.isinf(right_buffer_ms):
        hi = np.full(ends.size, num_frames - 1, dtype=np.int64)
    else:
        hi = np.clip(ends + right, 0, num_frames - 1)
    return RestrictionBand(lo, hi, left_buffer_ms, right_buffer_ms, frame_ms)


@dataclass(frozen=True)
class LatticeLogits:
    """Log-probability grid indexed (frame t, emitted-token count u, symbol v)."""

    values: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_labels(self) -> int:
        return self.values.shape[1] - 1

    @property
    def vocab_size(self) -> int:
        return self.values.shape[2]

    def validate(self, tol: float = 1e-6) -> None:
        sums = np.exp(self.values).sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=tol):
            worst = float(np.abs(sums - 1.0).max())
            raise ValueError(f"lattice logits: rows not normalized (max error {worst:.3g})")


def _check_inputs(logits: np.ndarray, labels: np.ndarray, band, blank: int):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"lattice: logits must be (T, U+1, V), got shape {logits.shape}")
    T, U1, V = logits.shape
    if T < 1 or U1 < 1:
        raise ValueError("lattice: empty lattice")
    U = U1 - 1
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size != U:
        raise ValueError(f"lattice: expected {U} labels, got shape {labels.shape}")
    if np.any(labels == blank):
        raise ValueError("lattice: labels must not contain the blank symbol")
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise ValueError("lattice: label id outside vocabulary")
    if band is None:
        lo = np.zeros(U, dtype=np.int64)
        hi = np.full(U, T - 1, dtype=np.int64)
    else:
        lo = np.asarray(band.lo, dtype=np.int64)
        hi = np.asarray(band.hi, dtype=np.int64)
        if lo.size != U:
            raise ValueError(f"lattice: band covers {lo.size} tokens, need {U}")
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, T - 1)
    return logits, labels, lo, hi, T, U, V


def band_is_feasible(lo: np.ndarray, hi: np.ndarray) -> bool:
    """True iff a monotone frame assignment t_1 <= ... <= t_U exists."""
    t = 0
    for l, h in zip(lo, hi):
        t = max(t, int(l))
        if t > int(h):
            return False
    return True


def _transition_logprobs(logits, labels, lo, hi, T, U):
    """Blank transition grid (T, U+1) and band-masked label grid (T, U)."""
    blank_lp = logits[:, :, BLANK]
    if U == 0:
        return blank_lp, np.zeros((T, 0))
    y = logits[np.arange(T)[:, None], np.arange(U)[None, :], labels[None, :]]
    t_grid = np.arange(T)[:, None]
    allowed = (t_grid >= lo[None, :]) & (t_grid <= hi[None, :])
    y_masked = np.where(allowed, y, NEG_LOG_ZERO)
    return blank_lp, y_masked


def _forward_alpha(blank_lp, y_masked, T, U):
    alpha = np.full((T, U + 1), NEG_LOG_ZERO)
    alpha[0, 0] = 0.0
    for d in range(1, T + U):
        u_lo = max(0, d - (T - 1))
        u_hi = min(d, U)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = d - us
        via_blank = np.where(ts >= 1,
                             alpha[np.maximum(ts - 1, 0), us]
                             + blank_lp[np.maximum(ts - 1, 0), us],
                             NEG_LOG_ZERO)
        if U > 0:
            um1 = np.maximum(us - 1, 0)
            via_label = np.where(us >= 1,
                                 alpha[ts, um1] + y_masked[ts, um1],
                                 NEG_LOG_ZERO)
        else:
            via_label = np.full(us.shape, NEG_LOG_ZERO)
        alpha[ts, us] = np.logaddexp(via_blank, via_label)
    return alpha


def _backward_beta(blank_lp, y_masked, T, U):
    beta = np.full((T, U + 1), NEG_LOG_ZERO)
    beta[T - 1, U] = blank_lp[T - 1, U]
    for d in range(T + U - 2, -1, -1):
        u_lo = max(0, d - (T - 1))
        u_hi = min(d, U)
        if u_lo > u_hi:
            continue
        us = np.arange(u_lo, u_hi + 1)
        ts = d - us
        tp1 = np.minimum(ts + 1, T - 1)
        via_blank = np.where(ts + 1 <= T - 1,
                             blank_lp[ts, us] + beta[tp1, us],
                             NEG_LOG_ZERO)
        if U > 0:
            up1 = np.minimum(us, U - 1)
            via_label = np.where(us + 1 <= U,
                                 y_masked[ts, up1] + beta[ts, np.minimum(us + 1, U)],
                                 NEG_LOG_ZERO)
        else:
            via_label = np.full(us.shape, NEG_LOG_ZERO)
        beta[ts, us] = np.logaddexp(via_blank, via_label)
    return beta


def rnnt_loss(logits, labels, band: RestrictionBand | None = None,
              blank: int = BLANK) -> float:
    """Negative log-likelihood of ``labels`` over all (band-permitted)
    monotone lattice paths.  Returns ``math.inf`` when the band excludes
    every path."""
    if isinstance(logits, LatticeLogits):
        logits = logits.values
    logits, labels, lo, hi, T, U, V = _check_inputs(logits, labels, band, blank)
    if not band_is_feasible(lo, hi):
        return math.inf
    blank_lp, y_masked = _transition_logprobs(logits, labels, lo, hi, T, U)
    alpha = _forward_alpha(blank_lp, y_masked, T, U)
    return float(-(alpha[T - 1, U] + blank_lp[T - 1, U]))


def rnnt_loss_grad(logits, labels, band: RestrictionBand | None = None,
                   blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Loss and its analytic gradient w.r.t. every logits entry.

    Uses the forward/backward occupancy identity; banned transitions get
    exactly zero gradient and the result is always finite."""
    if isinstance(logits, LatticeLogits):
        logits = logits.values
    logits, labels, lo, hi, T, U, V = _check_inputs(logits, labels, band, blank)
    if not band_is_feasible(lo, hi):
        raise InfeasibleBandError(
            f"rnnt_loss_grad: band excludes all paths (lo={lo.tolist()}, hi={hi.tolist()}, T={T})")
    blank_lp, y_masked = _transition_logprobs(logits, labels, lo, hi, T, U)
    alpha = _forward_alpha(blank_lp, y_masked, T, U)
    beta = _backward_beta(blank_lp, y_masked, T, U)
    log_p = alpha[T - 1, U] + blank_lp[T - 1, U]

    grad = np.zeros_like(logits)
    # blank occupancies: transition (t, u) -> (t+1, u), plus the terminal exit
    occ_blank = np.zeros((T, U + 1))
    if T > 1:
        occ_blank[:-1, :] = np.exp(alpha[:-1, :] + blank_lp[:-1, :] + beta[1:, :] - log_p)
    occ_blank[T - 1, U] = np.exp(alpha[T - 1, U] + blank_lp[T - 1, U] - log_p)
    grad[:, :, blank] = -occ_blank
    if U > 0:
        occ_label = np.exp(alpha[:, :U] + y_masked + beta[:, 1:] - log_p)
        t_idx = np.arange(T)[:, None].repeat(U, axis=1)
        u_idx = np.arange(U)[None, :].repeat(T, axis=0)
        grad[t_idx, u_idx, labels[u_idx]] = -occ_label
    return float(-log_p), grad


def brute_force_loss(logits, labels, band: RestrictionBand | None = None,
                     blank: int = BLANK, max_cells: int = 12) -> float:
    """Oracle: enumerate every monotone path explicitly and sum probabilities
    exactly (math.fsum).  Guarded to T+U <= ``max_cells``."""
    if isinstance(logits, LatticeLogits):
        logits = logits.values
    logits, labels, lo, hi, T, U, V = _check_inputs(logits, labels, band, blank)
    if T + U > max_cells:
        raise ValueError(f"brute_force_loss: instance too large (T+U={T + U} > {max_cells})")
    probs: list[float] = []

    def walk(t: int, u: int, logp: float) -> None:
        if t == T - 1 and u == U:
            probs.append(math.exp(logp + logits[t, u, blank]))
            return
        if t < T - 1:
            walk(t + 1, u, logp + logits[t, u, blank])
        if u < U and lo[u] <= t <= hi[u]:
            walk(t, u + 1, logp + logits[t, u, labels[u]])

    walk(0, 0, 0.0)
    total = math.fsum(probs)
    if total <= 0.0:
        return math.inf
    return -math.log(total)


def transducer_loss_node(logits: tx.Tensor, labels, band: RestrictionBand | None = None,
                         blank: int = BLANK) -> tx.Tensor:
    """Autodiff bridge: a (1, 1) loss tensor whose backward injects the
    analytic lattice gradient into ``logits``.  Infeasible bands are
    rejected up front rather than yielding an infinite loss mid-step."""
    labels = np.asarray(labels, dtype=np.int64)
    _, _, lo, hi, T, U, V = _check_inputs(logits.data, labels, band, blank)
    if not band_is_feasible(lo, hi):
        raise InfeasibleBandError(
            "transducer_loss_node: band excludes all paths for this utterance")
    loss_value = rnnt_loss(logits.data, labels, band, blank)
    out = tx.Tensor(np.array([[loss_value]]), requires_grad=logits.requires_grad,
                    op="transducer_loss", parents=(logits,) if logits.requires_grad else ())
    if out.requires_grad:
        def backward():
            _, grad = rnnt_loss_grad(logits.data, labels, band, blank)
            scale = float(out.grad[0, 0])
            if logits.grad is None:
                logits.grad = scale * grad
            else:
                logits.grad = logits.grad + scale * grad
        out._backward = backward
    return out
