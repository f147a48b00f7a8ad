"""Streaming greedy decoding, endpointing, and emission-time bookkeeping.

Audio is consumed in chunks of the inference center size; a chunk becomes
decodable once its look-ahead frames have arrived, so every token emitted
from it carries that availability instant as its emission time.  A
blank-posterior endpointer evaluates once per 60 ms frame (as a parallel
endpointer would) and the endpointed hypothesis keeps only tokens emitted
no later than the stop decision; late emissions become deletions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import FRAME_MS, RAW_FRAMES_PER_FRAME, Utterance
from .domains import Domain
from .encoder import EncoderConfig, StreamingEncoder, stack_features
from .metrics import align_tokens
from .model import ModelConfig
from .predictor_joiner import (
    joiner_logprobs_np,
    joiner_project_frames_np,
    joiner_project_state_np,
    predictor_init_state,
    predictor_step_np,
)

MAX_SYMBOLS_PER_FRAME = 10


@dataclass(frozen=True)
class EmissionEvent:
    token: int
    emission_ms: int      # audio consumed when the token first appeared
    frame: int            # lattice t
    label_index: int      # lattice u (count of labels emitted before this one)


@dataclass(frozen=True)
class DecodeResult:
    events: tuple[EmissionEvent, ...]
    entry_blank_posteriors: np.ndarray   # per frame, on arrival at that frame
    audio_ms: int

    @property
    def hypothesis(self) -> tuple[int, ...]:
        return tuple(e.token for e in self.events)


def greedy_streaming_decode(weights: dict[str, np.ndarray], config: ModelConfig,
                            utterance: Utterance, center_frames: int,
                            right_context_frames: int,
                            max_symbols_per_frame: int = MAX_SYMBOLS_PER_FRAME
                            ) -> DecodeResult:
    """Chunked greedy decode of one utterance.

    Tokens emitted while processing frames of a chunk get emission time
    ``min(chunk_end + right_context, T) * frame_ms``: the moment that chunk
    plus its look-ahead was available.  The per-frame emission cap guards
    against degenerate loops on untrained models.
    """
    enc_cfg: EncoderConfig = config.encoder
    domain = utterance.domain if enc_cfg.use_domain_vector else None
    stacked = stack_features(utterance.feats_raw, enc_cfg.stack_factor,
                             enc_cfg.stack_stride)
    T = stacked.shape[0]
    session = StreamingEncoder(weights, enc_cfg, center_frames,
                               right_context_frames, domain)
    pj_cfg = config.predictor_joiner()
    g_row, state = predictor_step_np(weights, predictor_init_state(pj_cfg),
                                     config.blank, pj_cfg)
    g_proj = joiner_project_state_np(weights, g_row)

    events: list[EmissionEvent] = []
    entry_blank = np.zeros(T)
    u = 0
    for start in range(0, T, center_frames):
        end = min(start + center_frames, T)
        look_end = min(end + right_context_frames, T)
        emb = session.step(start, stacked[start:end], stacked[end:look_end])
        availability_ms = look_end * FRAME_MS
        f_proj = joiner_project_frames_np(weights, emb)
        for offset in range(end - start):
            t = start + offset
            logp = joiner_logprobs_np(weights, f_proj[offset], g_proj)
            entry_blank[t] = np.exp(logp[config.blank])
            emitted = 0
            while emitted < max_symbols_per_frame:
                best = int(np.argmax(logp))
                if best == config.blank:
                    break
                events.append(EmissionEvent(best, availability_ms, t, u))
                u += 1
                emitted += 1
                g_row, state = predictor_step_np(weights, state, best, pj_cfg)
                g_proj = joiner_project_state_np(weights, g_row)
                logp = joiner_logprobs_np(weights, f_proj[offset], g_proj)
    return DecodeResult(tuple(events), entry_blank, int(T * FRAME_MS))


# ---------------------------------------------------------------------
# endpointing
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class EndpointDecision:
    decision_ms: int
    frame: int
    fired: bool
    threshold: float
    patience: int
    streak: tuple[float, ...]    # the posteriors that triggered the decision


class Endpointer:
    """Declares an endpoint after ``patience`` consecutive 60 ms evaluations
    with blank posterior above ``threshold``.  Fires at most once."""

    def __init__(self, threshold: float = 0.95, patience: int = 5,
                 frame_ms: int = FRAME_MS):
        self.threshold = threshold
        self.patience = patience
        self.frame_ms = frame_ms
        self._streak: list[float] = []
        self._frame = -1
        self.decision: EndpointDecision | None = None

    def step(self, blank_posterior: float) -> EndpointDecision | None:
        """Feed one per-frame blank posterior; returns the decision when made."""
        if self.decision is not None:
            return None
        self._frame += 1
        if blank_posterior > self.threshold:
            self._streak.append(float(blank_posterior))
        else:
            self._streak = []
        if len(self._streak) >= self.patience:
            self.decision = EndpointDecision(
                decision_ms=(self._frame + 1) * self.frame_ms,
                frame=self._frame, fired=True, threshold=self.threshold,
                patience=self.patience, streak=tuple(self._streak[-self.patience:]))
            return self.decision
        return None


def scan_endpoint(blank_posteriors: np.ndarray, threshold: float = 0.95,
                  patience: int = 5, frame_ms: int = FRAME_MS) -> EndpointDecision | None:
    ep = Endpointer(threshold, patience, frame_ms)
    for p in blank_posteriors:
        decision = ep.step(float(p))
        if decision is not None:
            return decision
    return None


# ---------------------------------------------------------------------
# latency accounting
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyReport:
    matched_delays_ms: tuple[float, ...]
    endpoint_latency_ms: float | None = None
    endpoint_fired: bool | None = None

    @property
    def avg_finalization_delay_ms(self) -> float | None:
        if not self.matched_delays_ms:
            return None
        return float(np.mean(self.matched_delays_ms))


def finalization_delay(events: tuple[EmissionEvent, ...], ref_tokens,
                       ref_end_frames, frame_ms: int = FRAME_MS) -> LatencyReport:
    """Delays between each correctly recognized token's reference end time
    and its emission.  Hypothesis/reference correspondence is the minimal
    edit alignment; only matched (equal) tokens contribute."""
    ref_tokens = list(ref_tokens)
    if not ref_tokens:
        raise ValueError("finalization_delay: empty reference")
    hyp_tokens = [e.token for e in events]
    delays = []
    for op, i, j in align_tokens(ref_tokens, hyp_tokens):
        if op == "match":
            end_ms = (int(ref_end_frames[i]) + 1) * frame_ms
            delays.append(float(events[j].emission_ms - end_ms))
    return LatencyReport(tuple(delays))


@dataclass(frozen=True)
class EndpointedResult:
    hypothesis: tuple[int, ...]
    kept_events: tuple[EmissionEvent, ...]
    all_events: tuple[EmissionEvent, ...]
    decision: EndpointDecision
    latency: LatencyReport


def endpointed_decode(weights: dict[str, np.ndarray], config: ModelConfig,
                      utterance: Utterance, center_frames: int,
                      right_context_frames: int, threshold: float = 0.95,
                      patience: int = 5) -> EndpointedResult:
    """Decode with the endpointer in the loop (voice-command evaluation mode).

    Decoding halts at the stop decision: tokens whose emission time exceeds
    it are dropped (early cuts).  Finalization delays are measured on the
    untruncated emission stream so late emissions are not survivor-biased
    out of the average; if the endpointer never fires the decision falls at
    audio end and is flagged.
    """
    result = greedy_streaming_decode(weights, config, utterance, center_frames,
                                     right_context_frames)
    decision = scan_endpoint(result.entry_blank_posteriors, threshold, patience)
    if decision is None:
        decision = EndpointDecision(decision_ms=result.audio_ms,
                                    frame=len(result.entry_blank_posteriors) - 1,
                                    fired=False, threshold=threshold,
                                    patience=patience, streak=())
    kept = tuple(e for e in result.events if e.emission_ms <= decision.decision_ms)
    fd = finalization_delay(result.events, utterance.tokens,
                            utterance.token_end_frames)
    latency = LatencyReport(fd.matched_delays_ms,
                            endpoint_latency_ms=float(decision.decision_ms
                                                      - utterance.speech_end_ms),
                            endpoint_fired=decision.fired)
    return EndpointedResult(tuple(e.token for e in kept), kept, result.events,
                            decision, latency)


def write_emission_trace(path, items: list[tuple[str, tuple[EmissionEvent, ...]]]) -> None:
    """Line-delimited trace: utterance id, token, emission ms, t, u."""
    with open(path, "w") as f:
        f.write("utterance_id\ttoken\temission_ms\tframe\tlabel_index\n")
        for uid, events in items:
            for e in events:
                f.write(f"{uid}\t{e.token}\t{e.emission_ms}\t{e.frame}\t{e.label_index}\n")
