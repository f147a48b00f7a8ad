"""Experiment grid, training loop, evaluation sweeps.

The grid couples three knobs: the encoder center size each domain trains
(and decodes) with, the per-domain right buffer of the restricted lattice
loss, and whether the one-hot domain vector is injected.  Inference context
always matches the training context per domain; random-context models decode
with 120 ms for voice commands and 600 ms for dictation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tx
from .corpus import FRAME_MS, Batch, Utterance, make_batches
from .domains import Domain
from .encoder import EncoderConfig, encoder_forward, plan_contexts
from .experiments_util import derive_seed
from .lattice import build_band, ms_to_frames, transducer_loss_node
from .metrics import ReportRow, RtfSample, WerBreakdown, measure_rtf, wer
from .model import ModelConfig, TransducerModel
from .optim import Adam, NonFiniteGradientError
from .runtime import endpointed_decode, greedy_streaming_decode


class DivergedError(RuntimeError):
    """Training hit a non-finite loss or gradient; the run is aborted."""


# ---------------------------------------------------------------------
# the experiment grid
# ---------------------------------------------------------------------

RANDOM_CONTEXT_MIN_FRAMES = 2     # 120 ms
RANDOM_CONTEXT_MAX_FRAMES = 20    # 1200 ms
LEFT_BUFFER_MS = 300


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    br_vcmd_ms: int
    br_dict_ms: int
    domain_vector: bool
    infer_center_vcmd_ms: int
    infer_center_dict_ms: int
    train_center_vcmd_ms: int | None = None   # None => random per batch
    train_center_dict_ms: int | None = None
    bl_ms: int = LEFT_BUFFER_MS

    @property
    def random_context(self) -> bool:
        return self.train_center_vcmd_ms is None

    @property
    def emf_ctx_label(self) -> str:
        if self.random_context:
            return "Random"
        if self.train_center_vcmd_ms == self.train_center_dict_ms:
            return str(self.train_center_vcmd_ms)
        return f"{self.train_center_vcmd_ms}/{self.train_center_dict_ms}"

    def train_center_ms(self, domain: Domain) -> int | None:
        return self.train_center_vcmd_ms if domain is Domain.VCMD \
            else self.train_center_dict_ms

    def infer_center_ms(self, domain: Domain) -> int:
        return self.infer_center_vcmd_ms if domain is Domain.VCMD \
            else self.infer_center_dict_ms

    def right_buffer_ms(self, domain: Domain) -> int:
        return self.br_vcmd_ms if domain is Domain.VCMD else self.br_dict_ms

    def base_segment_frames(self) -> int:
        """Base window the context-altering split starts from."""
        if self.random_context:
            return RANDOM_CONTEXT_MAX_FRAMES
        return max(ms_to_frames(self.train_center_vcmd_ms, FRAME_MS),
                   ms_to_frames(self.train_center_dict_ms, FRAME_MS))


def _fixed(name, ctx, br_v, br_d, dvec):
    return ExperimentConfig(name, br_v, br_d, dvec, ctx, ctx, ctx, ctx)


def _flexible(name, ctx_v, ctx_d, dvec):
    return ExperimentConfig(name, 420, 900, dvec, 120, 600, ctx_v, ctx_d)


REGISTRY: dict[str, ExperimentConfig] = {c.name: c for c in [
    _fixed("B1", 120, 420, 420, False),
    _fixed("B2", 300, 600, 600, False),
    _fixed("B3", 600, 900, 900, False),
    _fixed("C2", 300, 420, 600, False),
    _fixed("C3", 600, 420, 900, False),
    _fixed("D1", 120, 420, 420, True),
    _fixed("D2", 300, 600, 600, True),
    _fixed("D3", 600, 900, 900, True),
    _fixed("E2", 300, 420, 600, True),
    _fixed("E3", 600, 420, 900, True),
    _flexible("R1", None, None, False),
    _flexible("R2", None, None, True),
    _flexible("S1", 120, 600, False),
    _flexible("S2", 120, 600, True),
]}


def registry(name: str) -> ExperimentConfig:
    if name not in REGISTRY:
        raise KeyError(f"unknown experiment {name!r}; valid names: "
                       f"{sorted(REGISTRY)}")
    return REGISTRY[name]


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingHyper:
    epochs: int = 8
    batch_size: int = 8
    learning_rate: float = 3e-3
    warmup_steps: int = 200
    right_context_frames: int = 1


@dataclass
class TrainingHistory:
    epoch_losses: list[float] = field(default_factory=list)
    batch_log: list[tuple[str, int, int]] = field(default_factory=list)
    wall_seconds: float = 0.0


def _pick_center_frames(exp: ExperimentConfig, domain: Domain,
                        ctx_rng: np.random.Generator) -> int:
    ms = exp.train_center_ms(domain)
    if ms is None:
        return int(ctx_rng.integers(RANDOM_CONTEXT_MIN_FRAMES,
                                    RANDOM_CONTEXT_MAX_FRAMES + 1))
    return ms_to_frames(ms, FRAME_MS)


def batch_loss(model: TransducerModel, batch: Batch, exp: ExperimentConfig,
               center_frames: int, right_context_frames: int,
               train: bool, rng: np.random.Generator | None) -> tx.Tensor:
    """Mean per-utterance lattice loss of one domain-pure batch."""
    enc_cfg = model.config.encoder
    feats, lengths = batch.padded_features()
    plan = plan_contexts(batch.max_frames, exp.base_segment_frames(), center_frames,
                         right_context_frames, enc_cfg.left_context_cap)
    domain = batch.domain if enc_cfg.use_domain_vector else None
    enc_out = encoder_forward(model.params, feats, plan, enc_cfg, domain=domain,
                              lengths=lengths, train=train, rng=rng)
    token_lens = np.array([u.tokens.size for u in batch.utterances])
    max_u = int(token_lens.max())
    tokens = np.zeros((batch.size, max_u), dtype=np.int64)
    for b, u in enumerate(batch.utterances):
        tokens[b, :u.tokens.size] = u.tokens
    g = model.predict_batch(tokens, lengths=token_lens)

    br_ms = exp.right_buffer_ms(batch.domain)
    losses = []
    for b, utt in enumerate(batch.utterances):
        T, U = utt.num_frames, utt.tokens.size
        logits = model.joint(tx.take(enc_out, (b, slice(0, T))),
                             tx.take(g, (b, slice(0, U + 1))))
        band = build_band(utt.alignment, exp.bl_ms, br_ms, FRAME_MS, T)
        losses.append(transducer_loss_node(logits, utt.tokens, band))
    stacked = tx.concat(losses, axis=0)                      # (B, 1)
    mean = tx.matmul(tx.constant(np.full((1, batch.size), 1.0 / batch.size)), stacked)
    return mean


def mean_corpus_loss(model: TransducerModel, corpus: list[Utterance],
                     exp: ExperimentConfig, hyper: TrainingHyper, seed: int) -> float:
    """Evaluation-mode mean batch loss over the whole corpus (no updates)."""
    ctx_rng = np.random.default_rng(derive_seed(seed, "ctx-eval"))
    values = []
    with tx.no_grad():
        for batch in make_batches(corpus, hyper.batch_size, seed):
            center = _pick_center_frames(exp, batch.domain, ctx_rng)
            loss = batch_loss(model, batch, exp, center,
                              hyper.right_context_frames, train=False, rng=None)
            values.append(loss.item())
    return float(np.mean(values))


def train_model(exp: ExperimentConfig, corpus: list[Utterance], hyper: TrainingHyper,
                seed: int, log=print) -> tuple[TransducerModel, TrainingHistory]:
    """Train the toy model for one experiment configuration.

    Batches are domain-pure; the batch's domain selects the center size (or
    a random draw), the loss right-buffer, and the domain vector.  One
    machine-readable summary line per epoch.
    """
    enc_cfg = EncoderConfig(use_domain_vector=exp.domain_vector)
    model = TransducerModel.create(ModelConfig(encoder=enc_cfg),
                                   derive_seed(seed, exp.name, "init"))
    opt = Adam(model.params, lr=hyper.learning_rate)
    ctx_rng = np.random.default_rng(derive_seed(seed, exp.name, "ctx"))
    drop_rng = np.random.default_rng(derive_seed(seed, exp.name, "dropout"))
    history = TrainingHistory()
    start = time.perf_counter()
    step = 0
    for epoch in range(hyper.epochs):
        epoch_start = time.perf_counter()
        batches = make_batches(corpus, hyper.batch_size,
                               derive_seed(seed, exp.name, "epoch", epoch))
        losses = []
        for batch in batches:
            center = _pick_center_frames(exp, batch.domain, ctx_rng)
            history.batch_log.append((batch.domain.value, center,
                                      exp.right_buffer_ms(batch.domain)))
            loss = batch_loss(model, batch, exp, center,
                              hyper.right_context_frames, train=True, rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedError(
                    f"{exp.name}: non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            step += 1
            lr = hyper.learning_rate * min(1.0, step / max(1, hyper.warmup_steps))
            try:
                opt.step(lr)
            except NonFiniteGradientError as err:
                raise DivergedError(f"{exp.name}: {err}") from err
            opt.zero_grad()
            losses.append(value)
        history.epoch_losses.append(float(np.mean(losses)))
        if log is not None:
            log(f"exp={exp.name} epoch={epoch} mean_loss={history.epoch_losses[-1]:.4f} "
                f"wall_s={time.perf_counter() - epoch_start:.1f}")
    history.wall_seconds = time.perf_counter() - start
    return model, history


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    experiment: str
    dict_wer: WerBreakdown
    vcmd_wer: WerBreakdown
    avg_fd_ms: float | None
    l_avg_ms: float | None
    endpoint_fired_frac: float
    rtf: RtfSample | None

    def key_metrics(self) -> tuple:
        """Everything except wall-clock RTF (which varies run to run)."""
        return (self.experiment,
                (self.dict_wer.substitutions, self.dict_wer.insertions,
                 self.dict_wer.deletions, self.dict_wer.ref_len),
                (self.vcmd_wer.substitutions, self.vcmd_wer.insertions,
                 self.vcmd_wer.deletions, self.vcmd_wer.ref_len),
                self.avg_fd_ms, self.l_avg_ms)

    def to_row(self, exp: ExperimentConfig) -> ReportRow:
        return ReportRow(
            experiment=self.experiment, emf_ctx_ms=exp.emf_ctx_label,
            br_vcmd_ms=exp.br_vcmd_ms, br_dict_ms=exp.br_dict_ms,
            domain_vec=exp.domain_vector,
            dict_wer=round(self.dict_wer.wer, 2),
            vcmd_wer=round(self.vcmd_wer.wer, 2),
            vcmd_del=round(self.vcmd_wer.del_pct, 2),
            avg_fd_ms=None if self.avg_fd_ms is None else round(self.avg_fd_ms, 1),
            l_avg_ms=None if self.l_avg_ms is None else round(self.l_avg_ms, 1),
            rtf=None if self.rtf is None else round(self.rtf.ratio, 4))


def evaluate_model(model: TransducerModel, exp: ExperimentConfig,
                   eval_corpus: list[Utterance], hyper: TrainingHyper,
                   rtf_utterances: int = 32, rtf_repetitions: int = 3) -> SweepResult:
    """Dictation scored without the endpointer, voice commands with it."""
    weights = model.weights
    rc = hyper.right_context_frames

    dict_counts = WerBreakdown()
    dict_utts = [u for u in eval_corpus if u.domain is Domain.DICTATION]
    dict_center = ms_to_frames(exp.infer_center_dict_ms, FRAME_MS)
    for utt in dict_utts:
        result = greedy_streaming_decode(weights, model.config, utt, dict_center, rc)
        dict_counts = dict_counts + wer(list(utt.tokens), list(result.hypothesis))

    vcmd_counts = WerBreakdown()
    delays: list[float] = []
    endpoint_lat: list[float] = []
    fired = 0
    vcmd_utts = [u for u in eval_corpus if u.domain is Domain.VCMD]
    vcmd_center = ms_to_frames(exp.infer_center_vcmd_ms, FRAME_MS)
    for utt in vcmd_utts:
        result = endpointed_decode(weights, model.config, utt, vcmd_center, rc)
        vcmd_counts = vcmd_counts + wer(list(utt.tokens), list(result.hypothesis))
        delays.extend(result.latency.matched_delays_ms)
        endpoint_lat.append(result.latency.endpoint_latency_ms)
        fired += int(result.decision.fired)

    rtf = None
    if rtf_utterances > 0 and dict_utts:
        subset = dict_utts[:rtf_utterances]

        def decode_once():
            for u in subset:
                greedy_streaming_decode(weights, model.config, u, dict_center, rc)

        audio_s = sum(u.audio_ms for u in subset) / 1000.0
        rtf = measure_rtf(decode_once, audio_s, repetitions=rtf_repetitions)

    return SweepResult(
        experiment=exp.name, dict_wer=dict_counts, vcmd_wer=vcmd_counts,
        avg_fd_ms=float(np.mean(delays)) if delays else None,
        l_avg_ms=float(np.mean(endpoint_lat)) if endpoint_lat else None,
        endpoint_fired_frac=fired / max(1, len(vcmd_utts)), rtf=rtf)


def run_experiment(exp: ExperimentConfig | str, train_corpus: list[Utterance],
                   eval_corpus: list[Utterance], hyper: TrainingHyper, seed: int,
                   log=print) -> tuple[TransducerModel, SweepResult]:
    if isinstance(exp, str):
        exp = registry(exp)
    model, _ = train_model(exp, train_corpus, hyper, seed, log=log)
    return model, evaluate_model(model, exp, eval_corpus, hyper)


def run_sweep(names: list[str], train_corpus: list[Utterance],
              eval_corpus: list[Utterance], hyper: TrainingHyper, seed: int,
              log=print) -> list[tuple[ExperimentConfig, TransducerModel, SweepResult]]:
    """Train and evaluate each named experiment; results ordered by name."""
    configs = [registry(n) for n in names]
    out = []
    for exp in sorted(configs, key=lambda c: c.name):
        model, result = run_experiment(exp, train_corpus, eval_corpus, hyper,
                                       seed, log=log)
        out.append((exp, model, result))
    return out
