"""Deterministic two-domain synthetic corpus with exact frame alignments.

Each of the 16 labels owns a fixed 8-dim signature vector; an utterance is a
token sequence rendered as 60 ms frames carrying the token's signature, six
10 ms feature rows per frame, with Gaussian noise on top.  Silence (zero
signature plus noise) trails every utterance so endpointing has something to
detect.  Voice-command utterances are short (2-6 tokens); dictation is long
(10-40 tokens).  Everything is a pure function of (domain, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domains import Domain, parse_domain
from .encoder import stack_features
from .lattice import Alignment

NUM_LABELS = 16
FEAT_DIM = 8
FRAME_MS = 60
RAW_FRAMES_PER_FRAME = 6          # 10 ms rows per 60 ms frame
NOISE_SIGMA = 0.1
SIGNATURE_SEED = 411

TOKEN_COUNT_RANGE = {Domain.VCMD: (2, 6), Domain.DICTATION: (10, 40)}
TOKEN_FRAMES_RANGE = (3, 8)
SILENCE_FRAMES_RANGE = (5, 15)


def label_signatures() -> np.ndarray:
    """(NUM_LABELS+1, FEAT_DIM) rows; row 0 is the silence (zero) signature."""
    rng = np.random.default_rng(SIGNATURE_SEED)
    sig = rng.standard_normal((NUM_LABELS + 1, FEAT_DIM))
    sig[0] = 0.0
    return sig


_SIGNATURES = label_signatures()


@dataclass(frozen=True)
class Utterance:
    uid: str
    domain: Domain
    tokens: np.ndarray              # label ids, 1..NUM_LABELS
    token_end_frames: np.ndarray    # last 60 ms frame of each token
    num_frames: int                 # total 60 ms frames incl. trailing silence
    feats_raw: np.ndarray           # (num_frames * 6, FEAT_DIM) 10 ms features
    speech_end_ms: int

    @property
    def audio_ms(self) -> int:
        return self.num_frames * FRAME_MS

    @property
    def alignment(self) -> Alignment:
        return Alignment(self.token_end_frames, self.num_frames - 1)

    def stacked_features(self) -> np.ndarray:
        return stack_features(self.feats_raw, RAW_FRAMES_PER_FRAME, RAW_FRAMES_PER_FRAME)


def generate_utterance(domain: Domain, seed: int, uid: str | None = None,
                       noise_sigma: float = NOISE_SIGMA) -> Utterance:
    """Bit-identical for identical (domain, seed, noise_sigma)."""
    rng = np.random.default_rng(seed)
    lo, hi = TOKEN_COUNT_RANGE[domain]
    n_tokens = int(rng.integers(lo, hi + 1))
    tokens = rng.integers(1, NUM_LABELS + 1, n_tokens).astype(np.int64)
    durations = rng.integers(TOKEN_FRAMES_RANGE[0], TOKEN_FRAMES_RANGE[1] + 1, n_tokens)
    silence = int(rng.integers(SILENCE_FRAMES_RANGE[0], SILENCE_FRAMES_RANGE[1] + 1))

    frame_labels = np.concatenate([np.repeat(tokens, durations),
                                   np.zeros(silence, dtype=np.int64)])
    num_frames = frame_labels.size
    raw_labels = np.repeat(frame_labels, RAW_FRAMES_PER_FRAME)
    feats = _SIGNATURES[raw_labels] + noise_sigma * rng.standard_normal(
        (raw_labels.size, FEAT_DIM))

    token_end_frames = np.cumsum(durations) - 1
    speech_end_ms = int((token_end_frames[-1] + 1) * FRAME_MS)
    if uid is None:
        uid = f"{domain.value}-{seed}"
    return Utterance(uid, domain, tokens, token_end_frames.astype(np.int64),
                     int(num_frames), feats, speech_end_ms)


def generate_corpus(utts_per_domain: int, seed: int,
                    noise_sigma: float = NOISE_SIGMA) -> list[Utterance]:
    """Balanced 50/50 corpus; per-utterance seeds derive from the corpus seed."""
    child_seeds = np.random.SeedSequence(seed).generate_state(2 * utts_per_domain)
    out = []
    for d_idx, domain in enumerate((Domain.VCMD, Domain.DICTATION)):
        for i in range(utts_per_domain):
            s = int(child_seeds[d_idx * utts_per_domain + i])
            out.append(generate_utterance(domain, s, uid=f"{domain.value}-{i:05d}",
                                          noise_sigma=noise_sigma))
    return out


def nearest_signature_labels(feats_raw: np.ndarray) -> np.ndarray:
    """Classify each 10 ms row to its nearest signature (0 = silence)."""
    d2 = ((feats_raw[:, None, :] - _SIGNATURES[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


# ---------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    utterances: tuple[Utterance, ...]
    domain: Domain

    @property
    def size(self) -> int:
        return len(self.utterances)

    @property
    def max_frames(self) -> int:
        return max(u.num_frames for u in self.utterances)

    def padded_features(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-padded stacked features (B, T, stacked_dim) plus frame lengths."""
        T = self.max_frames
        stacked = [u.stacked_features() for u in self.utterances]
        dim = stacked[0].shape[1]
        feats = np.zeros((self.size, T, dim))
        lengths = np.zeros(self.size, dtype=np.int64)
        for b, s in enumerate(stacked):
            feats[b, :s.shape[0]] = s
            lengths[b] = s.shape[0]
        return feats, lengths

    def padding_mask(self) -> np.ndarray:
        """(B, T) bool; True on real frames, False on padding."""
        T = self.max_frames
        mask = np.zeros((self.size, T), dtype=bool)
        for b, u in enumerate(self.utterances):
            mask[b, :u.num_frames] = True
        return mask


def make_batches(corpus: list[Utterance], batch_size: int, seed: int) -> list[Batch]:
    """Domain-pure batches covering every utterance exactly once, order
    shuffled by seed."""
    if batch_size < 1:
        raise ValueError("make_batches: batch_size must be >= 1")
    if not corpus:
        raise ValueError("make_batches: empty corpus")
    rng = np.random.default_rng(seed)
    batches: list[Batch] = []
    for domain in (Domain.VCMD, Domain.DICTATION):
        pool = [u for u in corpus if u.domain == domain]
        order = rng.permutation(len(pool))
        for i in range(0, len(pool), batch_size):
            chunk = tuple(pool[j] for j in order[i:i + batch_size])
            if chunk:
                batches.append(Batch(chunk, domain))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


# ---------------------------------------------------------------------
# on-disk format: line-delimited records + flat float64 feature blob
# ---------------------------------------------------------------------

def export_corpus(directory, corpus: list[Utterance], name: str = "corpus") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(directory / f"{name}.jsonl", "w") as meta_f, \
            open(directory / f"{name}.bin", "wb") as blob_f:
        for u in corpus:
            blob = np.ascontiguousarray(u.feats_raw, dtype="<f8").tobytes()
            record = {
                "id": u.uid,
                "domain": u.domain.value,
                "tokens": u.tokens.tolist(),
                "token_end_frames": u.token_end_frames.tolist(),
                "num_frames": u.num_frames,
                "speech_end_ms": u.speech_end_ms,
                "offset": offset,
                "raw_frames": int(u.feats_raw.shape[0]),
                "feat_dim": int(u.feats_raw.shape[1]),
            }
            meta_f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            blob_f.write(blob)
            offset += len(blob)


def load_corpus(directory, name: str = "corpus") -> list[Utterance]:
    directory = Path(directory)
    blob = (directory / f"{name}.bin").read_bytes()
    out = []
    with open(directory / f"{name}.jsonl") as f:
        for line in f:
            r = json.loads(line)
            count = r["raw_frames"] * r["feat_dim"]
            feats = np.frombuffer(blob, dtype="<f8", count=count,
                                  offset=r["offset"]).reshape(r["raw_frames"],
                                                              r["feat_dim"])
            out.append(Utterance(
                uid=r["id"], domain=parse_domain(r["domain"]),
                tokens=np.asarray(r["tokens"], dtype=np.int64),
                token_end_frames=np.asarray(r["token_end_frames"], dtype=np.int64),
                num_frames=r["num_frames"], feats_raw=feats.astype(np.float64),
                speech_end_ms=r["speech_end_ms"]))
    return out
