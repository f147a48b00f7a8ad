"""Block-processing self-attention encoder with look-ahead and domain conditioning.

Utterance frames are tiled into fixed-size center blocks; each block attends
its capped left history, itself, and a short look-ahead window.  Look-ahead
frames participate as *copies*: per segment, the raw look-ahead rows are
appended to the sequence and updated layer by layer inside the segment's own
attention group, so stacking layers never widens the look-ahead.  The same
computation runs two ways: a batched masked forward over the whole utterance
(training) and an incremental chunk-by-chunk path with per-layer caches
(decoding); both produce equal embeddings.

Context altering: a center of ``base_segment`` frames can be re-split so that
only its trailing ``domain_center`` frames remain the center and the leading
remainder joins the left block.  The attended span is unchanged; what changes
is the block granularity, i.e. how much new audio must arrive before the next
group of frames can be encoded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tx
from .domains import DOMAIN_VECTOR_DIM, Domain, domain_vector

MASK_NEG = -1.0e30


# ---------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    width: int = 64
    ffn_width: int = 128
    dropout: float = 0.1
    feat_dim: int = 8            # raw feature dimension at 10 ms
    stack_factor: int = 6
    stack_stride: int = 6
    frame_ms: int = 60           # grid after stacking
    use_domain_vector: bool = False
    max_positions: int = 512
    left_context_cap: int | None = 20   # frames; None = unlimited history

    def __post_init__(self):
        if self.width % self.num_heads:
            raise ValueError("encoder config: width must divide evenly across heads")
        if self.stack_factor != self.stack_stride:
            raise ValueError("encoder config: stacking factor must equal stride")

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads

    @property
    def stacked_dim(self) -> int:
        return self.feat_dim * self.stack_factor


TOY_CONFIG = EncoderConfig()

# Full-scale reference shape (10 layers x 8 heads x 512, 80-dim features);
# kept for documentation, never exercised by the test suite.
FULL_SCALE_CONFIG = EncoderConfig(
    num_layers=10, num_heads=8, width=512, ffn_width=2048, feat_dim=80,
    max_positions=4096)


# ---------------------------------------------------------------------
# feature stacking
# ---------------------------------------------------------------------

def stack_features(raw: np.ndarray, factor: int = 6, stride: int = 6) -> np.ndarray:
    """Stack ``factor`` consecutive raw frames with hop ``stride``.

    Output length is ceil(len/stride); the final window is zero-padded.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValueError(f"stack_features: expected a non-empty (frames, dim) array, "
                         f"got shape {raw.shape}")
    n, d = raw.shape
    out_len = -(-n // stride)
    padded = np.zeros((out_len * stride + max(0, factor - stride), d))
    padded[:n] = raw
    windows = [padded[i * stride: i * stride + factor].reshape(-1) for i in range(out_len)]
    return np.stack(windows, axis=0)


# ---------------------------------------------------------------------
# context plans
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentBlocks:
    """Frame ranges for one segment; all half-open intervals on the 60 ms grid.

    ``base_split`` marks where this segment's base-length window begins:
    frames in [base_split, center_start) belonged to the base center and were
    re-assigned into the left block by context altering.
    """

    index: int
    left_start: int
    base_split: int
    center_start: int
    center_end: int
    right_end: int

    @property
    def left_len(self) -> int:
        return self.center_start - self.left_start

    @property
    def center_len(self) -> int:
        return self.center_end - self.center_start

    @property
    def right_len(self) -> int:
        return self.right_end - self.center_end

    @property
    def reassigned_len(self) -> int:
        """Frames moved from the base center into the left block."""
        return self.center_start - self.base_split


@dataclass(frozen=True)
class ContextPlan:
    """Per-utterance segmentation into (left, center, right) blocks."""

    num_frames: int
    base_segment: int
    domain_center: int
    right_context: int
    left_cap: int | None
    segments: tuple[SegmentBlocks, ...] = field(default_factory=tuple)

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def segment_of(self, frame: int) -> int:
        return frame // self.domain_center

    def to_dict(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "base_segment": self.base_segment,
            "domain_center": self.domain_center,
            "right_context": self.right_context,
            "left_cap": self.left_cap,
            "segments": [
                {"left": [s.left_start, s.center_start],
                 "center": [s.center_start, s.center_end],
                 "right": [s.center_end, s.right_end],
                 "base_split": s.base_split}
                for s in self.segments
            ],
        }


def plan_contexts(num_frames: int, base_segment: int, domain_center: int,
                  right_context: int, left_cap: int | None = None) -> ContextPlan:
    """Tile ``num_frames`` into centers of ``domain_center`` frames.

    Each segment's base window is ``base_segment`` frames ending where its
    center ends; the leading ``base_segment - domain_center`` frames of that
    window are re-assigned to the left block (context altering).  The grown
    left block is then truncated to the ``left_cap`` most recent frames.
    With ``domain_center == base_segment`` the split is the identity and the
    plan is the plain block layout.
    """
    if num_frames < 1:
        raise ValueError("plan_contexts: need at least one frame")
    if domain_center < 1:
        raise ValueError("plan_contexts: domain_center must be positive")
    if domain_center > base_segment:
        raise ValueError(f"plan_contexts: domain_center {domain_center} exceeds "
                         f"base_segment {base_segment}")
    if right_context < 0 or (left_cap is not None and left_cap < 0):
        raise ValueError("plan_contexts: negative context size")
    segments = []
    count = -(-num_frames // domain_center)
    for i in range(count):
        center_start = i * domain_center
        center_end = min((i + 1) * domain_center, num_frames)
        nominal_end = (i + 1) * domain_center
        base_split = max(0, nominal_end - base_segment)
        left_start = 0 if left_cap is None else max(0, center_start - left_cap)
        right_end = min(center_end + right_context, num_frames)
        segments.append(SegmentBlocks(i, left_start, base_split, center_start,
                                      center_end, right_end))
    return ContextPlan(num_frames, base_segment, domain_center, right_context,
                       left_cap, tuple(segments))


def build_attention_mask(plan: ContextPlan) -> np.ndarray:
    """(T, T) boolean mask: frame q may attend frame k iff k lies in q's
    segment's left block, center, or look-ahead window."""
    T = plan.num_frames
    mask = np.zeros((T, T), dtype=bool)
    for seg in plan.segments:
        mask[seg.center_start: seg.center_end, seg.left_start: seg.right_end] = True
    return mask


def right_copy_layout(plan: ContextPlan) -> tuple[np.ndarray, np.ndarray]:
    """Source frame and owning segment for every look-ahead copy row."""
    sources, owners = [], []
    for seg in plan.segments:
        for f in range(seg.center_end, seg.right_end):
            sources.append(f)
            owners.append(seg.index)
    return np.asarray(sources, dtype=np.int64), np.asarray(owners, dtype=np.int64)


def build_augmented_attention_mask(plan: ContextPlan) -> tuple[np.ndarray, np.ndarray]:
    """Mask over [utterance frames; look-ahead copies].

    Returns ``(mask, copy_sources)`` where mask is (T+R, T+R) boolean.  A
    query in segment i (center frame or copy row) attends the segment's left
    and center utterance columns plus the segment's own copy columns; future
    utterance columns are never visible, which pins the look-ahead bound
    regardless of depth.
    """
    T = plan.num_frames
    sources, owners = right_copy_layout(plan)
    S = T + sources.size
    mask = np.zeros((S, S), dtype=bool)
    for seg in plan.segments:
        copy_cols = T + np.flatnonzero(owners == seg.index)
        rows = list(range(seg.center_start, seg.center_end)) + list(copy_cols)
        for q in rows:
            mask[q, seg.left_start: seg.center_end] = True
            mask[q, copy_cols] = True
    return mask, sources


# ---------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------

def create_encoder_params(config: EncoderConfig, rng: np.random.Generator,
                          prefix: str = "encoder") -> dict[str, tx.Tensor]:
    def dense(fan_in, fan_out):
        return tx.parameter(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))

    w = config.width
    qkv_in = w + (DOMAIN_VECTOR_DIM if config.use_domain_vector else 0)
    params: dict[str, tx.Tensor] = {
        f"{prefix}.input_proj.w": dense(config.stacked_dim, w),
        f"{prefix}.input_proj.b": tx.parameter(np.zeros(w)),
        f"{prefix}.pos_emb": tx.parameter(
            0.02 * rng.standard_normal((config.max_positions, w))),
    }
    for i in range(config.num_layers):
        base = f"{prefix}.layer{i}"
        params[f"{base}.ln1.g"] = tx.parameter(np.ones(w))
        params[f"{base}.ln1.b"] = tx.parameter(np.zeros(w))
        for gate in ("wq", "wk", "wv"):
            params[f"{base}.attn.{gate}"] = dense(qkv_in, w)
        for gate in ("bq", "bk", "bv"):
            params[f"{base}.attn.{gate}"] = tx.parameter(np.zeros(w))
        params[f"{base}.attn.wo"] = dense(w, w)
        params[f"{base}.attn.bo"] = tx.parameter(np.zeros(w))
        params[f"{base}.ln2.g"] = tx.parameter(np.ones(w))
        params[f"{base}.ln2.b"] = tx.parameter(np.zeros(w))
        params[f"{base}.ffn.w1"] = dense(w, config.ffn_width)
        params[f"{base}.ffn.b1"] = tx.parameter(np.zeros(config.ffn_width))
        params[f"{base}.ffn.w2"] = dense(config.ffn_width, w)
        params[f"{base}.ffn.b2"] = tx.parameter(np.zeros(w))
    return params


def inject_domain_vector(block_inputs: tx.Tensor, vec: np.ndarray | None,
                         enabled: bool) -> tx.Tensor:
    """Append the one-hot domain vector to every frame vector.

    Applied to each layer's input right before its attention projections.
    """
    if not enabled:
        if vec is not None:
            raise ValueError("domain vector supplied but domain conditioning is disabled")
        return block_inputs
    if vec is None:
        raise ValueError("domain conditioning enabled but no domain vector supplied")
    tiled = np.broadcast_to(vec, block_inputs.shape[:-1] + (vec.size,))
    return tx.concat([block_inputs, tx.constant(np.ascontiguousarray(tiled))], axis=-1)


# ---------------------------------------------------------------------
# full (batched, masked) forward
# ---------------------------------------------------------------------

def _attention_bias(plan: ContextPlan, lengths: np.ndarray | None,
                    batch: int) -> tuple[np.ndarray, np.ndarray]:
    mask, sources = build_augmented_attention_mask(plan)
    T = plan.num_frames
    S = mask.shape[0]
    if lengths is None:
        bias = np.where(mask, 0.0, MASK_NEG)[None, :, :]
    else:
        col_frame = np.concatenate([np.arange(T), sources])
        valid = col_frame[None, :] < np.asarray(lengths)[:, None]       # (B, S)
        ok = mask[None, :, :] & valid[:, None, :]
        bias = np.where(ok, 0.0, MASK_NEG)
    return bias, sources


def encoder_forward(params: dict[str, tx.Tensor], feats: np.ndarray,
                    plan: ContextPlan, config: EncoderConfig,
                    domain: Domain | None = None,
                    lengths: np.ndarray | None = None,
                    train: bool = False, rng: np.random.Generator | None = None,
                    prefix: str = "encoder") -> tx.Tensor:
    """Encode stacked features (B, T, stacked_dim) -> (B, T, width).

    ``plan`` must cover T frames.  ``lengths`` masks padded frames in a
    batch.  Dropout applies only when ``train`` is set (requires ``rng``).
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    B, T, D = feats.shape
    if T != plan.num_frames:
        raise ValueError(f"encoder_forward: plan covers {plan.num_frames} frames, "
                         f"features have {T}")
    if D != config.stacked_dim:
        raise ValueError(f"encoder_forward: feature dim {D} != configured "
                         f"{config.stacked_dim}")
    if config.use_domain_vector and domain is None:
        raise ValueError("encoder_forward: config expects a domain vector")
    if not config.use_domain_vector and domain is not None:
        raise ValueError("encoder_forward: domain vector supplied but disabled in config")
    if train and rng is None:
        raise ValueError("encoder_forward: training mode needs an rng for dropout")

    vec = domain_vector(domain) if config.use_domain_vector else None
    x = tx.matmul(tx.constant(feats), params[f"{prefix}.input_proj.w"])
    x = tx.add(x, params[f"{prefix}.input_proj.b"])
    pos_ids = np.arange(T) % config.max_positions
    x = tx.add(x, tx.embedding(params[f"{prefix}.pos_emb"], pos_ids))

    bias, sources = _attention_bias(plan, lengths, B)
    if sources.size:
        copies = tx.take(x, (slice(None), sources))
        x = tx.concat([x, copies], axis=1)
    bias_t = tx.constant(bias)

    scale = 1.0 / math.sqrt(config.head_dim)
    for i in range(config.num_layers):
        base = f"{prefix}.layer{i}"
        h = tx.layer_norm(x)
        h = tx.add(tx.multiply(h, params[f"{base}.ln1.g"]), params[f"{base}.ln1.b"])
        h = inject_domain_vector(h, vec, config.use_domain_vector)
        q = tx.add(tx.matmul(h, params[f"{base}.attn.wq"]), params[f"{base}.attn.bq"])
        k = tx.add(tx.matmul(h, params[f"{base}.attn.wk"]), params[f"{base}.attn.bk"])
        v = tx.add(tx.matmul(h, params[f"{base}.attn.wv"]), params[f"{base}.attn.bv"])
        heads = []
        for hd in range(config.num_heads):
            cols = slice(hd * config.head_dim, (hd + 1) * config.head_dim)
            qh = tx.multiply(tx.take(q, (Ellipsis, cols)), scale)
            kh = tx.take(k, (Ellipsis, cols))
            vh = tx.take(v, (Ellipsis, cols))
            heads.append(tx.attention(qh, kh, vh, bias_t))
        ctx = tx.concat(heads, axis=-1)
        ctx = tx.add(tx.matmul(ctx, params[f"{base}.attn.wo"]), params[f"{base}.attn.bo"])
        if train and config.dropout > 0:
            ctx = tx.dropout(ctx, config.dropout, rng)
        x = tx.add(x, ctx)

        h2 = tx.layer_norm(x)
        h2 = tx.add(tx.multiply(h2, params[f"{base}.ln2.g"]), params[f"{base}.ln2.b"])
        inner = tx.relu(tx.add(tx.matmul(h2, params[f"{base}.ffn.w1"]),
                               params[f"{base}.ffn.b1"]))
        ffn = tx.add(tx.matmul(inner, params[f"{base}.ffn.w2"]), params[f"{base}.ffn.b2"])
        if train and config.dropout > 0:
            ffn = tx.dropout(ffn, config.dropout, rng)
        x = tx.add(x, ffn)

    return tx.take(x, (slice(None), slice(0, T)))


# ---------------------------------------------------------------------
# incremental (chunked) forward
# ---------------------------------------------------------------------

class StreamingEncoder:
    """Chunk-by-chunk encoder session over raw numpy weights.

    Feed ``domain_center`` new frames per step together with whatever
    look-ahead frames exist; embeddings for the new frames come back
    immediately.  Per-layer caches hold the last ``left_context_cap`` frames
    of each layer's input, which is exactly the left block the full forward
    attends to.
    """

    def __init__(self, weights: dict[str, np.ndarray], config: EncoderConfig,
                 domain_center: int, right_context: int,
                 domain: Domain | None = None, prefix: str = "encoder"):
        if config.use_domain_vector and domain is None:
            raise ValueError("streaming encoder: config expects a domain vector")
        if not config.use_domain_vector and domain is not None:
            raise ValueError("streaming encoder: domain vector supplied but disabled")
        if domain_center < 1 or right_context < 0:
            raise ValueError("streaming encoder: bad chunk geometry")
        self.w = weights
        self.config = config
        self.prefix = prefix
        self.domain_center = domain_center
        self.right_context = right_context
        self.vec = domain_vector(domain) if config.use_domain_vector else None
        self.next_frame = 0
        self._caches: list[np.ndarray] = [
            np.zeros((0, config.width)) for _ in range(config.num_layers)]

    def _project_in(self, feats: np.ndarray, start: int) -> np.ndarray:
        cfg = self.config
        x = feats @ self.w[f"{self.prefix}.input_proj.w"] + self.w[f"{self.prefix}.input_proj.b"]
        pos_ids = (np.arange(start, start + feats.shape[0])) % cfg.max_positions
        return x + self.w[f"{self.prefix}.pos_emb"][pos_ids]

    def step(self, start_frame: int, center_feats: np.ndarray,
             lookahead_feats: np.ndarray | None = None) -> np.ndarray:
        """Encode one chunk; returns (len(center_feats), width) embeddings."""
        cfg = self.config
        if start_frame != self.next_frame:
            raise ValueError(f"streaming encoder: out-of-order chunk (expected frame "
                             f"{self.next_frame}, got {start_frame})")
        center_feats = np.asarray(center_feats, dtype=np.float64)
        if center_feats.ndim != 2 or center_feats.shape[0] < 1:
            raise ValueError("streaming encoder: empty chunk")
        if center_feats.shape[0] > self.domain_center:
            raise ValueError("streaming encoder: chunk longer than the configured center")
        if lookahead_feats is None:
            lookahead_feats = np.zeros((0, center_feats.shape[1]))
        lookahead_feats = np.asarray(lookahead_feats, dtype=np.float64)
        if lookahead_feats.shape[0] > self.right_context:
            raise ValueError("streaming encoder: look-ahead longer than configured")

        n = center_feats.shape[0]
        block = self._project_in(np.concatenate([center_feats, lookahead_feats], axis=0),
                                 start_frame)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        cap = cfg.left_context_cap
        for i in range(cfg.num_layers):
            base = f"{self.prefix}.layer{i}"
            cache = self._caches[i]
            full_in = np.concatenate([cache, block], axis=0)
            h = tx.layer_norm_np(full_in)
            h = h * self.w[f"{base}.ln1.g"] + self.w[f"{base}.ln1.b"]
            if self.vec is not None:
                h = np.concatenate(
                    [h, np.broadcast_to(self.vec, (h.shape[0], self.vec.size))], axis=1)
            q = h[cache.shape[0]:] @ self.w[f"{base}.attn.wq"] + self.w[f"{base}.attn.bq"]
            k = h @ self.w[f"{base}.attn.wk"] + self.w[f"{base}.attn.bk"]
            v = h @ self.w[f"{base}.attn.wv"] + self.w[f"{base}.attn.bv"]
            outs = []
            for hd in range(cfg.num_heads):
                cols = slice(hd * cfg.head_dim, (hd + 1) * cfg.head_dim)
                scores = (q[:, cols] @ k[:, cols].T) * scale
                att = tx.softmax_np(scores, axis=-1)
                outs.append(att @ v[:, cols])
            ctx = np.concatenate(outs, axis=1) @ self.w[f"{base}.attn.wo"] \
                + self.w[f"{base}.attn.bo"]
            new_cache = np.concatenate([cache, block[:n]], axis=0)
            if cap is not None and new_cache.shape[0] > cap:
                new_cache = new_cache[-cap:]
            self._caches[i] = new_cache

            block = block + ctx
            h2 = tx.layer_norm_np(block)
            h2 = h2 * self.w[f"{base}.ln2.g"] + self.w[f"{base}.ln2.b"]
            inner = np.maximum(h2 @ self.w[f"{base}.ffn.w1"] + self.w[f"{base}.ffn.b1"], 0.0)
            block = block + (inner @ self.w[f"{base}.ffn.w2"] + self.w[f"{base}.ffn.b2"])

        self.next_frame += n
        return block[:n]


def streaming_encode(weights: dict[str, np.ndarray], config: EncoderConfig,
                     feats: np.ndarray, domain_center: int, right_context: int,
                     domain: Domain | None = None) -> np.ndarray:
    """Run the chunked path over a whole utterance; (T, width) output."""
    feats = np.asarray(feats, dtype=np.float64)
    T = feats.shape[0]
    session = StreamingEncoder(weights, config, domain_center, right_context, domain)
    rows = []
    for start in range(0, T, domain_center):
        end = min(start + domain_center, T)
        look_end = min(end + right_context, T)
        rows.append(session.step(start, feats[start:end], feats[end:look_end]))
    return np.concatenate(rows, axis=0)
