"""
Frozen decoder transformer with modality adapter experts and attention gates.

The base model is a small LLaMA-shaped decoder (pre-norm RMSNorm, rotary
causal attention, SwiGLU feed-forward, output head tied to the embedding).
Three injections sit on top of it:

* a visual projection that maps raw image features into the embedding space,
* per-layer modality adapter experts after the frozen feed-forward block
  (a vision adapter for image positions, a text adapter for text positions)
  plus an attention adapter after the output projection,
* a per-layer, per-head tanh gate on what each query reads from image
  positions, computed from the image rows up to that query.

All injections are exact identities at initialisation, so the augmented
model reproduces the frozen base with image value rows zeroed.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pill.tensor_core import (
    DimensionError,
    PillError,
    Tensor,
    add,
    as_tensor,
    gelu,
    masked_mean_rows,
    matmul,
    mul,
    no_grad,
    reshape,
    rmsnorm,
    rope,
    route_rows,
    silu,
    softmax_lastdim,
    take_rows,
    tanh_act,
    transpose,
)

if TYPE_CHECKING:
    from pill.training import TrainStageSpec

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
IMAGE_PLACEHOLDER_ID = 3


class SequenceError(PillError, ValueError):
    """An interleaved sequence cannot be built or batched."""


class ModalityTag(str, Enum):
    TEXT = "text"
    VISION = "vision"


class AdapterKind(str, Enum):
    SWIGLU = "swiglu"
    GELU = "gelu"
    LINEAR = "linear"


class ParamGroup(str, Enum):
    BASE = "base"
    A_V = "a_v"
    A_T = "a_t"
    A_ATTN = "a_attn"
    GATE = "gate"
    PROJECTION = "projection"


class ModelConfig(BaseModel):
    """Architecture of the base decoder and its injections."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(64, gt=0)
    n_layers: int = Field(4, gt=0)
    n_heads: int = Field(4, gt=0)
    d_ffn: int = Field(512, gt=0)
    vocab_size: int = Field(64, gt=4)
    max_seq_len: int = Field(32, gt=0)
    d_vis: int = Field(16, gt=0)
    queries_per_image: int = Field(4, gt=0)
    adapter_dim: int = Field(8, ge=1)
    adapter_kind: AdapterKind = AdapterKind.SWIGLU
    use_mag: bool = True
    use_momae: bool = True
    rope_base: float = Field(10000.0, gt=0)
    init_std: float = Field(0.02, gt=0)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_head % 2:
            raise ValueError(f"d_head={self.d_head} must be even for rotary embeddings")
        return self


# --------------------------------------------------------------------------- #
# Interleaved sequences
# --------------------------------------------------------------------------- #
@dataclass
class TokenSequence:
    """
    Interleaved text/vision positions.

    Text positions carry a token id and no feature slot, Vision positions the
    reverse. ``loss_mask`` marks the answer span.
    """

    tags: List[ModalityTag]
    token_ids: List[Optional[int]]
    feature_slots: List[Optional[np.ndarray]]
    loss_mask: List[bool]

    def __len__(self) -> int:
        return len(self.tags)

    @property
    def vision_mask(self) -> np.ndarray:
        return np.array([t is ModalityTag.VISION for t in self.tags], dtype=bool)

    def text_token_ids(self) -> List[int]:
        return [tid for tid in self.token_ids if tid is not None]


@dataclass
class SequenceBatch:
    """Right-padded arrays for a batch of TokenSequences."""

    token_ids: np.ndarray      # [B, T] int, PAD at vision and padding positions
    features: np.ndarray       # [B, T, d_vis], zero outside vision positions
    vision_mask: np.ndarray    # [B, T] bool
    loss_mask: np.ndarray      # [B, T] bool
    lengths: np.ndarray        # [B] int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.token_ids.shape


def build_interleaved_sequence(text_tokens: Sequence[int], images: Sequence[np.ndarray],
                               config: ModelConfig,
                               answer_span: Optional[Tuple[int, int]] = None) -> TokenSequence:
    """
    Expand image placeholders into runs of vision positions.

    Args:
        text_tokens: Token ids; each ``IMAGE_PLACEHOLDER_ID`` stands for one image.
        images: One [K, d_vis] feature block per placeholder, in order.
        config: Supplies K (``queries_per_image``), ``d_vis`` and ``max_seq_len``.
        answer_span: Half-open range of indices into ``text_tokens`` whose
            positions are supervised. Placeholders inside it stay unsupervised.

    Returns:
        The TokenSequence.

    Raises:
        SequenceError: On placeholder/image count mismatch, a malformed image
            block, or a result longer than ``max_seq_len``.
    """
    n_placeholders = sum(1 for t in text_tokens if t == IMAGE_PLACEHOLDER_ID)
    if n_placeholders != len(images):
        raise SequenceError(f"{n_placeholders} image placeholders but {len(images)} images")
    k = config.queries_per_image
    start, stop = answer_span if answer_span is not None else (0, 0)

    tags: List[ModalityTag] = []
    token_ids: List[Optional[int]] = []
    slots: List[Optional[np.ndarray]] = []
    loss_mask: List[bool] = []
    image_iter = iter(images)
    for index, token in enumerate(text_tokens):
        if token == IMAGE_PLACEHOLDER_ID:
            block = np.asarray(next(image_iter), dtype=np.float64)
            if block.shape != (k, config.d_vis):
                raise SequenceError(f"image block has shape {list(block.shape)}, expected [{k}, {config.d_vis}]")
            for row in block:
                tags.append(ModalityTag.VISION)
                token_ids.append(None)
                slots.append(row.copy())
                loss_mask.append(False)
        else:
            tags.append(ModalityTag.TEXT)
            token_ids.append(int(token))
            slots.append(None)
            loss_mask.append(start <= index < stop)

    if len(tags) > config.max_seq_len:
        raise SequenceError(f"sequence length {len(tags)} exceeds max_seq_len={config.max_seq_len}")
    return TokenSequence(tags, token_ids, slots, loss_mask)


def collate(sequences: Sequence[TokenSequence], d_vis: int) -> SequenceBatch:
    if not sequences:
        raise SequenceError("cannot collate an empty batch")
    batch = len(sequences)
    length = max(len(s) for s in sequences)
    token_ids = np.full((batch, length), PAD_ID, dtype=np.int64)
    features = np.zeros((batch, length, d_vis))
    vision_mask = np.zeros((batch, length), dtype=bool)
    loss_mask = np.zeros((batch, length), dtype=bool)
    for b, seq in enumerate(sequences):
        for t, (tag, tid, slot, supervised) in enumerate(zip(seq.tags, seq.token_ids, seq.feature_slots, seq.loss_mask)):
            if tag is ModalityTag.VISION:
                vision_mask[b, t] = True
                features[b, t] = slot
            else:
                token_ids[b, t] = tid
            loss_mask[b, t] = supervised
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    return SequenceBatch(token_ids, features, vision_mask, loss_mask, lengths)


def as_vision_mask(tags: Union[np.ndarray, Sequence[ModalityTag]]) -> np.ndarray:
    if isinstance(tags, np.ndarray) and tags.dtype == bool:
        return tags
    return np.array([t is ModalityTag.VISION or t == ModalityTag.VISION.value for t in tags], dtype=bool)


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #
@dataclass
class AdapterParams:
    """Down-projections D_1 (and D_2 for SwiGLU) to the bottleneck, up-projection U back."""

    kind: AdapterKind
    down1_w: Tensor
    down1_b: Tensor
    up_w: Tensor
    down2_w: Optional[Tensor] = None
    down2_b: Optional[Tensor] = None

    def named(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.down1.weight", self.down1_w
        yield f"{prefix}.down1.bias", self.down1_b
        if self.down2_w is not None:
            yield f"{prefix}.down2.weight", self.down2_w
            yield f"{prefix}.down2.bias", self.down2_b
        yield f"{prefix}.up.weight", self.up_w


@dataclass
class GateParams:
    """Affine map d_model -> n_heads; zero weights and bias at init."""

    weight: Tensor
    bias: Tensor


@dataclass
class ProjectionParams:
    weight: Tensor
    bias: Tensor


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FeedForwardWeights:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class PillLayerParams:
    attn: AttentionWeights
    ffn: FeedForwardWeights
    attn_norm: Tensor
    ffn_norm: Tensor
    a_t: AdapterParams
    a_attn: AdapterParams
    a_v: Optional[AdapterParams] = None
    gate: Optional[GateParams] = None

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, ParamGroup, Tensor]]:
        yield f"{prefix}.attn.wq", ParamGroup.BASE, self.attn.wq
        yield f"{prefix}.attn.wk", ParamGroup.BASE, self.attn.wk
        yield f"{prefix}.attn.wv", ParamGroup.BASE, self.attn.wv
        yield f"{prefix}.attn.wo", ParamGroup.BASE, self.attn.wo
        yield f"{prefix}.attn_norm", ParamGroup.BASE, self.attn_norm
        yield f"{prefix}.ffn.w_gate", ParamGroup.BASE, self.ffn.w_gate
        yield f"{prefix}.ffn.w_up", ParamGroup.BASE, self.ffn.w_up
        yield f"{prefix}.ffn.w_down", ParamGroup.BASE, self.ffn.w_down
        yield f"{prefix}.ffn_norm", ParamGroup.BASE, self.ffn_norm
        if self.a_v is not None:
            for name, t in self.a_v.named(f"{prefix}.a_v"):
                yield name, ParamGroup.A_V, t
        for name, t in self.a_t.named(f"{prefix}.a_t"):
            yield name, ParamGroup.A_T, t
        for name, t in self.a_attn.named(f"{prefix}.a_attn"):
            yield name, ParamGroup.A_ATTN, t
        if self.gate is not None:
            yield f"{prefix}.gate.weight", ParamGroup.GATE, self.gate.weight
            yield f"{prefix}.gate.bias", ParamGroup.GATE, self.gate.bias


@dataclass
class PillModelParams:
    config: ModelConfig
    embedding: Tensor
    projection: ProjectionParams
    layers: List[PillLayerParams]
    final_norm: Tensor

    def named_parameters(self) -> Iterator[Tuple[str, ParamGroup, Tensor]]:
        """Every parameter block in a fixed order, with its group."""
        yield "embedding", ParamGroup.BASE, self.embedding
        yield "projection.weight", ParamGroup.PROJECTION, self.projection.weight
        yield "projection.bias", ParamGroup.PROJECTION, self.projection.bias
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}")
        yield "final_norm", ParamGroup.BASE, self.final_norm

    def parameter_dict(self) -> Dict[str, Tensor]:
        return {name: t for name, _, t in self.named_parameters()}

    def groups(self) -> Dict[str, ParamGroup]:
        return {name: group for name, group, _ in self.named_parameters()}

    def total_parameters(self) -> int:
        return sum(t.data.size for _, _, t in self.named_parameters())

    def clone(self) -> "PillModelParams":
        """Snapshot with copied values and gradients disabled."""
        clone = init_params(self.config, seed=0)
        load_parameter_values(clone, {name: t.data for name, t in self.parameter_dict().items()})
        return clone


def load_parameter_values(params: PillModelParams, values: Dict[str, np.ndarray]) -> None:
    """
    Overwrite parameter blocks by name.

    Raises:
        DimensionError: On unknown names or shape mismatches.
    """
    blocks = params.parameter_dict()
    for name, value in values.items():
        if name not in blocks:
            raise DimensionError(f"unknown parameter block '{name}'")
        target = blocks[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != target.shape:
            raise DimensionError(f"block '{name}' has shape {list(value.shape)}, expected {list(target.shape)}")
        target.data = value.copy()
        target.grad = None


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, name=name)


def init_adapter(config: ModelConfig, rng: np.random.Generator, name: str) -> AdapterParams:
    d, r = config.d_model, config.adapter_dim
    bound = 1.0 / np.sqrt(d)
    adapter = AdapterParams(
        kind=config.adapter_kind,
        down1_w=_param(rng.uniform(-bound, bound, (d, r)), f"{name}.down1.weight"),
        down1_b=_param(np.zeros(r), f"{name}.down1.bias"),
        up_w=_param(np.zeros((r, d)), f"{name}.up.weight"),
    )
    if config.adapter_kind is AdapterKind.SWIGLU:
        adapter.down2_w = _param(rng.uniform(-bound, bound, (d, r)), f"{name}.down2.weight")
        adapter.down2_b = _param(np.zeros(r), f"{name}.down2.bias")
    return adapter


def init_params(config: ModelConfig, seed: int) -> PillModelParams:
    """
    Initialise base weights and injections from independent seeded streams.

    The base stream is ``default_rng([seed, 0])`` and the injection stream
    ``default_rng([seed, 1])``, so re-initialising injections for a loaded
    base is reproducible.
    """
    base_rng = np.random.default_rng([seed, 0])
    inj_rng = np.random.default_rng([seed, 1])
    d, f, std = config.d_model, config.d_ffn, config.init_std
    out_std = std / np.sqrt(2 * config.n_layers)

    embedding = _param(base_rng.normal(0.0, std, (config.vocab_size, d)), "embedding")
    projection = ProjectionParams(
        weight=_param(np.zeros((config.d_vis, d)), "projection.weight"),
        bias=_param(np.zeros(d), "projection.bias"),
    )
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        attn = AttentionWeights(
            wq=_param(base_rng.normal(0.0, std, (d, d)), f"{p}.attn.wq"),
            wk=_param(base_rng.normal(0.0, std, (d, d)), f"{p}.attn.wk"),
            wv=_param(base_rng.normal(0.0, std, (d, d)), f"{p}.attn.wv"),
            wo=_param(base_rng.normal(0.0, out_std, (d, d)), f"{p}.attn.wo"),
        )
        ffn = FeedForwardWeights(
            w_gate=_param(base_rng.normal(0.0, std, (d, f)), f"{p}.ffn.w_gate"),
            w_up=_param(base_rng.normal(0.0, std, (d, f)), f"{p}.ffn.w_up"),
            w_down=_param(base_rng.normal(0.0, out_std, (f, d)), f"{p}.ffn.w_down"),
        )
        layer = PillLayerParams(
            attn=attn,
            ffn=ffn,
            attn_norm=_param(np.ones(d), f"{p}.attn_norm"),
            ffn_norm=_param(np.ones(d), f"{p}.ffn_norm"),
            a_t=init_adapter(config, inj_rng, f"{p}.a_t"),
            a_attn=init_adapter(config, inj_rng, f"{p}.a_attn"),
        )
        if config.use_momae:
            layer.a_v = init_adapter(config, inj_rng, f"{p}.a_v")
        if config.use_mag:
            layer.gate = GateParams(
                weight=_param(np.zeros((d, config.n_heads)), f"{p}.gate.weight"),
                bias=_param(np.zeros(config.n_heads), f"{p}.gate.bias"),
            )
        layers.append(layer)
    final_norm = _param(np.ones(d), "final_norm")
    return PillModelParams(config, embedding, projection, layers, final_norm)


# --------------------------------------------------------------------------- #
# Building blocks
# --------------------------------------------------------------------------- #
@lru_cache(maxsize=64)
def rope_tables(length: int, d_head: int, base: float) -> Tuple[np.ndarray, np.ndarray]:
    inv_freq = 1.0 / (base ** (np.arange(0, d_head, 2) / d_head))
    angles = np.outer(np.arange(length), inv_freq)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def project_visual(features: Union[Tensor, np.ndarray], projection: ProjectionParams) -> Tensor:
    """
    Map raw visual features [..., K, d_vis] to [..., K, d_model] rowwise.

    Raises:
        DimensionError: If the feature dimension differs from the projection input.
    """
    features = as_tensor(features)
    d_vis = projection.weight.shape[0]
    if features.shape[-1] != d_vis:
        raise DimensionError(f"project_visual: features have dim {features.shape[-1]}, expected {d_vis}")
    return add(matmul(features, projection.weight), projection.bias)


def swiglu_adapter(h: Tensor, params: AdapterParams) -> Tensor:
    """
    Bottleneck adapter with residual: U(SiLU(D_1 h) * D_2 h) + h.

    The GELU and linear ablation kinds use U(GELU(D_1 h)) + h and U(D_1 h) + h.
    """
    d1 = add(matmul(h, params.down1_w), params.down1_b)
    if params.kind is AdapterKind.SWIGLU:
        bottleneck = mul(silu(d1), add(matmul(h, params.down2_w), params.down2_b))
    elif params.kind is AdapterKind.GELU:
        bottleneck = gelu(d1)
    else:
        bottleneck = d1
    return add(matmul(bottleneck, params.up_w), h)


def momae_forward(h: Tensor, tags, a_v: Optional[AdapterParams], a_t: AdapterParams) -> Tensor:
    """
    Route each position through its modality's adapter expert.

    Vision rows go through ``a_v`` and Text rows through ``a_t``; there is no
    mixing across positions. Without a vision expert every row uses ``a_t``.
    """
    text_out = swiglu_adapter(h, a_t)
    if a_v is None:
        return text_out
    vision_out = swiglu_adapter(h, a_v)
    return route_rows(as_vision_mask(tags), vision_out, text_out)


def feed_forward(x: Tensor, ffn: FeedForwardWeights) -> Tensor:
    return matmul(mul(silu(matmul(x, ffn.w_gate)), matmul(x, ffn.w_up)), ffn.w_down)


@dataclass
class ForwardTrace:
    """Per-layer gate values [B, n_heads] recorded during a forward pass, taken at the last position."""

    gates: List[np.ndarray] = field(default_factory=list)


def modality_gate(x: Tensor, vision_mask: np.ndarray, gate: GateParams) -> Tensor:
    """tanh(G(mean of the vision rows of x up to each position)), shape [B, T, n_heads]."""
    pooled = masked_mean_rows(x, vision_mask, causal=True)
    return tanh_act(add(matmul(pooled, gate.weight), gate.bias))


def _attention(x: Tensor, vision_mask: np.ndarray, attn: AttentionWeights, config: ModelConfig,
               allowed: np.ndarray, vision_gate: Optional[Union[Tensor, float]] = None) -> Tensor:
    """
    Causal multi-head attention over [B, T, d_model].

    ``vision_gate`` scales what each query reads from Vision keys: a Tensor
    [B, n_heads, T, 1] holds one factor per query and head, 0.0 drops Vision
    values and None leaves attention plain.
    """
    batch, length, _ = x.shape
    heads, d_head = config.n_heads, config.d_head

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, d_head)), (0, 2, 1, 3))

    cos, sin = rope_tables(length, d_head, config.rope_base)
    q = rope(split(matmul(x, attn.wq)), cos, sin)
    k = rope(split(matmul(x, attn.wk)), cos, sin)
    v = split(matmul(x, attn.wv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d_head))
    probs = softmax_lastdim(scores, where=allowed)
    if vision_gate is None:
        mixed = matmul(probs, v)
    else:
        keys = vision_mask[:, None, None, :].astype(np.float64)
        mixed = matmul(mul(probs, 1.0 - keys), v)
        if isinstance(vision_gate, Tensor):
            mixed = add(mixed, mul(vision_gate, matmul(mul(probs, keys), v)))
    context = transpose(mixed, (0, 2, 1, 3))
    return matmul(reshape(context, (batch, length, config.d_model)), attn.wo)


def _batched(h: Tensor, tags) -> Tuple[Tensor, np.ndarray, bool]:
    mask = as_vision_mask(tags)
    if h.data.ndim == 2:
        return reshape(h, (1,) + h.shape), mask.reshape(1, -1), True
    return h, mask, False


def mag_attention(h: Tensor, tags, attn: AttentionWeights, gate: Optional[GateParams],
                  a_attn: Optional[AdapterParams], config: ModelConfig,
                  causal: Optional[np.ndarray] = None, trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Causal self-attention with gated vision values.

    What a query at position i reads from Vision keys is multiplied, per
    head, by tanh(G(mean of the vision rows of h at positions <= i)), so every
    Vision key a query sees shares one gate. Text keys are read ungated. The
    attention output passes through W_O and then ``a_attn``.

    Args:
        h: Normed hidden states [T, d_model] or [B, T, d_model].
        tags: ModalityTag per position, or a boolean vision mask.
        attn: Frozen W_Q, W_K, W_V, W_O.
        gate: Gate map; None disables gating.
        a_attn: Attention adapter; None skips it.
        config: Model configuration.
        causal: Optional [T, T] boolean mask of allowed key positions.
        trace: Collects the gate values when given.

    Returns:
        Tensor with the shape of ``h``.

    Raises:
        DimensionError: On an empty sequence or one longer than ``max_seq_len``.
    """
    length = h.shape[-2] if h.data.ndim >= 2 else 0
    if length == 0:
        raise DimensionError("mag_attention: empty sequence")
    if length > config.max_seq_len:
        raise DimensionError(f"mag_attention: length {length} exceeds max_seq_len={config.max_seq_len}")
    x, mask, squeeze = _batched(h, tags)
    allowed = causal if causal is not None else causal_mask(length)

    vision_gate = None
    if gate is not None:
        g = modality_gate(x, mask, gate)
        if trace is not None:
            trace.gates.append(g.data[:, -1, :].copy())
        vision_gate = reshape(transpose(g, (0, 2, 1)), (g.shape[0], g.shape[2], length, 1))
    out = _attention(x, mask, attn, config, allowed, vision_gate)
    if a_attn is not None:
        out = swiglu_adapter(out, a_attn)
    return reshape(out, h.shape) if squeeze else out


def pill_block_forward(h: Tensor, tags, layer: PillLayerParams, config: ModelConfig,
                       trace: Optional[ForwardTrace] = None) -> Tensor:
    """Pre-norm block: gated attention residual, then frozen FFN -> modality experts residual."""
    h = add(h, mag_attention(rmsnorm(h, layer.attn_norm), tags, layer.attn, layer.gate, layer.a_attn,
                             config, trace=trace))
    ffn_out = feed_forward(rmsnorm(h, layer.ffn_norm), layer.ffn)
    return add(h, momae_forward(ffn_out, tags, layer.a_v, layer.a_t))


def base_block_forward(h: Tensor, tags, layer: PillLayerParams, config: ModelConfig,
                       zero_vision_values: bool = True) -> Tensor:
    """The frozen block alone; optionally with the value rows of vision positions zeroed."""
    x, mask, squeeze = _batched(h, tags)
    vision_gate = 0.0 if zero_vision_values and mask.any() else None
    attn_out = _attention(rmsnorm(x, layer.attn_norm), mask, layer.attn, config, causal_mask(x.shape[1]), vision_gate)
    if squeeze:
        attn_out = reshape(attn_out, h.shape)
    h = add(h, attn_out)
    return add(h, feed_forward(rmsnorm(h, layer.ffn_norm), layer.ffn))


def embed_inputs(batch: SequenceBatch, params: PillModelParams) -> Tensor:
    """Token lookup at Text positions, projected visual features at Vision positions."""
    tokens = take_rows(params.embedding, batch.token_ids)
    if not batch.vision_mask.any():
        return tokens
    visual = project_visual(batch.features, params.projection)
    return route_rows(batch.vision_mask, visual, tokens)


def _as_batch(seq: Union[TokenSequence, SequenceBatch], config: ModelConfig) -> Tuple[SequenceBatch, bool]:
    if isinstance(seq, TokenSequence):
        return collate([seq], config.d_vis), True
    return seq, False


def _head(h: Tensor, params: PillModelParams) -> Tensor:
    return matmul(rmsnorm(h, params.final_norm), transpose(params.embedding))


def model_forward(seq: Union[TokenSequence, SequenceBatch], params: PillModelParams,
                  trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Logits of the injected model.

    Args:
        seq: One TokenSequence (logits [T, V]) or a SequenceBatch (logits [B, T, V]).
        params: Model parameters.
        trace: Collects per-layer gate values when given.
    """
    batch, single = _as_batch(seq, params.config)
    h = embed_inputs(batch, params)
    for layer in params.layers:
        h = pill_block_forward(h, batch.vision_mask, layer, params.config, trace)
    logits = _head(h, params)
    if single:
        return reshape(logits, logits.shape[1:])
    return logits


def base_model_forward(seq: Union[TokenSequence, SequenceBatch], params: PillModelParams,
                       zero_vision_values: bool = True) -> Tensor:
    """Logits of the frozen base alone (the reference for init-equivalence and base pre-training)."""
    batch, single = _as_batch(seq, params.config)
    h = embed_inputs(batch, params)
    for layer in params.layers:
        h = base_block_forward(h, batch.vision_mask, layer, params.config, zero_vision_values)
    logits = _head(h, params)
    if single:
        return reshape(logits, logits.shape[1:])
    return logits


def gate_magnitudes(params: PillModelParams, batch: SequenceBatch) -> np.ndarray:
    """
    Mean |gate| over the batch for every layer and head, shape [n_layers, n_heads].

    Raises:
        SequenceError: If some batch entry has no vision positions, or gating is disabled.
    """
    if not params.config.use_mag:
        raise SequenceError("model has no attention gates")
    if not batch.vision_mask.any(axis=1).all():
        raise SequenceError("gate probe data must contain an image in every sample")
    trace = ForwardTrace()
    with no_grad():
        model_forward(batch, params, trace)
    return np.stack([np.abs(g).mean(axis=0) for g in trace.gates])


# --------------------------------------------------------------------------- #
# Trainable-set accounting
# --------------------------------------------------------------------------- #
def trainable_parameters(params: PillModelParams, spec: "TrainStageSpec") -> Dict[str, Tensor]:
    """Parameters the stage trains, in model order."""
    last_a_v = f"layers.{params.config.n_layers - 1}.a_v."
    selected = {}
    for name, group, tensor in params.named_parameters():
        if group not in spec.trainable_groups:
            continue
        if spec.excludes_final_vision_adapter and name.startswith(last_a_v):
            continue
        selected[name] = tensor
    return selected


def set_trainable(params: PillModelParams, spec: "TrainStageSpec") -> Dict[str, Tensor]:
    """Enable gradients for exactly the stage's trainable set and clear all grads."""
    selected = trainable_parameters(params, spec)
    for name, _, tensor in params.named_parameters():
        tensor.requires_grad = name in selected
        tensor.grad = None
    return selected


def count_trainable(params: PillModelParams, spec: "TrainStageSpec") -> int:
    return sum(t.data.size for t in trainable_parameters(params, spec).values())
