"""
Causal intervention decoder: visual and language mediators built from the
encoder's attention, learned-query pooling of the mediators (the NWGM
expectation terms) and the fused generation loss.
"""

import logging

from typing import Final, List, Optional, Sequence, Tuple

import numpy as np

from ..core.layers import (
    AttentionOutput,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
)
from ..core.tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    gather_rows,
    getitem,
    maxpool2d,
    mul,
    reshape,
    softmax_cross_entropy,
)
from ..data.synth import PAD
from ..training.config import Config
from ..utils.errors import ConfigError, ShapeError
from .decoder import CrossBranch, Decoder, SideMemory, prefix_lm_mask
from .encoders import VisualEncoding


__all__: Final[List[str]] = [
    "GlobalFeature",
    "LanguageDeconfounder",
    "LanguageMediator",
    "MediatorFusion",
    "VisualDeconfounder",
    "VisualMediator",
    "attention_scores",
    "deconfounded_logits",
    "high_level_loss",
    "select_local_tokens",
    "top_k_indices",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

ACCUM_MODES: Final[Tuple[str, ...]] = ("sum", "product")
CONCAT_MODES: Final[Tuple[str, ...]] = ("feature", "token")


def attention_scores(
    maps: Sequence[np.ndarray],
    accum: str = "sum",
) -> np.ndarray:
    """
    Attention mass received by each token, accumulated over encoder layers.

    sum: total weight received, summed over layers, heads and queries.
    product: attention rollout, the product over layers of the head-mean
    map mixed half and half with the identity, summed over queries.

    :param maps: Per-layer weights [B, h, N, N] (queries on axis -2).
    :type maps: Sequence[np.ndarray]
    :param accum: "sum" or "product".
    :type accum: str

    :return: Scores [B, N].
    :rtype: np.ndarray

    :raises ConfigError: If accum is unknown or no maps are given.
    """

    if accum not in ACCUM_MODES:
        raise ConfigError(f"unknown vdm.accum {accum!r}")
    if not maps:
        raise ConfigError("attention accumulation needs at least one encoder layer")

    arrays: List[np.ndarray] = [np.asarray(weights, dtype=np.float64) for weights in maps]
    if accum == "sum":
        return np.sum([weights.sum(axis=(1, 2)) for weights in arrays], axis=0)

    count: int = arrays[0].shape[-1]
    identity: np.ndarray = np.eye(count)
    rollout: np.ndarray = np.broadcast_to(identity, (arrays[0].shape[0], count, count))
    for weights in arrays:
        rollout = (0.5 * weights.mean(axis=1) + 0.5 * identity) @ rollout
    return rollout.sum(axis=-2)


def top_k_indices(
    scores: np.ndarray,
    k: int,
) -> np.ndarray:
    """
    Indices of the k highest scores per row, ties to the lower index,
    returned in ascending index order.

    :param scores: [N] or [B, N].
    :type scores: np.ndarray
    :param k: Number of tokens to keep.
    :type k: int

    :return: [k] or [B, k] int64 indices.
    :rtype: np.ndarray

    :raises ConfigError: If k is outside [1, N].
    """

    scores = np.asarray(scores, dtype=np.float64)
    count: int = scores.shape[-1]
    if not 1 <= k <= count:
        raise ConfigError(f"vdm.k={k} must lie in [1, {count}]")
    order: np.ndarray = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :k], axis=-1).astype(np.int64)


def select_local_tokens(
    features: Tensor,
    maps: Sequence[np.ndarray],
    k: int,
    accum: str = "sum",
) -> Tuple[Tensor, np.ndarray]:
    """
    F_vl: the k rows of F_v with the highest accumulated attention.

    :return: F_vl [B, k, d] and the selected indices [B, k].
    :rtype: Tuple[Tensor, np.ndarray]
    """

    index: np.ndarray = top_k_indices(attention_scores(maps, accum), k)
    return gather_rows(features, index), index


class GlobalFeature(Module):
    """
    GlobalFeature class.

    F_vg = L[MP(F_v) + Attn(MP(LN(F_v)))] on the g x g token grid, with 2x2
    max pooling, giving N/4 tokens.
    """

    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        zero_attention: bool = False,
    ) -> None:
        super().__init__()
        self.ln: LayerNorm = LayerNorm(width, dtype)
        self.attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype, zero_output=zero_attention)
        self.out: Linear = Linear(width, width, rng, dtype)

    @staticmethod
    def _pool(x: Tensor, grid: int) -> Tensor:
        batch, _, width = x.shape
        pooled: Tensor = maxpool2d(reshape(x, (batch, grid, grid, width)), 2)
        return reshape(pooled, (batch, (grid // 2) ** 2, width))

    def __call__(self, features: Tensor) -> Tensor:
        """
        :param features: F_v [B, N, d] with N = g * g.
        :type features: Tensor

        :return: F_vg [B, N/4, d].
        :rtype: Tensor

        :raises ShapeError: If N is not a square of an even number.
        """

        grid: int = int(round(features.shape[-2] ** 0.5))
        if grid * grid != features.shape[-2] or grid % 2:
            raise ShapeError(f"global pooling needs an even square grid, got {features.shape[-2]} tokens")
        plain: Tensor = self._pool(features, grid)
        normed: Tensor = self._pool(self.ln(features), grid)
        return self.out(add(plain, self.attn(normed, normed, normed)))


class VisualMediator:
    """
    VisualMediator class.

    :ivar local: F_vl [B, k, d].
    :ivar global_: F_vg [B, N/4, d].
    :ivar mediator: M_v [B, k, d] ([B, 2k, d] with token-axis concat).
    :ivar indices: Selected token ids [B, k].
    """

    def __init__(
        self,
        local: Tensor,
        global_: Tensor,
        mediator: Tensor,
        indices: np.ndarray,
    ) -> None:
        self.local: Final[Tensor] = local
        self.global_: Final[Tensor] = global_
        self.mediator: Final[Tensor] = mediator
        self.indices: Final[np.ndarray] = indices

    def __repr__(self) -> str:
        return f"VisualMediator(local={self.local.shape}, global={self.global_.shape}, mediator={self.mediator.shape})"


class VisualDeconfounder(Module):
    """
    VisualDeconfounder class.

    M_v = FFN([MHA(F_vl, F_vl, F_vl), MHA(F_vl, F_vg, F_vg)]): the self and
    cross branches are joined along the feature axis (FFN 2d -> d) or, as a
    variant, along the token axis (FFN d -> d, 2k rows).
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        """
        Initialize the VisualDeconfounder object.

        :param config: The configuration (model.*, vdm.* keys).
        :type config: Config
        :param rng: Generator used for initialisation.
        :type rng: np.random.Generator
        :param dtype: Parameter dtype.
        :type dtype: np.dtype

        :return: None
        :rtype: None

        :raises ConfigError: If vdm.concat or vdm.accum is unknown.
        """

        super().__init__()
        if config["vdm.concat"] not in CONCAT_MODES:
            raise ConfigError(f"unknown vdm.concat {config['vdm.concat']!r}")
        if config["vdm.accum"] not in ACCUM_MODES:
            raise ConfigError(f"unknown vdm.accum {config['vdm.accum']!r}")

        width: int = config["model.width"]
        heads: int = config["model.heads"]

        # Store the selection settings
        self._k: int = config.local_k
        self._accum: str = config["vdm.accum"]
        self._concat: str = config["vdm.concat"]

        self.glob: GlobalFeature = GlobalFeature(width, heads, rng, dtype)
        self.self_attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.cross_attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        joined: int = 2 * width if self._concat == "feature" else width
        self.ffn: FeedForward = FeedForward(joined, width * config["model.ffn_mult"], width, rng, dtype)

    @property
    def k(self) -> int:
        return self._k

    @property
    def concat_mode(self) -> str:
        return self._concat

    def visual_mediator(
        self,
        local: Tensor,
        global_: Tensor,
    ) -> Tensor:
        """
        M_v from F_vl [B, k, d] and F_vg [B, N/4, d].
        """

        if local.shape[-1] != global_.shape[-1]:
            raise ShapeError(f"F_vl width {local.shape[-1]} differs from F_vg width {global_.shape[-1]}")
        own: Tensor = self.self_attn(local, local, local)
        cross: Tensor = self.cross_attn(local, global_, global_)
        axis: int = -1 if self._concat == "feature" else -2
        return self.ffn(concat([own, cross], axis=axis))

    def __call__(self, encoding: VisualEncoding) -> VisualMediator:
        local, indices = select_local_tokens(encoding.features, encoding.attention_maps(), self._k, self._accum)
        global_: Tensor = self.glob(encoding.features)
        return VisualMediator(local, global_, self.visual_mediator(local, global_), indices)


class LanguageMediator:
    """
    LanguageMediator class.

    :ivar reconstructed: F'_vl [B, k, d].
    :ivar mediator: M_l [B, k, d].
    """

    def __init__(
        self,
        reconstructed: Tensor,
        mediator: Tensor,
    ) -> None:
        self.reconstructed: Final[Tensor] = reconstructed
        self.mediator: Final[Tensor] = mediator

    def __repr__(self) -> str:
        return f"LanguageMediator(reconstructed={self.reconstructed.shape}, mediator={self.mediator.shape})"


class LanguageDeconfounder(Module):
    """
    LanguageDeconfounder class.

    F'_vl = FFN(MHA(F_vl, W, W)) over the whole vocabulary embedding table
    W, then M_l = FFN(MHA(F'_vl, F_vl, F_vl)). The current sample's report
    never enters M_l.
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        width: int = config["model.width"]
        heads: int = config["model.heads"]
        hidden: int = width * config["model.ffn_mult"]
        self.vocab_attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.vocab_ffn: FeedForward = FeedForward(width, hidden, width, rng, dtype)
        self.attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.ffn: FeedForward = FeedForward(width, hidden, width, rng, dtype)

    def vocab_attention(
        self,
        local: Tensor,
        table: Tensor,
    ) -> AttentionOutput:
        return self.vocab_attn.attend(local, table, table)

    def vocab_reconstruct(
        self,
        local: Tensor,
        table: Tensor,
    ) -> Tensor:
        """
        F'_vl from F_vl [B, k, d] and the vocabulary table [V, d].

        :raises ShapeError: If the table is not [V, d].
        """

        if table.ndim != 2 or table.shape[-1] != local.shape[-1]:
            raise ShapeError(f"vocabulary table must be [V, {local.shape[-1]}], got {table.shape}")
        return self.vocab_ffn(self.vocab_attention(local, table).output)

    def language_mediator(
        self,
        reconstructed: Tensor,
        local: Tensor,
    ) -> Tensor:
        """
        M_l from F'_vl and F_vl (same shapes).
        """

        if reconstructed.shape != local.shape:
            raise ShapeError(f"F'_vl {reconstructed.shape} and F_vl {local.shape} differ")
        return self.ffn(self.attn(reconstructed, local, local))

    def __call__(
        self,
        local: Tensor,
        table: Tensor,
    ) -> LanguageMediator:
        reconstructed: Tensor = self.vocab_reconstruct(local, table)
        return LanguageMediator(reconstructed, self.language_mediator(reconstructed, local))


class MediatorFusion(Module):
    """
    MediatorFusion class.

    Learned-query attention pooling turns M_v and M_l into fixed-size
    expectation summaries; their concatenation is the side memory of one
    zero-initialised cross-attention branch per decoder block.
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        width: int = config["model.width"]
        heads: int = config["model.heads"]
        queries: int = config["nwgm.queries"]
        self.visual_queries: Parameter = Parameter(rng.normal(0.0, 0.02, size=(queries, width)), dtype=dtype)
        self.visual_pool: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.language_queries: Parameter = Parameter(rng.normal(0.0, 0.02, size=(queries, width)), dtype=dtype)
        self.language_pool: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.branches: ModuleList = ModuleList(
            [CrossBranch(width, heads, rng, dtype) for _ in range(config["model.dec_blocks"])]
        )

    @staticmethod
    def _pool(queries: Parameter, attn: MultiHeadAttention, mediator: Tensor) -> Tensor:
        batch: int = mediator.shape[0]
        expanded: Tensor = add(np.zeros((batch,) + queries.shape, dtype=mediator.dtype), queries)
        return attn(expanded, mediator, mediator)

    def pool(
        self,
        visual: Optional[Tensor],
        language: Optional[Tensor],
    ) -> Optional[Tensor]:
        """
        [M^_v ; M^_l] along the token axis; disabled mediators are skipped.
        """

        parts: List[Tensor] = []
        if visual is not None:
            parts.append(self._pool(self.visual_queries, self.visual_pool, visual))
        if language is not None:
            parts.append(self._pool(self.language_queries, self.language_pool, language))
        return concat(parts, axis=-2) if parts else None

    def side_memory(
        self,
        visual: Optional[Tensor],
        language: Optional[Tensor],
    ) -> Optional[SideMemory]:
        pooled: Optional[Tensor] = self.pool(visual, language)
        return None if pooled is None else SideMemory(list(self.branches), pooled)


def deconfounded_logits(
    text: Tensor,
    features: Tensor,
    visual: Optional[Tensor],
    language: Optional[Tensor],
    decoder: Decoder,
    fusion: MediatorFusion,
) -> Tensor:
    """
    Logits [B, L, V] of the fused generator: causal self-attention over the
    report, cross-attention onto F_v and the mediator branches onto the
    pooled [M^_v ; M^_l].

    :param text: Embedded report prefix [B, L, d].
    :type text: Tensor
    :param features: F_v [B, N, d].
    :type features: Tensor
    :param visual: M_v or None when the visual mediator is disabled.
    :type visual: Optional[Tensor]
    :param language: M_l or None when the language mediator is disabled.
    :type language: Optional[Tensor]
    :param decoder: The transferred decoder trunk.
    :type decoder: Decoder
    :param fusion: The mediator fusion branches.
    :type fusion: MediatorFusion

    :return: The logits.
    :rtype: Tensor
    """

    batch, length = text.shape[0], text.shape[-2]
    mask: np.ndarray = prefix_lm_mask(np.ones(batch, dtype=np.int64), length)
    hidden: Tensor = decoder.run(text, features, self_mask=mask, side=fusion.side_memory(visual, language))
    return decoder.logits(hidden)


def high_level_loss(
    logits: Tensor,
    tokens: np.ndarray,
) -> Tensor:
    """
    Teacher-forced NLL of tokens 1..n-1 given their predecessors, summed per
    sample and averaged over the batch. Logits at position i - 1 score
    token i; PAD targets are ignored.

    :param logits: [B, L, V] (or [L, V]).
    :type logits: Tensor
    :param tokens: [B, L] (or [L]).
    :type tokens: np.ndarray

    :return: The scalar loss.
    :rtype: Tensor
    """

    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
        logits = reshape(logits, (1,) + logits.shape)
    shifted: Tensor = getitem(logits, (slice(None), slice(None, -1)))
    total: Tensor = softmax_cross_entropy(shifted, tokens[:, 1:], reduction="sum", ignore_index=PAD)
    return mul(total, 1.0 / tokens.shape[0])
