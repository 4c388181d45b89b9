"""
Shared decoder trunk: pre-LN blocks with self-attention, cross-attention
onto a memory and a feed-forward layer, followed by a vocabulary head (text
generation) and a patch head (masked image modeling).
"""

import logging

from typing import Final, List, Optional, Sequence

import numpy as np

from ..core.layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    PositionalEncoding2D,
)
from ..core.tensor import Parameter, Tensor, add, mul
from ..training.config import Config


__all__: Final[List[str]] = [
    "CrossBranch",
    "Decoder",
    "DecoderBlock",
    "SideMemory",
    "key_padding_mask",
    "prefix_lm_mask",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


def prefix_lm_mask(
    prefix_lengths: np.ndarray,
    length: int,
) -> np.ndarray:
    """
    Boolean [B, 1, L, L] mask: position j may attend t iff t < n_p or t <= j.

    A prefix length of 1 gives a plain causal mask.
    """

    steps: np.ndarray = np.arange(length)
    causal: np.ndarray = steps[None, :] <= steps[:, None]
    prefix: np.ndarray = steps[None, None, :] < np.asarray(prefix_lengths)[:, None, None]
    return (causal[None] | prefix)[:, None]


def key_padding_mask(tokens: np.ndarray, pad: int = 0) -> np.ndarray:
    """
    Boolean [B, 1, 1, L] mask, True at non-pad keys.
    """

    return (np.asarray(tokens) != pad)[:, None, None, :]


class CrossBranch(Module):
    """
    CrossBranch class.

    An extra residual cross-attention onto a side memory; the output
    projection starts at zero so the branch is silent until trained.
    """

    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.ln: LayerNorm = LayerNorm(width, dtype)
        self.attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype, zero_output=True)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        return self.attn(self.ln(x), memory, memory)


class SideMemory:
    """
    SideMemory class.

    One CrossBranch per decoder block and the memory they attend to.
    """

    def __init__(
        self,
        branches: Sequence[CrossBranch],
        memory: Tensor,
    ) -> None:
        self._branches: Final[List[CrossBranch]] = list(branches)
        self._memory: Final[Tensor] = memory

    def __repr__(self) -> str:
        return f"SideMemory(branches={len(self._branches)}, memory={self._memory.shape})"

    @property
    def memory(self) -> Tensor:
        return self._memory

    def branch(self, index: int) -> CrossBranch:
        return self._branches[index]


class DecoderBlock(Module):
    """
    DecoderBlock class.

    x += SelfAttn(LN x); x += gate * CrossAttn(LN x, memory); [x += side
    branch]; x += FFN(LN x).
    """

    def __init__(
        self,
        width: int,
        heads: int,
        hidden: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        dropout_rate: float = 0.0,
    ) -> None:
        super().__init__()
        self.ln1: LayerNorm = LayerNorm(width, dtype)
        self.self_attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.ln2: LayerNorm = LayerNorm(width, dtype)
        self.cross_attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.ln3: LayerNorm = LayerNorm(width, dtype)
        self.ffn: FeedForward = FeedForward(width, hidden, width, rng, dtype, dropout_rate)

    def __call__(
        self,
        x: Tensor,
        memory: Tensor,
        self_mask: Optional[np.ndarray] = None,
        memory_mask: Optional[np.ndarray] = None,
        memory_gate: Optional[np.ndarray] = None,
        side: Optional[CrossBranch] = None,
        side_memory: Optional[Tensor] = None,
    ) -> Tensor:
        normed: Tensor = self.ln1(x)
        x = add(x, self.self_attn(normed, normed, normed, self_mask))
        cross: Tensor = self.cross_attn(self.ln2(x), memory, memory, memory_mask)
        if memory_gate is not None:
            cross = mul(cross, np.asarray(memory_gate, dtype=x.dtype).reshape(-1, 1, 1))
        x = add(x, cross)
        if side is not None and side_memory is not None:
            x = add(x, side(x, side_memory))
        return add(x, self.ffn(self.ln3(x)))


class Decoder(Module):
    """
    Decoder class.

    The trunk shared by prefix language modeling, masked image modeling and
    the deconfounded generator, with both output heads and the masked-image
    query inputs (mask token and patch positions).
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        """
        Initialize the Decoder object.

        :param config: The configuration.
        :type config: Config
        :param rng: Generator used for initialisation.
        :type rng: np.random.Generator
        :param dtype: Parameter dtype.
        :type dtype: np.dtype

        :return: None
        :rtype: None
        """

        super().__init__()
        width: int = config["model.width"]
        self.blocks: ModuleList = ModuleList(
            [
                DecoderBlock(width, config["model.heads"], width * config["model.ffn_mult"], rng, dtype, config["model.dropout"])
                for _ in range(config["model.dec_blocks"])
            ]
        )
        self.norm: LayerNorm = LayerNorm(width, dtype)
        self.vocab_head: Linear = Linear(width, config["data.vocab_size"], rng, dtype)
        self.patch_head: Linear = Linear(width, config.patch_dim, rng, dtype)
        self.mask_token: Parameter = Parameter(rng.normal(0.0, 0.02, size=width), dtype=dtype)
        self.patch_pos: PositionalEncoding2D = PositionalEncoding2D(config.grid, width, rng, dtype)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def run(
        self,
        x: Tensor,
        memory: Tensor,
        self_mask: Optional[np.ndarray] = None,
        memory_mask: Optional[np.ndarray] = None,
        memory_gate: Optional[np.ndarray] = None,
        side: Optional[SideMemory] = None,
    ) -> Tensor:
        """
        Run every block and the final layer norm.

        :param x: Input sequence [B, L, d].
        :type x: Tensor
        :param memory: Cross-attention memory [B, T, d].
        :type memory: Tensor
        :param self_mask: Optional self-attention mask (True = allowed).
        :type self_mask: Optional[np.ndarray]
        :param memory_mask: Optional memory key mask (True = allowed).
        :type memory_mask: Optional[np.ndarray]
        :param memory_gate: Optional per-sample [B] multiplier of the
            cross-attention residual (0 drops the memory).
        :type memory_gate: Optional[np.ndarray]
        :param side: Optional per-block side branches and their memory.
        :type side: Optional[SideMemory]

        :return: Hidden states [B, L, d].
        :rtype: Tensor
        """

        for index, block in enumerate(self.blocks):
            x = block(
                x,
                memory,
                self_mask,
                memory_mask,
                memory_gate,
                side.branch(index) if side is not None else None,
                side.memory if side is not None else None,
            )
        return self.norm(x)

    def logits(self, hidden: Tensor) -> Tensor:
        return self.vocab_head(hidden)

    def patches(self, hidden: Tensor) -> Tensor:
        return self.patch_head(hidden)
