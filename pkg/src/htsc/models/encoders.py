"""
Visual encoder (patchify stem + transformer blocks) producing F_v, and the
text embedder producing F_w. Both are shared by every task level.
"""

import logging

from typing import Final, List, Optional, Tuple

import numpy as np

from ..core.layers import (
    AttentionOutput,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    PositionalEncoding1D,
    PositionalEncoding2D,
)
from ..core.tensor import Tensor, add, gather_rows
from ..training.config import Config
from ..utils.errors import ShapeError


__all__: Final[List[str]] = [
    "EncoderBlock",
    "Encoders",
    "TextEmbedder",
    "VisualEncoder",
    "VisualEncoding",
    "patchify",
    "unpatchify",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


def patchify(
    images: np.ndarray,
    patch: int,
) -> np.ndarray:
    """
    Split [B, H, W, C] images into row-major patch vectors [B, N, patch*patch*C].

    :raises ShapeError: If H or W is not divisible by patch.
    """

    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected [B, H, W, C] images, got {images.shape}")
    batch, height, width, channels = images.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch {patch}")
    gh, gw = height // patch, width // patch
    blocks: np.ndarray = images.reshape(batch, gh, patch, gw, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(batch, gh * gw, patch * patch * channels)


def unpatchify(
    patches: np.ndarray,
    patch: int,
    channels: int,
) -> np.ndarray:
    """
    Inverse of patchify for a square grid.
    """

    batch, count, _ = patches.shape
    grid: int = int(round(count**0.5))
    blocks: np.ndarray = patches.reshape(batch, grid, grid, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(batch, grid * patch, grid * patch, channels)


class EncoderBlock(Module):
    """
    Pre-LN transformer block returning its self-attention weights.
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
        self.attn: MultiHeadAttention = MultiHeadAttention(width, heads, rng, dtype)
        self.ln2: LayerNorm = LayerNorm(width, dtype)
        self.ffn: FeedForward = FeedForward(width, hidden, width, rng, dtype, dropout_rate)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        normed: Tensor = self.ln1(x)
        attended: AttentionOutput = self.attn.attend(normed, normed, normed)
        x = add(x, attended.output)
        x = add(x, self.ffn(self.ln2(x)))
        return x, attended.weights


class VisualEncoding:
    """
    VisualEncoding class.

    F_v together with the per-layer self-attention weights [B, h, N, N]
    used for attention accumulation.
    """

    def __init__(
        self,
        features: Tensor,
        attention: List[Tensor],
    ) -> None:
        self._features: Final[Tensor] = features
        self._attention: Final[List[Tensor]] = attention

    def __repr__(self) -> str:
        return f"VisualEncoding(features={self._features.shape}, layers={len(self._attention)})"

    @property
    def features(self) -> Tensor:
        return self._features

    @property
    def attention(self) -> List[Tensor]:
        return self._attention

    def attention_maps(self) -> List[np.ndarray]:
        return [weights.data for weights in self._attention]


class VisualEncoder(Module):
    """
    VisualEncoder class.

    A convolution-free patch stem (patchify + linear projection), a learned
    2D positional table and L_enc pre-LN transformer blocks. Output: N =
    (H*W)/patch^2 tokens of width d.
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        """
        Initialize the VisualEncoder object.

        :param config: The configuration (data.* and model.* keys).
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
        self._patch: int = config["data.patch"]
        self._grid: int = config.grid
        self.stem: Linear = Linear(config.patch_dim, width, rng, dtype)
        self.pos: PositionalEncoding2D = PositionalEncoding2D(config.grid, width, rng, dtype)
        self.blocks: ModuleList = ModuleList(
            [
                EncoderBlock(width, config["model.heads"], width * config["model.ffn_mult"], rng, dtype, config["model.dropout"])
                for _ in range(config["model.enc_blocks"])
            ]
        )
        self.norm: LayerNorm = LayerNorm(width, dtype)

    @property
    def grid(self) -> int:
        return self._grid

    @property
    def patch(self) -> int:
        return self._patch

    def _batched(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.stem.weight.dtype)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1] != self._grid * self._patch or images.shape[2] != self._grid * self._patch:
            raise ShapeError(f"image {images.shape[1:3]} does not match the {self._grid}x{self._patch} grid")
        return images

    def embed_patches(self, images: np.ndarray) -> Tensor:
        """
        Pre-positional patch embeddings [B, N, d].

        :raises ShapeError: If image dimensions are not divisible by the patch.
        """

        images = np.asarray(images, dtype=self.stem.weight.dtype)
        if images.ndim == 3:
            images = images[None]
        return self.stem(Tensor(patchify(images, self._patch)))

    def _run(self, x: Tensor) -> VisualEncoding:
        maps: List[Tensor] = []
        for block in self.blocks:
            x, weights = block(x)
            maps.append(weights)
        return VisualEncoding(self.norm(x), maps)

    def encode_image(self, images: np.ndarray) -> VisualEncoding:
        """
        Encode [B, H, W, C] (or a single [H, W, C]) images into F_v [B, N, d].

        :param images: The images.
        :type images: np.ndarray

        :return: F_v and the attention maps.
        :rtype: VisualEncoding

        :raises ShapeError: If the image does not match the configured grid.
        """

        batched: np.ndarray = self._batched(images)
        return self._run(self.pos(self.embed_patches(batched)))

    def encode_visible(
        self,
        images: np.ndarray,
        visible: np.ndarray,
    ) -> VisualEncoding:
        """
        Encode only the visible patch tokens [B, n_visible] (masked image
        modeling); positions are those of the kept tokens.
        """

        tokens: Tensor = self.pos(self.embed_patches(self._batched(images)))
        return self._run(gather_rows(tokens, visible))


class TextEmbedder(Module):
    """
    TextEmbedder class.

    Token embedding table [V, d] plus a learned 1D positional table
    [n_max, d].
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.tokens: Embedding = Embedding(config["data.vocab_size"], config["model.width"], rng, dtype)
        self.pos: PositionalEncoding1D = PositionalEncoding1D(config["data.n_max"], config["model.width"], rng, dtype)

    @property
    def table(self) -> Tensor:
        return self.tokens.table

    def embed_text(self, tokens: np.ndarray) -> Tensor:
        """
        Lookup plus positions: [B, L] (or [L]) ids to [B, L, d] (or [L, d]).

        :raises TokenIndexError: If an id is outside the vocabulary.
        """

        return self.pos(self.tokens(np.asarray(tokens, dtype=np.int64)))


class Encoders(Module):
    """
    Container giving the shared encoders their "enc.vis" / "enc.txt" names.
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.vis: VisualEncoder = VisualEncoder(config, rng, dtype)
        self.txt: TextEmbedder = TextEmbedder(config, rng, dtype)
