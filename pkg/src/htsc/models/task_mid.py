"""
Cross-modal alignment: prefix language modeling (PLM) and masked image
modeling (MIM) over the shared encoder and decoder trunk.
"""

import logging
import math

from typing import Final, List, Optional, Sequence, Union

import numpy as np

from ..core.tensor import Tensor, add, getitem, mse, mul, scatter_rows, softmax_cross_entropy
from ..data.synth import PAD
from ..utils.errors import ConfigError, ShapeError
from .decoder import Decoder, key_padding_mask, prefix_lm_mask
from .encoders import VisualEncoder, patchify


__all__: Final[List[str]] = [
    "MaskPlan",
    "PrefixSplit",
    "make_mask_plan",
    "masked_patch_loss",
    "mid_level_loss",
    "mim_loss",
    "plm_logits",
    "plm_loss",
    "plm_targets",
    "sample_prefix_split",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


class PrefixSplit:
    """
    PrefixSplit class.

    Split index n_p of a report of length n (BOS and EOS included): tokens
    [0, n_p) form the prefix, [n_p, n) the suffix.
    """

    def __init__(
        self,
        n_p: int,
        length: int,
    ) -> None:
        """
        Initialize the PrefixSplit object.

        :param n_p: The split index.
        :type n_p: int
        :param length: The report length n.
        :type length: int

        :return: None
        :rtype: None

        :raises ShapeError: If n_p is outside [1, n - 1].
        """

        if not 1 <= n_p <= length - 1:
            raise ShapeError(f"prefix split {n_p} outside [1, {length - 1}]")

        # Store the split index
        self._n_p: Final[int] = int(n_p)

        # Store the report length
        self._length: Final[int] = int(length)

    def __repr__(self) -> str:
        return f"PrefixSplit(n_p={self._n_p}, length={self._length})"

    @property
    def n_p(self) -> int:
        return self._n_p

    @property
    def length(self) -> int:
        return self._length

    def prefix(self, tokens: Sequence[int]) -> List[int]:
        return list(tokens[: self._n_p])

    def suffix(self, tokens: Sequence[int]) -> List[int]:
        return list(tokens[self._n_p : self._length])


def sample_prefix_split(
    length: int,
    rng: np.random.Generator,
) -> PrefixSplit:
    """
    Draw n_p uniformly from [1, n - 1].
    """

    if length < 2:
        raise ShapeError(f"a report of length {length} has no suffix to predict")
    return PrefixSplit(int(rng.integers(1, length)), length)


class MaskPlan:
    """
    MaskPlan class.

    Sorted masked patch ids (exactly ceil(r * N) of them) and their visible
    complement.
    """

    def __init__(
        self,
        masked: np.ndarray,
        num_tokens: int,
        rate: float,
    ) -> None:
        masked = np.sort(np.asarray(masked, dtype=np.int64))
        if masked.size and (masked[0] < 0 or masked[-1] >= num_tokens or np.any(np.diff(masked) == 0)):
            raise ShapeError(f"mask ids must be unique and in [0, {num_tokens})")
        self._masked: Final[np.ndarray] = masked
        self._num_tokens: Final[int] = num_tokens
        self._rate: Final[float] = rate

    def __repr__(self) -> str:
        return f"MaskPlan(masked={self._masked.size}/{self._num_tokens}, rate={self._rate})"

    def __len__(self) -> int:
        return int(self._masked.size)

    @property
    def masked(self) -> np.ndarray:
        return self._masked

    @property
    def num_tokens(self) -> int:
        return self._num_tokens

    @property
    def rate(self) -> float:
        return self._rate

    @property
    def visible(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self._num_tokens), self._masked)

    def indicator(self) -> np.ndarray:
        flags: np.ndarray = np.zeros(self._num_tokens)
        flags[self._masked] = 1.0
        return flags


def make_mask_plan(
    num_tokens: int,
    rate: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """
    Sample max(1, ceil(r * N)) patch ids uniformly without replacement.

    :param num_tokens: N.
    :type num_tokens: int
    :param rate: Mask rate r in (0, 1).
    :type rate: float
    :param rng: The sample's mask generator.
    :type rng: np.random.Generator

    :return: The plan.
    :rtype: MaskPlan

    :raises ConfigError: If r is outside (0, 1) or no patch would stay visible.
    """

    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mim.rate must lie in (0, 1), got {rate}")
    # float products like 0.85 * 20 must not round up past the integer
    count: int = max(1, math.ceil(rate * num_tokens - 1e-9))
    if count >= num_tokens:
        raise ConfigError(f"mim.rate={rate} masks all {num_tokens} patches")
    return MaskPlan(rng.choice(num_tokens, size=count, replace=False), num_tokens, rate)


def plm_targets(
    tokens: np.ndarray,
    prefix_lengths: np.ndarray,
) -> np.ndarray:
    """
    Next-token targets [B, L-1]: tokens[:, 1:] with prefix positions
    (index < n_p) replaced by PAD so they are not scored.
    """

    tokens = np.asarray(tokens, dtype=np.int64)
    targets: np.ndarray = tokens[:, 1:].copy()
    index: np.ndarray = np.arange(1, tokens.shape[1])[None, :]
    targets[index < np.asarray(prefix_lengths)[:, None]] = PAD
    return targets


def plm_logits(
    features: Tensor,
    text: Tensor,
    prefix_lengths: np.ndarray,
    decoder: Decoder,
    memory_gate: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Decoder logits [B, L, V] under the prefix-LM mask: prefix tokens see
    each other and F_v, suffix tokens see the prefix and earlier suffix.
    """

    mask: np.ndarray = prefix_lm_mask(prefix_lengths, text.shape[-2])
    hidden: Tensor = decoder.run(text, features, self_mask=mask, memory_gate=memory_gate)
    return decoder.logits(hidden)


def plm_loss(
    features: Tensor,
    text: Tensor,
    tokens: np.ndarray,
    prefix_lengths: Union[np.ndarray, Sequence[int]],
    decoder: Decoder,
    memory_gate: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Teacher-forced suffix NLL, summed per sample and averaged over the batch.

    :param features: F_v [B, N, d].
    :type features: Tensor
    :param text: F_w, embedded report tokens [B, L, d].
    :type text: Tensor
    :param tokens: Report ids [B, L], PAD after EOS.
    :type tokens: np.ndarray
    :param prefix_lengths: n_p per sample.
    :type prefix_lengths: Union[np.ndarray, Sequence[int]]
    :param decoder: The shared decoder trunk.
    :type decoder: Decoder
    :param memory_gate: Optional per-sample 0/1 gate; 0 is the no-vision mode.
    :type memory_gate: Optional[np.ndarray]

    :return: The scalar loss.
    :rtype: Tensor

    :raises ShapeError: If some n_p leaves an empty suffix.
    """

    tokens = np.asarray(tokens, dtype=np.int64)
    prefix_lengths = np.asarray(prefix_lengths, dtype=np.int64).reshape(-1)
    lengths: np.ndarray = (tokens != PAD).sum(axis=1)
    if np.any(prefix_lengths < 1) or np.any(prefix_lengths > lengths - 1):
        raise ShapeError(f"prefix lengths {prefix_lengths.tolist()} outside [1, n - 1] for lengths {lengths.tolist()}")

    logits: Tensor = plm_logits(features, text, prefix_lengths, decoder, memory_gate)
    shifted: Tensor = getitem(logits, (slice(None), slice(None, -1)))
    total: Tensor = softmax_cross_entropy(shifted, plm_targets(tokens, prefix_lengths), reduction="sum", ignore_index=PAD)
    return mul(total, 1.0 / tokens.shape[0])


def masked_patch_loss(
    prediction: Tensor,
    target: np.ndarray,
    indicator: np.ndarray,
) -> Tensor:
    """
    Mean squared error over the pixels of masked patches only.

    :param prediction: Reconstructed patches [B, N, p*p*C].
    :type prediction: Tensor
    :param target: Ground-truth patches of the same shape.
    :type target: np.ndarray
    :param indicator: [B, N] with 1 at masked patches.
    :type indicator: np.ndarray

    :return: The scalar loss.
    :rtype: Tensor
    """

    return mse(prediction, target, weight=np.asarray(indicator, dtype=prediction.dtype)[..., None])


def mim_loss(
    images: np.ndarray,
    text: Tensor,
    tokens: np.ndarray,
    plans: Sequence[MaskPlan],
    encoder: VisualEncoder,
    decoder: Decoder,
) -> Tensor:
    """
    Reconstruct masked pixel patches from the visible patch tokens and the
    full-report text embeddings.

    The encoder sees only visible patches; the decoder input is the
    encoded visible rows scattered back to their grid slots, the learned
    mask token in masked slots and the patch positions everywhere. The
    decoder runs without a causal mask and cross-attends to the non-pad
    report tokens.

    :param images: [B, H, W, C].
    :type images: np.ndarray
    :param text: Full-report embeddings [B, L, d].
    :type text: Tensor
    :param tokens: Report ids [B, L] (for the padding mask).
    :type tokens: np.ndarray
    :param plans: One mask plan per sample, all with the same count.
    :type plans: Sequence[MaskPlan]
    :param encoder: The visual encoder.
    :type encoder: VisualEncoder
    :param decoder: The shared decoder trunk.
    :type decoder: Decoder

    :return: The scalar loss.
    :rtype: Tensor
    """

    images = np.asarray(images)
    if len(plans) != images.shape[0]:
        raise ShapeError(f"{len(plans)} mask plans for a batch of {images.shape[0]}")
    if len({len(plan) for plan in plans}) != 1:
        raise ShapeError("mask plans of one batch must mask the same number of patches")

    num_tokens: int = plans[0].num_tokens
    visible: np.ndarray = np.stack([plan.visible for plan in plans])
    indicator: np.ndarray = np.stack([plan.indicator() for plan in plans])

    encoded: Tensor = encoder.encode_visible(images, visible).features
    grid: Tensor = scatter_rows(encoded, visible, num_tokens)
    masked_slots: Tensor = mul(decoder.mask_token, indicator.astype(grid.dtype)[..., None])
    queries: Tensor = add(add(grid, masked_slots), decoder.patch_pos.flat())

    hidden: Tensor = decoder.run(queries, text, memory_mask=key_padding_mask(tokens, PAD))
    return masked_patch_loss(decoder.patches(hidden), patchify(images, encoder.patch), indicator)


def mid_level_loss(
    plm: Union[Tensor, float],
    mim: Union[Tensor, float],
) -> Union[Tensor, float]:
    """
    L_mid = L_PLM + L_MIM.
    """

    if isinstance(plm, Tensor) or isinstance(mim, Tensor):
        return add(plm, mim)
    return plm + mim
