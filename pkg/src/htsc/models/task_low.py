"""
Entity-level knowledge injection: existence and location heads over F_v,
the existence loss, the location contrastive loss and their sum.
"""

import logging

from typing import Final, List, Optional, Union

import numpy as np

from ..core.layers import LayerNorm, Linear, Module, MultiHeadAttention
from ..core.tensor import (
    Parameter,
    Tensor,
    add,
    clamp,
    concat,
    embedding,
    getitem,
    log,
    mul,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    sub,
    sum,
)
from ..training.config import Config
from ..utils.errors import ConfigError, ShapeError


__all__: Final[List[str]] = [
    "EntityHeads",
    "EntityPrediction",
    "EntityQuerySet",
    "entity_existence_loss",
    "entity_location_loss",
    "low_level_loss",
    "sample_negatives",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

CLAMP: Final[float] = 1e-7


class EntityQuerySet(Module):
    """
    EntityQuerySet class.

    Learned entity queries [Q, d] and position table P_tab [P, d].
    """

    def __init__(
        self,
        entities: int,
        positions: int,
        width: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.queries: Parameter = Parameter(rng.normal(0.0, 0.02, size=(entities, width)), dtype=dtype)
        self.positions: Parameter = Parameter(rng.normal(0.0, 0.02, size=(positions, width)), dtype=dtype)

    @property
    def entities(self) -> int:
        return self.queries.shape[0]

    @property
    def num_positions(self) -> int:
        return self.positions.shape[0]


class EntityPrediction:
    """
    EntityPrediction class.

    s_hat: existence probabilities [B, Q]; p_hat: predicted position
    embeddings [B, Q, d].
    """

    def __init__(
        self,
        s_hat: Tensor,
        p_hat: Tensor,
    ) -> None:
        self._s_hat: Final[Tensor] = s_hat
        self._p_hat: Final[Tensor] = p_hat

    def __repr__(self) -> str:
        return f"EntityPrediction(s_hat={self._s_hat.shape}, p_hat={self._p_hat.shape})"

    @property
    def s_hat(self) -> Tensor:
        return self._s_hat

    @property
    def p_hat(self) -> Tensor:
        return self._p_hat


class EntityHeads(Module):
    """
    EntityHeads class.

    Cross-attention from the Q entity queries onto F_v, then an existence
    head sigmoid(Linear -> 1) and a location head Linear -> d.
    """

    def __init__(
        self,
        config: Config,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        width: int = config["model.width"]
        self.query_set: EntityQuerySet = EntityQuerySet(config["eclo.Q"], config["eclo.P"], width, rng, dtype)
        self.ln: LayerNorm = LayerNorm(width, dtype)
        self.attn: MultiHeadAttention = MultiHeadAttention(width, config["model.heads"], rng, dtype)
        self.exist: Linear = Linear(width, 1, rng, dtype)
        self.loc: Linear = Linear(width, width, rng, dtype)

    def predict_entities(self, features: Tensor) -> EntityPrediction:
        """
        Predict existence and location of every entity.

        :param features: F_v [B, N, d].
        :type features: Tensor

        :return: The prediction.
        :rtype: EntityPrediction
        """

        batch: int = features.shape[0]
        queries: Tensor = add(np.zeros((batch,) + self.query_set.queries.shape, dtype=features.dtype), self.query_set.queries)
        memory: Tensor = self.ln(features)
        hidden: Tensor = add(queries, self.attn(queries, memory, memory))
        logits: Tensor = self.exist(hidden)
        s_hat: Tensor = sigmoid(reshape(logits, logits.shape[:-1]))
        return EntityPrediction(s_hat, self.loc(hidden))


def _batched(value: Tensor) -> Tensor:
    return reshape(value, (1,) + value.shape) if value.ndim == 1 else value


def entity_existence_loss(
    s_hat: Tensor,
    labels: np.ndarray,
    form: str = "full",
) -> Tensor:
    """
    Existence loss, summed over entities and averaged over the batch.

    full: -sum[y log s + (1 - y) log(1 - s)]; literal: -sum y log s.
    Probabilities are clamped into [1e-7, 1 - 1e-7].

    :param s_hat: Probabilities [B, Q] (or [Q]).
    :type s_hat: Tensor
    :param labels: Binary labels of the same shape.
    :type labels: np.ndarray
    :param form: "full" or "literal".
    :type form: str

    :return: The scalar loss.
    :rtype: Tensor

    :raises ConfigError: If form is unknown.
    """

    if form not in ("full", "literal"):
        raise ConfigError(f"unknown eclo.cls_form {form!r}")
    probs: Tensor = clamp(_batched(s_hat), CLAMP, 1.0 - CLAMP)
    y: np.ndarray = np.asarray(labels, dtype=probs.dtype).reshape(probs.shape)
    terms: Tensor = mul(log(probs), y)
    if form == "full":
        terms = add(terms, mul(log(sub(1.0, probs)), 1.0 - y))
    return mul(sum(terms), -1.0 / probs.shape[0])


def sample_negatives(
    true_positions: np.ndarray,
    num_positions: int,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw count negatives per row uniformly without replacement from the
    positions other than the true one.

    :param true_positions: True position ids [n].
    :type true_positions: np.ndarray
    :param num_positions: P.
    :type num_positions: int
    :param count: M.
    :type count: int
    :param rng: The batch's generator.
    :type rng: np.random.Generator

    :return: Negative ids [n, M].
    :rtype: np.ndarray

    :raises ConfigError: If M >= P.
    """

    if count >= num_positions:
        raise ConfigError(f"cannot draw eclo.M={count} negatives from P={num_positions} positions")
    everyone: np.ndarray = np.arange(num_positions)
    rows: List[np.ndarray] = [rng.choice(everyone[everyone != true], size=count, replace=False) for true in np.asarray(true_positions)]
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), count)


def entity_location_loss(
    p_hat: Tensor,
    positions: np.ndarray,
    table: Tensor,
    count: int,
    rng: np.random.Generator,
    form: str = "infonce",
    negatives: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Contrastive location loss over present entities only.

    Similarities are dot products of p_hat with the true position embedding
    and M sampled negatives. infonce: -log softmax at the true position;
    literal: minus the softmax ratio itself (in [-1, 0]). Each present
    entity of sample b weighs 1 / (|Q+_b| * B).

    :param p_hat: Predicted position embeddings [B, Q, d] (or [Q, d]).
    :type p_hat: Tensor
    :param positions: True position id per entity [B, Q], -1 where absent.
    :type positions: np.ndarray
    :param table: Position table P_tab [P, d].
    :type table: Tensor
    :param count: M, negatives per positive.
    :type count: int
    :param rng: Generator for negative sampling.
    :type rng: np.random.Generator
    :param form: "infonce" or "literal".
    :type form: str
    :param negatives: Optional fixed negatives [n_pos, M].
    :type negatives: Optional[np.ndarray]

    :return: The scalar loss (0 when nothing is present).
    :rtype: Tensor

    :raises ConfigError: If M >= P or the form is unknown.
    """

    if form not in ("infonce", "literal"):
        raise ConfigError(f"unknown eclo.loc_form {form!r}")
    predicted: Tensor = reshape(p_hat, (1,) + p_hat.shape) if p_hat.ndim == 2 else p_hat
    where: np.ndarray = np.asarray(positions, dtype=np.int64).reshape(predicted.shape[:2])
    if count >= table.shape[0]:
        raise ConfigError(f"cannot draw eclo.M={count} negatives from P={table.shape[0]} positions")
    rows, cols = np.nonzero(where >= 0)
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=predicted.dtype))

    truth: np.ndarray = where[rows, cols]
    if negatives is None:
        negatives = sample_negatives(truth, table.shape[0], count, rng)
    elif negatives.shape != (rows.size, count) or np.any(negatives == truth[:, None]):
        raise ShapeError("fixed negatives must be [n_pos, M] and exclude the true positions")

    chosen: Tensor = getitem(predicted, (rows, cols))
    positive: Tensor = sum(mul(chosen, embedding(table, truth)), axis=-1, keepdims=True)
    negative: Tensor = sum(mul(reshape(chosen, (rows.size, 1, chosen.shape[-1])), embedding(table, negatives)), axis=-1)
    scores: Tensor = concat([positive, negative], axis=-1)

    per_sample: np.ndarray = np.bincount(rows, minlength=predicted.shape[0])
    weights: np.ndarray = (1.0 / (per_sample[rows] * predicted.shape[0])).astype(predicted.dtype)
    if form == "infonce":
        nll: Tensor = softmax_cross_entropy(scores, np.zeros(rows.size, dtype=np.int64), reduction="none")
        return sum(mul(nll, weights))
    ratio: Tensor = getitem(softmax(scores, axis=-1), (slice(None), 0))
    return mul(sum(mul(ratio, weights)), -1.0)


def low_level_loss(
    cls_loss: Union[Tensor, float],
    loc_loss: Union[Tensor, float],
) -> Union[Tensor, float]:
    """
    L_low = L_cls + L_loc.
    """

    if isinstance(cls_loss, Tensor) or isinstance(loc_loss, Tensor):
        return add(cls_loss, loc_loss)
    return cls_loss + loc_loss
