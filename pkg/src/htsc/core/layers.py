"""
Neural network building blocks on top of htsc.core.tensor.

Modules own Parameters as attributes; a parameter's name is the dotted
attribute path from the root module, which is what checkpoints and the
stage-1 to stage-2 transfer key on.
"""

import math

from typing import Dict, Final, Iterator, List, Optional, Tuple

import numpy as np

from ..utils.errors import CheckpointError, ConfigError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    add,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)


__all__: Final[List[str]] = [
    "AttentionOutput",
    "Embedding",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "MultiHeadAttention",
    "PositionalEncoding1D",
    "PositionalEncoding2D",
    "causal_mask",
    "scaled_dot_product_attention",
]


class Module:
    """
    Module class.

    Base class of every trainable component. Parameters and sub-modules are
    discovered from instance attributes in definition order.
    """

    def __init__(self) -> None:
        # Store the train/eval flag
        self._training: bool = True

    def named_parameters(
        self,
        prefix: str = "",
    ) -> Iterator[Tuple[str, Parameter]]:
        """
        Yield (dotted name, parameter) pairs in definition order.

        :param prefix: Prefix prepended to every name.
        :type prefix: str

        :return: Iterator over the parameters.
        :rtype: Iterator[Tuple[str, Parameter]]
        """

        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path: str = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{path}.")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for attr, value in vars(self).items():
            if not attr.startswith("_") and isinstance(value, Module):
                yield from value.modules()

    def assign_names(
        self,
        prefix: str = "",
    ) -> None:
        """
        Write each parameter's dotted path into its name field.
        """

        for path, param in self.named_parameters(prefix=prefix):
            param.name = path

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def train(
        self,
        mode: bool = True,
    ) -> "Module":
        for module in self.modules():
            module._training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._training

    def state_dict(self) -> Dict[str, np.ndarray]:
        """
        Return a name → array map (arrays are the live buffers).
        """

        return {name: param.data for name, param in self.named_parameters()}

    def load_state_dict(
        self,
        state: Dict[str, np.ndarray],
        strict: bool = True,
    ) -> List[str]:
        """
        Copy arrays into matching parameters.

        :param state: The name → array map.
        :type state: Dict[str, np.ndarray]
        :param strict: Require every parameter to be present.
        :type strict: bool

        :return: The names of parameters that were not found in state.
        :rtype: List[str]

        :raises CheckpointError: On shape mismatch, or missing names when strict.
        """

        missing: List[str] = []
        for name, param in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            value: np.ndarray = np.asarray(state[name])
            if value.shape != param.shape:
                raise CheckpointError(f"shape mismatch for {name}: {value.shape} vs {param.shape}")
            param.data[...] = value.astype(param.dtype)
        if strict and missing:
            raise CheckpointError(f"state is missing parameters: {', '.join(missing)}")
        return missing


class ModuleList(Module):
    """
    ModuleList class.

    Holds an ordered list of modules named "0", "1", ...
    """

    def __init__(
        self,
        modules: List[Module],
    ) -> None:
        super().__init__()
        self._items: List[Module] = list(modules)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for index, module in enumerate(self._items):
            yield from module.named_parameters(prefix=f"{prefix}{index}.")

    def modules(self) -> Iterator[Module]:
        yield self
        for module in self._items:
            yield from module.modules()


class Linear(Module):
    """
    Linear class.

    y = x W + b with W of shape [in, out], Glorot-uniform initialised.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        bias: bool = True,
        zero_init: bool = False,
    ) -> None:
        """
        Initialize the Linear object.

        :param in_features: Input width.
        :type in_features: int
        :param out_features: Output width.
        :type out_features: int
        :param rng: Generator used for initialisation.
        :type rng: np.random.Generator
        :param dtype: Parameter dtype.
        :type dtype: np.dtype
        :param bias: Whether to learn a bias.
        :type bias: bool
        :param zero_init: Initialise the weight to zeros.
        :type zero_init: bool

        :return: None
        :rtype: None
        """

        super().__init__()
        limit: float = math.sqrt(6.0 / (in_features + out_features))
        weight: np.ndarray = (
            np.zeros((in_features, out_features))
            if zero_init
            else rng.uniform(-limit, limit, size=(in_features, out_features))
        )
        self.weight: Parameter = Parameter(weight, dtype=dtype)
        self.bias: Optional[Parameter] = Parameter(np.zeros(out_features), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out: Tensor = matmul(x, self.weight)
        return out if self.bias is None else add(out, self.bias)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


class LayerNorm(Module):
    def __init__(
        self,
        width: int,
        dtype: np.dtype = np.float32,
        eps: float = 1e-5,
    ) -> None:
        super().__init__()
        self.gamma: Parameter = Parameter(np.ones(width), dtype=dtype)
        self.beta: Parameter = Parameter(np.zeros(width), dtype=dtype)
        self._eps: float = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)


class Embedding(Module):
    """
    Embedding class.

    A trainable [count, width] lookup table.
    """

    def __init__(
        self,
        count: int,
        width: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        scale: float = 0.02,
    ) -> None:
        super().__init__()
        self.table: Parameter = Parameter(rng.normal(0.0, scale, size=(count, width)), dtype=dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.table, ids)

    @property
    def count(self) -> int:
        return self.table.shape[0]


class PositionalEncoding1D(Module):
    """
    Learned 1D positional table [length, width] added to token embeddings.
    """

    def __init__(
        self,
        length: int,
        width: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.table: Parameter = Parameter(rng.normal(0.0, 0.02, size=(length, width)), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        """
        Add positions 0..n-1 to x of shape [..., n, width].

        :raises ShapeError: If n exceeds the table length.
        """

        length: int = x.shape[-2]
        if length > self.table.shape[0]:
            raise ShapeError(f"sequence length {length} exceeds positional table {self.table.shape[0]}")
        return add(x, self.table[:length])


class PositionalEncoding2D(Module):
    """
    Learned 2D positional table [grid, grid, width] added to a flattened
    row-major token grid.
    """

    def __init__(
        self,
        grid: int,
        width: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ) -> None:
        super().__init__()
        self.table: Parameter = Parameter(rng.normal(0.0, 0.02, size=(grid, grid, width)), dtype=dtype)

    def flat(self) -> Tensor:
        grid, _, width = self.table.shape
        return reshape(self.table, (grid * grid, width))

    def __call__(self, x: Tensor) -> Tensor:
        grid: int = self.table.shape[0]
        if x.shape[-2] != grid * grid:
            raise ShapeError(f"expected {grid * grid} grid tokens, got {x.shape[-2]}")
        return add(x, self.flat())


def causal_mask(length: int) -> np.ndarray:
    """
    Boolean [length, length] mask; True where key position <= query position.
    """

    return np.tril(np.ones((length, length), dtype=bool))


class AttentionOutput:
    """
    AttentionOutput class.

    Pairs the attended tensor with the per-head attention weights (as plain
    arrays, used for attention accumulation).
    """

    def __init__(
        self,
        output: Tensor,
        weights: Tensor,
    ) -> None:
        self._output: Final[Tensor] = output
        self._weights: Final[Tensor] = weights

    def __repr__(self) -> str:
        return f"AttentionOutput(output={self._output.shape}, weights={self._weights.shape})"

    @property
    def output(self) -> Tensor:
        return self._output

    @property
    def weights(self) -> Tensor:
        return self._weights


_MASK_FILL: Final[float] = -1e9


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    split: Tensor = reshape(x, (*lead, length, heads, width // heads))
    n: int = len(lead)
    return transpose(split, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, head_width = x.shape
    n: int = len(lead)
    merged: Tensor = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(merged, (*lead, length, heads * head_width))


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> AttentionOutput:
    """
    Multi-head scaled dot-product attention without projections.

    :param q: Queries [..., Lq, d].
    :type q: Tensor
    :param k: Keys [..., Lk, d].
    :type k: Tensor
    :param v: Values [..., Lk, d].
    :type v: Tensor
    :param heads: Number of heads; d must be divisible by it.
    :type heads: int
    :param mask: Boolean mask broadcastable to [..., heads, Lq, Lk];
        True marks allowed key positions.
    :type mask: Optional[np.ndarray]

    :return: Concatenated head outputs [..., Lq, d] and weights [..., h, Lq, Lk].
    :rtype: AttentionOutput

    :raises ConfigError: If d is not divisible by heads.
    """

    width: int = q.shape[-1]
    if width % heads:
        raise ConfigError(f"attention width {width} is not divisible by {heads} heads")
    if k.shape[-1] != width or v.shape[-1] != width or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale: float = 1.0 / math.sqrt(width // heads)

    qh: Tensor = _split_heads(q, heads)
    kh: Tensor = _split_heads(k, heads)
    vh: Tensor = _split_heads(v, heads)

    scores: Tensor = matmul(qh, kh.T) * scale
    if mask is not None:
        scores = add(scores, np.where(mask, 0.0, _MASK_FILL).astype(scores.dtype))
    weights: Tensor = softmax(scores, axis=-1)
    return AttentionOutput(_merge_heads(matmul(weights, vh)), weights)


class MultiHeadAttention(Module):
    """
    MultiHeadAttention class.

    Standard multi-head attention: per-head scaled dot products with
    scale 1/sqrt(d/heads), concatenation and an output projection.
    """

    def __init__(
        self,
        width: int,
        heads: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        zero_output: bool = False,
    ) -> None:
        """
        Initialize the MultiHeadAttention object.

        :param width: Model width d.
        :type width: int
        :param heads: Number of heads.
        :type heads: int
        :param rng: Generator used for initialisation.
        :type rng: np.random.Generator
        :param dtype: Parameter dtype.
        :type dtype: np.dtype
        :param zero_output: Zero-initialise the output projection so the
            block contributes nothing until trained.
        :type zero_output: bool

        :return: None
        :rtype: None

        :raises ConfigError: If width is not divisible by heads.
        """

        super().__init__()
        if heads < 1 or width % heads:
            raise ConfigError(f"attention width {width} is not divisible by {heads} heads")
        self._heads: int = heads
        self.q: Linear = Linear(width, width, rng, dtype)
        self.k: Linear = Linear(width, width, rng, dtype)
        self.v: Linear = Linear(width, width, rng, dtype)
        self.o: Linear = Linear(width, width, rng, dtype, zero_init=zero_output)

    @property
    def heads(self) -> int:
        return self._heads

    def attend(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        mask: Optional[np.ndarray] = None,
    ) -> AttentionOutput:
        """
        Run attention and return both the output and the weights.
        """

        inner: AttentionOutput = scaled_dot_product_attention(
            self.q(query),
            self.k(key),
            self.v(value),
            self._heads,
            mask,
        )
        return AttentionOutput(self.o(inner.output), inner.weights)

    def __call__(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        return self.attend(query, key, value, mask).output


class FeedForward(Module):
    """
    FeedForward class.

    Two linear layers with a GELU in between; in and out widths may differ
    (the visual mediator projects 2d to d).
    """

    def __init__(
        self,
        in_width: int,
        hidden: int,
        out_width: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
        dropout_rate: float = 0.0,
    ) -> None:
        super().__init__()
        self.fc1: Linear = Linear(in_width, hidden, rng, dtype)
        self.fc2: Linear = Linear(hidden, out_width, rng, dtype)
        self._dropout: float = dropout_rate
        self._rng: np.random.Generator = rng

    def __call__(self, x: Tensor) -> Tensor:
        hidden: Tensor = dropout(gelu(self.fc1(x)), self._dropout, self._rng, self.training)
        return self.fc2(hidden)
