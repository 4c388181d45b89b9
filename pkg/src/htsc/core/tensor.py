"""
Dense tensor with reverse-mode automatic differentiation on top of numpy.

Every differentiable op records its parents and a closure that maps the
output gradient to one gradient per parent. Ops are generic over float32
(training) and float64 (gradient checks); the dtype of the first operand
wins.
"""

import logging

from contextlib import contextmanager
from typing import (
    Any,
    Callable,
    Final,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ..utils.errors import NumericError, ShapeError, TokenIndexError


__all__: Final[List[str]] = [
    "Parameter",
    "Tensor",
    "add",
    "clamp",
    "concat",
    "div",
    "dropout",
    "embedding",
    "exp",
    "gather_rows",
    "getitem",
    "gelu",
    "is_debug",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "maxpool2d",
    "mean",
    "mse",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scatter_rows",
    "set_debug",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "sub",
    "sum",
    "swapaxes",
    "tensor",
    "transpose",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Module level switches
_STATE: Final[dict] = {"debug": False, "grad": True}


def set_debug(flag: bool) -> None:
    """
    Enable or disable the finiteness assertion after every op.

    :param flag: True to check every op output for NaN/Inf.
    :type flag: bool

    :return: None
    :rtype: None
    """

    _STATE["debug"] = bool(flag)


def is_debug() -> bool:
    return _STATE["debug"]


def is_grad_enabled() -> bool:
    return _STATE["grad"]


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Context manager disabling tape recording.
    """

    previous: bool = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = previous


def _as_array(
    value: Any,
    dtype: Optional[np.dtype] = None,
) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    array: np.ndarray = np.asarray(value)
    if dtype is not None:
        return array.astype(dtype, copy=False)
    if not np.issubdtype(array.dtype, np.floating):
        return array.astype(np.float32)
    return array


def _unbroadcast(
    grad: np.ndarray,
    shape: Tuple[int, ...],
) -> np.ndarray:
    # Sum away leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    # Sum along axes that were size one in the operand
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Tensor class.

    A dense n-dimensional array that optionally records the operation which
    produced it, so gradients can be propagated back with backward().
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ) -> None:
        """
        Initialize the Tensor object.

        :param data: The values; non-float inputs become float32.
        :type data: Any
        :param requires_grad: Whether gradients are accumulated for this tensor.
        :type requires_grad: bool
        :param dtype: Optional explicit dtype (float32 or float64).
        :type dtype: Optional[np.dtype]
        :param name: Optional name, used by parameters.
        :type name: Optional[str]

        :return: None
        :rtype: None
        """

        # Store the buffer
        self._data: np.ndarray = _as_array(data, dtype)

        # Store the gradient flag and the gradient buffer
        self._requires_grad: bool = bool(requires_grad)
        self._grad: Optional[np.ndarray] = None

        # Store the tape links
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Backward] = None
        self._op: str = "leaf"

        # Store the name
        self._name: Optional[str] = name

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, "
            f"requires_grad={self._requires_grad})"
        )

    def __str__(self) -> str:
        return self.__repr__()

    @property
    def data(self) -> np.ndarray:
        """
        Return the underlying buffer.

        :return: The numpy array holding the values.
        :rtype: np.ndarray
        """

        return self._data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if np.shape(value) != self._data.shape:
            raise ShapeError(f"cannot assign shape {np.shape(value)} to tensor of shape {self.shape}")
        self._data = np.asarray(value, dtype=self._data.dtype)

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def grad(self) -> Optional[np.ndarray]:
        """
        Return the accumulated gradient, or None when nothing was accumulated.

        :return: The gradient buffer.
        :rtype: Optional[np.ndarray]
        """

        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        if value is not None and np.shape(value) != self._data.shape:
            raise ShapeError(f"gradient shape {np.shape(value)} does not match {self.shape}")
        self._grad = value

    @property
    def name(self) -> Optional[str]:
        return self._name

    @name.setter
    def name(self, value: str) -> None:
        self._name = value

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def op(self) -> str:
        return self._op

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def item(self) -> float:
        """
        Return the single value of a one-element tensor.
        """

        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data

    def detach(self) -> "Tensor":
        """
        Return a tensor sharing the buffer but cut from the tape.
        """

        return Tensor(self._data)

    def zero_grad(self) -> None:
        """
        Reset the gradient buffer to zeros of the tensor's shape.
        """

        self._grad = np.zeros_like(self._data)

    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(
        self,
        grad: Optional[np.ndarray] = None,
    ) -> None:
        """
        Propagate gradients from this tensor to every leaf that requires them.

        Gradients are added into leaf buffers; intermediate buffers and the
        tape are released afterwards.

        :param grad: Seed gradient; defaults to ones for a scalar output.
        :type grad: Optional[np.ndarray]

        :return: None
        :rtype: None

        :raises ShapeError: If no seed is given for a non-scalar tensor.
        """

        if not self._requires_grad:
            raise ShapeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() needs an explicit gradient for non-scalar outputs")
            grad = np.ones_like(self._data)

        # Iterative topological sort (recursion would overflow on long tapes)
        order: List[Tensor] = []
        visited: set = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent._requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        # Seed the output gradient
        grads: dict = {id(self): np.asarray(grad, dtype=self._data.dtype)}

        for node in reversed(order):
            node_grad: Optional[np.ndarray] = grads.pop(id(node), None)
            if node._backward is None:
                # Leaf: accumulate into the pre-zeroed buffer
                if node_grad is not None:
                    if node._grad is None:
                        node._grad = np.zeros_like(node._data)
                    node._grad += node_grad
                continue
            if node_grad is None:
                continue
            parent_grads = node._backward(node_grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent._requires_grad:
                    continue
                parent_grad = _unbroadcast(np.asarray(parent_grad), parent.shape)
                key: int = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad.astype(parent.dtype, copy=False)

        # Free the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # Operator overloads

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, tuple(shape))

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """
    Parameter class.

    A trainable tensor (requires_grad is always True) whose name is the
    dotted path of its owning module, e.g. "enc.vis.blocks.0.attn.q.weight".
    """

    def __init__(
        self,
        data: Any,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ) -> None:
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name}, shape={self.shape}, dtype={self.dtype})"

    @property
    def tensor(self) -> Tensor:
        return self


def tensor(
    data: Any,
    requires_grad: bool = False,
    dtype: Optional[np.dtype] = None,
) -> Tensor:
    """
    Create a tensor; shorthand for Tensor(...).
    """

    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value: ArrayLike, like: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like)


def _make(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    backward: Backward,
    op: str,
) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _STATE["grad"] and any(parent.requires_grad for parent in parents):
        out._requires_grad = True
        out._parents = parents
        out._backward = backward
    if _STATE["debug"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}", {"op": op, "shape": list(data.shape)})
    return out


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.dtype), b
    return _lift(a), _lift(b)


# Elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise sum with numpy broadcasting.
    """

    x, y = _pair(a, b)
    return _make(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise difference with numpy broadcasting.
    """

    x, y = _pair(a, b)
    return _make(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Elementwise product with numpy broadcasting.
    """

    x, y = _pair(a, b)
    return _make(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data), "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    x, y = _pair(a, b)
    return _make(
        x.data / y.data,
        (x, y),
        lambda g: (g / y.data, -g * x.data / (y.data * y.data)),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out_data: np.ndarray = np.exp(x.data)
    return _make(out_data, (x,), lambda g: (g * out_data,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x: Tensor) -> Tensor:
    """
    Logistic function, evaluated in a numerically stable split form.
    """

    data: np.ndarray = x.data
    positive: np.ndarray = data >= 0
    z: np.ndarray = np.exp(-np.abs(data))
    out_data: np.ndarray = np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z)).astype(data.dtype)
    return _make(out_data, (x,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask: np.ndarray = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_GELU_C: Final[float] = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """
    GELU, tanh approximation.
    """

    data: np.ndarray = x.data
    inner: np.ndarray = _GELU_C * (data + 0.044715 * data**3)
    t: np.ndarray = np.tanh(inner)
    out_data: np.ndarray = 0.5 * data * (1.0 + t)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner: np.ndarray = _GELU_C * (1.0 + 3 * 0.044715 * data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * d_inner),)

    return _make(out_data.astype(data.dtype), (x,), backward, "gelu")


def clamp(
    x: Tensor,
    low: float,
    high: float,
) -> Tensor:
    """
    Clip values into [low, high]; the gradient passes only inside the range.
    """

    inside: np.ndarray = (x.data >= low) & (x.data <= high)
    return _make(np.clip(x.data, low, high), (x,), lambda g: (g * inside,), "clamp")


# Shape ops


def reshape(
    x: Tensor,
    shape: Tuple[int, ...],
) -> Tensor:
    original: Tuple[int, ...] = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),), "reshape")


def swapaxes(
    x: Tensor,
    axis1: int,
    axis2: int,
) -> Tensor:
    return _make(
        np.swapaxes(x.data, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
        "swapaxes",
    )


def transpose(
    x: Tensor,
    axes: Tuple[int, ...],
) -> Tensor:
    inverse: np.ndarray = np.argsort(axes)
    return _make(
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def getitem(
    x: Tensor,
    key: Any,
) -> Tensor:
    """
    Numpy indexing; the gradient is scattered back with np.add.at.
    """

    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full: np.ndarray = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.asarray(x.data[key]), (x,), backward, "getitem")


def concat(
    tensors: Sequence[Tensor],
    axis: int = -1,
) -> Tensor:
    """
    Concatenate tensors along an axis.

    :param tensors: The tensors; all other dimensions must agree.
    :type tensors: Sequence[Tensor]
    :param axis: The concatenation axis.
    :type axis: int

    :return: The concatenated tensor.
    :rtype: Tensor

    :raises ShapeError: If the non-concatenated dimensions disagree.
    """

    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    arrays: List[np.ndarray] = [t.data for t in tensors]
    try:
        out_data: np.ndarray = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[a.shape for a in arrays]}") from exc
    splits: np.ndarray = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _make(out_data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# Reductions


def sum(
    x: Tensor,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Tensor:
    shape: Tuple[int, ...] = x.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(
    x: Tensor,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
) -> Tensor:
    count: int = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# Linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes, batched over leading axes.

    :param a: Left operand [..., m, k].
    :type a: ArrayLike
    :param b: Right operand [..., k, n].
    :type b: ArrayLike

    :return: The product [..., m, n].
    :rtype: Tensor

    :raises ShapeError: If the inner dimensions disagree.
    """

    x, y = _pair(a, b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {x.shape} @ {y.shape}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (g @ np.swapaxes(y.data, -1, -2), np.swapaxes(x.data, -1, -2) @ g)

    return _make(x.data @ y.data, (x, y), backward, "matmul")


# Normalisation and probabilities


def softmax(
    x: Tensor,
    axis: int = -1,
) -> Tensor:
    """
    Softmax along an axis, shifted by the maximum for stability.
    """

    shifted: np.ndarray = x.data - x.data.max(axis=axis, keepdims=True)
    e: np.ndarray = np.exp(shifted)
    out_data: np.ndarray = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return _make(out_data, (x,), backward, "softmax")


def log_softmax(
    x: Tensor,
    axis: int = -1,
) -> Tensor:
    shifted: np.ndarray = x.data - x.data.max(axis=axis, keepdims=True)
    lse: np.ndarray = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data: np.ndarray = shifted - lse

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _make(out_data, (x,), backward, "log_softmax")


def layer_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
) -> Tensor:
    """
    Layer normalization over the last axis with affine parameters.

    :param x: Input [..., d].
    :type x: Tensor
    :param gamma: Scale [d].
    :type gamma: Tensor
    :param beta: Shift [d].
    :type beta: Tensor
    :param eps: Variance epsilon.
    :type eps: float

    :return: The normalized tensor.
    :rtype: Tensor
    """

    data: np.ndarray = x.data
    mu: np.ndarray = data.mean(axis=-1, keepdims=True)
    centered: np.ndarray = data - mu
    var: np.ndarray = (centered * centered).mean(axis=-1, keepdims=True)
    inv: np.ndarray = 1.0 / np.sqrt(var + eps)
    xhat: np.ndarray = centered * inv
    width: int = data.shape[-1]

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat: np.ndarray = g * gamma.data
        dx: np.ndarray = (inv / width) * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (dx, g * xhat, g)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# Indexing ops


def embedding(
    table: Tensor,
    ids: Any,
) -> Tensor:
    """
    Row lookup into an embedding table.

    :param table: Embedding table [V, d].
    :type table: Tensor
    :param ids: Integer ids of any shape.
    :type ids: Any

    :return: Embeddings [*ids.shape, d].
    :rtype: Tensor

    :raises TokenIndexError: If an id is negative or >= V.
    """

    index: np.ndarray = np.asarray(ids, dtype=np.int64)
    vocab: int = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= vocab):
        raise TokenIndexError(f"embedding id out of range [0, {vocab}): {int(index.min())}..{int(index.max())}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full: np.ndarray = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[index], (table,), backward, "embedding")


def gather_rows(
    x: Tensor,
    index: np.ndarray,
) -> Tensor:
    """
    Gather rows along axis -2 per batch item: out[b, j] = x[b, index[b, j]].
    """

    index = np.asarray(index, dtype=np.int64)
    if index.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_rows batch mismatch: {x.shape} vs index {index.shape}")
    out_data: np.ndarray = np.take_along_axis(x.data, index[..., None], axis=-2)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full: np.ndarray = np.zeros_like(x.data)
        lead = np.indices(index.shape)[:-1]
        np.add.at(full, (*lead, index), g)
        return (full,)

    return _make(out_data, (x,), backward, "gather_rows")


def scatter_rows(
    x: Tensor,
    index: np.ndarray,
    length: int,
) -> Tensor:
    """
    Place rows of x at positions index along axis -2 of a zero tensor.
    """

    index = np.asarray(index, dtype=np.int64)
    out_data: np.ndarray = np.zeros(x.shape[:-2] + (length, x.shape[-1]), dtype=x.dtype)
    lead = np.indices(index.shape)[:-1]
    np.add.at(out_data, (*lead, index), x.data)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.take_along_axis(g, index[..., None], axis=-2),)

    return _make(out_data, (x,), backward, "scatter_rows")


def maxpool2d(
    x: Tensor,
    window: int = 2,
) -> Tensor:
    """
    Non-overlapping max pooling over the two axes before the channel axis.

    :param x: Input [..., H, W, d].
    :type x: Tensor
    :param window: Pooling window.
    :type window: int

    :return: Pooled [..., H/window, W/window, d].
    :rtype: Tensor

    :raises ShapeError: If H or W is not divisible by the window.
    """

    if x.ndim < 3:
        raise ShapeError(f"maxpool2d expects [..., H, W, d], got {x.shape}")
    *lead, height, width, channels = x.shape
    if height % window or width % window:
        raise ShapeError(f"maxpool2d needs H and W divisible by {window}, got {height}x{width}")
    gh, gw = height // window, width // window
    lead_n: int = len(lead)

    # [..., gh, win, gw, win, d] -> [..., gh, gw, d, win*win] in scan order
    blocks: np.ndarray = x.data.reshape(*lead, gh, window, gw, window, channels)
    order: Tuple[int, ...] = tuple(range(lead_n)) + tuple(lead_n + i for i in (0, 2, 4, 1, 3))
    windows: np.ndarray = np.transpose(blocks, order).reshape(*lead, gh, gw, channels, window * window)

    # argmax returns the first maximum, which is the scan-order tie rule
    arg: np.ndarray = windows.argmax(axis=-1)
    out_data: np.ndarray = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        routed: np.ndarray = np.zeros_like(windows)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(*lead, gh, gw, channels, window, window)
        inverse: Tuple[int, ...] = tuple(range(lead_n)) + tuple(lead_n + i for i in (0, 3, 1, 4, 2))
        return (np.transpose(routed, inverse).reshape(x.shape),)

    return _make(out_data, (x,), backward, "maxpool2d")


def dropout(
    x: Tensor,
    rate: float,
    rng: Optional[np.random.Generator],
    training: bool,
) -> Tensor:
    """
    Inverted dropout; identity in eval mode or at rate 0.
    """

    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep: np.ndarray = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# Losses


def softmax_cross_entropy(
    logits: Tensor,
    targets: Any,
    reduction: str = "mean",
    ignore_index: Optional[int] = None,
) -> Tensor:
    """
    Cross entropy of softmax(logits) against integer targets.

    :param logits: Scores [..., V].
    :type logits: Tensor
    :param targets: Integer targets of shape logits.shape[:-1].
    :type targets: Any
    :param reduction: "mean" over counted targets, "sum", or "none".
    :type reduction: str
    :param ignore_index: Target value excluded from the loss (padding).
    :type ignore_index: Optional[int]

    :return: The reduced loss (scalar) or per-target losses for "none".
    :rtype: Tensor

    :raises TokenIndexError: If a counted target is outside [0, V).
    """

    target: np.ndarray = np.asarray(targets, dtype=np.int64)
    vocab: int = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {target.shape} do not match logits {logits.shape}")
    counted: np.ndarray = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    if np.any(counted & ((target < 0) | (target >= vocab))):
        raise TokenIndexError(f"cross-entropy target out of range [0, {vocab})")
    safe: np.ndarray = np.where(counted, target, 0)

    shifted: np.ndarray = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse: np.ndarray = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp: np.ndarray = shifted - lse
    picked: np.ndarray = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0] * counted

    if reduction == "none":
        scale: np.ndarray = np.ones(target.shape, dtype=logits.dtype)
        out_data: np.ndarray = picked
    elif reduction == "sum":
        scale = np.asarray(1.0, dtype=logits.dtype)
        out_data = np.asarray(picked.sum())
    elif reduction == "mean":
        count: int = max(int(counted.sum()), 1)
        scale = np.asarray(1.0 / count, dtype=logits.dtype)
        out_data = np.asarray(picked.sum() / count)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        probs: np.ndarray = np.exp(logp)
        np.put_along_axis(probs, safe[..., None], np.take_along_axis(probs, safe[..., None], axis=-1) - 1.0, axis=-1)
        weight: np.ndarray = (np.asarray(g) * scale * counted)[..., None]
        return (probs * weight,)

    return _make(out_data.astype(logits.dtype), (logits,), backward, "softmax_cross_entropy")


def mse(
    prediction: Tensor,
    target: Any,
    weight: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Mean squared error, optionally restricted by a 0/1 weight broadcast over
    the prediction; the mean is taken over the weighted elements only.
    """

    target_data: np.ndarray = _as_array(target, prediction.dtype)
    diff: np.ndarray = prediction.data - target_data
    mask: np.ndarray = np.ones_like(diff) if weight is None else np.broadcast_to(weight, diff.shape).astype(diff.dtype)
    count: float = max(float(mask.sum()), 1.0)
    out_data: np.ndarray = np.asarray((diff * diff * mask).sum() / count, dtype=prediction.dtype)
    return _make(out_data, (prediction,), lambda g: (g * 2.0 * diff * mask / count,), "mse")
