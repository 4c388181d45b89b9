import numpy as np
import pytest

from htsc.core.layers import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    PositionalEncoding1D,
    PositionalEncoding2D,
    causal_mask,
    scaled_dot_product_attention,
)
from htsc.core.tensor import Tensor, mul, sum as tsum
from htsc.debug import gradcheck
from htsc.utils.errors import CheckpointError, ConfigError


class Pair(Module):
    def __init__(self, rng: np.random.Generator) -> None:
        super().__init__()
        self.first = Linear(3, 4, rng)
        self.blocks = ModuleList([Linear(4, 4, rng), LayerNorm(4)])
        self._hidden = Linear(4, 4, rng)


def test_parameter_names_follow_attribute_paths(rng: np.random.Generator) -> None:
    model = Pair(rng)
    model.assign_names()
    names = [name for name, _ in model.named_parameters()]
    assert names == [
        "first.weight",
        "first.bias",
        "blocks.0.weight",
        "blocks.0.bias",
        "blocks.1.gamma",
        "blocks.1.beta",
    ]
    assert model.first.weight.name == "first.weight"


def test_state_dict_round_trip_and_strictness(rng: np.random.Generator) -> None:
    source = Pair(rng)
    target = Pair(np.random.default_rng(99))
    target.load_state_dict({k: v.copy() for k, v in source.state_dict().items()})
    for (_, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
        assert np.array_equal(a.data, b.data)
    with pytest.raises(CheckpointError):
        target.load_state_dict({"first.weight": source.first.weight.data})
    missing = target.load_state_dict({"first.weight": source.first.weight.data}, strict=False)
    assert "first.bias" in missing
    with pytest.raises(CheckpointError, match="shape mismatch"):
        target.load_state_dict({"first.weight": np.zeros((1, 1))}, strict=False)


def test_train_and_eval_propagate(rng: np.random.Generator) -> None:
    model = Pair(rng)
    model.eval()
    assert not model.blocks[0].training
    model.train()
    assert model.blocks[1].training


def test_zero_init_linear_outputs_bias_only(rng: np.random.Generator) -> None:
    layer = Linear(5, 3, rng, zero_init=True)
    out = layer(Tensor(rng.normal(size=(2, 5))))
    assert np.array_equal(out.data, np.zeros((2, 3), dtype=out.dtype))


def test_single_key_attention_returns_the_value_row(rng: np.random.Generator) -> None:
    q = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    k = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
    v = Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
    out = scaled_dot_product_attention(q, k, v, heads=2)
    assert np.allclose(out.output.data, np.repeat(v.data, 3, axis=0))
    assert np.allclose(out.weights.data, 1.0)


def test_causal_mask_blocks_future_positions(rng: np.random.Generator) -> None:
    x = rng.normal(size=(2, 4))
    attention = MultiHeadAttention(4, 2, rng, dtype=np.float64)
    mask = causal_mask(2)
    before = attention(Tensor(x), Tensor(x), Tensor(x), mask).data[0]
    perturbed = x.copy()
    perturbed[1] += 5.0
    after = attention(Tensor(perturbed), Tensor(perturbed), Tensor(perturbed), mask).data[0]
    assert np.allclose(before, after)


def test_softmax_rows_sum_to_one(rng: np.random.Generator) -> None:
    q = Tensor(rng.normal(size=(2, 5, 8)), dtype=np.float64)
    out = scaled_dot_product_attention(q, q, q, heads=4)
    assert np.allclose(out.weights.data.sum(axis=-1), 1.0, atol=1e-9)


def test_attention_width_must_split_into_heads(rng: np.random.Generator) -> None:
    q = Tensor(rng.normal(size=(2, 6)))
    with pytest.raises(ConfigError):
        scaled_dot_product_attention(q, q, q, heads=4)


def test_attention_gradient(rng: np.random.Generator) -> None:
    attention = MultiHeadAttention(4, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True, dtype=np.float64)
    w = rng.normal(size=(2, 4))
    params = [attention.q.weight, attention.o.weight]
    result = gradcheck(lambda: tsum(mul(attention(x, x, x, causal_mask(2)), w)), [x, *params])
    assert result.passed


def test_feed_forward_and_positions_gradients(rng: np.random.Generator) -> None:
    ffn = FeedForward(4, 8, 3, rng, dtype=np.float64)
    norm = LayerNorm(4, dtype=np.float64)
    pos1 = PositionalEncoding1D(6, 4, rng, dtype=np.float64)
    pos2 = PositionalEncoding2D(2, 4, rng, dtype=np.float64)
    table = Embedding(7, 4, rng, dtype=np.float64)
    ids = np.array([[1, 2, 3, 6]])
    w = rng.normal(size=(1, 4, 3))

    def fn():
        tokens = pos2(pos1(table(ids)))
        return tsum(mul(ffn(norm(tokens)), w))

    inputs = [table.table, pos1.table, pos2.table, norm.gamma, ffn.fc1.weight, ffn.fc2.bias]
    assert gradcheck(fn, inputs).passed


def test_dropout_is_identity_in_eval_mode(rng: np.random.Generator) -> None:
    ffn = FeedForward(4, 8, 4, rng, dtype=np.float64, dropout_rate=0.5)
    x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    ffn.eval()
    assert np.array_equal(ffn(x).data, ffn(x).data)
