import numpy as np
import pytest

from htsc.core.tensor import Tensor, mul, sum as tsum
from htsc.debug import assert_finite, gradcheck, numerical_gradient, relative_error
from htsc.utils.errors import NumericError


def test_numerical_gradient_of_a_cubic() -> None:
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    grad = numerical_gradient(lambda: tsum(mul(mul(x, x), x)), x)
    assert np.allclose(grad, [3.0, 12.0], atol=1e-6)
    # Buffers are restored after probing
    assert x.data.tolist() == [1.0, -2.0]


def test_gradcheck_passes_on_a_correct_op() -> None:
    x = Tensor(np.array([0.5, 1.5, -1.0]), requires_grad=True, dtype=np.float64)
    result = gradcheck(lambda: tsum(mul(x, x)), [x])
    assert result.passed
    assert result.max_error < 1e-8
    assert np.allclose(result.analytic[0], 2.0 * x.data)


def test_relative_error_is_scale_free() -> None:
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(1.0 / 3.0)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_assert_finite_names_the_array() -> None:
    assert_finite({"ok": np.ones(2)}, "step 1")
    with pytest.raises(NumericError, match="logits") as info:
        assert_finite({"ok": np.ones(2), "logits": np.array([1.0, np.inf])}, "step 2")
    assert info.value.diagnostic == {"array": "logits", "context": "step 2"}
