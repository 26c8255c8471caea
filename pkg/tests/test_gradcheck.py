import numpy as np
import pytest

from crtyolo.errors import InvalidArgumentError
from crtyolo.gradcheck import finite_diff_gradcheck
from crtyolo.gradsuite import all_cases, run_case
from crtyolo.tensor import Tensor, make_result


def test_rejects_float32_inputs():
    with pytest.raises(InvalidArgumentError):
        finite_diff_gradcheck(lambda x: x * 2, [Tensor(np.ones(3, dtype=np.float32))])


def test_passes_on_correct_gradient(rng):
    x = Tensor(rng.standard_normal(5))
    assert finite_diff_gradcheck(lambda t: t * t * t, [x]).passed()


def test_catches_a_wrong_backward(rng):
    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")  # missing factor 2

    report = finite_diff_gradcheck(bad_square, [Tensor(rng.standard_normal(4) + 3)])
    assert not report.passed()
    assert report.max_rel_err > 0.4


def test_inputs_are_restored(rng):
    x = Tensor(rng.standard_normal(4))
    before = x.data.copy()
    finite_diff_gradcheck(lambda t: t.exp(), [x])
    np.testing.assert_array_equal(x.data, before)
    assert not x.requires_grad and x.grad is None


def test_subsampling_counts(rng):
    x = Tensor(rng.standard_normal(100))
    report = finite_diff_gradcheck(lambda t: t * t, [x], max_elements=7)
    assert report.checked == 7


FAST_CASES = [name for name in all_cases() if name != "model"]


@pytest.mark.parametrize("name", FAST_CASES)
def test_block_gradient(name):
    result = run_case(name, seed=11)
    assert result.passed, f"{name}: {result.report}"


@pytest.mark.slow
def test_full_model_gradient():
    result = run_case("model", seed=11)
    assert result.passed, result.report
