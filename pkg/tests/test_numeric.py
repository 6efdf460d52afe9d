import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aub.numeric import (
    SGD,
    Adam,
    NonFiniteError,
    Parametric,
    ParameterStore,
    finite_difference_gradient,
    log_sum_exp,
    make_optimizer,
    make_rng,
    max_relative_error,
    softmax,
)


class Vec(Parametric):
    def __init__(self, values):
        super().__init__()
        self.add_param("theta", np.asarray(values, dtype=np.float64))


def store_of(values):
    return ParameterStore.attach([("v.", Vec(values))])


# --- log_sum_exp -----------------------------------------------------------

def test_lse_single_zero():
    assert log_sum_exp(np.array([0.0])) == 0.0


def test_lse_pair():
    assert log_sum_exp(np.array([5.0, 5.0])) == pytest.approx(5.0 + math.log(2.0), abs=1e-15)


def test_lse_golden():
    # exp(1)+exp(2)+exp(3) summed with math.fsum
    expected = math.log(math.fsum(math.exp(v) for v in (1.0, 2.0, 3.0)))
    assert log_sum_exp(np.array([1.0, 2.0, 3.0])) == pytest.approx(expected, abs=1e-14)
    assert log_sum_exp(np.array([1.0, 2.0, 3.0])) == pytest.approx(3.40760596, abs=1e-8)


def test_lse_empty():
    with pytest.raises(ValueError, match="empty log_sum_exp"):
        log_sum_exp(np.array([]))


def test_lse_no_overflow():
    assert log_sum_exp(np.array([700.0, 0.0])) == pytest.approx(700.0)
    assert log_sum_exp(np.array([-700.0, -1400.0])) == pytest.approx(-700.0)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-300, 300)))
def test_lse_bounds(values):
    out = log_sum_exp(values)
    top = values.max()
    assert top - 1e-12 <= out <= top + math.log(values.size) + 1e-12


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)))
def test_softmax_sums_to_one(logits):
    w = softmax(logits)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0)


# --- finite differences ----------------------------------------------------

def test_fd_quadratic():
    store = store_of([3.0])
    g = finite_difference_gradient(lambda s: float(s.values[0] ** 2), store, eps=1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_fd_linear_all_ones(rng):
    store = store_of(rng.standard_normal(7))
    g = finite_difference_gradient(lambda s: float(s.values.sum()), store)
    np.testing.assert_allclose(g, np.ones(7), atol=1e-9)


def test_fd_restores_bit_exactly(rng):
    vals = rng.standard_normal(5) * 1e3
    store = store_of(vals)
    before = store.values.copy()
    finite_difference_gradient(lambda s: float(np.sin(s.values).sum()), store, eps=1e-3)
    assert store.values.tobytes() == before.tobytes()


@pytest.mark.parametrize("eps", [0.0, -1e-5, 0.02])
def test_fd_eps_range(eps):
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda s: 0.0, store_of([1.0]), eps=eps)


def test_fd_nonfinite_names_coordinate():
    store = store_of([1.0, 0.0])

    def loss(s):
        return float(np.log(s.values[1])) if s.values[1] < 0 else 0.0

    with np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError, match="coordinate 1"):
            finite_difference_gradient(loss, store)


def test_max_relative_error_small_values():
    assert max_relative_error([1e-5], [1.5e-6]) >= 1.0
    assert max_relative_error([1e-5], [1e-5 + 5e-7]) == 0.0
    assert max_relative_error([1e-5], [1e-4]) >= 1.0
    assert max_relative_error([2.0], [2.0002]) == pytest.approx(1e-4)


# --- parameter store --------------------------------------------------------

def test_store_segments_cover_and_views_alias():
    a, b = Vec([1.0, 2.0]), Vec([3.0])
    store = ParameterStore.attach([("a.", a), ("b.", b)])
    assert len(store) == 3
    assert [seg[1:] for seg in store.segments] == [(0, 2), (2, 1)]
    store.values[2] = 9.0
    assert b.params["theta"][0] == 9.0
    assert store.grads.shape == store.values.shape
    assert store.segment_range("b.") == (2, 3)


# --- optimizers ---------------------------------------------------------------

def test_sgd_step():
    store = store_of([1.0])
    store.grads[0] = 2.0
    SGD(0.1).step(store)
    assert store.values[0] == pytest.approx(0.8)
    assert store.grads[0] == 0.0


def test_sgd_zero_grad_fixed_point(rng):
    store = store_of(rng.standard_normal(4))
    before = store.values.copy()
    SGD(0.5).step(store)
    np.testing.assert_array_equal(store.values, before)


def test_adam_first_step_by_hand():
    g, lr, eps = 0.3, 1e-3, 1e-8
    store = store_of([1.0])
    store.grads[0] = g
    opt = Adam(learning_rate=lr)
    opt.step(store)
    # m_hat = g, v_hat = g^2 after bias correction
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert store.values[0] == pytest.approx(1.0 - lr * m_hat / (math.sqrt(v_hat) + eps), abs=1e-15)
    assert opt.step_count == 1
    assert store.grads[0] == 0.0


def test_adam_zero_grad_fixed_point():
    store = store_of([0.5, -0.5])
    opt = Adam()
    for _ in range(3):
        opt.step(store)
    np.testing.assert_array_equal(store.values, [0.5, -0.5])
    assert opt.step_count == 3


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_nonfinite_gradient_rejected_before_mutation(kind):
    store = store_of([1.0, 2.0])
    store.grads[:] = [0.1, np.nan]
    opt = make_optimizer(kind, 0.1)
    with pytest.raises(NonFiniteError):
        opt.step(store)
    np.testing.assert_array_equal(store.values, [1.0, 2.0])


def test_optimizer_slice_only():
    store = store_of([1.0, 1.0, 1.0])
    store.grads[:] = 1.0
    SGD(0.5, start=1, stop=2).step(store)
    np.testing.assert_array_equal(store.values, [1.0, 0.5, 1.0])


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


# --- rng ----------------------------------------------------------------------

def test_rng_determinism():
    a = make_rng(7).standard_normal(10)
    b = make_rng(7).standard_normal(10)
    assert a.tobytes() == b.tobytes()
    assert make_rng(8).standard_normal(10).tobytes() != a.tobytes()


def test_rng_accepts_u64():
    make_rng(2 ** 64 - 1).standard_normal(2)
