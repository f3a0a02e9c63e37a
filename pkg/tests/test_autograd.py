import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disparse import autograd as ag
from disparse.autograd import NonFiniteError, ShapeError, TapeError, Tensor

from helpers import central_difference, rel_close


def grads_of(fn, *arrays):
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    _, tape = ag.forward(lambda: fn(*leaves))
    ag.backward(tape)
    return [l.grad for l in leaves]


def numeric(fn, *arrays):
    work = [a.copy() for a in arrays]
    return central_difference(lambda: float(fn(*[Tensor(w) for w in work]).data), work)


# -- hand-worked values -------------------------------------------------------


def test_matmul_gradients_by_hand():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    ga, gb = grads_of(lambda x, y: ag.sum(x @ y), a, b)
    np.testing.assert_array_equal(ga, [[5.0, 6.0], [5.0, 6.0]])
    np.testing.assert_array_equal(gb, [[4.0], [6.0]])


def test_broadcast_add_sums_over_batch():
    x = np.ones((3, 2))
    b = np.array([0.5, -0.5])
    _, gb = grads_of(lambda u, v: ag.sum(u + v), x, b)
    np.testing.assert_array_equal(gb, [3.0, 3.0])


def test_relu_gradient_is_zero_at_and_below_zero():
    (g,) = grads_of(lambda x: ag.sum(ag.relu(x)), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_cross_entropy_of_uniform_logits_is_log_classes():
    loss = ag.softmax_cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
    assert float(loss.data) == pytest.approx(np.log(5), abs=1e-12)


def test_cosine_loss_zero_for_parallel_and_two_for_opposite():
    t = np.array([[1.0, 2.0, 2.0]])
    assert float(ag.cosine_loss(Tensor(3 * t), t).data) == pytest.approx(0.0, abs=1e-12)
    assert float(ag.cosine_loss(Tensor(-t), t).data) == pytest.approx(2.0, abs=1e-12)


def test_l1_and_mse_values():
    p, t = np.array([[1.0, -1.0]]), np.array([[0.0, 1.0]])
    assert float(ag.l1_loss(Tensor(p), t).data) == pytest.approx(1.5)
    assert float(ag.mse_loss(Tensor(p), t).data) == pytest.approx(2.5)


# -- finite differences per primitive -------------------------------------------

shapes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_matmul_tanh_chain_matches_finite_differences(dims, seed):
    n, k, m = dims
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    fn = lambda x, y: ag.mean(ag.tanh(x @ y))
    for g, fd in zip(grads_of(fn, a, b), numeric(fn, a, b)):
        assert rel_close(g, fd)


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_broadcast_mul_add_match_finite_differences(dims, seed):
    n, m, _ = dims
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(n, m)), rng.normal(size=(1, m)), rng.normal(size=(m,))
    fn = lambda x, y, z: ag.sum(ag.mul(ag.add(x, z), y))
    for g, fd in zip(grads_of(fn, a, b, c), numeric(fn, a, b, c)):
        assert rel_close(g, fd)


@pytest.mark.parametrize("loss", ["ce", "mse", "l1", "cos"])
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_losses_match_finite_differences(loss, n, c, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, c))
    if loss == "ce":
        labels = rng.integers(0, c, size=n)
        fn = lambda p: ag.softmax_cross_entropy(p, labels)
    else:
        target = rng.normal(size=(n, c))
        fn = {"mse": ag.mse_loss, "l1": ag.l1_loss, "cos": ag.cosine_loss}[loss]
        fn = (lambda f: lambda p: f(p, target))(fn)
    (g,) = grads_of(fn, logits)
    (fd,) = numeric(fn, logits)
    assert rel_close(g, fd)


# -- tape semantics ------------------------------------------------------------


def test_shared_input_accumulates_both_paths():
    (g,) = grads_of(lambda x: ag.sum(ag.mul(x, x)), np.array([3.0, -2.0]))
    np.testing.assert_array_equal(g, [6.0, -4.0])


def test_backward_twice_accumulates_into_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    _, tape = ag.forward(lambda: ag.sum(ag.mul(x, 3.0)))
    ag.backward(tape)
    ag.backward(tape)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_from_intermediate_target():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    parts = {}

    def fn():
        parts["inner"] = ag.sum(ag.mul(x, 2.0))
        return ag.add(parts["inner"], ag.sum(ag.mul(x, x)))

    _, tape = ag.forward(fn)
    ag.backward(tape, target=parts["inner"])
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_seed_scales_gradient():
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    _, tape = ag.forward(lambda: ag.mul(x, 2.0))
    ag.backward(tape, seed=np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(x.grad, [[2.0, -2.0]])


def test_no_tape_outside_forward_and_untracked_inputs_not_recorded():
    x = Tensor(np.ones(2))
    _, tape = ag.forward(lambda: ag.sum(ag.mul(x, 2.0)))
    assert len(tape) == 0
    assert x.grad is None


def test_gradients_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    fn = lambda x, y: ag.mean(ag.relu(x @ y))
    first = grads_of(fn, a, b)
    second = grads_of(fn, a, b)
    for u, v in zip(first, second):
        assert np.array_equal(u, v)


# -- errors ----------------------------------------------------------------------


def test_matmul_shape_error_names_primitive():
    with pytest.raises(ShapeError) as err:
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert err.value.primitive == "matmul"


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        ag.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_label_out_of_range_rejected():
    with pytest.raises(ShapeError):
        ag.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_non_finite_forward_raises():
    x = Tensor(np.array([np.inf]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        ag.forward(lambda: ag.sum(x))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_gradient_raises():
    x = Tensor(np.array([1.0]), requires_grad=True)
    _, tape = ag.forward(lambda: ag.sum(ag.mul(x, 1e308)))
    with pytest.raises(NonFiniteError):
        ag.backward(tape, seed=np.array(1e308))


def test_backward_before_forward_completes():
    with pytest.raises(TapeError):
        ag.backward(ag.Tape())


def test_seed_shape_mismatch():
    x = Tensor(np.ones((2,)), requires_grad=True)
    _, tape = ag.forward(lambda: ag.mul(x, 2.0))
    with pytest.raises(ShapeError):
        ag.backward(tape, seed=np.ones(3))
