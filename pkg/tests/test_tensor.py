import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latent_lab import tensor as T
from latent_lab.errors import DimensionError, EmptyLossError, GraphError, NonFiniteError, StateError
from latent_lab.tensor import ParameterStore, Tensor


def numeric_grad(loss_fn, param, index, eps=1e-6):
    original = param.data[index]
    param.data[index] = original + eps
    plus = loss_fn().item()
    param.data[index] = original - eps
    minus = loss_fn().item()
    param.data[index] = original
    return (plus - minus) / (2 * eps)


def check_gradients(loss_fn, params, rng, coords=20):
    for param in params:
        param.grad = None
    T.backward(loss_fn())
    for param in params:
        for _ in range(coords):
            index = tuple(int(rng.integers(n)) for n in param.shape)
            analytic = param.grad[index]
            numeric = numeric_grad(loss_fn, param, index)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-7)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_elementwise_gradients(float64):
    """Test add, sub, mul and div gradients with broadcasting."""
    rng = np.random.default_rng(0)
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    b.data += 3.0
    w = rng.normal(size=(3, 4))
    check_gradients(lambda: (((a + b) * a - a / b - b) * w).sum(), [a, b], rng)


def test_matmul_gradients(float64):
    """Test batched matmul gradients."""
    rng = np.random.default_rng(1)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    check_gradients(lambda: (T.matmul(a, b) * w).sum(), [a, b], rng)


def test_softmax_gelu_gradients(float64):
    """Test softmax and GELU gradients."""
    rng = np.random.default_rng(2)
    x = leaf(rng, 3, 6)
    w = rng.normal(size=(3, 6))
    check_gradients(lambda: (T.softmax_rows(T.gelu(x)) * w).sum(), [x], rng)


def test_layer_norm_gradients(float64):
    """Test layer norm gradients for input, gain and bias."""
    rng = np.random.default_rng(3)
    x, gain, bias = leaf(rng, 4, 8), leaf(rng, 8), leaf(rng, 8)
    w = rng.normal(size=(4, 8))
    check_gradients(lambda: (T.layer_norm(x, gain, bias) * w).sum(), [x, gain, bias], rng)


def test_indexing_and_shape_gradients(float64):
    """Test getitem, concat, transpose, reshape and where gradients."""
    rng = np.random.default_rng(4)
    x, y = leaf(rng, 4, 3), leaf(rng, 2, 3)
    rows = np.array([0, 2, 2, 3])
    cond = rng.random((6, 3)) > 0.5
    w = rng.normal(size=(3, 6))

    def loss():
        joined = T.concat([x, y], axis=0)
        picked = T.concat([joined[rows], joined[1:3]], axis=0)
        mixed = T.where(cond, picked, joined * 2.0)
        return (T.transpose(mixed).reshape(3, 6) * w).sum()

    check_gradients(loss, [x, y], rng)


def test_embedding_gradient_accumulates_repeated_ids(float64):
    """Test embedding scatters gradient into every repeated row."""
    weight = Tensor(np.zeros((5, 2)), requires_grad=True)
    out = T.embedding(weight, np.array([[1, 1], [3, 1]]))
    T.backward(out.sum())
    np.testing.assert_array_equal(weight.grad[:, 0], [0, 3, 0, 1, 0])


def test_cross_entropy_gradients(float64):
    """Test masked cross-entropy gradients."""
    rng = np.random.default_rng(5)
    logits = leaf(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    mask = np.array([True, False, True, True, False])
    check_gradients(lambda: T.cross_entropy_masked(logits, targets, mask), [logits], rng)


def test_cross_entropy_ignores_masked_targets():
    """Test that swapping a masked target leaves the loss unchanged."""
    rng = np.random.default_rng(6)
    logits = Tensor(rng.normal(size=(4, 5)))
    mask = np.array([True, False, True, False])
    first = T.cross_entropy_masked(logits, [1, 2, 3, 4], mask).item()
    second = T.cross_entropy_masked(logits, [1, -100, 3, 99], mask).item()
    assert first == second


def test_cross_entropy_all_masked():
    """Test that a loss without targets is rejected."""
    with pytest.raises(EmptyLossError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_cross_entropy_target_out_of_range():
    """Test that an unmasked target outside the vocabulary is rejected."""
    with pytest.raises(DimensionError):
        T.cross_entropy_masked(Tensor(np.zeros((2, 3))), [0, 3], [True, True])


def test_backward_accumulates():
    """Test that two backward passes add into the leaf gradient."""
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward((x * x).sum())
    T.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_no_grad_records_nothing():
    """Test that no_grad leaves outputs detached."""
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    with pytest.raises(GraphError):
        T.backward(y)


def test_backward_needs_scalar():
    """Test backward on a non-scalar."""
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        T.backward(x * 2.0)


def test_non_finite_names_op():
    """Test that a division by zero raises with the op name."""
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError, match="div"):
            Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_matmul_shape_mismatch():
    """Test matmul with incompatible inner extents."""
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_normalized(values):
    """Test that softmax rows sum to one."""
    with T.default_dtype(np.float64):
        probs = T.softmax_rows(Tensor(values)).data
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)


def test_adam_first_step_moves_by_lr():
    """Test that the first bias-corrected step moves each weight by about lr."""
    store = ParameterStore()
    param = store.add("w", np.array([1.0, -1.0, 0.5], dtype=np.float32))
    param.grad = np.array([0.3, -2.0, 0.01], dtype=np.float32)
    T.adam_step(store, lr=0.01)
    np.testing.assert_allclose(param.data, [0.99, -0.99, 0.49], atol=1e-5)
    assert param.grad is None
    assert store.step == 1


def test_adam_missing_gradient():
    """Test that a step without gradients is rejected."""
    store = ParameterStore()
    store.add("w", np.zeros(2))
    with pytest.raises(StateError):
        T.adam_step(store, lr=0.1)


def test_reset_optimizer_state():
    """Test that resetting zeroes moments and the step but keeps values."""
    store = ParameterStore()
    param = store.add("w", np.ones(2, dtype=np.float32))
    param.grad = np.ones(2, dtype=np.float32)
    T.adam_step(store, lr=0.1)
    values = param.data.copy()
    T.reset_optimizer_state(store)
    assert store.step == 0
    assert not store.first_moment["w"].any()
    assert not store.second_moment["w"].any()
    np.testing.assert_array_equal(param.data, values)
