import numpy as np
import pytest

from attentivegru import ops
from attentivegru.serialize import load_tensors, save_tensors
from attentivegru.tensor import Tensor, active_tape, backward_pass, mac_counter, no_grad, parameter


def test_sigmoid_sum_gradient_is_textbook_derivative():
    x = Tensor(np.linspace(-3, 3, 7), requires_grad=True)
    backward_pass(ops.sum(ops.sigmoid(x)))
    s = 1 / (1 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-14)


def test_unused_parameter_gets_zero_grad():
    x = parameter(np.ones(3))
    unused = parameter(np.ones(2))
    loss = ops.sum(ops.mul(x, x))
    ops.mul(unused, 2.0)  # on the tape but not on the path to the loss
    backward_pass(loss)
    np.testing.assert_array_equal(unused.grad, np.zeros(2))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_non_scalar_loss_rejected():
    x = parameter(np.ones(3))
    with pytest.raises(ValueError):
        backward_pass(ops.mul(x, 2.0))


def test_tape_cleared_after_backward():
    x = parameter(np.ones(3))
    backward_pass(ops.sum(ops.exp(x)))
    assert len(active_tape()) == 0


def test_gradients_accumulate_over_consumers():
    rng = np.random.default_rng(0)
    a = rng.normal(size=5)
    x = parameter(a)
    backward_pass(ops.add(ops.sum(ops.tanh(x)), ops.sum(ops.square(x))))
    both = x.grad.copy()
    x1 = parameter(a)
    backward_pass(ops.sum(ops.tanh(x1)))
    x2 = parameter(a)
    backward_pass(ops.sum(ops.square(x2)))
    np.testing.assert_allclose(both, x1.grad + x2.grad, rtol=1e-14)


def test_same_tensor_used_twice_sums():
    x = parameter(np.array([1.5, -2.0]))
    backward_pass(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with no_grad():
        y = ops.exp(x)
    assert not y.requires_grad
    assert len(active_tape()) == 0


def test_deterministic_repeat():
    def run():
        rng = np.random.default_rng(7)
        w = parameter(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(5, 4)))
        backward_pass(ops.sum(ops.tanh(ops.matmul(x, w))))
        return w.grad.tobytes()

    assert run() == run()


def test_matmul_counts_macs():
    with mac_counter() as m:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert m.total == 24


def test_sorted_mean_is_bitwise_permutation_invariant():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(7, 4, 5)) * 10.0 ** rng.integers(-8, 8, size=(7, 1, 1))
    out = ops.sorted_mean(Tensor(a)).data
    for _ in range(10):
        perm = rng.permutation(7)
        assert ops.sorted_mean(Tensor(a[perm])).data.tobytes() == out.tobytes()


def test_scatter_max_empty_slots_zero_and_max_pooled():
    vals = Tensor(np.array([[1.0, -5.0], [3.0, -6.0], [2.0, 2.0]]), requires_grad=True)
    pooled, occupied = ops.scatter_max(vals, np.array([0, 0, 2]), 4)
    np.testing.assert_array_equal(pooled.data, [[3, -5], [0, 0], [2, 2], [0, 0]])
    np.testing.assert_array_equal(occupied, [True, False, True, False])
    backward_pass(ops.sum(pooled))
    np.testing.assert_array_equal(vals.grad, [[0, 1], [1, 0], [1, 1]])


def test_serialization_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32),
              "scalar": np.asarray(np.pi)}
    save_tensors(tmp_path / "bundle", arrays, {"note": "x"})
    back, meta = load_tensors(tmp_path / "bundle")
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        assert back[k].tobytes() == v.tobytes()


def test_serialization_rejects_integer_arrays(tmp_path):
    with pytest.raises(TypeError):
        save_tensors(tmp_path / "x", {"i": np.arange(3)})
