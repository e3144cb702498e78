"""Unit and gradient tests for the autodiff tensor kernel."""

import numpy as np
import pytest

from codemoe import tensor as T
from codemoe.tensor import ShapeError, Tensor

from conftest import assert_grads_match


# -- forward values -----------------------------------------------------------


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_allclose(out.data, [[19, 22], [43, 50]])


def test_matmul_zero_matrix():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    out = T.matmul(a, Tensor(np.zeros((3, 4))))
    assert not out.data.any()


def test_matmul_matches_triple_loop_oracle(rng):
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_softmax_fixture():
    out = T.softmax(Tensor([1.0, 2.0, 3.0], dtype=np.float64))
    np.testing.assert_allclose(out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-7)


def test_softmax_uniform_over_equal_logits():
    out = T.softmax(Tensor(np.full(5, 3.25)))
    np.testing.assert_allclose(out.data, np.full(5, 0.2), atol=1e-7)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(3, 7))
    a = T.softmax(Tensor(x, dtype=np.float64)).data
    b = T.softmax(Tensor(x + 1000.0, dtype=np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_max_over_sequence_single_position(rng):
    x = rng.normal(size=(2, 1, 4))
    out = T.max_over_sequence(Tensor(x, dtype=np.float64), axis=1)
    np.testing.assert_allclose(out.data, x[:, 0, :])


def test_max_over_sequence_constant_slices(rng):
    row = rng.normal(size=4)
    x = np.broadcast_to(row, (2, 5, 4)).copy()
    out = T.max_over_sequence(Tensor(x, dtype=np.float64), axis=1)
    np.testing.assert_allclose(out.data, np.stack([row, row]))


def test_max_over_sequence_brute_force(rng):
    x = rng.normal(size=(3, 6, 5))
    out = T.max_over_sequence(Tensor(x, dtype=np.float64), axis=1)
    np.testing.assert_allclose(out.data, x.max(axis=1))


def test_max_over_sequence_tie_gradient_goes_to_lowest_index():
    x = Tensor(np.array([[[2.0], [2.0], [1.0]]]), requires_grad=True, dtype=np.float64)
    T.max_over_sequence(x, axis=1).sum().backward()
    np.testing.assert_allclose(x.grad[0, :, 0], [1.0, 0.0, 0.0])


def test_max_over_sequence_empty_axis_rejected():
    with pytest.raises(ShapeError):
        T.max_over_sequence(Tensor(np.zeros((2, 0, 3))), axis=1)


def test_cross_entropy_uniform_logits_is_log_v():
    v = 11
    logits = Tensor(np.zeros((1, 3, v)), dtype=np.float64)
    loss = T.cross_entropy_masked(logits, np.zeros((1, 3), dtype=int), np.ones((1, 3)))
    assert abs(float(loss.data) - np.log(v)) < 1e-12


def test_cross_entropy_two_position_hand_case():
    logits = np.array([[[2.0, 0.0, 1.0], [0.5, 0.5, 3.0]]])
    targets = np.array([[0, 2]])
    want = np.mean([-np.log(np.exp(2.0) / np.exp([2.0, 0.0, 1.0]).sum()),
                    -np.log(np.exp(3.0) / np.exp([0.5, 0.5, 3.0]).sum())])
    loss = T.cross_entropy_masked(Tensor(logits, dtype=np.float64), targets,
                                  np.ones((1, 2)))
    assert abs(float(loss.data) - want) < 1e-12


def test_cross_entropy_mask_excludes_positions():
    logits = np.array([[[2.0, 0.0], [0.0, 5.0]]])
    loss = T.cross_entropy_masked(Tensor(logits, dtype=np.float64),
                                  np.array([[0, 0]]), np.array([[1.0, 0.0]]))
    want = -np.log(np.exp(2.0) / np.exp([2.0, 0.0]).sum())
    assert abs(float(loss.data) - want) < 1e-12


def test_cross_entropy_all_masked_rejected():
    with pytest.raises(ShapeError):
        T.cross_entropy_masked(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int),
                               np.zeros((1, 2)))


def test_layer_norm_output_is_normalized(rng):
    x = rng.normal(size=(2, 5, 8)) * 3 + 1
    y = T.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(8), dtype=np.float64),
                     Tensor(np.zeros(8), dtype=np.float64)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_embedding_lookup_and_range_check(rng):
    table = rng.normal(size=(7, 3))
    ids = np.array([[0, 6, 2]])
    out = T.embedding(Tensor(table, dtype=np.float64), ids)
    np.testing.assert_allclose(out.data, table[ids])
    with pytest.raises(ShapeError):
        T.embedding(Tensor(table), np.array([[7]]))


def test_dropout_scales_kept_values(rng):
    x = Tensor(np.ones((200, 50)))
    out = T.dropout(x, 0.25, seed=3)
    kept = out.data[out.data != 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75, atol=1e-6)
    assert abs((out.data == 0).mean() - 0.25) < 0.02
    # same seed -> same mask; rate 0 -> identity
    np.testing.assert_array_equal(out.data, T.dropout(x, 0.25, seed=3).data)
    assert T.dropout(x, 0.0, seed=3) is x


def test_argmax_is_not_on_tape():
    x = Tensor(np.array([[1.0, 3.0, 2.0]]), requires_grad=True)
    idx = T.argmax(x)
    assert isinstance(idx, np.ndarray) and idx[0] == 1


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x + 1.0).backward()


def test_constant_graph_has_zero_grads():
    x = Tensor(np.ones((3,)), requires_grad=True, dtype=np.float64)
    loss = (x * 0.0).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, np.zeros(3))


# -- gradients vs central finite differences ----------------------------------


def test_grad_add_mul_broadcast(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    assert_grads_match(lambda ts: (T.add(ts[0], ts[1]) * 2.0).sum(), [a, b])
    assert_grads_match(lambda ts: T.mul(ts[0], ts[1]).sum(), [a, b])


def test_grad_matmul_batched(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))
    assert_grads_match(lambda ts: T.matmul(ts[0], ts[1]).sum(), [a, b])


def test_grad_reshape_transpose_slice(rng):
    a = rng.normal(size=(2, 3, 4))

    def fn(ts):
        y = T.transpose(T.reshape(ts[0], (2, 12)), (1, 0))
        return T.slice_last(y, 0, 1).sum()

    assert_grads_match(fn, [a])


def test_grad_softmax(rng):
    a = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    assert_grads_match(lambda ts: (T.softmax(ts[0]) * w).sum(), [a])


def test_grad_max_over_sequence(rng):
    # well-separated values so the finite-difference step cannot flip the argmax
    a = rng.permutation(np.arange(24.0)).reshape(2, 4, 3)
    w = rng.normal(size=(2, 3))
    assert_grads_match(lambda ts: (T.max_over_sequence(ts[0], axis=1) * w).sum(), [a])


def test_grad_gelu(rng):
    a = rng.normal(size=(4, 4)) * 2
    assert_grads_match(lambda ts: T.gelu(ts[0]).sum(), [a])


def test_grad_layer_norm(rng):
    x = rng.normal(size=(2, 3, 6))
    gain = rng.normal(size=(6,)) + 1.0
    bias = rng.normal(size=(6,))
    w = rng.normal(size=(2, 3, 6))
    assert_grads_match(lambda ts: (T.layer_norm(ts[0], ts[1], ts[2]) * w).sum(),
                       [x, gain, bias])


def test_grad_embedding_with_repeated_ids(rng):
    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 2, 2, 5]])
    w = rng.normal(size=(1, 4, 4))
    assert_grads_match(lambda ts: (T.embedding(ts[0], ids) * w).sum(), [table])


def test_grad_softmax_cross_entropy_composite(rng):
    logits = rng.normal(size=(2, 3, 7))
    targets = rng.integers(0, 7, size=(2, 3))
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    assert_grads_match(
        lambda ts: T.cross_entropy_masked(ts[0], targets, mask), [logits])
