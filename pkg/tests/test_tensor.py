import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msann import gradcheck
from msann import tensor as T
from msann.errors import ContractError, DimensionError, UninitializedStatisticsError


# -- loop oracles --------------------------------------------------------
def conv_loop(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for r in range(oh):
                for q in range(ow):
                    total = b[f]
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                total += xp[i, ch, r * stride + u, q * stride + v] * w[f, ch, u, v]
                    out[i, f, r, q] = total
    return out


def pool_loop(x, window, stride, reduce):
    n, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(n):
        for ch in range(c):
            for r in range(oh):
                for q in range(ow):
                    out[i, ch, r, q] = reduce(x[i, ch, r * stride : r * stride + window, q * stride : q * stride + window])
    return out


def matmul_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- conv / pooling --------------------------------------------------------
def test_conv_all_ones_sums_to_nine():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_1x1_scales():
    x = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    out = T.conv2d(T.Tensor(x), T.Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data[0, 0], [[2.0, 0.0], [0.0, 2.0]])


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1)
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out.data, conv_loop(x, w, b, 2, 1), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))))


def test_pooling_examples():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert T.global_avg_pool(x).data.tolist() == [[2.5]]
    assert T.max_pool2d(x, 2, 2).data.tolist() == [[[[4.0]]]]


def test_avg_pool_matches_loop_oracle():
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
    np.testing.assert_allclose(T.avg_pool2d(T.Tensor(x), 2, 2).data, pool_loop(x, 2, 2, np.mean), rtol=1e-14)


def test_max_pool_matches_loop_oracle():
    x = np.random.default_rng(1).normal(size=(2, 3, 6, 6))
    np.testing.assert_array_equal(T.max_pool2d(T.Tensor(x), 3, 1).data, pool_loop(x, 3, 1, np.max))


@settings(max_examples=60, deadline=None)
@given(
    size=st.integers(3, 12),
    kernel=st.integers(1, 3),
    stride=st.integers(1, 3),
    padding=st.integers(0, 1),
)
def test_conv_and_pool_shape_formulas(size, kernel, stride, padding):
    x = T.Tensor(np.zeros((1, 2, size, size)))
    expected = (size + 2 * padding - kernel) // stride + 1
    assert T.conv_output_size(size, kernel, stride, padding) == expected
    out = T.conv2d(x, T.Tensor(np.zeros((3, 2, kernel, kernel))), stride=stride, padding=padding)
    assert out.shape == (1, 3, expected, expected)
    if kernel <= size:
        pooled = T.max_pool2d(x, kernel, stride)
        assert pooled.shape[2] == (size - kernel) // stride + 1


# -- batch norm --------------------------------------------------------
def test_batch_norm_identity_on_unit_batch():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1, 1, 1)
    stats = T.RunningStats(1)
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), stats, training=True)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_gamma_zero_gives_beta():
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    beta = np.array([0.5, -2.0])
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.zeros(2)), T.Tensor(beta), T.RunningStats(2), training=True)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), x.shape))


def test_batch_norm_normalizes_per_channel():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(4, 3, 2, 2))
    eps = 1e-5
    out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), T.RunningStats(3), True, eps=eps).data
    var = x.var(axis=(0, 2, 3))
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + eps), atol=1e-6)
    direct = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(x.var(axis=(0, 2, 3), keepdims=True) + eps)
    np.testing.assert_allclose(out, direct, rtol=1e-12, atol=1e-12)


def test_running_stats_first_copy_then_blend():
    stats = T.RunningStats(1)
    g, b = T.Tensor(np.ones(1)), T.Tensor(np.zeros(1))
    T.batch_norm(T.Tensor(np.full((2, 1, 1, 1), 4.0)), g, b, stats, True, decay=0.9)
    assert stats.mean.tolist() == [4.0] and stats.var.tolist() == [0.0]
    T.batch_norm(T.Tensor(np.zeros((2, 1, 1, 1))), g, b, stats, True, decay=0.9)
    np.testing.assert_allclose(stats.mean, [3.6])
    out = T.batch_norm(T.Tensor(np.full((1, 1, 1, 1), 3.6)), g, b, stats, False)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_batch_norm_eval_before_update_fails():
    with pytest.raises(UninitializedStatisticsError):
        T.batch_norm(T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)),
                     T.RunningStats(1), training=False)


# -- pointwise / dense --------------------------------------------------------
def test_sigmoid_zero():
    assert T.sigmoid(T.Tensor(np.zeros(1))).item() == 0.5


def test_sigmoid_is_stable_at_extremes():
    out = T.sigmoid(T.Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_dropout_eval_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = T.dropout(T.Tensor(x), 0.5, training=False, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(out.data, x)


def test_dropout_preserves_expectation():
    out = T.dropout(T.Tensor(np.ones(100_000)), 0.5, training=True, rng=np.random.default_rng(7))
    assert abs(out.data.mean() - 1.0) < 0.01
    assert set(np.unique(out.data)) == {0.0, 2.0}


def test_linear_matches_matmul_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    out = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    np.testing.assert_allclose(out.data, matmul_loop(x, w) + b, rtol=1e-13)


def test_add_rejects_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((1, 2, 2, 2))), T.Tensor(np.ones((1, 2, 1, 1))))


# -- backward --------------------------------------------------------
def test_grad_of_sum():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    x.sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_grad_of_sum_of_squares():
    x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradients_accumulate_across_reuse():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0]


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


@pytest.mark.parametrize("case", gradcheck.default_cases(), ids=lambda c: c.name)
def test_finite_difference_per_op(case):
    for seed in range(3):
        arrays = case.make(np.random.default_rng(seed))
        assert max(gradcheck.check(case.op, arrays, seed=seed)) < 1e-3


def test_determinism_of_values_and_grads():
    def run():
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        y = T.max_pool2d(T.relu(T.conv2d(x, w, stride=1, padding=1)), 2)
        loss = (y * y).sum()
        loss.backward()
        return loss.item(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()
