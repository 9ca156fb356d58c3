import numpy as np
import pytest

from graphops import engine as eng
from graphops.gradcheck import max_relative_error, relative_errors


def fd_ok(build_loss, params, tol=1e-4):
    assert max_relative_error(build_loss, params) <= tol


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = eng.constant(np.eye(2))
    b = eng.constant([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(eng.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_selector_row():
    sel = eng.constant([[1.0, 0.0], [0.0, 0.0]])
    v = eng.constant([[5.0], [7.0]])
    assert np.array_equal(eng.matmul(sel, v).data, [[5.0], [0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(eng.DimensionError):
        eng.matmul(eng.constant(np.ones((2, 3))), eng.constant(np.ones((2, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a = eng.parameter(rng.standard_normal((3, 4)))
    b = eng.parameter(rng.standard_normal((4, 2)))
    w = eng.constant(rng.standard_normal((3, 2)))
    fd_ok(lambda: eng.mul(eng.matmul(a, b), w).sum(), [a, b])


def test_matmul_batched_gradient():
    rng = np.random.default_rng(0)
    a = eng.parameter(rng.standard_normal((2, 3, 4)))
    b = eng.parameter(rng.standard_normal((4, 5)))
    w = eng.constant(rng.standard_normal((2, 3, 5)))
    fd_ok(lambda: eng.mul(eng.matmul(a, b), w).sum(), [a, b])


def test_matmul_vector_promotion():
    rng = np.random.default_rng(1)
    a = eng.parameter(rng.standard_normal(4))
    m = eng.constant(rng.standard_normal((4, 3)))
    out = eng.matmul(a, m)
    assert out.shape == (3,)
    fd_ok(lambda: eng.matmul(a, m).sum(), [a])


# ---------------------------------------------------------------------------
# row_softmax
# ---------------------------------------------------------------------------

def test_row_softmax_uniform_on_zero_row():
    s = eng.row_softmax(eng.constant(np.zeros((1, 4))))
    assert np.allclose(s.data, 0.25, atol=1e-15)


def test_row_softmax_peaked():
    s = eng.row_softmax(eng.constant([[10.0, 0.0]]))
    assert s.data[0, 0] >= 1.0 - 5e-5


def test_row_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 7))
    a = eng.row_softmax(eng.constant(x)).data
    b = eng.row_softmax(eng.constant(x + 11.3)).data
    assert np.abs(a - b).max() <= 1e-12


def test_row_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.standard_normal((6, 5)) * rng.uniform(0.1, 50)
        s = eng.row_softmax(eng.constant(x)).data
        assert np.abs(s.sum(axis=-1) - 1.0).max() <= 1e-12
        assert (s > 0).all()


def test_row_softmax_masked():
    x = eng.constant(np.zeros((1, 4)))
    mask = np.array([[True, False, True, False]])
    s = eng.row_softmax(x, mask=mask).data
    assert np.allclose(s, [[0.5, 0.0, 0.5, 0.0]], atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_row_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    a = eng.parameter(rng.standard_normal((4, 6)))
    w = eng.constant(rng.standard_normal((4, 6)))
    mask = rng.random((4, 6)) > 0.3
    mask[:, 0] = True
    fd_ok(lambda: eng.mul(eng.row_softmax(a), w).sum(), [a])
    fd_ok(lambda: eng.mul(eng.row_softmax(a, mask=mask), w).sum(), [a])


# ---------------------------------------------------------------------------
# conv1d_same
# ---------------------------------------------------------------------------

def _delta_kernel(k, c):
    kern = np.zeros((k, c, c))
    kern[(k - 1) // 2] = np.eye(c)
    return kern


def test_conv1d_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = eng.constant(rng.standard_normal((9, 3)))
    out = eng.conv1d_same(x, eng.constant(_delta_kernel(7, 3)))
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_conv1d_averaging_on_constant():
    t_len, k, c = 8, 5, 2
    x = eng.constant(np.full((t_len, c), 3.0))
    kern = np.zeros((k, c, c))
    for tap in range(k):
        kern[tap] = np.eye(c) / k
    out = eng.conv1d_same(x, eng.constant(kern)).data
    half = (k - 1) // 2
    # interior positions see all k taps; boundaries only the valid fraction
    for t in range(t_len):
        valid = min(t_len, t + half + 1) - max(0, t - half)
        assert np.allclose(out[t], 3.0 * valid / k, atol=1e-12)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(eng.ConfigurationError):
        eng.conv1d_same(eng.constant(np.ones((4, 2))), eng.constant(np.ones((4, 2, 2))))


@pytest.mark.parametrize("seed", range(3))
def test_conv1d_gradient(seed):
    rng = np.random.default_rng(seed)
    x = eng.parameter(rng.standard_normal((9, 3)))
    kern = eng.parameter(rng.standard_normal((7, 2, 3)) * 0.5)
    w = eng.constant(rng.standard_normal((9, 2)))
    fd_ok(lambda: eng.mul(eng.conv1d_same(x, kern), w).sum(), [x, kern])


def test_conv1d_batched_matches_flat():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 3))
    kern = rng.standard_normal((3, 2, 3))
    batched = eng.conv1d_same(eng.constant(x), eng.constant(kern)).data
    for i in range(4):
        single = eng.conv1d_same(eng.constant(x[i]), eng.constant(kern)).data
        assert np.allclose(batched[i], single, atol=1e-14)


# ---------------------------------------------------------------------------
# layernorm_leakyrelu
# ---------------------------------------------------------------------------

def test_layernorm_zero_variance_gives_leaky_bias():
    x = eng.constant(np.full((4, 3), 2.5))
    gain = eng.constant(np.ones(3))
    bias = eng.constant([0.4, -0.6, 0.0])
    out = eng.layernorm_leakyrelu(x, gain, bias, slope=0.01).data
    expected = np.where(np.array([0.4, -0.6, 0.0]) > 0, [0.4, -0.6, 0.0], 0.01 * np.array([0.4, -0.6, 0.0]))
    assert np.allclose(out, expected[None, :], atol=1e-12)


def test_layernorm_two_point_row():
    # direct evaluation: xhat = (x - 0) / sqrt(1 + eps)
    x = eng.constant([[1.0, -1.0]])
    out = eng.layernorm_leakyrelu(x, eng.constant(np.ones(2)), eng.constant(np.zeros(2)), slope=0.01).data
    xhat = 1.0 / np.sqrt(1.0 + 1e-5)
    assert np.allclose(out, [[xhat, -0.01 * xhat]], atol=1e-15)
    assert np.allclose(out, [[1.0, -0.01]], atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_layernorm_gradient(seed):
    rng = np.random.default_rng(seed)
    x = eng.parameter(rng.standard_normal((5, 8)))
    gain = eng.parameter(rng.uniform(0.5, 1.5, 8))
    bias = eng.parameter(rng.standard_normal(8) * 0.3)
    w = eng.constant(rng.standard_normal((5, 8)))
    fd_ok(lambda: eng.mul(eng.layernorm_leakyrelu(x, gain, bias), w).sum(), [x, gain, bias])


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = eng.parameter(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_scalar():
    x = eng.parameter(np.asarray(3.0))
    eng.mul(x, x).backward()
    assert np.allclose(x.grad, 6.0)


def test_backward_requires_scalar():
    x = eng.parameter(np.ones((2, 2)))
    with pytest.raises(eng.ContractError):
        eng.mul(x, x).backward()


def test_backward_deterministic_after_zeroing():
    rng = np.random.default_rng(7)
    x = eng.parameter(rng.standard_normal((4, 4)))

    def run():
        x.zero_grad()
        loss = eng.mul(eng.row_softmax(eng.matmul(x, x)), eng.constant(np.ones((4, 4)))).sum()
        loss.backward()
        return x.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_grad_accumulates_across_backwards():
    x = eng.parameter(np.asarray(2.0))
    loss = eng.mul(x, x)
    loss.backward()
    first = x.grad.copy()
    loss2 = eng.mul(x, x)
    loss2.backward()
    assert np.allclose(x.grad, 2 * first)


# ---------------------------------------------------------------------------
# remaining primitives
# ---------------------------------------------------------------------------

def test_elementwise_gradients():
    rng = np.random.default_rng(11)
    a = eng.parameter(rng.standard_normal((3, 4)))
    b = eng.parameter(rng.standard_normal((3, 4)))
    c = eng.parameter(rng.standard_normal(4))
    w = eng.constant(rng.standard_normal((3, 4)))
    fd_ok(lambda: eng.mul(eng.add(eng.mul(a, b), eng.sub(a, c)), w).sum(), [a, b, c])
    fd_ok(lambda: eng.mul(eng.neg(a), w).sum(), [a])


def test_scalar_ops_and_sugar():
    x = eng.parameter(np.asarray([1.0, 2.0]))
    y = (2.0 * x + 1.0 - x * 0.5).sum()
    y.backward()
    assert np.allclose(x.grad, 1.5)


def test_sigmoid_values_and_gradient():
    rng = np.random.default_rng(13)
    assert np.allclose(eng.sigmoid(eng.constant(np.zeros(3))).data, 0.5)
    assert eng.sigmoid(eng.constant([-800.0, 800.0])).data == pytest.approx([0.0, 1.0])
    a = eng.parameter(rng.standard_normal((2, 5)))
    w = eng.constant(rng.standard_normal((2, 5)))
    fd_ok(lambda: eng.mul(eng.sigmoid(a), w).sum(), [a])


def test_reductions_and_reshape_gradients():
    rng = np.random.default_rng(17)
    a = eng.parameter(rng.standard_normal((3, 4, 2)))
    w = eng.constant(rng.standard_normal((3, 2)))
    fd_ok(lambda: eng.mul(eng.mean_(a, axis=1), w).sum(), [a])
    fd_ok(lambda: eng.reshape(a, (6, 4)).sum(), [a])
    fd_ok(lambda: eng.transpose(a, (2, 0, 1)).sum(), [a])


def test_concat_and_narrow_gradients():
    rng = np.random.default_rng(19)
    a = eng.parameter(rng.standard_normal((3, 2)))
    b = eng.parameter(rng.standard_normal((3, 4)))
    w = eng.constant(rng.standard_normal((3, 6)))
    fd_ok(lambda: eng.mul(eng.concat([a, b], axis=-1), w).sum(), [a, b])
    w2 = eng.constant(rng.standard_normal((3, 2)))
    fd_ok(lambda: eng.mul(eng.narrow(b, -1, 1, 2), w2).sum(), [b])


def test_dot_matches_manual_inner_product():
    rng = np.random.default_rng(23)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    out = eng.dot(eng.constant(a), eng.constant(b)).data
    assert np.allclose(out, (a * b).sum(axis=-1), atol=1e-14)


def test_take_rows_values_and_gradient():
    rng = np.random.default_rng(29)
    a = eng.parameter(rng.standard_normal((5, 3)))
    idx = np.array([4, 0, 0, 2])
    out = eng.take_rows(a, idx)
    assert np.array_equal(out.data, a.data[idx])
    w = eng.constant(rng.standard_normal((4, 3)))
    fd_ok(lambda: eng.mul(eng.take_rows(a, idx), w).sum(), [a])


def test_take_last_values_and_gradient():
    rng = np.random.default_rng(31)
    a = eng.parameter(rng.standard_normal((4, 6)))
    idx = rng.integers(0, 6, size=(4, 3))
    out = eng.take_last(a, idx)
    assert np.array_equal(out.data, np.take_along_axis(a.data, idx, axis=1))
    w = eng.constant(rng.standard_normal((4, 3)))
    fd_ok(lambda: eng.mul(eng.take_last(a, idx), w).sum(), [a])


def test_topk_ties_break_to_lower_index():
    scores = np.array([1.0, 3.0, 3.0, 2.0, 3.0])
    assert eng.topk_indices(scores, 3).tolist() == [1, 2, 4]


def test_dropout_moments_and_eval_identity():
    rng = np.random.default_rng(37)
    x = eng.constant(np.full(100_000, 2.0))
    out = eng.dropout(x, 0.3, rng, training=True)
    kept = out.data[out.data != 0]
    assert abs(out.data.mean() - 2.0) <= 0.04  # inverted scaling preserves the mean
    assert np.allclose(kept, 2.0 / 0.7)
    assert eng.dropout(x, 0.3, rng, training=False) is x
    with pytest.raises(eng.ConfigurationError):
        eng.dropout(x, 1.0, rng, training=True)


def test_dropout_gradient_fixed_mask():
    base = np.random.default_rng(41)
    x = eng.parameter(base.standard_normal(20))

    def build():
        rng = np.random.default_rng(99)
        return eng.dropout(x, 0.4, rng, training=True).sum()

    fd_ok(build, [x])


def test_cross_entropy_value_and_gradient():
    rng = np.random.default_rng(43)
    logits = eng.parameter(rng.standard_normal((6, 4)))
    labels = rng.integers(0, 4, size=6)
    # independent computation
    z = logits.data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    expected = -np.log(p[np.arange(6), labels]).mean()
    loss = eng.softmax_cross_entropy(logits, labels)
    assert np.allclose(loss.data, expected, atol=1e-12)
    fd_ok(lambda: eng.softmax_cross_entropy(logits, labels), [logits], tol=1e-4)


def test_uniform_logits_give_uniform_probabilities():
    logits = np.zeros((3, 5))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(p, 0.2)
    loss = eng.softmax_cross_entropy(eng.constant(logits), np.array([0, 1, 2]))
    assert np.allclose(loss.data, np.log(5.0), atol=1e-12)


# ---------------------------------------------------------------------------
# error states
# ---------------------------------------------------------------------------

def test_non_finite_raises_and_names_op():
    big = eng.constant(np.full((2, 2), 1e200))
    with pytest.raises(eng.NonFiniteError, match="matmul"):
        eng.matmul(big, big)


def test_non_finite_input_rejected():
    with pytest.raises(eng.NonFiniteError):
        eng.constant(np.array([1.0, np.nan]))


def test_composite_gradient_through_everything():
    rng = np.random.default_rng(47)
    x = eng.parameter(rng.standard_normal((4, 3)))
    u = eng.parameter(rng.standard_normal((3, 3)) * 0.5)
    w = eng.parameter(rng.standard_normal((3, 3)) * 0.5)
    gain = eng.parameter(np.ones(3))
    bias = eng.parameter(np.zeros(3))
    labels = np.array([0, 1, 2, 0])

    def build():
        aff = eng.row_softmax(eng.matmul(eng.matmul(x, u), eng.transpose(x)))
        z = eng.layernorm_leakyrelu(eng.matmul(aff, eng.matmul(x, eng.transpose(w))), gain, bias)
        return eng.softmax_cross_entropy(z, labels)

    errs = relative_errors(build, [x, u, w, gain, bias])
    assert max(float(e.max()) for e in errs) <= 1e-3
