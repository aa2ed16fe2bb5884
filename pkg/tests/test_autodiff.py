import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycletrack import autodiff as ad
from cycletrack.autodiff import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    conv2d,
    depthwise_xcorr,
    grad_check,
    matmul,
    norm_affine,
    sgd_step,
    softmax_axis,
    xcorr,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    i2 = Tensor(np.eye(2))
    out = matmul(i2, i2)
    assert np.array_equal(out.data, np.eye(2))


def test_matmul_hand():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_against_triple_loop():
    a = rng(1).standard_normal((5, 7))
    b = rng(2).standard_normal((7, 3))
    out = matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad():
    a = rng(3).standard_normal((4, 3))
    w = rng(4).standard_normal((3, 2))

    def f(x):
        return matmul(x, Tensor(w)).sum()

    assert grad_check(f, Tensor(a)) <= 1e-7


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform():
    out = softmax_axis(Tensor(np.zeros(4)), 0)
    assert np.allclose(out.data, 0.25, atol=1e-15)


def test_softmax_closed_form():
    out = softmax_axis(Tensor([0.0, np.log(3.0)]), 0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = rng(5).standard_normal((6, 9)) * 10
    out = softmax_axis(Tensor(x), 1)
    assert np.max(np.abs(out.data.sum(axis=1) - 1.0)) <= 1e-9


def test_softmax_jacobian_vs_finite_differences():
    x = rng(6).standard_normal(7)
    w = rng(7).standard_normal(7)

    def f(t):
        return (softmax_axis(t, 0) * Tensor(w)).sum()

    assert grad_check(f, Tensor(x), h=1e-5) <= 1e-6


def test_softmax_nonfinite_raises():
    with pytest.raises(ad.NumericError):
        softmax_axis(Tensor([np.inf, 1.0]), 0)


@given(st.integers(0, 1))
@settings(max_examples=20, deadline=None)
def test_softmax_axis_property(axis):
    x = rng(11).standard_normal((4, 5))
    out = softmax_axis(Tensor(x), axis)
    sums = out.data.sum(axis=axis)
    assert np.all(out.data > 0)
    assert np.max(np.abs(sums - 1.0)) <= 1e-9


# ---------------------------------------------------------------------------
# conv2d


def _conv_loops(x, w, stride, pad):
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (xp.shape[1] - k) // stride + 1
    w_out = (xp.shape[2] - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            out[o, i, j] += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
    return out


def test_conv2d_identity_mixer():
    x = rng(8).standard_normal((3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(w))
    assert np.array_equal(out.data, x)


def test_conv2d_box_filter_interior():
    x = np.full((1, 6, 6), 2.5)
    w = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1)
    assert np.allclose(out.data[0, 1:-1, 1:-1], 9 * 2.5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_against_six_loop_oracle(stride, pad):
    x = rng(9).standard_normal((3, 7, 8))
    w = rng(10).standard_normal((4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
    ref = _conv_loops(x, w, stride, pad)
    assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_grads():
    x = rng(12).standard_normal((2, 6, 6))
    w = rng(13).standard_normal((3, 2, 3, 3))
    probe = rng(14).standard_normal((3, 3, 3))

    def f_x(t):
        return (conv2d(t, Tensor(w), stride=2, pad=1) * Tensor(probe)).sum()

    def f_w(t):
        return (conv2d(Tensor(x), t, stride=2, pad=1) * Tensor(probe)).sum()

    assert grad_check(f_x, Tensor(x)) <= 1e-5
    assert grad_check(f_w, Tensor(w)) <= 1e-5


# ---------------------------------------------------------------------------
# cross-correlation


def test_xcorr_peak_at_matching_offset():
    search = rng(15).standard_normal((2, 9, 9))
    kernel = search[:, 3:6, 2:5].copy()
    out = xcorr(Tensor(kernel), Tensor(search))
    # autocorrelation: the matching offset dominates for a generic patch
    assert out.data.shape == (1, 7, 7)
    peak = np.unravel_index(np.argmax(out.data[0]), out.data[0].shape)
    assert peak == (3, 2)


def test_xcorr_zero_kernel():
    out = xcorr(Tensor(np.zeros((2, 4, 4))), Tensor(rng(16).standard_normal((2, 8, 8))))
    assert np.array_equal(out.data, np.zeros((1, 5, 5)))


def test_xcorr_against_loops():
    kernel = rng(17).standard_normal((3, 3, 2))
    search = rng(18).standard_normal((3, 6, 7))
    out = xcorr(Tensor(kernel), Tensor(search)).data
    ref = np.zeros((1, 4, 6))
    for i in range(4):
        for j in range(6):
            for c in range(3):
                for u in range(3):
                    for v in range(2):
                        ref[0, i, j] += kernel[c, u, v] * search[c, i + u, j + v]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_xcorr_kernel_too_large():
    with pytest.raises(ShapeError):
        xcorr(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 4, 4))))


def test_depthwise_xcorr_grads():
    kernel = rng(19).standard_normal((2, 3, 3))
    search = rng(20).standard_normal((2, 6, 6))
    probe = rng(21).standard_normal((2, 4, 4))

    def f_k(t):
        return (depthwise_xcorr(t, Tensor(search)) * Tensor(probe)).sum()

    def f_s(t):
        return (depthwise_xcorr(Tensor(kernel), t) * Tensor(probe)).sum()

    assert grad_check(f_k, Tensor(kernel)) <= 1e-5
    assert grad_check(f_s, Tensor(search)) <= 1e-5


# ---------------------------------------------------------------------------
# norm_affine


def test_norm_affine_constant_channel_gives_bias():
    x = np.full((2, 4, 4), 3.7)
    out = norm_affine(Tensor(x), Tensor([2.0, 5.0]), Tensor([1.0, -1.0]))
    assert np.allclose(out.data[0], 1.0, atol=1e-12)
    assert np.allclose(out.data[1], -1.0, atol=1e-12)


def test_norm_affine_standardizes():
    x = rng(22).standard_normal((3, 5, 5)) * 4 + 2
    out = norm_affine(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    means = out.data.mean(axis=(1, 2))
    assert np.max(np.abs(means)) <= 1e-10


def test_norm_affine_grads():
    x = rng(23).standard_normal((2, 4, 4))
    gain = rng(24).standard_normal(2)
    bias = rng(25).standard_normal(2)
    probe = rng(26).standard_normal((2, 4, 4))

    def f_x(t):
        return (norm_affine(t, Tensor(gain), Tensor(bias)) * Tensor(probe)).sum()

    def f_g(t):
        return (norm_affine(Tensor(x), t, Tensor(bias)) * Tensor(probe)).sum()

    def f_b(t):
        return (norm_affine(Tensor(x), Tensor(gain), t) * Tensor(probe)).sum()

    assert grad_check(f_x, Tensor(x)) <= 1e-5
    assert grad_check(f_g, Tensor(gain)) <= 1e-5
    assert grad_check(f_b, Tensor(bias)) <= 1e-5


# ---------------------------------------------------------------------------
# backward / sgd / grad_check harness


def test_backward_sum_gives_ones():
    x = Tensor(rng(27).standard_normal(5), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones(5))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * x)


def test_backward_composed_vs_finite_differences():
    w = rng(28).standard_normal((4, 4))

    def f(t):
        h = ad.relu(matmul(Tensor(w), t.reshape(4, 1)))
        return (softmax_axis(h, 0) * h).sum()

    assert grad_check(f, Tensor(rng(29).standard_normal(4))) <= 1e-5


def test_backward_accumulates_for_reused_tensor():
    x = Tensor(2.0, requires_grad=True)
    y = x * x + x * 3.0
    backward(y)
    assert x.grad == pytest.approx(7.0)


def test_sgd_zero_lr():
    p = Parameter("p", [1.0, 2.0])
    p.tensor.grad = np.array([5.0, 5.0])
    sgd_step([p], lr=0.0)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_sgd_hand_step():
    p = Parameter("p", 1.0)
    p.tensor.grad = np.array(2.0)
    sgd_step([p], lr=0.1)
    assert p.data == pytest.approx(0.8)
    assert p.tensor.grad is None


def test_sgd_missing_grad_raises():
    with pytest.raises(ContractError):
        sgd_step([Parameter("p", 1.0)], lr=0.1)


def test_sgd_quadratic_bowl_converges():
    target = np.array([1.5, -2.0, 0.5])
    p = Parameter("p", np.zeros(3))
    for _ in range(200):
        diff = p.tensor - Tensor(target)
        backward((diff * diff).sum())
        sgd_step([p], lr=0.4)
    assert np.max(np.abs(p.data - target)) <= 1e-6


def test_grad_check_linear():
    w = rng(30).standard_normal(6)

    def f(t):
        return (t * Tensor(w)).sum()

    assert grad_check(f, Tensor(rng(31).standard_normal(6))) <= 1e-10


def test_grad_check_softmax_composed():
    def f(t):
        return (softmax_axis(t, 0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum()

    assert grad_check(f, Tensor([0.3, -0.2, 0.9, 0.1]), h=1e-5) <= 1e-6


# ---------------------------------------------------------------------------
# structural and elementwise backward coverage


def test_maximum_tie_selects_first():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 5.0], requires_grad=True)
    backward(ad.maximum(a, b).sum())
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 1.0])


def test_minimum_tie_selects_first():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 0.5], requires_grad=True)
    backward(ad.minimum(a, b).sum())
    assert np.array_equal(a.grad, [1.0, 0.0])
    assert np.array_equal(b.grad, [0.0, 1.0])


def test_broadcast_mul_unbroadcasts_grad():
    a = Tensor(rng(32).standard_normal((3, 1, 4)), requires_grad=True)
    b = Tensor(rng(33).standard_normal((2, 4)), requires_grad=True)
    backward((a * b).sum())
    assert a.grad.shape == (3, 1, 4)
    assert b.grad.shape == (2, 4)


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.log, ad.sigmoid, ad.softplus, ad.absolute, lambda t: ad.power(t, 3.0),
     lambda t: ad.clamp(t, -0.5, 2.5)],
)
def test_unary_grads(op):
    x = rng(34).standard_normal(8) * 0.8 + 1.2  # keep log/clamp away from kinks

    def f(t):
        return op(t).sum()

    assert grad_check(f, Tensor(x)) <= 1e-6


def test_getitem_concat_transpose_grads():
    x = rng(35).standard_normal((4, 6))

    def f(t):
        a = t[:2, :]
        b = t[2:, :]
        joined = ad.concat([b, a], axis=0)
        return (joined.transpose((1, 0)) * Tensor(rng(36).standard_normal((6, 4)))).sum()

    assert grad_check(f, Tensor(x)) <= 1e-6


def test_detach_blocks_gradient():
    x = Tensor(2.0, requires_grad=True)
    y = x.detach() * x
    backward(y)
    assert x.grad == pytest.approx(2.0)  # only the attached factor contributes


def test_no_grad_suppresses_nodes():
    x = Tensor(1.0, requires_grad=True)
    with ad.no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


# ---------------------------------------------------------------------------
# determinism


def test_graph_replay_bit_identical():
    def run():
        r = rng(99)
        w1 = Parameter("w1", r.standard_normal((8, 8)))
        w2 = Parameter("w2", r.standard_normal((8, 8)))
        losses = []
        for step in range(100):
            x = Tensor(np.sin(np.arange(8.0) + step).reshape(8, 1))
            h = ad.relu(matmul(w1.tensor, x))
            y = matmul(w2.tensor, h)
            loss = (y * y).sum()
            backward(loss)
            sgd_step([w1, w2], lr=1e-3)
            losses.append(loss.item())
        return losses

    assert run() == run()
