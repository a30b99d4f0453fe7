import numpy as np
import pytest

from tinydet import autodiff
from tinydet.autodiff import Tensor

from oracles import assert_grads_close, finite_difference


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def test_relu_values():
    out = autodiff.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_sigmoid_at_zero():
    assert autodiff.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)


def test_sigmoid_gradient_matches_finite_differences():
    x = t64([0.0])
    autodiff.sigmoid(x).sum().backward()
    (num,) = finite_difference(lambda a: 1 / (1 + np.exp(-a[0])), [np.zeros(1)])
    assert x.grad[0] == pytest.approx(0.25, abs=1e-7)
    assert_grads_close(x.grad, num)


def test_elementwise_dispatch_and_unknown_kind():
    out = autodiff.elementwise("add", Tensor([1.0]), Tensor([2.0]))
    assert out.data[0] == 3.0
    with pytest.raises(ValueError, match="unknown elementwise op"):
        autodiff.elementwise("cosh", Tensor([1.0]))


def test_broadcast_error_is_descriptive():
    with pytest.raises(ValueError, match="not broadcastable"):
        Tensor(np.ones((3, 2))) + Tensor(np.ones((4, 2)))


def test_broadcast_gradients_sum_over_expanded_axes():
    a = t64(np.ones((2, 3)))
    b = t64(np.ones(3))
    (a * b).sum().backward()
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))


def test_sum_backward_is_ones():
    x = t64(np.arange(6).reshape(2, 3))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_sum_gradient():
    x = t64([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_across_calls():
    x = t64([1.0, 2.0])
    y = (x * x).sum()
    y.backward()
    y.backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_backward_visits_each_node_once():
    # diamond graph: both consumers of `mid` feed one output
    calls = []
    x = t64([1.0, 2.0])
    mid = x * 2.0
    orig = mid._backward

    def counting_backward(g):
        calls.append(1)
        orig(g)

    mid._backward = counting_backward
    ((mid * 3.0) + (mid * 5.0)).sum().backward()
    assert len(calls) == 1
    np.testing.assert_allclose(x.grad, [16.0, 16.0])


@pytest.mark.parametrize("op,ref", [
    ("sub", lambda a, b: a - b),
    ("mul", lambda a, b: a * b),
    ("div", lambda a, b: a / b),
])
def test_binary_op_gradients(op, ref):
    rng = np.random.default_rng(7)
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(3, 4)) + 3.0)  # keep divisors away from 0
    autodiff.elementwise(op, a, b).sum().backward()
    num_a, num_b = finite_difference(lambda x, y: ref(x, y).sum(),
                                     [a.data.copy(), b.data.copy()])
    assert_grads_close(a.grad, num_a, label=f"{op}/a")
    assert_grads_close(b.grad, num_b, label=f"{op}/b")


@pytest.mark.parametrize("op,ref,shift", [
    ("log", np.log, 2.5),
    ("exp", np.exp, 0.0),
    ("abs", np.abs, 0.0),
    ("relu", lambda x: np.maximum(x, 0.0), 0.0),
    ("sigmoid", lambda x: 1 / (1 + np.exp(-x)), 0.0),
])
def test_unary_op_gradients(op, ref, shift):
    rng = np.random.default_rng(11)
    vals = rng.normal(size=12) + shift
    # keep clear of the non-smooth kinks at 0
    if op in ("abs", "relu"):
        vals = np.where(np.abs(vals) < 0.05, 0.3, vals)
    x = t64(vals)
    autodiff.elementwise(op, x).sum().backward()
    (num,) = finite_difference(lambda a: ref(a).sum(), [x.data.copy()])
    assert_grads_close(x.grad, num, label=op)


def test_pow_and_maximum_with_const():
    x = t64([1.5, 2.0, 3.0])
    autodiff.power(x, 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 3.0 * x.data**2)
    y = t64([-1.0, 0.5, 2.0])
    autodiff.maximum(y, 1.0).sum().backward()
    np.testing.assert_array_equal(y.grad, [0.0, 0.0, 1.0])


def test_take_rows_accumulates_duplicates():
    x = t64(np.arange(8, dtype=np.float64).reshape(4, 2))
    out = autodiff.take_rows(x, [0, 0, 3])
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [0, 0], [1, 1]])


def test_slicing_and_concat_roundtrip_gradient():
    x = t64(np.arange(12, dtype=np.float64).reshape(3, 4))
    out = autodiff.concatenate([x[:2], x[2:]], axis=0)
    (out * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((3, 4), 2.0))


def test_transpose_reshape_gradient_shapes():
    x = t64(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
    y = x.transpose((2, 0, 1)).reshape((4, 6))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


# -- convolution -------------------------------------------------------------

def test_conv2d_all_ones_sums_window():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = autodiff.conv2d(x, w, stride=1, padding=0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == pytest.approx(9.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 1, 5, 5)))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = autodiff.conv2d(x, Tensor(w), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x.data, atol=1e-6)


def test_conv2d_rejects_bad_geometry():
    with pytest.raises(ValueError, match="output extent"):
        autodiff.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="channel mismatch"):
        autodiff.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(2, 3, 8, 8)))
    w = t64(rng.normal(size=(4, 3, 3, 3)) * 0.5)
    b = t64(rng.normal(size=4))
    autodiff.conv2d(x, w, b, stride=stride, padding=padding).sum().backward()

    from tinydet._kernels import conv2d_forward

    def ref(xa, wa, ba):
        y = conv2d_forward(xa, wa, stride, padding)
        return (y + ba.reshape(1, -1, 1, 1)).sum()

    num_x, num_w, num_b = finite_difference(
        ref, [x.data.copy(), w.data.copy(), b.data.copy()]
    )
    assert_grads_close(x.grad, num_x, label="conv/x")
    assert_grads_close(w.grad, num_w, label="conv/w")
    assert_grads_close(b.grad, num_b, label="conv/b")


def test_conv_transpose_doubles_spatial_extent():
    x = Tensor(np.zeros((1, 3, 14, 14)))
    w = Tensor(np.zeros((3, 5, 2, 2)))
    out = autodiff.conv_transpose2d_2x2(x, w)
    assert out.data.shape == (1, 5, 28, 28)


def test_conv_transpose_ones_expand():
    x = Tensor(np.ones((1, 1, 1, 1)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = autodiff.conv_transpose2d_2x2(x, w)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_transpose_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    w = t64(rng.normal(size=(3, 2, 2, 2)))
    b = t64(rng.normal(size=2))
    autodiff.conv_transpose2d_2x2(x, w, b).sum().backward()

    def ref(xa, wa, ba):
        n, c, h, wd = xa.shape
        k = wa.shape[1]
        y = np.zeros((n, k, 2 * h, 2 * wd))
        for di in range(2):
            for dj in range(2):
                y[:, :, di::2, dj::2] = np.tensordot(
                    xa, wa[:, :, di, dj], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        return (y + ba.reshape(1, -1, 1, 1)).sum()

    num_x, num_w, num_b = finite_difference(
        ref, [x.data.copy(), w.data.copy(), b.data.copy()]
    )
    assert_grads_close(x.grad, num_x, label="deconv/x")
    assert_grads_close(w.grad, num_w, label="deconv/w")
    assert_grads_close(b.grad, num_b, label="deconv/b")


def test_composite_conv_relu_sum_gradient():
    rng = np.random.default_rng(13)
    x = t64(rng.normal(size=(1, 2, 6, 6)))
    w = t64(rng.normal(size=(3, 2, 3, 3)) * 0.7)
    autodiff.relu(autodiff.conv2d(x, w, padding=1)).sum().backward()

    from tinydet._kernels import conv2d_forward

    def ref(xa, wa):
        return np.maximum(conv2d_forward(xa, wa, 1, 1), 0).sum()

    num_x, num_w = finite_difference(ref, [x.data.copy(), w.data.copy()])
    assert_grads_close(x.grad, num_x, rtol=1e-4, label="composite/x")
    assert_grads_close(w.grad, num_w, rtol=1e-4, label="composite/w")


def test_forward_is_deterministic_bitwise():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = autodiff.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = autodiff.conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=1).data
    assert np.array_equal(a, b)


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    with autodiff.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    z = x * 2.0
    assert z.requires_grad
