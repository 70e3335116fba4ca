import numpy as np
import pytest

from streamroute import numcore as nc
from streamroute.errors import NumericError, ShapeError, SupportError


# ---------------------------------------------------------------------------
# independent oracles


def naive_matmul(w, x):
    d, k = w.shape
    out = np.zeros(d)
    for i in range(d):
        for j in range(k):
            out[i] += w[i, j] * x[j]
    return out


def naive_conv2d(kern, x, stride=1, padding=0):
    cout, cin, kh, kw = kern.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    _, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for co in range(cout):
        for oy in range(oh):
            for ox in range(ow):
                acc = 0.0
                for ci in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += kern[co, ci, ky, kx] * x[ci, oy * stride + ky, ox * stride + kx]
                out[co, oy, ox] = acc
    return out


# ---------------------------------------------------------------------------
# dense


def test_dense_identity():
    y = nc.dense_forward(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(y, [1.0, 2.0, 3.0])


def test_dense_zero_matrix():
    y = nc.dense_forward(np.zeros((2, 3)), np.array([4.0, -1.0, 7.0]))
    assert np.array_equal(y, [0.0, 0.0])


def test_dense_matches_naive_oracle():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(4, 4))
    x = rng.normal(size=4)
    assert np.max(np.abs(nc.dense_forward(w, x) - naive_matmul(w, x))) < 1e-12


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        nc.dense_forward(np.zeros((2, 3)), np.zeros(4))


def test_dense_backward_matches_fd():
    rng = np.random.default_rng(3)
    for _ in range(10):
        w = nc.ParamTensor(rng.normal(size=(3, 5)))
        x = rng.normal(size=5)
        t = rng.normal(size=3)

        def loss():
            w.zero_grad()
            y = nc.dense_forward(w.value, x)
            dw, _ = nc.dense_backward(w.value, x, 2.0 * (y - t))
            w.add_grad(dw)
            return float(np.sum((y - t) ** 2))

        assert nc.grad_check(loss, [w]) < 1e-8


# ---------------------------------------------------------------------------
# conv


def test_conv_scalar_kernel():
    k = np.full((1, 1, 1, 1), 2.0)
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert np.array_equal(nc.conv2d_forward(k, x), [[[2.0, 4.0], [6.0, 8.0]]])


def test_conv_zero_kernel():
    rng = np.random.default_rng(0)
    y = nc.conv2d_forward(np.zeros((2, 1, 3, 3)), rng.normal(size=(1, 5, 5)))
    assert np.array_equal(y, np.zeros((2, 3, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 1), (2, 1)])
def test_conv_matches_naive_oracle(stride, padding):
    rng = np.random.default_rng(11)
    k = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 5, 5))
    got = nc.conv2d_forward(k, x, stride=stride, padding=padding)
    want = naive_conv2d(k, x, stride=stride, padding=padding)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        nc.conv2d_forward(np.zeros((1, 1, 6, 6)), np.zeros((1, 5, 5)))


def test_conv_output_extents():
    y = nc.conv2d_forward(np.zeros((3, 2, 3, 3)), np.zeros((2, 10, 7)), stride=2)
    assert y.shape == (3, 4, 3)


def test_conv_backward_matches_fd():
    for seed in range(10):
        r = np.random.default_rng(seed)
        k = nc.ParamTensor(r.normal(size=(2, 2, 3, 3)) * 0.5)
        x = r.normal(size=(2, 6, 7))
        t = r.normal(size=(2, 3, 4))

        def loss():
            k.zero_grad()
            y = nc.conv2d_forward(k.value, x, stride=2, padding=1)
            dk, _ = nc.conv2d_backward(k.value, x, 2.0 * (y - t) / y.size, stride=2, padding=1)
            k.add_grad(dk)
            return float(np.mean((y - t) ** 2))

        assert nc.grad_check(loss, [k]) < 1e-4


def test_conv_input_grad_matches_fd():
    rng = np.random.default_rng(9)
    k = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 5, 6))
    t = rng.normal(size=(2, 3, 4))
    y = nc.conv2d_forward(k, x)
    _, dx = nc.conv2d_backward(k, x, 2.0 * (y - t))

    eps = 1e-5
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = float(np.sum((nc.conv2d_forward(k, x) - t) ** 2))
        flat[i] = orig - eps
        lm = float(np.sum((nc.conv2d_forward(k, x) - t) ** 2))
        flat[i] = orig
        num.reshape(-1)[i] = (lp - lm) / (2 * eps)
    assert np.max(np.abs(dx - num)) < 1e-6


# ---------------------------------------------------------------------------
# activations and softmax


def test_softmax_symmetry_cases():
    assert np.allclose(nc.softmax(np.zeros(2)), [0.5, 0.5], atol=1e-15)
    assert np.allclose(nc.softmax(np.full(3, 5.0)), np.full(3, 1 / 3), atol=1e-15)


def test_softmax_closed_form():
    got = nc.softmax(np.log(np.array([1.0, 3.0])))
    assert np.max(np.abs(got - [0.25, 0.75])) < 1e-12


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(21)
    for _ in range(50):
        v = rng.normal(size=rng.integers(1, 8)) * 10
        y = nc.softmax(v)
        assert abs(y.sum() - 1.0) < 1e-12
        assert np.all(y > 0)
        shifted = nc.softmax(v + 3.7)
        assert np.max(np.abs(y - shifted)) < 1e-12


def test_softmax_empty_rejected():
    with pytest.raises(ShapeError):
        nc.softmax(np.array([]))


def test_softmax_grad_matches_fd():
    rng = np.random.default_rng(13)
    for _ in range(10):
        v = rng.normal(size=5)
        t = rng.normal(size=5)
        y = nc.softmax(v)
        dv = nc.softmax_grad(y, 2.0 * (y - t))
        eps = 1e-6
        for i in range(5):
            vp, vm = v.copy(), v.copy()
            vp[i] += eps
            vm[i] -= eps
            num = (np.sum((nc.softmax(vp) - t) ** 2) - np.sum((nc.softmax(vm) - t) ** 2)) / (2 * eps)
            assert abs(dv[i] - num) < 1e-7


@pytest.mark.parametrize("fn,grad", [(nc.silu, nc.silu_grad), (nc.relu, nc.relu_grad)])
def test_activation_grads_match_fd(fn, grad):
    rng = np.random.default_rng(17)
    x = rng.normal(size=64) * 3
    x = np.where(np.abs(x) < 0.05, 0.1, x)  # keep relu away from its kink
    dy = rng.normal(size=64)
    analytic = grad(x, dy)
    eps = 1e-6
    num = (fn(x + eps) - fn(x - eps)) / (2 * eps) * dy
    assert np.max(np.abs(analytic - num)) < 1e-6


def test_sigmoid_extreme_inputs_finite():
    y = nc.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(y))
    assert y[0] == 0.0 and y[1] == 0.5 and y[2] == 1.0


# ---------------------------------------------------------------------------
# giou


def test_giou_identical_boxes():
    assert nc.giou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0


def test_giou_hand_computed_overlap():
    # inter 1, union 7, enclosing 9 -> 1/7 - 2/9
    got = nc.giou((0, 0, 2, 2), (1, 1, 3, 3))
    assert abs(got - (1 / 7 - 2 / 9)) < 1e-12


def test_giou_separated_boxes_negative():
    assert nc.giou((0, 0, 1, 1), (10, 0, 11, 1)) < 0
    near = nc.giou((0, 0, 1, 1), (100, 0, 101, 1))
    far = nc.giou((0, 0, 1, 1), (10000, 0, 10001, 1))
    assert far < near < 0
    assert far > -1.0


def test_giou_symmetry_and_translation():
    rng = np.random.default_rng(31)
    for _ in range(100):
        ax, ay = rng.uniform(0, 10, size=2)
        bx, by = rng.uniform(0, 10, size=2)
        a = (ax, ay, ax + rng.uniform(0.1, 5), ay + rng.uniform(0.1, 5))
        b = (bx, by, bx + rng.uniform(0.1, 5), by + rng.uniform(0.1, 5))
        assert nc.giou(a, b) == pytest.approx(nc.giou(b, a), abs=1e-12)
        shift = np.array([5.5, -2.25, 5.5, -2.25])
        assert nc.giou(np.add(a, shift), np.add(b, shift)) == pytest.approx(nc.giou(a, b), abs=1e-9)


def test_giou_degenerate_cases():
    assert nc.giou((0, 0, 0, 0), (0, 0, 2, 2)) <= 0.0
    with pytest.raises(ValueError):
        nc.giou((0, 0, 0, 0), (1, 1, 1, 1))


def test_giou_grad_matches_fd():
    rng = np.random.default_rng(41)
    checked = 0
    while checked < 20:
        a = rng.uniform(0, 8, size=4)
        b = rng.uniform(0, 8, size=4)
        a = np.array([min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]) + 0.5, max(a[1], a[3]) + 0.5])
        b = np.array([min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 0.5, max(b[1], b[3]) + 0.5])
        g = nc.giou_grad(a, b)
        eps = 1e-6
        ok = True
        for i in range(4):
            ap, am = a.copy(), a.copy()
            ap[i] += eps
            am[i] -= eps
            num = (nc.giou(ap, b) - nc.giou(am, b)) / (2 * eps)
            ok = ok and abs(g[i] - num) < 1e-6
        assert ok
        checked += 1


# ---------------------------------------------------------------------------
# kl divergence


def test_kl_equal_distributions():
    assert nc.kl_div(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0


def test_kl_one_hot_reduction():
    got = nc.kl_div(np.array([1.0, 0.0]), np.array([0.8, 0.2]))
    assert abs(got - np.log(1.25)) < 1e-12
    got = nc.kl_div(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert abs(got - np.log(2.0)) < 1e-12


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(101)
    for _ in range(200):
        n = int(rng.integers(2, 6))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        assert nc.kl_div(p, q) >= 0.0


def test_kl_support_violation():
    with pytest.raises(SupportError):
        nc.kl_div(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


def test_kl_rejects_non_distribution():
    with pytest.raises(ValueError):
        nc.kl_div(np.array([0.5, 0.6]), np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# area resize


def test_resize_area_preserves_mean_even_division():
    rng = np.random.default_rng(55)
    img = rng.uniform(0, 255, size=(96, 160))
    small = nc.resize_area(img, (48, 80))
    assert abs(small.mean() - img.mean()) < 1e-9


def test_resize_area_preserves_mean_uneven_division():
    rng = np.random.default_rng(56)
    img = rng.uniform(0, 255, size=(96, 160))
    for hw in [(50, 50), (100, 100), (200, 200), (7, 13)]:
        out = nc.resize_area(img, hw)
        assert out.shape == hw
        assert abs(out.mean() - img.mean()) < 1e-6


def test_resize_area_constant_image():
    out = nc.resize_area(np.full((30, 40), 7.0), (11, 17))
    assert np.max(np.abs(out - 7.0)) < 1e-12


# ---------------------------------------------------------------------------
# grad_check harness


def test_grad_check_linear_quadratic_exact():
    rng = np.random.default_rng(71)
    w = nc.ParamTensor(rng.normal(size=(3, 4)))
    x = rng.normal(size=4)
    t = rng.normal(size=3)

    def loss():
        w.zero_grad()
        y = nc.dense_forward(w.value, x)
        dw, _ = nc.dense_backward(w.value, x, 2.0 * (y - t))
        w.add_grad(dw)
        return float(np.sum((y - t) ** 2))

    assert nc.grad_check(loss, [w]) < 1e-8


def test_grad_check_frozen_param_gets_zero_grad():
    w = nc.ParamTensor(np.ones((2, 2)), trainable=False)
    x = np.ones(2)

    def loss():
        w.zero_grad()
        y = nc.dense_forward(w.value, x)
        dw, _ = nc.dense_backward(w.value, x, 2.0 * y)
        w.add_grad(dw)
        return float(np.sum(y**2))

    err = nc.grad_check(loss, [w])
    assert err == 0.0
    assert np.array_equal(w.grad, np.zeros((2, 2)))


def test_grad_check_rejects_nonfinite_loss():
    w = nc.ParamTensor(np.ones((1, 1)))
    with pytest.raises(NumericError):
        nc.grad_check(lambda: float("nan"), [w])


def test_param_tensor_shape_guard():
    with pytest.raises(ShapeError):
        nc.ParamTensor(np.zeros((2, 2)), grad=np.zeros(3))
    p = nc.ParamTensor(np.zeros(3))
    with pytest.raises(ShapeError):
        p.add_grad(np.zeros(4))


def test_forward_ops_are_pure():
    rng = np.random.default_rng(88)
    k = rng.normal(size=(2, 1, 3, 3))
    x = rng.normal(size=(1, 6, 6))
    a = nc.conv2d_forward(k, x, stride=1)
    b = nc.conv2d_forward(k, x, stride=1)
    assert np.array_equal(a, b)
    assert np.array_equal(nc.softmax(x[0, 0]), nc.softmax(x[0, 0]))
