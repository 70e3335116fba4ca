"""Dense-array numerics with hand-written forward/backward passes.

Everything runs in float64. Each primitive comes as a forward function plus
an explicit backward that returns (or accumulates) gradients; nothing here
builds a graph. Gradient correctness is checked against central finite
differences (see grad_check).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, SupportError


@dataclass
class ParamTensor:
    """A named weight with an accumulated gradient buffer.

    Frozen (trainable=False) parameters never accumulate gradient; their
    grad stays exactly zero.
    """

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def add_grad(self, g: np.ndarray) -> None:
        if not self.trainable:
            return
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {self.value.shape}")
        self.grad += g

    @property
    def size(self) -> int:
        return self.value.size


def ensure_finite(x, what: str = "value"):
    """Raise NumericError if x contains NaN or Inf."""
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return x


# ---------------------------------------------------------------------------
# dense / conv


def dense_forward(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = w @ x for w [d, k] and x [k]."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense: w {w.shape} incompatible with x {x.shape}")
    return w @ x


def dense_backward(w: np.ndarray, x: np.ndarray, dy: np.ndarray):
    """Gradients of dense_forward: returns (dw, dx)."""
    dw = np.outer(dy, x)
    dx = w.T @ dy
    return dw, dx


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Unfold x [c, H, W] into columns [c*kh*kw, oh*ow]."""
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add columns back to the input layout (adjoint of _im2col)."""
    c, h, w = x_shape
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    dx = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    dcols = dcols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
    if padding:
        dx = dx[:, padding:-padding, padding:-padding]
    return dx


def conv2d_forward(k: np.ndarray, x: np.ndarray, stride: int = 1, padding: int = 0,
                   cols: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation of x [c_in, H, W] with k [c_out, c_in, kh, kw].

    No kernel flip. Output extents are floor((n + 2*padding - k)/stride) + 1.
    Pass precomputed im2col columns via cols to skip the unfold.
    """
    if k.ndim != 4 or x.ndim != 3 or k.shape[1] != x.shape[0]:
        raise ShapeError(f"conv: kernel {k.shape} incompatible with input {x.shape}")
    cout, cin, kh, kw = k.shape
    _, h, w = x.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if stride < 1:
        raise ShapeError("conv: stride must be >= 1")
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    return (k.reshape(cout, -1) @ cols).reshape(cout, oh, ow)


def conv2d_backward(k: np.ndarray, x: np.ndarray, dy: np.ndarray, stride: int = 1, padding: int = 0,
                    cols: np.ndarray | None = None):
    """Gradients of conv2d_forward: returns (dk, dx)."""
    cout, cin, kh, kw = k.shape
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    dy_mat = dy.reshape(cout, -1)
    dk = (dy_mat @ cols.T).reshape(k.shape)
    dcols = k.reshape(cout, -1).T @ dy_mat
    dx = _col2im(dcols, x.shape, kh, kw, stride, padding)
    return dk, dx


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, dy, 0.0)


def sigmoid(x):
    # overflowing exp saturates to inf, which still yields the correct 0.0
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x); smooth ReLU used in the detector stacks."""
    return x * sigmoid(x)


def silu_grad(x: np.ndarray, dy: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
    """Backward of silu; pass s = sigmoid(x) if already computed."""
    if s is None:
        s = sigmoid(x)
    return dy * (s + x * s * (1.0 - s))


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a vector; output is positive and sums to 1."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax expects a non-empty vector")
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_grad(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of softmax given its output y."""
    return y * (dy - float(np.dot(dy, y)))


# ---------------------------------------------------------------------------
# box overlap


def iou(a, b) -> float:
    """Plain intersection-over-union of two corner boxes (x1, y1, x2, y2)."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a, b) -> float:
    """Generalized IoU of two corner boxes, in [-1, 1].

    giou = iou - (area(C) - area(union)) / area(C) where C is the smallest
    enclosing box. A single zero-area box is handled via the limit iou = 0;
    two zero-area boxes raise.
    """
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if area_a < 0.0 or area_b < 0.0:
        raise ValueError("box has negative extent")
    if area_a == 0.0 and area_b == 0.0:
        raise ValueError("giou undefined for two zero-area boxes")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = area_a + area_b - inter
    cw = max(a[2], b[2]) - min(a[0], b[0])
    ch = max(a[3], b[3]) - min(a[1], b[1])
    area_c = cw * ch
    iou_val = inter / union if union > 0.0 else 0.0
    return iou_val - (area_c - union) / area_c


def giou_grad(a, b) -> np.ndarray:
    """d giou(a, b) / d a for corner boxes (subgradient at ties)."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    overlap = iw > 0.0 and ih > 0.0
    inter = iw * ih if overlap else 0.0
    union = area_a + area_b - inter
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    area_c = cw * ch

    # d inter / d (ax1, ay1, ax2, ay2)
    d_inter = np.zeros(4)
    if overlap:
        d_inter[0] = -ih if ax1 > bx1 else 0.0
        d_inter[2] = ih if ax2 < bx2 else 0.0
        d_inter[1] = -iw if ay1 > by1 else 0.0
        d_inter[3] = iw if ay2 < by2 else 0.0

    d_area_a = np.array([-(ay2 - ay1), -(ax2 - ax1), (ay2 - ay1), (ax2 - ax1)])
    d_union = d_area_a - d_inter

    d_iou = np.zeros(4)
    if union > 0.0:
        d_iou = (d_inter * union - inter * d_union) / (union * union)

    d_area_c = np.array(
        [
            -ch if ax1 < bx1 else 0.0,
            -cw if ay1 < by1 else 0.0,
            ch if ax2 > bx2 else 0.0,
            cw if ay2 > by2 else 0.0,
        ]
    )
    # giou = iou - 1 + union / area_c
    d_ratio = (d_union * area_c - union * d_area_c) / (area_c * area_c)
    return d_iou + d_ratio


# ---------------------------------------------------------------------------
# divergences


def kl_div(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, with 0 * log 0 taken as 0.

    Requires both inputs to be distributions (non-negative, summing to 1
    within 1e-9) and q > 0 wherever p > 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError("kl_div expects two equal-length vectors")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0.0) or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} is not a distribution")
    mask = p > 0.0
    if np.any(q[mask] == 0.0):
        raise SupportError("q has zero mass where p > 0")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


# ---------------------------------------------------------------------------
# resampling


def resize_area(img: np.ndarray, out_hw) -> np.ndarray:
    """Exact area-average resample of a 2-D image to (oh, ow).

    Each output pixel is the integral of the piecewise-constant input over
    its exact source rectangle divided by the rectangle area, so the global
    mean is preserved to float precision for any output size.
    """
    oh, ow = out_hw
    if img.ndim != 2 or oh < 1 or ow < 1:
        raise ShapeError("resize_area expects a 2-D image and positive output size")
    return _area_reduce_axis(_area_reduce_axis(img, oh, axis=0), ow, axis=1)


def _area_reduce_axis(img: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    x = np.moveaxis(np.asarray(img, dtype=np.float64), axis, 0)
    n = x.shape[0]
    csum = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)], axis=0)
    scale = n / out_n
    edges = np.arange(out_n + 1) * scale
    idx = np.minimum(np.floor(edges).astype(int), n)
    frac = edges - idx
    cell = np.minimum(idx, n - 1)
    # F(t) = csum[floor(t)] + frac(t) * x[floor(t)], integral of x over [0, t)
    f = csum[idx] + frac.reshape((-1,) + (1,) * (x.ndim - 1)) * x[cell]
    out = (f[1:] - f[:-1]) / scale
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_diff_grad(loss_fn, param: ParamTensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of loss_fn() w.r.t. one parameter."""
    flat = param.value.reshape(-1)
    num = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = float(loss_fn())
        flat[i] = orig - eps
        lm = float(loss_fn())
        flat[i] = orig
        num[i] = (lp - lm) / (2.0 * eps)
    return num.reshape(param.value.shape)


def grad_check(loss_fn, params, eps: float = 1e-4) -> float:
    """Max relative error between analytic and finite-difference gradients.

    loss_fn() must zero grads, run forward + backward, and return the scalar
    loss with every trainable parameter's .grad freshly populated. Frozen
    parameters are skipped (their analytic gradient is pinned at zero).
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    loss = float(loss_fn())
    ensure_finite(loss, "loss")
    analytic = {id(p): p.grad.copy() for p in params}
    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        numeric = finite_diff_grad(loss_fn, p, eps)
        a = analytic[id(p)]
        denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    loss_fn()  # leave grads in their analytic state
    return worst
