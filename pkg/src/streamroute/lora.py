"""Low-rank adapters on frozen base weights.

An adapter adds a trainable rank-r update B @ A to a frozen weight matrix.
Conv kernels [c_out, c_in, kh, kw] are treated as matrices with
d = c_out and k = c_in*kh*kw. B starts at zero so a freshly attached
adapter is an exact no-op; A starts from a small uniform distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numcore import ParamTensor, dense_forward


def default_rank(d: int, k: int) -> int:
    """Rank rule: 32 when the target is wide enough, else half the min dim."""
    m = min(d, k)
    if m >= 32:
        return 32
    return max(1, m // 2)


def _as_matrix_shape(value: np.ndarray) -> tuple[int, int]:
    if value.ndim == 2:
        return value.shape  # type: ignore[return-value]
    if value.ndim == 4:
        return value.shape[0], value.shape[1] * value.shape[2] * value.shape[3]
    raise ShapeError(f"no low-rank view for a rank-{value.ndim} tensor")


@dataclass
class LoraAdapter:
    """Trainable pair (A [r, k], B [d, r]) attached to one base tensor."""

    a: ParamTensor
    b: ParamTensor
    rank: int
    target: str

    @property
    def param_count(self) -> int:
        return self.a.size + self.b.size

    def zero_grad(self) -> None:
        self.a.zero_grad()
        self.b.zero_grad()

    def delta(self) -> np.ndarray:
        """The dense update B @ A, shape [d, k]."""
        return self.b.value @ self.a.value


def make_adapter(base: ParamTensor, rank: int | None = None, rng: np.random.Generator | None = None) -> LoraAdapter:
    """Create a zero-initialised adapter for a dense matrix or conv kernel."""
    d, k = _as_matrix_shape(base.value)
    r = default_rank(d, k) if rank is None else rank
    if r < 1 or r > min(d, k):
        raise ValueError(f"rank {r} outside [1, {min(d, k)}] for target {base.name or base.value.shape}")
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / np.sqrt(k)
    a = ParamTensor(rng.uniform(-bound, bound, size=(r, k)), name=f"{base.name}.lora.A")
    b = ParamTensor(np.zeros((d, r)), name=f"{base.name}.lora.B")
    return LoraAdapter(a=a, b=b, rank=r, target=base.name)


def apply(w: np.ndarray, x: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """Adapted product w @ x + B @ (A @ x) for a matrix w [d, k]."""
    if w.ndim != 2:
        raise ShapeError("apply expects a 2-D base matrix; merge conv kernels instead")
    if ad.a.value.shape[1] != w.shape[1] or ad.b.value.shape[0] != w.shape[0]:
        raise ShapeError("adapter shapes do not match the base matrix")
    return dense_forward(w, x) + ad.b.value @ (ad.a.value @ x)


def apply_backward(w: np.ndarray, x: np.ndarray, ad: LoraAdapter, dy: np.ndarray) -> np.ndarray:
    """Accumulate adapter gradients for apply(); returns dx. w stays frozen."""
    ax = ad.a.value @ x
    ad.b.add_grad(np.outer(dy, ax))
    ad.a.add_grad(np.outer(ad.b.value.T @ dy, x))
    return (w + ad.delta()).T @ dy


def merge(w: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """Dense sum w + B @ A, reshaped back to w's layout."""
    d, k = _as_matrix_shape(w)
    if ad.a.value.shape != (ad.rank, k) or ad.b.value.shape != (d, ad.rank):
        raise ShapeError("adapter shapes do not match the base tensor")
    return w + ad.delta().reshape(w.shape)


def param_ratio(layers) -> float:
    """Percentage of adapter parameters in a set of layers.

    Accepts any iterable of layers exposing .param_count (base weights,
    biases included) and .adapter (may be None).
    """
    base = 0
    adapted = 0
    n = 0
    for layer in layers:
        n += 1
        base += layer.param_count
        if layer.adapter is not None:
            adapted += layer.adapter.param_count
    if n == 0:
        raise ValueError("no layers to account")
    return 100.0 * adapted / (base + adapted)
