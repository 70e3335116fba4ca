"""Frame-difference speed router.

The router sees the raw difference of two consecutive frames, pooled to a
small fixed input, and scores each branch of the bank with one conv layer
followed by one linear layer. Frame differences are kept in raw pixel
units (0..255 frames, no normalisation): static scenes produce exactly
zero input, and the feature scale keeps the tiny network trainable at the
small learning rates used elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ShapeError
from .numcore import ParamTensor

ROUTER_INPUT_HW = (50, 50)
ANALYSIS_SIZES = (None, (200, 200), (100, 100), (50, 50))


@dataclass
class FrameDiff:
    raw: np.ndarray  # signed difference, full resolution
    pooled: np.ndarray  # area-averaged to the router input size


@dataclass
class RouteDecision:
    sigma: int
    logits: np.ndarray
    probabilities: np.ndarray


def to_luma(frame: np.ndarray) -> np.ndarray:
    """Collapse an optional color axis; single-channel frames pass through."""
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 3:
        return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2]
    raise ShapeError(f"expected [H, W] or [3, H, W] frame, got {frame.shape}")


def frame_diff(cur: np.ndarray, prev: np.ndarray, pooled_hw=ROUTER_INPUT_HW) -> FrameDiff:
    """Signed difference cur - prev plus its pooled copy."""
    cur = to_luma(np.asarray(cur, dtype=np.float64))
    prev = to_luma(np.asarray(prev, dtype=np.float64))
    if cur.shape != prev.shape:
        raise ShapeError(f"frame shapes differ: {cur.shape} vs {prev.shape}")
    raw = cur - prev
    return FrameDiff(raw=raw, pooled=nc.resize_area(raw, pooled_hw))


def zero_diff(frame_hw, pooled_hw=ROUTER_INPUT_HW) -> FrameDiff:
    """Placeholder difference for the first frame of a clip."""
    return FrameDiff(raw=np.zeros(frame_hw), pooled=np.zeros(pooled_hw))


class RouterNet:
    """One conv layer, ReLU, per-channel global average, one linear layer."""

    def __init__(self, branches: int, channels: int = 8, ksize: int = 5, stride: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        lim_k = np.sqrt(6.0 / (ksize * ksize))
        self.conv_kernel = ParamTensor(rng.uniform(-lim_k, lim_k, size=(channels, 1, ksize, ksize)), name="conv.kernel")
        self.conv_bias = ParamTensor(np.zeros(channels), name="conv.bias")
        lim_w = np.sqrt(6.0 / channels)
        self.linear_w = ParamTensor(rng.uniform(-lim_w, lim_w, size=(branches, channels)), name="linear.weight")
        self.linear_b = ParamTensor(np.zeros(branches), name="linear.bias")
        self.stride = stride
        self.branches = branches
        self._cache = None

    def params(self):
        return [self.conv_kernel, self.conv_bias, self.linear_w, self.linear_b]

    def named_params(self):
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, pooled: np.ndarray) -> np.ndarray:
        x = pooled[None, :, :]
        z = nc.conv2d_forward(self.conv_kernel.value, x, stride=self.stride) + self.conv_bias.value[:, None, None]
        a = nc.relu(z)
        feats = a.mean(axis=(1, 2))
        logits = nc.dense_forward(self.linear_w.value, feats) + self.linear_b.value
        self._cache = (x, z, a, feats)
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("backward before forward")
        x, z, a, feats = self._cache
        self.linear_b.add_grad(dlogits)
        dw, dfeats = nc.dense_backward(self.linear_w.value, feats, dlogits)
        self.linear_w.add_grad(dw)
        da = np.broadcast_to(dfeats[:, None, None] / (a.shape[1] * a.shape[2]), a.shape)
        dz = nc.relu_grad(z, da)
        dk, _ = nc.conv2d_backward(self.conv_kernel.value, x, dz, stride=self.stride)
        self.conv_kernel.add_grad(dk)
        self.conv_bias.add_grad(dz.sum(axis=(1, 2)))

    def flops(self, in_hw=ROUTER_INPUT_HW) -> int:
        cout, cin, kh, kw = self.conv_kernel.value.shape
        oh = (in_hw[0] - kh) // self.stride + 1
        ow = (in_hw[1] - kw) // self.stride + 1
        return cout * oh * ow * cin * kh * kw + self.linear_w.size

    def state_dict(self):
        return {p.name: p.value.copy() for p in self.params()}

    def load_state(self, named):
        for p in self.params():
            if p.name not in named:
                raise ValueError(f"router checkpoint missing {p.name}")
            p.value[...] = named[p.name]


def decision_from_logits(logits: np.ndarray) -> RouteDecision:
    """argmax with lowest-index tie-breaking, plus softmax probabilities."""
    return RouteDecision(sigma=int(np.argmax(logits)), logits=logits, probabilities=nc.softmax(logits))


def route(d: FrameDiff, net: RouterNet) -> RouteDecision:
    """Score the branches from the pooled frame difference."""
    if d.pooled.shape != ROUTER_INPUT_HW:
        raise ShapeError(f"pooled diff {d.pooled.shape} != router input {ROUTER_INPUT_HW}")
    return decision_from_logits(net.forward(d.pooled))


def mean_diff_criterion(d: FrameDiff, branches: int) -> int:
    """Sign baseline: largest branch when the mean difference is positive."""
    if branches < 2:
        raise ValueError("sign criterion needs at least two branches")
    return branches - 1 if float(d.raw.mean()) > 0.0 else 0


# ---------------------------------------------------------------------------
# diff-curve analysis


def diff_mean_curves(clip, sizes=ANALYSIS_SIZES):
    """Mean |difference| per consecutive frame pair at several frame sizes.

    Returns a list of (label, series) where series[j] covers the pair
    (frame j, frame j+1). None in sizes means the original resolution.
    """
    if len(clip.frames) < 2:
        raise ValueError("need at least two frames for difference curves")
    out = []
    for size in sizes:
        label = "original" if size is None else f"{size[0]}x{size[1]}"
        resized = [f if size is None else nc.resize_area(f, size) for f in clip.frames]
        series = [float(np.mean(np.abs(b - a))) for a, b in zip(resized, resized[1:])]
        out.append((label, series))
    return out


def curves_to_csv(curves) -> str:
    lines = ["frame_index,size,mean_abs_diff"]
    for label, series in curves:
        for j, val in enumerate(series):
            lines.append(f"{j + 1},{label},{val:.6f}")
    return "\n".join(lines) + "\n"
