"""Toy dual-stream grid detector used as a bank branch.

A branch consumes a window of frames (oldest to newest), runs a shared
conv backbone over every frame, fuses the current-frame features with the
mean of the history features, and emits per-cell classification,
objectness, and box-regression logits on a fixed grid. Training targets
come from the *next* frame's annotations, which is what makes the branch a
streaming predictor rather than a plain detector.

Box encoding per cell: center as sigmoid offsets inside the cell, size as
exp(log-extent) in cell units, so decoded boxes always have positive
width and height.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lora, numcore as nc
from .errors import ShapeError, ValidationError

PIXEL_SCALE = 1.0 / 255.0


@dataclass(frozen=True)
class ScaleConfig:
    """Capacity knobs for one branch: channel widths and history depth."""

    name: str
    widths: tuple[int, ...]
    history: int = 1
    frame_stride: int = 1

    def __post_init__(self):
        if self.history < 1 or self.frame_stride < 1:
            raise ValidationError("history and frame_stride must be >= 1")
        if not self.widths:
            raise ValidationError("widths must be non-empty")


@dataclass(frozen=True)
class GridGeometry:
    """Frame size, class count, and the derived output grid."""

    frame_hw: tuple[int, int]
    classes: int
    stages: int = 4

    def __post_init__(self):
        h, w = self.frame_hw
        r = self.reduction
        if h % r or w % r:
            raise ValidationError(f"frame {h}x{w} not divisible by reduction {r}")
        if self.classes < 1:
            raise ValidationError("need at least one class")

    @property
    def reduction(self) -> int:
        return 2**self.stages

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.frame_hw[0] // self.reduction, self.frame_hw[1] // self.reduction

    @property
    def cell_hw(self) -> tuple[float, float]:
        return float(self.reduction), float(self.reduction)


@dataclass
class HeadLogits:
    cls: np.ndarray  # [C, Gh, Gw]
    obj: np.ndarray  # [1, Gh, Gw]
    reg: np.ndarray  # [4, Gh, Gw]


@dataclass
class GroundTruthTargets:
    cls: np.ndarray
    obj: np.ndarray
    reg: np.ndarray
    positives: list  # (iy, ix, box_xyxy, class_id)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


class ConvLayer:
    """Conv + bias (+ optional low-rank adapter) with an explicit cache.

    forward returns (y, cache) so one layer can run several times per step
    (the backbone is shared across the frames of a window); backward takes
    the matching cache and accumulates grads on whatever is trainable.
    """

    def __init__(self, name, c_in, c_out, ksize, stride=1, padding=0, activation=None, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * ksize * ksize
        limit = np.sqrt(6.0 / fan_in)
        self.kernel = nc.ParamTensor(
            rng.uniform(-limit, limit, size=(c_out, c_in, ksize, ksize)), name=f"{name}.kernel"
        )
        self.bias = nc.ParamTensor(np.zeros(c_out), name=f"{name}.bias")
        self.name = name
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.adapter: lora.LoraAdapter | None = None

    def effective_kernel(self) -> np.ndarray:
        if self.adapter is None:
            return self.kernel.value
        return lora.merge(self.kernel.value, self.adapter)

    def forward(self, x):
        k = self.effective_kernel()
        kh, kw = k.shape[2], k.shape[3]
        cols = nc._im2col(x, kh, kw, self.stride, self.padding)
        z = nc.conv2d_forward(k, x, self.stride, self.padding, cols=cols) + self.bias.value[:, None, None]
        if self.activation == "silu":
            s = nc.sigmoid(z)
            return z * s, (x, z, k, cols, s)
        if self.activation == "relu":
            return nc.relu(z), (x, z, k, cols, None)
        return z, (x, z, k, cols, None)

    def backward(self, cache, dy):
        x, z, k, cols, s = cache
        if self.activation == "silu":
            dz = nc.silu_grad(z, dy, s=s)
        elif self.activation == "relu":
            dz = nc.relu_grad(z, dy)
        else:
            dz = dy
        dk, dx = nc.conv2d_backward(k, x, dz, self.stride, self.padding, cols=cols)
        self.bias.add_grad(dz.sum(axis=(1, 2)))
        self.kernel.add_grad(dk)
        if self.adapter is not None:
            dmat = dk.reshape(dk.shape[0], -1)
            self.adapter.b.add_grad(dmat @ self.adapter.a.value.T)
            self.adapter.a.add_grad(self.adapter.b.value.T @ dmat)
        return dx

    def params(self):
        out = [self.kernel, self.bias]
        if self.adapter is not None:
            out += [self.adapter.a, self.adapter.b]
        return out

    @property
    def param_count(self) -> int:
        return self.kernel.size + self.bias.size

    def flops(self, in_hw) -> int:
        cout, cin, kh, kw = self.kernel.value.shape
        oh = (in_hw[0] + 2 * self.padding - kh) // self.stride + 1
        ow = (in_hw[1] + 2 * self.padding - kw) // self.stride + 1
        return cout * oh * ow * cin * kh * kw

    def out_hw(self, in_hw):
        kh = self.kernel.value.shape[2]
        oh = (in_hw[0] + 2 * self.padding - kh) // self.stride + 1
        ow = (in_hw[1] + 2 * self.padding - kh) // self.stride + 1
        return oh, ow


class ToyDetector:
    """Dual-stream detector: shared backbone, fusion conv, three 1x1 heads."""

    def __init__(self, scale: ScaleConfig, geom: GridGeometry, seed: int = 0):
        if len(scale.widths) != geom.stages:
            raise ValidationError(
                f"scale {scale.name} has {len(scale.widths)} widths, geometry expects {geom.stages}"
            )
        rng = np.random.default_rng(seed)
        self.scale = scale
        self.geom = geom
        self.backbone: list[ConvLayer] = []
        c_in = 1
        for i, w in enumerate(scale.widths):
            self.backbone.append(
                ConvLayer(f"backbone.{i}", c_in, w, 3, stride=2, padding=1, activation="silu", rng=rng)
            )
            c_in = w
        top = scale.widths[-1]
        self.fusion = ConvLayer("fusion", 2 * top, top, 3, stride=1, padding=1, activation="silu", rng=rng)
        self.head_cls = ConvLayer("head.cls", top, geom.classes, 1, rng=rng)
        self.head_obj = ConvLayer("head.obj", top, 1, 1, rng=rng)
        self.head_reg = ConvLayer("head.reg", top, 4, 1, rng=rng)
        # neutral boxes (cell-centred, cell-sized) at init stabilise the
        # early GIoU landscape
        self.head_reg.kernel.value[...] = 0.0
        self._cache = None
        self.forward_count = 0

    # -- structure ---------------------------------------------------------

    def layers(self) -> list[ConvLayer]:
        return [*self.backbone, self.fusion, self.head_cls, self.head_obj, self.head_reg]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]

    def named_params(self) -> dict[str, nc.ParamTensor]:
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def base_param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers())

    def lora_param_count(self) -> int:
        return sum(layer.adapter.param_count for layer in self.layers() if layer.adapter is not None)

    def attach_adapters(self, rank: int | None = None, seed: int = 0):
        """Attach zero-init adapters to every conv kernel and freeze bases."""
        rng = np.random.default_rng(seed)
        for layer in self.layers():
            d, k = layer.kernel.value.shape[0], layer.kernel.value.size // layer.kernel.value.shape[0]
            r = lora.default_rank(d, k) if rank is None else min(rank, min(d, k))
            layer.adapter = lora.make_adapter(layer.kernel, rank=r, rng=rng)
        self.set_base_trainable(False)

    def set_base_trainable(self, flag: bool):
        for layer in self.layers():
            layer.kernel.trainable = flag
            layer.bias.trainable = flag

    def set_adapters_trainable(self, flag: bool):
        for layer in self.layers():
            if layer.adapter is not None:
                layer.adapter.a.trainable = flag
                layer.adapter.b.trainable = flag

    # -- forward / backward -------------------------------------------------

    def _backbone_pass(self, frame: np.ndarray):
        x = frame[None, :, :] * PIXEL_SCALE
        caches = []
        for layer in self.backbone:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def forward(self, frames) -> HeadLogits:
        """Run a window of history+1 frames (oldest first, newest last)."""
        want = self.scale.history + 1
        if len(frames) != want:
            raise ValidationError(f"window of {len(frames)} frames, branch {self.scale.name} needs {want}")
        for f in frames:
            if f.shape != self.geom.frame_hw:
                raise ShapeError(f"frame {f.shape} != geometry {self.geom.frame_hw}")
        self.forward_count += 1
        feats, caches = zip(*(self._backbone_pass(f) for f in frames))
        hist = np.mean(feats[:-1], axis=0)
        fused_in = np.concatenate([feats[-1], hist], axis=0)
        fused, fusion_cache = self.fusion.forward(fused_in)
        cls, cls_cache = self.head_cls.forward(fused)
        obj, obj_cache = self.head_obj.forward(fused)
        reg, reg_cache = self.head_reg.forward(fused)
        self._cache = (caches, fusion_cache, cls_cache, obj_cache, reg_cache, len(frames))
        return HeadLogits(cls=cls, obj=obj, reg=reg)

    def backward(self, d_cls, d_obj, d_reg):
        """Propagate head gradients from the most recent forward."""
        if self._cache is None:
            raise RuntimeError("backward before forward")
        caches, fusion_cache, cls_cache, obj_cache, reg_cache, n = self._cache
        d_fused = self.head_cls.backward(cls_cache, d_cls)
        d_fused = d_fused + self.head_obj.backward(obj_cache, d_obj)
        d_fused = d_fused + self.head_reg.backward(reg_cache, d_reg)
        d_in = self.fusion.backward(fusion_cache, d_fused)
        top = self.scale.widths[-1]
        d_cur, d_hist = d_in[:top], d_in[top:]
        n_hist = n - 1
        for idx, frame_caches in enumerate(caches):
            d_feat = d_cur if idx == n - 1 else d_hist / n_hist
            d = d_feat
            for layer, cache in zip(reversed(self.backbone), reversed(frame_caches)):
                d = layer.backward(cache, d)

    def flops(self) -> int:
        """Per-window multiply-accumulate estimate."""
        per_frame = 0
        hw = self.geom.frame_hw
        for layer in self.backbone:
            per_frame += layer.flops(hw)
            hw = layer.out_hw(hw)
        total = per_frame * (self.scale.history + 1)
        total += self.fusion.flops(hw)
        for head in (self.head_cls, self.head_obj, self.head_reg):
            total += head.flops(hw)
        return total

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {layer.kernel.name: layer.kernel.value.copy() for layer in self.layers()} | {
            layer.bias.name: layer.bias.value.copy() for layer in self.layers()
        }

    def adapter_state(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers():
            if layer.adapter is not None:
                out[layer.adapter.a.name] = layer.adapter.a.value.copy()
                out[layer.adapter.b.name] = layer.adapter.b.value.copy()
        return out

    def load_state(self, named: dict[str, np.ndarray]):
        for p in (q for layer in self.layers() for q in (layer.kernel, layer.bias)):
            if p.name not in named:
                raise ValidationError(f"checkpoint missing tensor {p.name}")
            if named[p.name].shape != p.value.shape:
                raise ValidationError(f"checkpoint tensor {p.name} has shape {named[p.name].shape}")
            p.value[...] = named[p.name]

    def load_adapter_state(self, named: dict[str, np.ndarray]):
        for layer in self.layers():
            if layer.adapter is None:
                continue
            for p in (layer.adapter.a, layer.adapter.b):
                if p.name not in named:
                    raise ValidationError(f"adapter checkpoint missing {p.name}")
                p.value[...] = named[p.name]


# ---------------------------------------------------------------------------
# box/cell coding


def _cell_index(box, geom: GridGeometry):
    ch, cw = geom.cell_hw
    gh, gw = geom.grid_hw
    cx = 0.5 * (box[0] + box[2])
    cy = 0.5 * (box[1] + box[3])
    ix = min(max(int(cx // cw), 0), gw - 1)
    iy = min(max(int(cy // ch), 0), gh - 1)
    return iy, ix


def encode_box(box, iy, ix, geom: GridGeometry) -> np.ndarray:
    """Inverse of decode_cell for a box whose center lies in cell (iy, ix)."""
    ch, cw = geom.cell_hw
    cx = 0.5 * (box[0] + box[2])
    cy = 0.5 * (box[1] + box[3])
    fx = np.clip(cx / cw - ix, 1e-6, 1 - 1e-6)
    fy = np.clip(cy / ch - iy, 1e-6, 1 - 1e-6)
    w = max(box[2] - box[0], 1e-6)
    h = max(box[3] - box[1], 1e-6)
    return np.array([np.log(fx / (1 - fx)), np.log(fy / (1 - fy)), np.log(w / cw), np.log(h / ch)])


_LOG_SIZE_CAP = 8.0  # keeps exp(log-size) finite under transient overshoot


def decode_cell(t, iy, ix, geom: GridGeometry):
    """Map 4 regression logits at cell (iy, ix) to a pixel corner box."""
    ch, cw = geom.cell_hw
    cx = (ix + nc.sigmoid(t[0])) * cw
    cy = (iy + nc.sigmoid(t[1])) * ch
    w = np.exp(min(t[2], _LOG_SIZE_CAP)) * cw
    h = np.exp(min(t[3], _LOG_SIZE_CAP)) * ch
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def decode_cell_jacobian(t, iy, ix, geom: GridGeometry) -> np.ndarray:
    """d box / d t, rows (x1, y1, x2, y2), cols (tx, ty, tw, th)."""
    ch, cw = geom.cell_hw
    sx = nc.sigmoid(t[0])
    sy = nc.sigmoid(t[1])
    w = np.exp(min(t[2], _LOG_SIZE_CAP)) * cw
    h = np.exp(min(t[3], _LOG_SIZE_CAP)) * ch
    dsx = cw * sx * (1 - sx)
    dsy = ch * sy * (1 - sy)
    return np.array(
        [
            [dsx, 0.0, -w / 2, 0.0],
            [0.0, dsy, 0.0, -h / 2],
            [dsx, 0.0, w / 2, 0.0],
            [0.0, dsy, 0.0, h / 2],
        ]
    )


def build_targets(annotations, geom: GridGeometry) -> GroundTruthTargets:
    """Grid targets from (box_xyxy, class_id) pairs.

    One positive cell per object: the cell containing the box center. If
    two objects share a cell the first-listed one keeps it and later ones
    are dropped.
    """
    gh, gw = geom.grid_hw
    cls = np.zeros((geom.classes, gh, gw))
    obj = np.zeros((1, gh, gw))
    reg = np.zeros((4, gh, gw))
    positives = []
    claimed = set()
    for box, class_id in annotations:
        if not 0 <= class_id < geom.classes:
            raise ValidationError(f"class id {class_id} outside [0, {geom.classes})")
        iy, ix = _cell_index(box, geom)
        if (iy, ix) in claimed:
            continue
        claimed.add((iy, ix))
        obj[0, iy, ix] = 1.0
        cls[class_id, iy, ix] = 1.0
        reg[:, iy, ix] = encode_box(box, iy, ix, geom)
        positives.append((iy, ix, tuple(float(v) for v in box), int(class_id)))
    return GroundTruthTargets(cls=cls, obj=obj, reg=reg, positives=positives)


# ---------------------------------------------------------------------------
# loss


def detection_loss(logits: HeadLogits, gt: GroundTruthTargets, geom: GridGeometry):
    """MSE on cls and obj logits plus mean (1 - GIoU) over positive cells.

    Returns (loss, (d_cls, d_obj, d_reg)) with gradients w.r.t. the logits.
    """
    if logits.cls.shape != gt.cls.shape or logits.obj.shape != gt.obj.shape:
        raise ShapeError("logit/target shapes disagree")
    d_cls = logits.cls - gt.cls
    d_obj = logits.obj - gt.obj
    loss = float(np.mean(d_cls**2) + np.mean(d_obj**2))
    g_cls = 2.0 * d_cls / d_cls.size
    g_obj = 2.0 * d_obj / d_obj.size
    g_reg = np.zeros_like(logits.reg)
    if gt.positives:
        n = len(gt.positives)
        for iy, ix, box, _ in gt.positives:
            t = logits.reg[:, iy, ix]
            pred = decode_cell(t, iy, ix, geom)
            loss += (1.0 - nc.giou(pred, box)) / n
            dgiou = nc.giou_grad(pred, box)
            jac = decode_cell_jacobian(t, iy, ix, geom)
            g_reg[:, iy, ix] = -(jac.T @ dgiou) / n
    nc.ensure_finite(loss, "detection loss")
    return loss, (g_cls, g_obj, g_reg)


# ---------------------------------------------------------------------------
# decode


def decode(logits: HeadLogits, geom: GridGeometry, conf_thresh: float = 0.3, nms_iou: float = 0.5):
    """Per-cell boxes to scored detections with greedy per-class NMS.

    score = sigmoid(obj) * max softmax(cls); detections below conf_thresh
    are dropped, survivors are suppressed per class at IoU >= nms_iou, and
    the result is sorted by descending score.
    """
    if not 0.0 <= conf_thresh <= 1.0 or not 0.0 < nms_iou <= 1.0:
        raise ValidationError("conf_thresh in [0,1] and nms_iou in (0,1] required")
    gh, gw = geom.grid_hw
    obj_p = nc.sigmoid(logits.obj[0])
    raw = []
    for iy in range(gh):
        for ix in range(gw):
            probs = nc.softmax(logits.cls[:, iy, ix])
            cid = int(np.argmax(probs))
            score = float(obj_p[iy, ix] * probs[cid])
            if score < conf_thresh:
                continue
            box = decode_cell(logits.reg[:, iy, ix], iy, ix, geom)
            raw.append(Detection(box=tuple(float(v) for v in box), class_id=cid, score=score))
    return nms(raw, nms_iou)


def nms(dets, nms_iou: float):
    """Greedy per-class suppression at IoU >= nms_iou, highest score first."""
    dets = sorted(dets, key=lambda d: -d.score)
    kept: list[Detection] = []
    for cid in {d.class_id for d in dets}:
        group = [d for d in dets if d.class_id == cid]
        while group:
            best = group.pop(0)
            kept.append(best)
            group = [d for d in group if nc.iou(best.box, d.box) < nms_iou]
    kept.sort(key=lambda d: -d.score)
    return kept
