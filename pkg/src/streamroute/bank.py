"""Model bank, dispatcher, and the comparison selectors.

The bank holds branches in ascending parameter-count order; "smaller" and
"larger" for the sign baseline refer to this order. Latency is simulated
from per-branch profiles so runs reproduce across machines; wall-clock
timing is a separate opt-in at the evaluation layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import lora
from .detector import GridGeometry, HeadLogits, ScaleConfig, ToyDetector
from .errors import ValidationError
from .numcore import softmax
from .router import ROUTER_INPUT_HW, RouteDecision, RouterNet

# Stage widths sized so the default router stays under 1% of the smallest
# branch in both parameters and per-window compute.
DEFAULT_WIDTHS = {
    "S": (12, 24, 36, 48),
    "M": (16, 32, 48, 64),
    "L": (20, 40, 60, 80),
}


@dataclass
class LatencyProfile:
    base_ms: float
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.base_ms <= 0 or self.jitter_ms < 0:
            raise ValidationError("base_ms must be > 0 and jitter_ms >= 0")

    def sample(self, rng: np.random.Generator) -> float:
        if self.jitter_ms == 0.0:
            return self.base_ms
        return max(0.0, self.base_ms + rng.uniform(-self.jitter_ms, self.jitter_ms))


@dataclass
class Branch:
    detector: ToyDetector
    latency: LatencyProfile

    @property
    def scale(self) -> ScaleConfig:
        return self.detector.scale

    def window(self, clip, i: int):
        return clip.window(i, self.scale.history, self.scale.frame_stride)

    def run(self, clip, i: int) -> HeadLogits:
        return self.detector.forward(self.window(clip, i))


class ModelBank:
    """Ordered collection of branches plus the shared router overhead."""

    def __init__(self, branches: list[Branch], router_overhead_ms: float = 0.3):
        if not branches:
            raise ValidationError("bank needs at least one branch")
        counts = [b.detector.base_param_count() for b in branches]
        if counts != sorted(counts):
            raise ValidationError("branches must be ordered by ascending parameter count")
        geoms = {b.detector.geom.grid_hw for b in branches}
        classes = {b.detector.geom.classes for b in branches}
        if len(geoms) != 1 or len(classes) != 1:
            raise ValidationError("all branches must share head geometry")
        self.branches = branches
        self.router_overhead_ms = router_overhead_ms

    @property
    def k(self) -> int:
        return len(self.branches)

    @property
    def geom(self) -> GridGeometry:
        return self.branches[0].detector.geom

    def latencies_ms(self) -> np.ndarray:
        return np.array([b.latency.base_ms for b in self.branches])

    def layers(self):
        return [layer for b in self.branches for layer in b.detector.layers()]

    def lora_param_ratio(self) -> float:
        return lora.param_ratio(self.layers())

    def check_router_overhead(self, router: RouterNet) -> None:
        """Router cost must stay under 1% of the smallest branch."""
        smallest = self.branches[0].detector
        p_ratio = router.param_count() / smallest.base_param_count()
        f_ratio = router.flops() / smallest.flops()
        if p_ratio >= 0.01 or f_ratio >= 0.01:
            raise ValidationError(
                f"router overhead too large: params {100 * p_ratio:.2f}%, flops {100 * f_ratio:.2f}%"
            )


def dispatch(decision: RouteDecision, bank: ModelBank, clip, i: int, rng: np.random.Generator):
    """Run exactly the selected branch; returns (logits, sigma, latency_ms)."""
    if not 0 <= decision.sigma < bank.k:
        raise IndexError(f"branch index {decision.sigma} out of range for K={bank.k}")
    branch = bank.branches[decision.sigma]
    logits = branch.run(clip, i)
    latency = branch.latency.sample(rng) + bank.router_overhead_ms
    return logits, decision.sigma, latency


def random_select(bank: ModelBank, rng: np.random.Generator) -> int:
    return int(rng.integers(0, bank.k))


def moe_combine(bank: ModelBank, clip, i: int, gate: RouterNet, pooled_diff: np.ndarray, rng: np.random.Generator):
    """Gate-weighted combination of every branch's logits.

    All branches execute, so the reported latency is the sum of the branch
    samples plus the gate overhead.
    """
    weights = softmax(gate.forward(pooled_diff))
    outputs = [b.run(clip, i) for b in bank.branches]
    shapes = {(o.cls.shape, o.obj.shape, o.reg.shape) for o in outputs}
    if len(shapes) != 1:
        raise ValidationError("branches disagree on head geometry")
    cls = sum(w * o.cls for w, o in zip(weights, outputs))
    obj = sum(w * o.obj for w, o in zip(weights, outputs))
    reg = sum(w * o.reg for w, o in zip(weights, outputs))
    latency = sum(b.latency.sample(rng) for b in bank.branches) + bank.router_overhead_ms
    return HeadLogits(cls=cls, obj=obj, reg=reg), latency


# ---------------------------------------------------------------------------
# construction and manifest I/O


def build_bank(scales, geom: GridGeometry, latencies_ms, jitter_ms=None, seed: int = 0,
               router_overhead_ms: float = 0.3, lora_rank: int | None = None) -> tuple[ModelBank, RouterNet]:
    """Fresh bank + router from scale configs; adapters attached, bases frozen."""
    if len(scales) != len(latencies_ms):
        raise ValidationError("one latency per scale required")
    jitter_ms = jitter_ms or [0.0] * len(scales)
    branches = []
    for idx, (scale, lat, jit) in enumerate(zip(scales, latencies_ms, jitter_ms)):
        detector = ToyDetector(scale, geom, seed=seed + idx)
        detector.attach_adapters(rank=lora_rank, seed=seed + 100 + idx)
        branches.append(Branch(detector=detector, latency=LatencyProfile(base_ms=lat, jitter_ms=jit)))
    bank = ModelBank(branches, router_overhead_ms=router_overhead_ms)
    rt = RouterNet(branches=bank.k, seed=seed + 777)
    bank.check_router_overhead(rt)
    return bank, rt


def scale_from_dict(d: dict) -> ScaleConfig:
    name = d.get("name", "S")
    widths = tuple(d.get("widths", DEFAULT_WIDTHS.get(name, DEFAULT_WIDTHS["S"])))
    return ScaleConfig(name=name, widths=widths, history=int(d.get("history", 1)), frame_stride=int(d.get("frame_stride", 1)))


def save_bank(bank: ModelBank, rt: RouterNet, out_dir, geom: GridGeometry) -> Path:
    """Write checkpoints plus the manifest JSON and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, branch in enumerate(bank.branches):
        base_rel = f"branch{idx}.drnw"
        lora_rel = f"branch{idx}.lora.drnw"
        ckpt.save_tensors(out_dir / base_rel, branch.detector.state_dict())
        adapters = branch.detector.adapter_state()
        if adapters:
            ckpt.save_tensors(out_dir / lora_rel, adapters)
        entries.append(
            {
                "scale": branch.scale.name,
                "widths": list(branch.scale.widths),
                "history": branch.scale.history,
                "frame_stride": branch.scale.frame_stride,
                "checkpoint": base_rel,
                "lora": lora_rel if adapters else None,
                "latency_ms": branch.latency.base_ms,
                "jitter_ms": branch.latency.jitter_ms,
            }
        )
    ckpt.save_tensors(out_dir / "router.drnw", rt.state_dict())
    manifest = {
        "frame_size": list(geom.frame_hw),
        "classes": geom.classes,
        "branches": entries,
        "router": {"checkpoint": "router.drnw", "overhead_ms": bank.router_overhead_ms},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_bank(manifest_path) -> tuple[ModelBank, RouterNet, GridGeometry]:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed bank manifest") from exc
    root = path.parent
    try:
        geom = GridGeometry(frame_hw=tuple(doc["frame_size"]), classes=int(doc["classes"]))
        branches = []
        for entry in doc["branches"]:
            scale = scale_from_dict(entry)
            detector = ToyDetector(scale, geom)
            detector.load_state(ckpt.load_tensors(root / entry["checkpoint"]))
            if entry.get("lora"):
                detector.attach_adapters(seed=0)
                detector.load_adapter_state(ckpt.load_tensors(root / entry["lora"]))
            branches.append(
                Branch(
                    detector=detector,
                    latency=LatencyProfile(base_ms=float(entry["latency_ms"]), jitter_ms=float(entry.get("jitter_ms", 0.0))),
                )
            )
        bank = ModelBank(branches, router_overhead_ms=float(doc["router"].get("overhead_ms", 0.3)))
        rt = RouterNet(branches=bank.k)
        rt.load_state(ckpt.load_tensors(root / doc["router"]["checkpoint"]))
    except KeyError as exc:
        raise ValidationError(f"{path}: bank manifest missing field {exc}") from exc
    return bank, rt, geom
