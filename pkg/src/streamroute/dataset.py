"""Synthetic driving-style clips with exact ground truth.

A clip is a textured background that translates according to a motion
state (stop: static, straight: uniform horizontal flow, turning: flow
plus a row-dependent shear) with solid rectangles moving on top. All
pixel synthesis is integer fixed-point arithmetic on a hashed lattice,
so generation is bit-identical across runs and platforms. Annotations
are the drawn rectangles, so they are exact by construction.

Frames are single-channel, values 0..255, stored as float64 in memory
and as binary PGM (P5) on disk. Manifest bboxes are [x, y, w, h] pixels,
top-left anchored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import GridGeometry, GroundTruthTargets, build_targets
from .errors import ValidationError

MOTION_STATES = ("stop", "straight", "turning")

_FP = 8  # fixed-point fraction bits
_PERIOD = 16  # texture lattice period in pixels
_PF = _PERIOD << _FP


@dataclass(frozen=True)
class SyntheticClipSpec:
    motion_state: str
    speed_px_per_frame: float = 0.0
    n_objects: int = 3
    small_fraction: float = 0.5
    frame_hw: tuple[int, int] = (96, 160)
    length: int = 18
    classes: int = 2
    turn_rate: float = 0.05  # rotation px per frame per pixel offset, turning only

    def __post_init__(self):
        if self.motion_state not in MOTION_STATES:
            raise ValidationError(f"unknown motion state {self.motion_state!r}")
        if self.motion_state == "stop" and self.speed_px_per_frame != 0.0:
            raise ValidationError("stop state requires speed 0")
        if self.speed_px_per_frame < 0 or not 0.0 <= self.small_fraction <= 1.0:
            raise ValidationError("speed must be >= 0 and small_fraction in [0, 1]")
        if self.length < 2 or self.n_objects < 0:
            raise ValidationError("length must be >= 2 and n_objects >= 0")


@dataclass
class Annotation:
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    category_id: int
    track_id: int

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        x, y, w, h = self.bbox
        return (x, y, x + w, y + h)

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass
class Clip:
    clip_id: str
    frames: list  # list of float64 [H, W] arrays
    annotations: list  # per-frame list of Annotation
    fps: int = 30
    motion_state: str = ""

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_hw(self) -> tuple[int, int]:
        return self.frames[0].shape

    def window(self, i: int, history: int, stride: int = 1):
        """Frames [i - history*stride, ..., i], clamped at the clip start."""
        idx = [max(0, i - k * stride) for k in range(history, 0, -1)] + [i]
        return [self.frames[j] for j in idx]


# ---------------------------------------------------------------------------
# deterministic texture


def _hash_lattice(gx: np.ndarray, gy: np.ndarray, seed: int) -> np.ndarray:
    seed_mix = (seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF
    h = gx.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= gy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    h ^= np.uint64(seed_mix)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(29)
    # midrange band keeps foreground rectangles visible on any patch
    return (np.uint64(72) + (h & np.uint64(127))).astype(np.int64)


def _texture(wx_fp: np.ndarray, wy_fp: np.ndarray, seed: int) -> np.ndarray:
    """Bilinear sample of the hashed lattice at fixed-point world coords."""
    gx = wx_fp >> np.int64(_FP + 4)  # 2^(FP+4) = PERIOD << FP
    gy = wy_fp >> np.int64(_FP + 4)
    u = wx_fp & np.int64(_PF - 1)
    v = wy_fp & np.int64(_PF - 1)
    c00 = _hash_lattice(gx, gy, seed)
    c10 = _hash_lattice(gx + 1, gy, seed)
    c01 = _hash_lattice(gx, gy + 1, seed)
    c11 = _hash_lattice(gx + 1, gy + 1, seed)
    num = c00 * (_PF - u) * (_PF - v) + c10 * u * (_PF - v) + c01 * (_PF - u) * v + c11 * u * v
    return num // (_PF * _PF)


def _object_dims(rng: np.random.Generator, small: bool, frame_hw) -> tuple[int, int]:
    h_max, w_max = frame_hw
    limit = 0.01 * h_max * w_max
    side = int(np.floor(np.sqrt(limit)))
    if small:
        lo = max(1, side // 2)
        hi = max(lo, side)
        w = int(rng.integers(lo, hi + 1))
        h_cap = max(lo, min(hi, int((limit - 1) // max(w, 1))))
        h = int(rng.integers(lo, h_cap + 1)) if h_cap >= lo else lo
        if w * h >= limit:  # clamp pathological tiny-frame cases
            w = h = max(1, side - 1 if side > 1 else 1)
    else:
        lo = side + 1
        hi = max(lo + 1, min(2 * side + 2, min(h_max, w_max) // 3))
        w = int(rng.integers(lo, hi + 1))
        h_lo = max(lo, int(np.ceil(limit / w)))
        h = int(rng.integers(h_lo, max(h_lo + 1, hi + 1)))
    if w >= w_max or h >= h_max:
        raise ValidationError(f"object {w}x{h} cannot fit a {h_max}x{w_max} frame")
    return w, h


def gen_clip(spec: SyntheticClipSpec, seed: int, clip_id: str | None = None) -> Clip:
    """Render one clip; bit-identical for a given (spec, seed)."""
    h, w = spec.frame_hw
    rng = np.random.default_rng(seed)
    speed_fp = round(spec.speed_px_per_frame * (1 << _FP))
    turn_fp = round(spec.turn_rate * (1 << _FP)) if spec.motion_state == "turning" else 0

    objects = []
    for t in range(spec.n_objects):
        # draw the full random tuple for every state so one seed produces
        # the same layout across stop/straight/turning (paired comparisons)
        small = rng.uniform() < spec.small_fraction
        ow, oh = _object_dims(rng, small, spec.frame_hw)
        x = int(rng.integers(0, w - ow)) << _FP
        y = int(rng.integers(0, h - oh)) << _FP
        cid = int(rng.integers(0, spec.classes))
        vx_jit = rng.uniform(-0.5, 0.5)
        vy_jit = rng.uniform(-0.3, 0.3)
        turn_sign = 1.0 if rng.uniform() < 0.5 else -1.0
        turn_extra = rng.uniform(0.2, 0.6)
        if spec.motion_state == "stop":
            vx = vy = 0
        else:
            vx = round((spec.speed_px_per_frame + vx_jit) * (1 << _FP))
            if spec.motion_state == "turning":
                vy = round(turn_sign * (0.5 * spec.speed_px_per_frame + turn_extra) * (1 << _FP))
            else:
                vy = round(vy_jit * (1 << _FP))
        objects.append({"x": x, "y": y, "w": ow, "h": oh, "vx": vx, "vy": vy, "cid": cid, "tid": t})

    rows = np.arange(h, dtype=np.int64)[:, None]
    cols = np.arange(w, dtype=np.int64)[None, :]
    fills = np.linspace(245, 12, spec.classes).astype(np.int64)

    frames = []
    annotations = []
    for i in range(spec.length):
        wx_fp = (cols << _FP) + np.int64(i * speed_fp)
        wy_fp = rows << _FP
        if turn_fp:
            # small-angle rotation about the frame center: rows shift
            # horizontally, columns shift vertically
            wx_fp = wx_fp - (np.int64(turn_fp * i) * (rows - h // 2))
            wy_fp = wy_fp + (np.int64(turn_fp * i) * (cols - w // 2))
        img = _texture(np.broadcast_to(wx_fp, (h, w)), np.broadcast_to(wy_fp, (h, w)), seed)
        anns = []
        for o in objects:
            px, py = o["x"] >> _FP, o["y"] >> _FP
            img[py : py + o["h"], px : px + o["w"]] = fills[o["cid"]]
            anns.append(Annotation(bbox=(float(px), float(py), float(o["w"]), float(o["h"])), category_id=o["cid"], track_id=o["tid"]))
        frames.append(img.astype(np.float64))
        annotations.append(anns)
        for o in objects:  # advance with wall bounce
            for ax, vel, extent, span in (("x", "vx", o["w"], w), ("y", "vy", o["h"], h)):
                nxt = o[ax] + o[vel]
                hi = (span - extent) << _FP
                if nxt < 0 or nxt > hi:
                    o[vel] = -o[vel]
                    nxt = min(max(o[ax] + o[vel], 0), hi)
                o[ax] = nxt
    state = spec.motion_state
    return Clip(clip_id=clip_id or f"{state}-{seed:04d}", frames=frames, annotations=annotations, motion_state=state)


def next_frame_targets(clip: Clip, i: int, geom: GridGeometry) -> GroundTruthTargets:
    """Grid targets for predicting frame i+1 from inputs up to frame i."""
    if i + 1 >= len(clip):
        raise IndexError(f"frame {i} has no successor in a {len(clip)}-frame clip")
    pairs = [(a.xyxy, a.category_id) for a in clip.annotations[i + 1]]
    return build_targets(pairs, geom)


# ---------------------------------------------------------------------------
# spec files and recipes


def specs_from_config(cfg: dict) -> list[tuple[str, SyntheticClipSpec, int]]:
    """Expand a generation config into (clip_id, spec, seed) triples."""
    if cfg.get("recipe") == "two-regime":
        return two_regime_specs(
            seed=int(cfg.get("seed", 0)),
            train_per_regime=int(cfg.get("train_per_regime", 5)),
            val_per_regime=int(cfg.get("val_per_regime", 2)),
            length=int(cfg.get("length", 16)),
        )
    frame_hw = tuple(cfg.get("frame_size", (96, 160)))
    base_seed = int(cfg.get("seed", 0))
    out = []
    idx = 0
    for group in cfg.get("groups", []):
        spec = SyntheticClipSpec(
            motion_state=group["motion_state"],
            speed_px_per_frame=float(group.get("speed", 0.0)),
            n_objects=int(group.get("n_objects", 3)),
            small_fraction=float(group.get("small_fraction", 0.5)),
            frame_hw=frame_hw,  # type: ignore[arg-type]
            length=int(group.get("length", cfg.get("length", 18))),
            classes=int(cfg.get("classes", 2)),
            turn_rate=float(group.get("turn_rate", 0.05)),
        )
        for k in range(int(group.get("count", 1))):
            out.append((f"{spec.motion_state}-{idx:03d}", spec, base_seed + idx))
            idx += 1
    if not out:
        raise ValidationError("generation config produced no clips")
    return out


def two_regime_specs(seed: int = 0, train_per_regime: int = 5, val_per_regime: int = 2, length: int = 16):
    """The routed-vs-baseline benchmark recipe.

    Regime A: stop clips, trivially predictable from the current frame.
    Regime B: fast turning clips with only small objects, where next-frame
    box placement needs motion extrapolation and capacity.
    """
    slow = dict(motion_state="stop", speed_px_per_frame=0.0, n_objects=3, small_fraction=0.0)
    fast = dict(motion_state="turning", speed_px_per_frame=6.0, n_objects=3, small_fraction=1.0, turn_rate=0.04)
    out = []
    idx = 0
    for split, count in (("train", train_per_regime), ("val", val_per_regime)):
        for name, kw in (("slow", slow), ("fast", fast)):
            for k in range(count):
                spec = SyntheticClipSpec(length=length, **kw)  # type: ignore[arg-type]
                out.append((f"{split}-{name}-{k:03d}", spec, seed + idx))
                idx += 1
    return out


# ---------------------------------------------------------------------------
# PGM and manifest I/O


def write_pgm(path, frame: np.ndarray) -> None:
    arr = np.asarray(frame)
    if np.any(arr < 0) or np.any(arr > 255):
        raise ValidationError("frame values outside 0..255")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValidationError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValidationError(f"{path}: unsupported maxval {maxval}")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return arr.reshape(h, w).astype(np.float64)


def save_manifest(clips: list[Clip], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        clip_dir = out_dir / "frames" / clip.clip_id
        clip_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, frame in enumerate(clip.frames):
            rel = f"frames/{clip.clip_id}/{i:04d}.pgm"
            write_pgm(out_dir / rel, frame)
            paths.append(rel)
        anns = [
            {"image_index": i, "bbox": list(a.bbox), "category_id": a.category_id, "track_id": a.track_id}
            for i, frame_anns in enumerate(clip.annotations)
            for a in frame_anns
        ]
        entries.append(
            {"id": clip.clip_id, "fps": clip.fps, "motion_state": clip.motion_state, "frames": paths, "annotations": anns}
        )
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"clips": entries}, indent=1))
    return manifest


def load_manifest(path) -> list[Clip]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON") from exc
    root = path.parent
    clips = []
    for entry in doc.get("clips", []):
        frames = [read_pgm(root / rel) for rel in entry["frames"]]
        anns: list[list[Annotation]] = [[] for _ in frames]
        for rec in entry.get("annotations", []):
            x, y, w, h = rec["bbox"]
            if w <= 0 or h <= 0:
                raise ValidationError(f"clip {entry['id']}: bbox with non-positive extent {rec['bbox']}")
            i = int(rec["image_index"])
            if not 0 <= i < len(frames):
                raise ValidationError(f"clip {entry['id']}: annotation for missing frame {i}")
            anns[i].append(Annotation(bbox=(x, y, w, h), category_id=int(rec["category_id"]), track_id=int(rec.get("track_id", -1))))
        clips.append(
            Clip(
                clip_id=entry["id"],
                frames=frames,
                annotations=anns,
                fps=int(entry.get("fps", 30)),
                motion_state=entry.get("motion_state", ""),
            )
        )
    return clips
