"""Two-phase training.

Phase 1 fine-tunes the adapters of whichever branch the router picks per
sample, under the detection loss; bases and the router stay frozen.
Phase 2 freezes every branch, evaluates all of them per sample to build a
cost-weighted best-branch target, and trains the router alone against it
with a KL loss. Latency costs come from the branch profiles' base_ms so
targets reproduce across machines.

Hyperparameters follow the reference recipe: SGD with momentum 0.9,
lr = base_lr * batch_size / 64, cosine annealing with a one-epoch linear
warm-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .bank import ModelBank, dispatch
from .dataset import next_frame_targets
from .detector import detection_loss
from .errors import ValidationError
from .router import RouterNet, frame_diff, route


@dataclass
class TrainConfig:
    batch_size: int = 4
    base_lr: float = 0.001
    momentum: float = 0.9
    epochs_branch: int = 10
    epochs_router: int = 5
    warmup_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.base_lr <= 0:
            raise ValidationError("batch_size >= 1 and base_lr > 0 required")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size / 64.0


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear ramp to peak over the warm-up, then cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def total_loss(l_sp: float, l_e2: float) -> float:
    """Combined objective; each phase optimises its own term."""
    if l_sp < 0 or l_e2 < 0:
        raise ValueError("loss terms must be non-negative")
    return l_sp + l_e2


# ---------------------------------------------------------------------------
# branch-selection target and loss


def branch_target(v_sp: np.ndarray, v_time: np.ndarray) -> np.ndarray:
    """One-hot of the branch minimising softmax(v_time) * v_sp.

    Ties break to the lowest index. Invariant under adding a constant to
    v_time and under scaling v_sp by any positive factor.
    """
    v_sp = np.asarray(v_sp, dtype=np.float64)
    v_time = np.asarray(v_time, dtype=np.float64)
    if v_sp.shape != v_time.shape or v_sp.ndim != 1:
        raise ValidationError("v_sp and v_time must be equal-length vectors")
    if np.any(v_sp < 0):
        raise ValidationError("v_sp entries must be non-negative")
    products = nc.softmax(v_time) * v_sp
    hot = np.zeros(v_sp.size)
    hot[int(np.argmin(products))] = 1.0
    return hot


def routing_loss(target: np.ndarray, probs: np.ndarray) -> float:
    """KL(target || probs) for a one-hot target: -log probs at the hot index."""
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs <= 0):
        raise ValidationError("probs must be a strictly positive distribution")
    return float(nc.kl_div(target, probs))


# ---------------------------------------------------------------------------
# optimiser


class MomentumSGD:
    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self._velocity = {id(p): np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p in self.params:
            v = self._velocity[id(p)]
            v *= self.momentum
            v -= lr * p.grad
            p.value += v


# ---------------------------------------------------------------------------
# sample plumbing


def sample_index(clips):
    """(clip_idx, frame_idx) pairs with a real previous frame and a next frame."""
    out = []
    for ci, clip in enumerate(clips):
        for i in range(1, len(clip) - 1):
            out.append((ci, i))
    if not out:
        raise ValidationError("dataset has no trainable samples")
    return out


def _diff_for(clip, i):
    return frame_diff(clip.frames[i], clip.frames[i - 1])


# ---------------------------------------------------------------------------
# phase 1: routed adapter fine-tuning


def train_branches(bank: ModelBank, rt: RouterNet, clips, cfg: TrainConfig, log: list | None = None):
    """Fine-tune adapters of the routed branch per sample; router untouched."""
    samples = sample_index(clips)
    adapter_params = [
        p
        for b in bank.branches
        for layer in b.detector.layers()
        if layer.adapter is not None
        for p in (layer.adapter.a, layer.adapter.b)
    ]
    if not adapter_params:
        raise ValidationError("no adapters attached; nothing to fine-tune in phase 1")
    opt = MomentumSGD(adapter_params, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    geom = bank.geom
    batches_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs_branch * batches_per_epoch
    warmup_steps = cfg.warmup_epochs * batches_per_epoch
    step = 0
    sample_no = 0
    for _ in range(cfg.epochs_branch):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            lr = lr_at(step, total_steps, warmup_steps, cfg.lr)
            opt.zero_grad()
            counts = np.zeros(bank.k, dtype=int)
            batch = order[start : start + cfg.batch_size]
            losses = []
            for oi in batch:
                ci, i = samples[oi]
                clip = clips[ci]
                decision = route(_diff_for(clip, i), rt)
                branch = bank.branches[decision.sigma]
                counts[decision.sigma] += 1
                logits = branch.run(clip, i)
                gt = next_frame_targets(clip, i, geom)
                l_sp, (g_cls, g_obj, g_reg) = detection_loss(logits, gt, geom)
                branch.detector.backward(g_cls, g_obj, g_reg)
                losses.append(l_sp)
                if log is not None:
                    log.append(
                        {"step": sample_no, "phase": "branches", "sigma": decision.sigma,
                         "l_sp": l_sp, "l_e2": 0.0, "lr": lr}
                    )
                sample_no += 1
            for k, branch in enumerate(bank.branches):
                if counts[k] > 1:
                    for layer in branch.detector.layers():
                        if layer.adapter is not None:
                            layer.adapter.a.grad /= counts[k]
                            layer.adapter.b.grad /= counts[k]
            opt.step(lr)
            step += 1
    return log


# ---------------------------------------------------------------------------
# phase 2: router training


def train_router(bank: ModelBank, rt: RouterNet, clips, cfg: TrainConfig, log: list | None = None):
    """Train the router on cost-weighted best-branch targets; branches frozen."""
    samples = sample_index(clips)
    opt = MomentumSGD(rt.params(), momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    geom = bank.geom
    v_time = bank.latencies_ms()
    batches_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs_router * batches_per_epoch
    warmup_steps = cfg.warmup_epochs * batches_per_epoch
    step = 0
    sample_no = 0
    for _ in range(cfg.epochs_router):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            lr = lr_at(step, total_steps, warmup_steps, cfg.lr)
            opt.zero_grad()
            batch = order[start : start + cfg.batch_size]
            for oi in batch:
                ci, i = samples[oi]
                clip = clips[ci]
                gt = next_frame_targets(clip, i, geom)
                v_sp = np.array(
                    [detection_loss(b.run(clip, i), gt, geom)[0] for b in bank.branches]
                )
                target = branch_target(v_sp, v_time)
                hot = int(np.argmax(target))
                logits = rt.forward(_diff_for(clip, i).pooled)
                probs = nc.softmax(logits)
                l_e2 = routing_loss(target, probs)
                rt.backward(probs - target)
                if log is not None:
                    log.append(
                        {"step": sample_no, "phase": "router", "sigma": hot,
                         "l_sp": 0.0, "l_e2": l_e2, "lr": lr}
                    )
                sample_no += 1
            for p in rt.params():
                p.grad /= len(batch)
            opt.step(lr)
            step += 1
    return log


# ---------------------------------------------------------------------------
# schedules


def split_epochs(total: int, rounds: int) -> list[int]:
    base, extra = divmod(total, rounds)
    return [base + (1 if r < extra else 0) for r in range(rounds)]


def train_two_phase(bank: ModelBank, rt: RouterNet, clips, cfg: TrainConfig, alternate: int = 1,
                    log: list | None = None):
    """Sequential branch-then-router schedule, optionally interleaved.

    alternate=1 is the default sequential schedule; alternate=N splits both
    epoch budgets into N interleaved rounds.
    """
    if alternate < 1:
        raise ValidationError("alternate must be >= 1")
    branch_rounds = split_epochs(cfg.epochs_branch, alternate)
    router_rounds = split_epochs(cfg.epochs_router, alternate)
    for r in range(alternate):
        sub = TrainConfig(
            batch_size=cfg.batch_size, base_lr=cfg.base_lr, momentum=cfg.momentum,
            epochs_branch=branch_rounds[r], epochs_router=router_rounds[r],
            warmup_epochs=cfg.warmup_epochs, seed=cfg.seed + r,
        )
        if sub.epochs_branch > 0:
            train_branches(bank, rt, clips, sub, log=log)
        if sub.epochs_router > 0:
            train_router(bank, rt, clips, sub, log=log)
    return log


def flip_targets(gt):
    """Mirror grid targets left-right; the x-offset logit flips sign."""
    from .detector import GroundTruthTargets

    reg = gt.reg[:, :, ::-1].copy()
    reg[0] = -reg[0]
    gw = gt.obj.shape[2]
    positives = [(iy, gw - 1 - ix, box, cid) for iy, ix, box, cid in gt.positives]
    return GroundTruthTargets(cls=gt.cls[:, :, ::-1].copy(), obj=gt.obj[:, :, ::-1].copy(), reg=reg, positives=positives)


def pretrain_bases(bank: ModelBank, clips, epochs: int = 8, base_lr: float = 0.05,
                   batch_size: int = 4, momentum: float = 0.9, seed: int = 0):
    """Train every branch's base weights on all samples (no routing).

    This is initialisation, the analogue of starting from pre-trained
    branch models; it runs before adapters are frozen into the two-phase
    schedule. Adapters are ignored here (their zero B keeps them inert).
    """
    samples = sample_index(clips)
    geom = bank.geom
    rng = np.random.default_rng(seed)
    for b in bank.branches:
        b.detector.set_base_trainable(True)
    opts = [
        MomentumSGD([p for layer in b.detector.layers() for p in (layer.kernel, layer.bias)], momentum)
        for b in bank.branches
    ]
    batches_per_epoch = math.ceil(len(samples) / batch_size)
    total_steps = epochs * batches_per_epoch
    warmup_steps = batches_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            lr = lr_at(step, total_steps, warmup_steps, base_lr)
            batch = [samples[oi] for oi in order[start : start + batch_size]]
            for opt, branch in zip(opts, bank.branches):
                opt.zero_grad()
                for ci, i in batch:
                    clip = clips[ci]
                    window = branch.window(clip, i)
                    gt = next_frame_targets(clip, i, geom)
                    logits = branch.detector.forward(window)
                    _, (g_cls, g_obj, g_reg) = detection_loss(logits, gt, geom)
                    branch.detector.backward(g_cls, g_obj, g_reg)
                for layer in branch.detector.layers():
                    layer.kernel.grad /= len(batch)
                    layer.bias.grad /= len(batch)
                opt.step(lr)
            step += 1
    for b in bank.branches:
        b.detector.set_base_trainable(False)


def routing_accuracy(bank: ModelBank, rt: RouterNet, clips) -> float:
    """Fraction of samples where the router matches the exhaustive target."""
    samples = sample_index(clips)
    geom = bank.geom
    v_time = bank.latencies_ms()
    hits = 0
    for ci, i in samples:
        clip = clips[ci]
        gt = next_frame_targets(clip, i, geom)
        v_sp = np.array([detection_loss(b.run(clip, i), gt, geom)[0] for b in bank.branches])
        target = int(np.argmax(branch_target(v_sp, v_time)))
        pred = route(_diff_for(clip, i), rt).sigma
        hits += int(pred == target)
    return hits / len(samples)
