import numpy as np
import pytest

from streamroute import dataset as ds
from streamroute import numcore as nc
from streamroute import router as rt
from streamroute.errors import ShapeError


def test_frame_diff_identical_frames():
    f = np.random.default_rng(0).uniform(0, 255, size=(96, 160))
    d = rt.frame_diff(f, f.copy())
    assert np.array_equal(d.raw, np.zeros_like(f))
    assert np.array_equal(d.pooled, np.zeros(rt.ROUTER_INPUT_HW))


def test_frame_diff_antisymmetric():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 255, size=(96, 160))
    b = rng.uniform(0, 255, size=(96, 160))
    assert np.array_equal(rt.frame_diff(a, b).raw, -rt.frame_diff(b, a).raw)


def test_frame_diff_constant_offset():
    f = np.random.default_rng(2).uniform(0, 200, size=(96, 160))
    d = rt.frame_diff(f + 3.0, f)
    assert np.max(np.abs(d.raw - 3.0)) < 1e-12
    assert np.max(np.abs(d.pooled - 3.0)) < 1e-9


def test_frame_diff_pooled_mean_matches_raw_mean():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 255, size=(96, 160))
    b = rng.uniform(0, 255, size=(96, 160))
    d = rt.frame_diff(a, b)
    assert abs(d.pooled.mean() - d.raw.mean()) < 1e-6
    d_even = rt.frame_diff(a, b, pooled_hw=(48, 80))
    assert abs(d_even.pooled.mean() - d_even.raw.mean()) < 1e-9


def test_frame_diff_shape_mismatch():
    with pytest.raises(ShapeError):
        rt.frame_diff(np.zeros((10, 10)), np.zeros((10, 12)))


def test_frame_diff_color_converted_to_luma():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 255, size=(3, 96, 160))
    d = rt.frame_diff(a, np.zeros_like(a))
    assert d.raw.shape == (96, 160)


# ---------------------------------------------------------------------------
# decisions


def test_decision_argmax():
    assert rt.decision_from_logits(np.array([0.2, 0.8])).sigma == 1


def test_decision_tie_breaks_low():
    assert rt.decision_from_logits(np.array([0.3, 0.3])).sigma == 0


def test_decision_shift_invariant():
    logits = np.array([0.1, 0.7, 0.4])
    assert rt.decision_from_logits(logits + 5.0).sigma == rt.decision_from_logits(logits).sigma


def test_decision_monotone_transform_invariant():
    rng = np.random.default_rng(5)
    for _ in range(50):
        logits = rng.normal(size=3)
        base = rt.decision_from_logits(logits).sigma
        assert rt.decision_from_logits(3.0 * logits + 1.0).sigma == base
        assert rt.decision_from_logits(np.exp(logits)).sigma == base


def test_decision_probabilities_positive():
    d = rt.decision_from_logits(np.array([-100.0, 0.0, 100.0]))
    assert np.all(d.probabilities > 0)
    assert abs(d.probabilities.sum() - 1.0) < 1e-12


def test_route_end_to_end_deterministic():
    net = rt.RouterNet(branches=2, seed=3)
    rng = np.random.default_rng(6)
    d = rt.frame_diff(rng.uniform(0, 255, (96, 160)), rng.uniform(0, 255, (96, 160)))
    a = rt.route(d, net)
    b = rt.route(d, net)
    assert a.sigma == b.sigma
    assert np.array_equal(a.logits, b.logits)


# ---------------------------------------------------------------------------
# sign criterion


def test_mean_diff_criterion():
    zero = rt.FrameDiff(raw=np.zeros((4, 4)), pooled=np.zeros((2, 2)))
    assert rt.mean_diff_criterion(zero, 2) == 0
    pos = rt.FrameDiff(raw=np.full((4, 4), 0.5), pooled=np.full((2, 2), 0.5))
    assert rt.mean_diff_criterion(pos, 3) == 2
    neg = rt.FrameDiff(raw=np.full((4, 4), -0.5), pooled=np.full((2, 2), -0.5))
    assert rt.mean_diff_criterion(neg, 2) == 0


# ---------------------------------------------------------------------------
# router net gradients


def test_router_backward_matches_fd():
    # seeds chosen so no ReLU pre-activation sits within the finite-difference
    # step of its kink; crossing one makes the numeric gradient meaningless
    for seed in (1, 4, 5, 6, 7, 8, 9, 12, 13, 16):
        net = rt.RouterNet(branches=3, seed=seed)
        rng = np.random.default_rng(seed + 30)
        pooled = rng.normal(size=rt.ROUTER_INPUT_HW)
        target = 1

        def loss():
            net.zero_grad()
            logits = net.forward(pooled)
            probs = nc.softmax(logits)
            onehot = np.eye(3)[target]
            net.backward(probs - onehot)
            return float(-np.log(probs[target]))

        assert nc.grad_check(loss, net.params()) < 1e-4


def test_router_state_roundtrip(tmp_path):
    from streamroute import checkpoint as ckpt

    net = rt.RouterNet(branches=2, seed=9)
    ckpt.save_tensors(tmp_path / "r.drnw", net.state_dict())
    net2 = rt.RouterNet(branches=2, seed=10)
    net2.load_state(ckpt.load_tensors(tmp_path / "r.drnw"))
    pooled = np.random.default_rng(11).normal(size=rt.ROUTER_INPUT_HW)
    assert np.array_equal(net.forward(pooled), net2.forward(pooled))


# ---------------------------------------------------------------------------
# diff curves


def _static_clip(seed=0):
    return ds.gen_clip(
        ds.SyntheticClipSpec(motion_state="stop", speed_px_per_frame=0.0, length=4, n_objects=2), seed=seed
    )


def test_diff_curves_static_clip_all_zero():
    curves = rt.diff_mean_curves(_static_clip())
    assert len(curves) == 4
    for label, series in curves:
        assert all(v == 0.0 for v in series)


def test_diff_curves_duplicated_frame():
    clip = _static_clip(seed=1)
    f = clip.frames[0]
    g = ds.gen_clip(
        ds.SyntheticClipSpec(motion_state="stop", speed_px_per_frame=0.0, length=2, n_objects=2), seed=2
    ).frames[0]
    clip.frames = [f, f.copy(), g]
    (label, series), *_ = rt.diff_mean_curves(clip, sizes=(None,))
    assert label == "original"
    assert series[0] == 0.0
    assert series[1] == pytest.approx(float(np.mean(np.abs(g - f))), abs=1e-12)


def test_diff_curves_motion_ordering_at_all_sizes():
    for seed in range(3):
        stop = rt.diff_mean_curves(_static_clip(seed))
        straight = rt.diff_mean_curves(
            ds.gen_clip(ds.SyntheticClipSpec(motion_state="straight", speed_px_per_frame=4.0, length=4), seed=seed)
        )
        turning = rt.diff_mean_curves(
            ds.gen_clip(ds.SyntheticClipSpec(motion_state="turning", speed_px_per_frame=4.0, length=4), seed=seed)
        )
        for (l1, s1), (l2, s2), (l3, s3) in zip(stop, straight, turning):
            assert np.mean(s1) < np.mean(s2) < np.mean(s3), f"{l1} seed {seed}"


def test_diff_curves_too_short():
    clip = _static_clip()
    clip.frames = clip.frames[:1]
    with pytest.raises(ValueError):
        rt.diff_mean_curves(clip)


def test_curves_csv_format():
    csv = rt.curves_to_csv([("original", [0.0, 1.5]), ("50x50", [0.25])])
    lines = csv.strip().split("\n")
    assert lines[0] == "frame_index,size,mean_abs_diff"
    assert lines[1] == "1,original,0.000000"
    assert lines[3] == "1,50x50,0.250000"
