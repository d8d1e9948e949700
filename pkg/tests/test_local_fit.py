from __future__ import annotations

import json

import numpy as np
import pytest

from motionanno.errors import FitDivergenceError, StructuralError, ValidationError
from motionanno.geometry import frames_from_projection
from motionanno.keypoints import KeypointFrame3D, stack_frames
from motionanno.local_fit import (
    CollisionProxy,
    FitOptions,
    FitTargets,
    LocalObjective,
    LossWeights,
    SingleFrameWarning,
    fit_local,
    loss_joint,
    loss_pen,
    loss_phy,
    loss_smooth,
    pen_term,
    phy_terms,
    segment_distance,
)
from motionanno.metrics import mpjpe
from motionanno.skeleton import MotionSequence, PoseState, SkeletonTopology, default_topology, fk_batch, sequence_joints

from oracles import (
    fd_relative_error,
    local_term_problem,
    naive_loss_joint,
    naive_loss_smooth,
    naive_pen,
    segment_distance_oracle,
    static_motion,
)
from synth import keypoint_frames3d, random_motion, two_cameras


TOPO = default_topology()


# ---------------------------------------------------------------------------
# loss_joint


def test_joint_zero_on_perfect_fit():
    m = random_motion(4, seed=1)
    value, parts = loss_joint(m, FitTargets(keypoint_frames3d(m), m), TOPO)
    assert value == 0.0 and parts == {"3d": 0.0, "2d": 0.0, "prior": 0.0}


def test_joint_single_offset():
    m = random_motion(1, seed=2)
    k3d = keypoint_frames3d(m)
    pts = k3d[0].points.copy()
    pts[TOPO.keypoint_map[TOPO.index("l_knee")]] += [0.1, 0, 0]
    target = [KeypointFrame3D(pts, k3d[0].scores)]
    value, parts = loss_joint(m, FitTargets(target, m), TOPO)
    assert value == pytest.approx(0.1 / TOPO.mapped_joints.size, rel=1e-12)
    assert parts["3d"] == value


def test_joint_matches_naive_summation():
    rng = np.random.default_rng(3)
    m = random_motion(3, seed=3, amp=0.5)
    tgt = random_motion(3, seed=4, amp=0.5)
    k3d = [KeypointFrame3D(f.points + rng.normal(0, 0.03, f.points.shape), f.scores * rng.uniform(0, 1, 133))
           for f in keypoint_frames3d(tgt)]
    cams = two_cameras()
    pts, sc = stack_frames(k3d)
    views = frames_from_projection(cams, pts + rng.normal(0, 0.01, pts.shape), sc > 0, score=0.7)
    init = random_motion(3, seed=5)
    value, _ = loss_joint(m, FitTargets(k3d, init, views, cams), TOPO)
    pos = sequence_joints(TOPO, m)
    v_views = [(c, *stack_frames(v)) for c, v in zip(cams, views)]
    ref = naive_loss_joint(pos, m.rotations(), init.rotations(), pts, sc, v_views, TOPO)
    assert value == pytest.approx(ref, rel=1e-12)


def test_joint_dimension_mismatch():
    m = random_motion(3)
    with pytest.raises(StructuralError):
        FitTargets(keypoint_frames3d(m)[:2], m)
    with pytest.raises(StructuralError):
        loss_joint(random_motion(2), FitTargets(keypoint_frames3d(m), m), TOPO)


# ---------------------------------------------------------------------------
# loss_smooth


def test_smooth_examples():
    assert loss_smooth(static_motion(4), TOPO) == 0.0
    theta = np.zeros((2, 53, 3))
    r = np.array([[0.0, 0, 1], [0.3, 0, 1]])
    m = MotionSequence.from_arrays(30, TOPO.default_shape(), theta, r)
    assert loss_smooth(m, TOPO) == pytest.approx(0.3 / (53 * 3 + 3) + 0.3, rel=1e-12)


def test_smooth_matches_naive_double_loop():
    m = random_motion(5, seed=6, amp=0.5)
    pos = sequence_joints(TOPO, m)
    assert loss_smooth(m, TOPO) == pytest.approx(naive_loss_smooth(m.rotations(), m.translations(), pos), rel=1e-12)


def test_smooth_single_frame_warns():
    with pytest.warns(SingleFrameWarning):
        assert loss_smooth(random_motion(1), TOPO) == 0.0


# ---------------------------------------------------------------------------
# loss_pen


def two_bone_topology():
    # root -> a -> b and root -> c -> d; bones b and d are the test capsules
    dirs = np.array([[0, 0, 0], [1, 0, 0], [1, 0, 0], [-1, 0, 0], [-1, 0, 0.0]])
    return SkeletonTopology("pair", ("root", "a", "b", "c", "d"), np.array([-1, 0, 1, 0, 3]), dirs,
                            np.array([0, 1, 1, 1, 1.0]), np.full(5, -1), np.full(5, 0.05))


def test_pen_parallel_capsules():
    topo = two_bone_topology()
    proxy = CollisionProxy(np.full(5, 0.05), np.array([[2, 4]]))
    pos = np.zeros((1, 5, 3))
    pos[0, 1] = [0, 0, 0]
    pos[0, 2] = [1, 0, 0]
    pos[0, 3] = [0, 0.06, 0]
    pos[0, 4] = [1, 0.06, 0]
    value, _ = pen_term(pos, proxy, topo)
    assert value == pytest.approx(0.04**2, rel=1e-12)


def test_pen_rest_pose_is_zero():
    proxy = CollisionProxy.from_topology(TOPO)
    assert loss_pen(PoseState.zeros(), proxy, TOPO, TOPO.default_shape()) == 0.0


def test_pen_matches_bruteforce_oracle():
    proxy = CollisionProxy.from_topology(TOPO)
    rng = np.random.default_rng(7)
    checked = 0
    for seed in range(6):
        pos, _ = fk_batch(TOPO, TOPO.default_shape(), rng.normal(0, 1.0, (1, 53, 3)), np.zeros((1, 3)))
        value, _ = pen_term(pos, proxy, TOPO)
        ref = naive_pen(pos[0], proxy, TOPO)
        assert value == pytest.approx(ref, rel=1e-6, abs=1e-12)
        checked += value > 0
    assert checked >= 3


def test_segment_distance_against_oracle():
    rng = np.random.default_rng(8)
    P = rng.normal(size=(300, 4, 3))
    d = segment_distance(P[:, 0], P[:, 1], P[:, 2], P[:, 3])[0]
    ref = [segment_distance_oracle(*p) for p in P]
    np.testing.assert_allclose(d, ref, atol=1e-7)
    # degenerate (zero-length) segments and parallel segments
    p = np.array([0.0, 0, 0])
    assert segment_distance(p, p, np.array([0, 1.0, 0]), np.array([1, 1.0, 0]))[0] == pytest.approx(1.0)
    assert segment_distance(p, np.array([1.0, 0, 0]), np.array([2, 1.0, 0]), np.array([3, 1.0, 0]))[0] == \
        pytest.approx(np.sqrt(2))


def test_collision_proxy_exclusions():
    proxy = CollisionProxy.from_topology(TOPO, exclusion_hops=2)
    pairs = {tuple(p) for p in proxy.pairs.tolist()}
    knee, ankle = TOPO.index("l_knee"), TOPO.index("l_ankle")
    assert (knee, ankle) not in pairs
    assert all(a < b for a, b in pairs)
    with pytest.raises(ValidationError):
        CollisionProxy(np.r_[0.0, np.zeros(52)], np.zeros((0, 2), dtype=int))


# ---------------------------------------------------------------------------
# loss_phy


FEET = [TOPO.index(n) for n in ("l_ankle", "r_ankle", "l_foot", "r_foot")]


def test_phy_clean_contact_and_penetration():
    pos = np.zeros((5, 53, 3))
    pos[..., 2] = 0.5
    pos[:, FEET, 2] = 0.0
    assert phy_terms(pos, 30.0, 0.0, np.array(FEET))[0] == 0.0
    one = pos[:1].copy()
    one[0, FEET[0], 2] = -0.03
    assert phy_terms(one, 30.0, 0.0, np.array(FEET))[1] == pytest.approx(9e-4, rel=1e-12)


def test_phy_zero_for_planted_walk():
    # each foot alternates: planted (stationary) -> lift straight up -> swing -> set straight down
    F = 40
    pos = np.zeros((F, 53, 3))
    pos[..., 2] = 0.9
    x = {0: 0.0, 1: 0.0}
    for t in range(F):
        for side, (ankle, foot) in enumerate(((FEET[0], FEET[2]), (FEET[1], FEET[3]))):
            phase = (t + 10 * side) % 20
            if phase < 10:
                z = 0.0
            elif phase == 10 or phase == 19:
                z = 0.12
            else:
                z = 0.12
                x[side] += 0.05
            pos[t, ankle] = [x[side], 0.1 * side, z + 0.08]
            pos[t, foot] = [x[side] + 0.15, 0.1 * side, z]
    value, pen, skate, _ = phy_terms(pos, 30.0, 0.0, np.array(FEET))
    assert pen == 0.0 and skate == 0.0 and value == 0.0


def test_phy_skating_detected():
    pos = np.zeros((3, 53, 3))
    pos[..., 2] = 0.9
    pos[:, FEET, 2] = 0.0
    pos[:, FEET[0], 0] = [0.0, 0.01, 0.02]
    _, _, skate, _ = phy_terms(pos, 30.0, 0.0, np.array(FEET))
    assert skate == pytest.approx(2 * (0.01 * 30) ** 2)


def test_loss_phy_on_motion():
    m = random_motion(3, seed=9)
    shifted = MotionSequence.from_arrays(m.fps, m.shape, m.rotations(), m.translations() + [0, 0, 5])
    assert loss_phy(shifted, 0.0, TOPO) == 0.0


# ---------------------------------------------------------------------------
# gradients and objective


@pytest.mark.parametrize("term", ["joint", "smooth", "pen", "phy"])
def test_term_gradients(term):
    for seed in range(5):
        obj, x = local_term_problem(term, seed)
        assert fd_relative_error(obj, x, np.random.default_rng(seed)) < 1e-4


def test_terms_nonnegative():
    for term in ("joint", "smooth", "pen", "phy"):
        obj, x = local_term_problem(term, 0)
        assert obj(x)[0] >= 0.0


def test_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(lambda_pen=-1.0)
    with pytest.raises(ValidationError):
        LossWeights(lambda_joint=float("nan"))


def test_divergence_names_term_and_frame():
    m = random_motion(3, seed=10)
    k3d = keypoint_frames3d(m)
    bad = k3d[1].points.copy()
    bad[0] = np.inf
    k3d[1] = KeypointFrame3D.__new__(KeypointFrame3D)
    object.__setattr__(k3d[1], "points", bad)
    object.__setattr__(k3d[1], "scores", keypoint_frames3d(m)[1].scores)
    object.__setattr__(k3d[1], "frame", 1)
    obj = LocalObjective(FitTargets(k3d, m), LossWeights(), TOPO, m.shape)
    with pytest.raises(FitDivergenceError) as info:
        obj(obj.pack(m.rotations(), m.translations()))
    assert info.value.term == "joint_3d" and info.value.frame == 1


# ---------------------------------------------------------------------------
# fitting


def test_fixed_point():
    m = static_motion(4, seed=11)
    motion, rep = fit_local(FitTargets(keypoint_frames3d(m), m), LossWeights(lambda_pen=0, lambda_phy=0), TOPO)
    assert rep.iterations == 0 and rep.final_loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(motion.rotations(), m.rotations())


def test_recovery_from_perturbed_init():
    truth = random_motion(15, seed=12)
    rng = np.random.default_rng(12)
    init = MotionSequence.from_arrays(truth.fps, truth.shape, truth.rotations() + rng.normal(0, 0.05, (15, 53, 3)),
                                      truth.translations())
    motion, rep = fit_local(FitTargets(keypoint_frames3d(truth), init), LossWeights(lambda_pen=0, lambda_phy=0), TOPO)
    err = mpjpe(sequence_joints(TOPO, motion), sequence_joints(TOPO, truth))
    assert err < 5.0
    losses = [h["loss"] for h in rep.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert rep.final_loss <= rep.initial_loss


def test_zero_weight_neutrality():
    truth = random_motion(5, seed=13)
    rng = np.random.default_rng(13)
    init = MotionSequence.from_arrays(truth.fps, truth.shape, truth.rotations() + rng.normal(0, 0.05, (5, 53, 3)),
                                      truth.translations())
    t = FitTargets(keypoint_frames3d(truth), init)
    opts = FitOptions(max_iter=30)
    _, a = fit_local(t, LossWeights(lambda_pen=0.0), TOPO, opts=opts)
    _, b = fit_local(t, LossWeights(lambda_pen=0.1), TOPO,
                     opts=FitOptions(max_iter=30, terms=("joint", "smooth", "phy")))
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]


def test_fit_with_2d_targets_and_report_json():
    truth = random_motion(4, seed=14)
    k3d = keypoint_frames3d(truth)
    cams = two_cameras()
    pts, sc = stack_frames(k3d)
    views = frames_from_projection(cams, pts, sc > 0)
    rng = np.random.default_rng(14)
    init = MotionSequence.from_arrays(truth.fps, truth.shape, truth.rotations() + rng.normal(0, 0.03, (4, 53, 3)),
                                      truth.translations())
    motion, rep = fit_local(FitTargets(k3d, init, views, cams), opts=FitOptions(max_iter=60))
    assert rep.final_loss < rep.initial_loss
    assert "joint_2d" in rep.history[-1]
    assert json.loads(rep.to_json())["iterations"] == rep.iterations
