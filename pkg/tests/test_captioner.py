from __future__ import annotations

import math

import numpy as np
import pytest

from motionanno.captioner import (
    Posecode,
    aggregate_and_render,
    body_points_from_joints,
    body_posecodes,
    caption_frame,
    caption_sequence,
    classify_finger_curvature,
    classify_finger_spread,
    finger_angle,
    hand_posecodes,
    hands_from_joints,
)
from motionanno.errors import DegenerateGeometryError, ValidationError
from motionanno.keypoints import KeypointFrame3D
from motionanno.skeleton import MotionSequence, default_topology, fk_batch

from oracles import bend_category, body_rule_oracle, hand_rule_oracle
from synth import keypoint_frames3d, random_motion

TOPO = default_topology()


def random_poses(n, seed=0, amp=0.8):
    rng = np.random.default_rng(seed)
    theta = rng.normal(0, amp, (n, 53, 3))
    r = rng.normal(0, 1.0, (n, 3))
    pos, _ = fk_batch(TOPO, TOPO.default_shape(), theta, r)
    return pos


def all_codes(joints):
    return body_posecodes(joints, TOPO) + hand_posecodes(hands_from_joints(joints, TOPO))


# ---------------------------------------------------------------------------
# finger geometry


def test_finger_angle_examples():
    assert finger_angle([0, 0, 0], [0, 0.1, 0], [0, 0.05, 0]) == pytest.approx(180.0)
    # wrist->tip along +y, tip->root along +x
    assert finger_angle([0, 0, 0], [0, 0.1, 0], [0.1, 0.1, 0]) == pytest.approx(90.0)
    with pytest.raises(DegenerateGeometryError):
        finger_angle([0, 0, 0], [0, 0, 0], [1, 0, 0])


def test_finger_angle_trig_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        w, t, r = rng.normal(size=(3, 3))
        a, b = t - w, r - t
        cos = sum(x * y for x, y in zip(a, b)) / (math.hypot(*a) * math.hypot(*b))
        assert finger_angle(w, t, r) == pytest.approx(math.degrees(math.acos(cos)), abs=1e-9)


@pytest.mark.parametrize("angle,expected", [
    (140.0, "slightly bent"), (180.0, "straight"), (160.0, "straight"), (159.999, "slightly bent"),
    (120.0, "slightly bent"), (80.0, "bent"), (79.999, "completely bent"), (0.0, "completely bent"),
])
def test_curvature_examples(angle, expected):
    assert classify_finger_curvature(angle) == expected


@pytest.mark.parametrize("angle", [-0.001, 180.001, float("nan")])
def test_curvature_out_of_range(angle):
    with pytest.raises(ValidationError):
        classify_finger_curvature(angle)


def test_curvature_partition_is_total_on_fine_grid():
    order = ["completely bent", "bent", "slightly bent", "straight"]
    prev = 0
    for i in range(180001):
        a = i / 1000.0
        c = classify_finger_curvature(a)
        assert c == bend_category(a)
        k = order.index(c)
        assert k >= prev
        prev = k


def fanned_hand(spread=1.0):
    """Hand in the xy plane with fingertips fanned over ``spread`` radians per gap."""
    hand = np.zeros((21, 3))
    for f in range(5):
        ang = (f - 2) * spread
        d = np.array([np.sin(ang), np.cos(ang), 0.0])
        for k in range(4):
            hand[1 + 4 * f + k] = (0.03 + 0.02 * k) * d
    return hand


def test_spread_examples():
    hand = fanned_hand(0.0)
    hand[[4, 8, 12, 16, 20]] = [0.0, 0.1, 0.0]
    hand[5], hand[17] = [-0.02, 0.03, 0], [0.02, 0.03, 0]
    assert classify_finger_spread(hand) == ["close together"] * 4
    assert classify_finger_spread(fanned_hand(0.6)) == ["spread apart"] * 4
    flat = fanned_hand(0.0)
    with pytest.raises(DegenerateGeometryError):
        classify_finger_spread(flat)


def test_hand_codes_match_rule_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        hand = rng.normal(0, 0.05, (21, 3))
        got = {(c.subject.split(" ", 1)[1], c.reference, c.category) for c in hand_posecodes({"left": hand})}
        assert got == hand_rule_oracle(hand)


# ---------------------------------------------------------------------------
# body rules


def test_rest_pose_codes():
    keys = {c.key() for c in body_posecodes(TOPO.rest_joints(TOPO.default_shape()), TOPO)}
    for side in ("left", "right"):
        assert (f"{side} knee", "bend", "", "straight") in keys
        assert (f"{side} elbow", "bend", "", "straight") in keys
        assert (f"{side} hand", "vertical", f"{side} shoulder", "below") in keys


def test_knees_at_sixty_degrees():
    p = body_points_from_joints(TOPO.rest_joints(TOPO.default_shape()), TOPO)
    for s in ("l", "r"):
        thigh = p[f"{s}_hip"] - p[f"{s}_knee"]
        u = thigh / np.linalg.norm(thigh)
        v = np.cross(u, [1.0, 0.0, 0.0])
        v /= np.linalg.norm(v)
        a = np.deg2rad(60.0)
        p[f"{s}_ankle"] = p[f"{s}_knee"] + 0.4 * (np.cos(a) * u + np.sin(a) * v)
    codes = {c.key(): c for c in body_posecodes(p)}
    assert codes[("left knee", "bend", "", "completely bent")].margin == pytest.approx(20.0)
    assert codes[("right knee", "bend", "", "completely bent")].margin == pytest.approx(20.0)
    assert "both knees are completely bent" in aggregate_and_render(list(codes.values()), []).text


def test_body_codes_match_rule_oracle():
    for joints in random_poses(300, seed=2):
        got = {c.key() for c in body_posecodes(joints, TOPO)}
        assert got == body_rule_oracle(joints, TOPO)


def test_scale_invariance():
    root = TOPO.index("pelvis")
    rng = np.random.default_rng(3)
    for joints in random_poses(500, seed=3):
        s = rng.uniform(0.3, 3.0)
        scaled = joints[root] + s * (joints - joints[root])
        a, b = all_codes(joints), all_codes(scaled)
        assert [c.key() for c in a] == [c.key() for c in b]
        np.testing.assert_allclose([c.margin for c in a], [c.margin for c in b], rtol=1e-7, atol=1e-9)


def test_mirror_consistency():
    for joints in random_poses(500, seed=4):
        mirrored = joints[TOPO.mirror_index] * [-1.0, 1.0, 1.0]
        expect = {c.mirrored().key() for c in all_codes(joints)}
        assert {c.key() for c in all_codes(mirrored)} == expect


# ---------------------------------------------------------------------------
# aggregation and rendering


def test_face_only_caption():
    assert aggregate_and_render([], [], "happy").text == "the person looks happy."


def test_bilateral_merge():
    codes = [Posecode("left knee", "bend", "completely bent", 30.0),
             Posecode("right knee", "bend", "completely bent", 25.0)]
    assert aggregate_and_render(codes, []).text == "both knees are completely bent."
    codes[1] = Posecode("right knee", "bend", "bent", 25.0)
    text = aggregate_and_render(codes, []).text
    assert "both" not in text and "left knee" in text and "right knee" in text


def test_margin_suppression_and_dedup():
    near = Posecode("left knee", "bend", "straight", 1.0)
    far = Posecode("left elbow", "bend", "bent", 10.0)
    out = aggregate_and_render([near, far, far], [])
    assert [c.key() for c in out.body_codes] == [far.key()]
    assert out.text.count("elbow") == 1 and "knee" not in out.text
    assert aggregate_and_render([near], [], eps_angle=0.5).body_codes == [near]


def test_ordering_face_body_hands():
    hand = Posecode("left thumb", "bend", "bent", 10.0)
    body = Posecode("torso", "torso", "leaning", 10.0)
    text = aggregate_and_render([body], [hand], "sad").text
    assert text.index("looks sad") < text.index("leaning") < text.index("thumb")


def test_byte_determinism():
    joints = random_poses(1, seed=5)[0]
    a = caption_frame(joints, TOPO, "neutral", template_seed=0).text.encode("utf-8")
    b = caption_frame(joints.copy(), TOPO, "neutral", template_seed=0).text.encode("utf-8")
    assert a == b and len(a) > 0


# ---------------------------------------------------------------------------
# sequences


def test_sequence_stride_and_validation():
    motion = random_motion(10, seed=6)
    assert len(caption_sequence(motion, stride=10)) == 1
    assert [d.frame for d in caption_sequence(motion, stride=3)] == [0, 3, 6, 9]
    with pytest.raises(ValidationError):
        caption_sequence(motion, emotions=["happy"] * 9)
    with pytest.raises(ValidationError):
        caption_sequence(motion, stride=0)
    emo = caption_sequence(motion, emotions=["happy"] * 10, stride=5)
    assert all(d.text.startswith("the person looks happy.") for d in emo)


def test_constant_pose_gives_identical_descriptions():
    m = random_motion(1, seed=7)
    const = MotionSequence.from_arrays(30.0, m.shape, np.repeat(m.rotations(), 6, 0), np.repeat(m.translations(), 6, 0))
    texts = {d.text for d in caption_sequence(const)}
    assert len(texts) == 1


def test_keypoint_frames_are_captioned():
    frames = keypoint_frames3d(random_motion(4, seed=8))
    out = caption_sequence(frames, stride=2)
    assert [d.frame for d in out] == [0, 2] and all(d.text for d in out)
    # unobserved arms skip their rules instead of failing
    f = frames[0]
    scores = f.scores.copy()
    scores[[7, 9]] = 0.0
    d = caption_frame(KeypointFrame3D(f.points, scores, 0))
    assert not any(c.subject == "left elbow" for c in d.body_codes)
