"""Rule-based whole-body pose descriptions.

Posecodes are categorical statements computed from 3D joints (joint bends,
relative positions, distances, finger curvature and spread). They are
aggregated and rendered to English with a template table shipped in
``data/captions.json``. Every rule is angle- or ratio-based, so codes do not
depend on the subject's scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DegenerateGeometryError, ValidationError
from .keypoints import KeypointFrame3D
from .skeleton import MotionSequence, SkeletonTopology, default_topology, sequence_joints

DEGENERATE_EPS = 1e-6
FINGERS = ("thumb", "index finger", "middle finger", "ring finger", "pinky")
SKELETON_FINGERS = ("thumb", "index", "middle", "ring", "pinky")
# adjacent finger pairs for spread codes, with their rendered names
SPREAD_PAIRS = (
    (0, 1, "thumb and index finger"),
    (1, 2, "index and middle fingers"),
    (2, 3, "middle and ring fingers"),
    (3, 4, "ring finger and pinky"),
)
BODY_KEYPOINTS = {
    "l_shoulder": 5, "r_shoulder": 6, "l_elbow": 7, "r_elbow": 8, "l_wrist": 9, "r_wrist": 10,
    "l_hip": 11, "r_hip": 12, "l_knee": 13, "r_knee": 14, "l_ankle": 15, "r_ankle": 16,
}
HAND_BASE = {"left": 91, "right": 112}
SIDES = (("left", "l"), ("right", "r"))

ANGLE_RELATIONS = ("bend", "torso")


@lru_cache(maxsize=None)
def caption_table() -> dict:
    with resources.files("motionanno.data").joinpath("captions.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Posecode:
    subject: str
    relation: str  # bend | vertical | depth | separation | torso | spread
    category: str
    margin: float = float("inf")  # distance to the nearest category boundary
    reference: str = ""

    def key(self) -> tuple:
        return (self.subject, self.relation, self.reference, self.category)

    def mirrored(self) -> Posecode:
        return replace(self, subject=_swap_side(self.subject), reference=_swap_side(self.reference))

    def to_dict(self) -> dict:
        d = {"subject": self.subject, "relation": self.relation, "category": self.category,
             "margin": round(float(self.margin), 6)}
        if self.reference:
            d["reference"] = self.reference
        return d


def _swap_side(s: str) -> str:
    if s.startswith("left "):
        return "right " + s[5:]
    if s.startswith("right "):
        return "left " + s[6:]
    return s


@dataclass
class PoseDescription:
    frame: int
    face: str | None
    body_codes: list[Posecode] = field(default_factory=list)
    hand_codes: list[Posecode] = field(default_factory=list)
    text: str = ""

    def to_dict(self) -> dict:
        return {"frame": self.frame, "codes": [c.to_dict() for c in self.body_codes + self.hand_codes],
                "text": self.text}


# -- geometry primitives


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = float(np.dot(a, b) / (na * nb))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def finger_angle(wrist, fingertip, fingerroot) -> float:
    """Angle in degrees between wrist->tip and tip->root; 180 for a straight finger."""
    w, t, r = (np.asarray(p, dtype=np.float64) for p in (wrist, fingertip, fingerroot))
    for a, b in ((w, t), (t, r), (w, r)):
        if np.linalg.norm(a - b) <= DEGENERATE_EPS:
            raise DegenerateGeometryError("finger keypoints coincide")
    return _angle(t - w, r - t)


def _band(value: float, bands: list[dict]) -> tuple[str, float]:
    """Category for ``value`` from lower-inclusive bands (descending) and its boundary margin."""
    interior = [b["lower"] for b in bands[:-1]]
    for b in bands:
        if value >= b["lower"]:
            cat = b["category"]
            break
    else:
        cat = bands[-1]["category"]
    margin = min((abs(value - x) for x in interior), default=float("inf"))
    return cat, margin


def classify_finger_curvature(angle: float) -> str:
    if not (np.isfinite(angle) and 0.0 <= angle <= 180.0):
        raise ValidationError(f"finger angle must lie in [0, 180], got {angle}")
    return _band(float(angle), caption_table()["bend_bands"])[0]


def _spread_category(ratio: float) -> str:
    t = caption_table()["spread"]
    if ratio > t["spread_apart_above"]:
        return "spread apart"
    if ratio < t["close_together_below"]:
        return "close together"
    return "neutral"


def spread_ratios(hand) -> np.ndarray:
    """Adjacent fingertip distances over palm width for a 21-point hand."""
    hand = np.asarray(hand, dtype=np.float64)
    if hand.shape != (21, 3):
        raise ValidationError(f"hand keypoints must be (21, 3), got {hand.shape}")
    palm = float(np.linalg.norm(hand[5] - hand[17]))
    if palm <= DEGENERATE_EPS:
        raise DegenerateGeometryError("zero palm width")
    tips = hand[[4, 8, 12, 16, 20]]
    return np.array([np.linalg.norm(tips[a] - tips[b]) for a, b, _ in SPREAD_PAIRS]) / palm


def classify_finger_spread(hand_keypoints) -> list[str]:
    """Per adjacent pair (thumb-index ... ring-pinky): spread apart / close together / neutral."""
    return [_spread_category(float(r)) for r in spread_ratios(hand_keypoints)]


# -- point extraction


def body_points_from_joints(joints: np.ndarray, topology: SkeletonTopology | None = None) -> dict:
    topology = topology or default_topology()
    joints = np.asarray(joints, dtype=np.float64)
    names = ["pelvis", "neck", *BODY_KEYPOINTS]
    return {n: joints[topology.index(n)] for n in names}


def hands_from_joints(joints: np.ndarray, topology: SkeletonTopology | None = None) -> dict:
    """21-point hands from skeleton joints; the last finger joint stands in for the tip."""
    topology = topology or default_topology()
    joints = np.asarray(joints, dtype=np.float64)
    out = {}
    for side, s in SIDES:
        hand = np.zeros((21, 3))
        hand[0] = joints[topology.index(f"{s}_wrist")]
        for f, name in enumerate(SKELETON_FINGERS):
            seg = [joints[topology.index(f"{s}_{name}{k}")] for k in (1, 2, 3)]
            hand[1 + 4 * f:5 + 4 * f] = [*seg, seg[-1]]
        out[side] = hand
    return out


def body_points_from_keypoints(frame: KeypointFrame3D) -> dict:
    """Named body points from 133 keypoints (None when unobserved).

    The pelvis is the hip midpoint and the neck the shoulder midpoint.
    """
    pts = {n: (frame.points[k] if frame.scores[k] > 0 else None) for n, k in BODY_KEYPOINTS.items()}
    pts["pelvis"] = _mid(pts["l_hip"], pts["r_hip"])
    pts["neck"] = _mid(pts["l_shoulder"], pts["r_shoulder"])
    return pts


def hands_from_keypoints(frame: KeypointFrame3D) -> dict:
    """21-point hands with a per-point observed mask."""
    out = {}
    for side, base in HAND_BASE.items():
        out[side] = (frame.points[base:base + 21], frame.scores[base:base + 21] > 0)
    return out


def _mid(a, b):
    if a is None or b is None:
        return None
    return 0.5 * (a + b)


# -- rules


def body_posecodes(joints, topology: SkeletonTopology | None = None) -> list[Posecode]:
    """Body rule set over 53 skeleton joints, or over a dict of named points.

    Rules whose points are missing (None) are skipped.
    """
    p = joints if isinstance(joints, dict) else body_points_from_joints(joints, topology)
    table = caption_table()
    codes: list[Posecode] = []

    def have(*names):
        return all(p.get(n) is not None for n in names)

    for joint, (a, m, b) in (("elbow", ("shoulder", "elbow", "wrist")), ("knee", ("hip", "knee", "ankle"))):
        for side, s in SIDES:
            names = (f"{s}_{a}", f"{s}_{m}", f"{s}_{b}")
            if not have(*names):
                continue
            u = p[names[0]] - p[names[1]]
            v = p[names[2]] - p[names[1]]
            if min(np.linalg.norm(u), np.linalg.norm(v)) <= DEGENERATE_EPS:
                continue
            cat, margin = _band(_angle(u, v), table["bend_bands"])
            codes.append(Posecode(f"{side} {joint}", "bend", cat, margin))

    torso = None
    if have("neck", "pelvis"):
        axis = p["neck"] - p["pelvis"]
        n = float(np.linalg.norm(axis))
        torso = n if n > DEGENERATE_EPS else None

    if torso is not None:
        for ref in ("shoulder", "hip"):
            for side, s in SIDES:
                if not have(f"{s}_wrist", f"{s}_{ref}"):
                    continue
                dz = float(p[f"{s}_wrist"][2] - p[f"{s}_{ref}"][2]) / torso
                codes.append(Posecode(f"{side} hand", "vertical", "above" if dz >= 0 else "below", abs(dz),
                                      f"{side} {ref}"))
        if have("l_hip", "r_hip"):
            normal = np.cross(p["neck"] - p["pelvis"], p["l_hip"] - p["r_hip"])
            nn = float(np.linalg.norm(normal))
            if nn > DEGENERATE_EPS:
                normal /= nn
                for side, s in SIDES:
                    if not have(f"{s}_wrist"):
                        continue
                    d = float(np.dot(p[f"{s}_wrist"] - p["pelvis"], normal)) / torso
                    codes.append(Posecode(f"{side} hand", "depth", "front" if d >= 0 else "behind", abs(d)))

    if have("l_shoulder", "r_shoulder"):
        width = float(np.linalg.norm(p["l_shoulder"] - p["r_shoulder"]))
        if width > DEGENERATE_EPS:
            for subject, (a, b) in (("hands", ("l_wrist", "r_wrist")), ("feet", ("l_ankle", "r_ankle"))):
                if have(a, b):
                    ratio = float(np.linalg.norm(p[a] - p[b])) / width
                    cat, margin = _band(ratio, table["separation_bands"])
                    codes.append(Posecode(subject, "separation", cat, margin))

    if torso is not None:
        pitch = _angle(p["neck"] - p["pelvis"], np.array([0.0, 0.0, 1.0]))
        cat, margin = _band(pitch, table["torso_pitch_bands"])
        codes.append(Posecode("torso", "torso", cat, margin))
    return codes


def hand_posecodes(hands: dict) -> list[Posecode]:
    """Finger curvature and spread codes.

    ``hands`` maps "left"/"right" to a (21, 3) array or to (array, observed mask).
    """
    table = caption_table()
    thr = table["spread"]
    codes: list[Posecode] = []
    for side in ("left", "right"):
        if side not in hands:
            continue
        h = hands[side]
        pts, seen = (h if isinstance(h, tuple) else (h, np.ones(21, dtype=bool)))
        pts = np.asarray(pts, dtype=np.float64)
        for f, name in enumerate(FINGERS):
            root, tip = 1 + 4 * f, 4 + 4 * f
            if not (seen[0] and seen[root] and seen[tip]):
                continue
            try:
                ang = finger_angle(pts[0], pts[tip], pts[root])
            except DegenerateGeometryError:
                continue
            cat, margin = _band(ang, table["bend_bands"])
            codes.append(Posecode(f"{side} {name}", "bend", cat, margin))
        needed = [5, 17, 4, 8, 12, 16, 20]
        if not all(seen[k] for k in needed):
            continue
        try:
            ratios = spread_ratios(pts)
        except DegenerateGeometryError:
            continue
        for (_, _, ref), ratio in zip(SPREAD_PAIRS, ratios):
            cat = _spread_category(float(ratio))
            if cat == "neutral":
                continue
            margin = min(abs(ratio - thr["spread_apart_above"]), abs(ratio - thr["close_together_below"]))
            codes.append(Posecode(f"{side} hand", "spread", cat, float(margin), ref))
    return codes


# -- aggregation and rendering

BODY_ORDER = ("bend", "vertical", "depth", "separation", "torso")
HAND_ORDER = ("bend", "spread")


def _select(codes: list[Posecode], eps_angle: float, eps_ratio: float) -> list[Posecode]:
    seen = set()
    out = []
    for c in codes:
        eps = eps_angle if c.relation in ANGLE_RELATIONS else eps_ratio
        if c.margin < eps or c.key() in seen:
            continue
        seen.add(c.key())
        out.append(c)
    return out


def _merge_bilateral(codes: list[Posecode]) -> list[tuple[Posecode, bool]]:
    """Pair left/right codes that agree; returns (code, merged) with the left code kept."""
    index = {c.key(): i for i, c in enumerate(codes)}
    used = set()
    out = []
    for i, c in enumerate(codes):
        if i in used:
            continue
        if c.subject.startswith(("left ", "right ")):
            j = index.get(c.mirrored().key())
            if j is not None and j != i and j not in used:
                used.add(j)
                left = c if c.subject.startswith("left ") else codes[j]
                out.append((left, True))
                continue
        out.append((c, False))
    return out


def _strip_side(s: str) -> str:
    return s.split(" ", 1)[1] if s.startswith(("left ", "right ")) else s


def _clause(code: Posecode, merged: bool, rng: np.random.Generator) -> str:
    table = caption_table()
    tmpl = table["templates"]
    plurals = table["plurals"]
    rel = code.relation
    key = f"{rel}_both" if merged else rel
    variants = tmpl[key]
    text = variants[int(rng.integers(len(variants)))]
    cat = table["category_text"].get(code.category, code.category)
    base = _strip_side(code.subject)
    ref_base = _strip_side(code.reference)
    return text.format(
        subject=code.subject,
        subjects=plurals.get(base, base + "s"),
        category=cat,
        reference=code.reference,
        references=plurals.get(ref_base, ref_base + "s"),
    )


def _sentence(clauses: list[str]) -> str:
    if not clauses:
        return ""
    if len(clauses) == 1:
        return clauses[0] + "."
    return ", ".join(clauses[:-1]) + " and " + clauses[-1] + "."


def aggregate_and_render(body_codes: list[Posecode], hand_codes: list[Posecode], emotion: str | None = None,
                         template_seed: int = 0, frame: int = 0, eps_angle: float | None = None,
                         eps_ratio: float | None = None) -> PoseDescription:
    """Select, merge and render codes; the text depends only on (codes, emotion, seed)."""
    margins = caption_table()["margin"]
    eps_angle = margins["angle"] if eps_angle is None else eps_angle
    eps_ratio = margins["ratio"] if eps_ratio is None else eps_ratio
    rng = np.random.default_rng(template_seed)
    parts = []
    if emotion:
        parts.append(caption_table()["templates"]["face"][0].format(emotion=emotion))
    body = _select(body_codes, eps_angle, eps_ratio)
    hands = _select(hand_codes, eps_angle, eps_ratio)
    for group, order in ((body, BODY_ORDER), (hands, HAND_ORDER)):
        group = sorted(group, key=lambda c: order.index(c.relation))
        clauses = [_clause(c, merged, rng) for c, merged in _merge_bilateral(group)]
        s = _sentence(clauses)
        if s:
            parts.append(s)
    return PoseDescription(frame, emotion, body, hands, " ".join(parts))


def caption_frame(points, topology: SkeletonTopology | None = None, emotion: str | None = None,
                  template_seed: int = 0, frame: int = 0, eps_angle: float | None = None,
                  eps_ratio: float | None = None) -> PoseDescription:
    """Describe one frame given 53 skeleton joints or a KeypointFrame3D."""
    if isinstance(points, KeypointFrame3D):
        body = body_posecodes(body_points_from_keypoints(points))
        hand = hand_posecodes(hands_from_keypoints(points))
    else:
        body = body_posecodes(points, topology)
        hand = hand_posecodes(hands_from_joints(points, topology))
    return aggregate_and_render(body, hand, emotion, template_seed, frame, eps_angle, eps_ratio)


def caption_sequence(motion, emotions=None, stride: int = 1, template_seed: int = 0,
                     topology: SkeletonTopology | None = None) -> list[PoseDescription]:
    """Caption every ``stride``-th frame of a MotionSequence or a list of KeypointFrame3D."""
    if int(stride) != stride or stride < 1:
        raise ValidationError(f"stride must be a positive integer, got {stride}")
    topology = topology or default_topology()
    if isinstance(motion, MotionSequence):
        frames = list(sequence_joints(topology, motion))
    else:
        frames = list(motion)
    if emotions is not None and len(emotions) != len(frames):
        raise ValidationError(f"{len(emotions)} emotion labels for {len(frames)} frames")
    out = []
    for i in range(0, len(frames), int(stride)):
        emo = emotions[i] if emotions is not None else None
        out.append(caption_frame(frames[i], topology, emo, template_seed, i))
    return out
