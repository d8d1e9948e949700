"""JSON / JSON Lines interchange formats.

Every parse failure raises a subclass of InputSchemaError carrying the file
path and 1-based line number. Writers are byte-deterministic: keys are
emitted in a fixed order and floats use Python's shortest round-trip repr.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import (
    CoordinateError,
    FieldTypeError,
    InputSchemaError,
    KeypointCountError,
    MalformedLineError,
    MissingFieldError,
    ScoreRangeError,
    StructuralError,
    UnknownFieldError,
    ValidationError,
)
from .geometry import CameraModel
from .keypoints import KeypointFrame2D, KeypointFrame3D
from .skeleton import NUM_KEYPOINTS, MotionSequence, PoseState, SkeletonShape

WORLD_VIEW = "3d"  # key under which 3D frames are returned by parse_keypoints

_KP2D_FIELDS = {"frame", "view", "points", "scores"}
_KP3D_FIELDS = {"frame", "points", "scores"}
_POSE_FIELDS = ("theta_body", "theta_hands", "theta_jaw", "psi", "r")


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _lines(path):
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        for i, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.endswith("\r"):
                raise MalformedLineError("CRLF line ending (LF required)", str(path), i)
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise MalformedLineError(f"invalid JSON: {exc}", str(path), i) from None
            if not isinstance(obj, dict):
                raise MalformedLineError("line is not a JSON object", str(path), i)
            yield i, obj


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int_field(obj, key, path, line) -> int:
    v = obj[key]
    if not isinstance(v, int) or isinstance(v, bool):
        raise FieldTypeError(f"'{key}' must be an integer, got {type(v).__name__}", path, line)
    if v < 0:
        raise FieldTypeError(f"'{key}' must be non-negative, got {v}", path, line)
    return v


def _vector(obj, key, n, path, line, err=FieldTypeError) -> np.ndarray:
    v = obj[key]
    if not isinstance(v, list) or len(v) != n or not all(_is_number(x) for x in v):
        raise err(f"'{key}' must be a list of {n} numbers", path, line)
    a = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise err(f"'{key}' contains non-finite values", path, line)
    return a


def _parse_points(obj, dim, path, line) -> np.ndarray:
    pts = obj["points"]
    if not isinstance(pts, list):
        raise FieldTypeError("'points' must be a list", path, line)
    if len(pts) != NUM_KEYPOINTS:
        raise KeypointCountError(f"expected {NUM_KEYPOINTS} points, got {len(pts)}", path, line)
    for k, p in enumerate(pts):
        if not isinstance(p, list) or len(p) != dim or not all(_is_number(x) for x in p):
            raise CoordinateError(f"point {k} must be a list of {dim} numbers", path, line)
    a = np.asarray(pts, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise CoordinateError("coordinates must be finite", path, line)
    return a


def _parse_scores(obj, path, line) -> np.ndarray:
    sc = obj["scores"]
    if not isinstance(sc, list):
        raise FieldTypeError("'scores' must be a list", path, line)
    if len(sc) != NUM_KEYPOINTS:
        raise KeypointCountError(f"expected {NUM_KEYPOINTS} scores, got {len(sc)}", path, line)
    if not all(_is_number(x) for x in sc):
        raise FieldTypeError("scores must be numbers", path, line)
    a = np.asarray(sc, dtype=np.float64)
    bad = np.flatnonzero(~((a >= 0.0) & (a <= 1.0)))
    if bad.size:
        raise ScoreRangeError(f"score {a[bad[0]]} at keypoint {bad[0]} is outside [0, 1]", path, line)
    return a


def parse_keypoints(path, strict: bool = True) -> dict[str, list]:
    """Read a keypoint JSON Lines file.

    Returns ``{view: [KeypointFrame2D, ...]}`` for 2D files and
    ``{"3d": [KeypointFrame3D, ...]}`` for 3D files, each list sorted by
    frame. The dimensionality is fixed by the first record (a "view" field
    marks 2D). Unknown fields raise in strict mode and are kept in
    ``frame.extra`` otherwise.
    """
    path_s = str(path)
    out: dict[str, list] = {}
    dim = None
    seen = set()
    for line, obj in _lines(path):
        if dim is None:
            dim = 2 if "view" in obj else 3
        allowed = _KP2D_FIELDS if dim == 2 else _KP3D_FIELDS
        for key in sorted(allowed):
            if key not in obj:
                raise MissingFieldError(f"missing field '{key}'", path_s, line)
        unknown = sorted(set(obj) - allowed)
        if unknown and strict:
            raise UnknownFieldError(f"unknown field(s) {unknown}", path_s, line)
        frame = _int_field(obj, "frame", path_s, line)
        points = _parse_points(obj, dim, path_s, line)
        scores = _parse_scores(obj, path_s, line)
        extra = {k: obj[k] for k in unknown}
        if dim == 2:
            view = obj["view"]
            if not isinstance(view, str) or not view:
                raise FieldTypeError("'view' must be a non-empty string", path_s, line)
            rec = KeypointFrame2D(points, scores, frame=frame, view=view, extra=extra)
        else:
            view = WORLD_VIEW
            rec = KeypointFrame3D(points, scores, frame=frame, extra=extra)
        if (view, frame) in seen:
            raise InputSchemaError(f"duplicate frame {frame} for view '{view}'", path_s, line)
        seen.add((view, frame))
        out.setdefault(view, []).append(rec)
    if dim is None:
        raise InputSchemaError("no keypoint records", path_s, None)
    return {v: sorted(frames, key=lambda f: f.frame) for v, frames in sorted(out.items())}


def read_keypoints3d(path, strict: bool = True) -> list[KeypointFrame3D]:
    data = parse_keypoints(path, strict)
    if WORLD_VIEW not in data or len(data) != 1 or not isinstance(data[WORLD_VIEW][0], KeypointFrame3D):
        raise InputSchemaError("expected a 3D keypoint file", str(path), None)
    return data[WORLD_VIEW]


def read_keypoints2d(path, strict: bool = True) -> dict[str, list[KeypointFrame2D]]:
    data = parse_keypoints(path, strict)
    first = next(iter(data.values()))[0]
    if not isinstance(first, KeypointFrame2D):
        raise InputSchemaError("expected a 2D keypoint file", str(path), None)
    return data


def keypoint_record(frame) -> dict:
    rec = {"frame": int(frame.frame)}
    if isinstance(frame, KeypointFrame2D):
        rec["view"] = frame.view
    rec["points"] = frame.points.tolist()
    rec["scores"] = frame.scores.tolist()
    for k in sorted(frame.extra):
        rec.setdefault(k, frame.extra[k])
    return rec


def write_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def write_keypoints(path, frames) -> None:
    """Write frames (any mix of views for 2D) ordered by (view, frame)."""
    frames = sorted(frames, key=lambda f: (getattr(f, "view", ""), f.frame))
    write_jsonl(path, (keypoint_record(f) for f in frames))


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False, allow_nan=True) + "\n")


def read_json(path):
    try:
        with Path(path).open("r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedLineError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from None


# -- cameras


def read_cameras(path) -> list[CameraModel]:
    """Camera file: JSON array of {name, fx, fy, cx, cy, rotation (row-major 9), translation}."""
    doc = read_json(path)
    if not isinstance(doc, list) or not doc:
        raise FieldTypeError("camera file must be a non-empty JSON array", str(path), None)
    cams = []
    for i, d in enumerate(doc):
        if not isinstance(d, dict):
            raise FieldTypeError(f"camera {i} is not an object", str(path), None)
        for key in ("fx", "fy", "cx", "cy", "rotation", "translation"):
            if key not in d:
                raise MissingFieldError(f"camera {i} misses '{key}'", str(path), None)
        try:
            cams.append(CameraModel.from_json(d))
        except (StructuralError, ValidationError, TypeError, ValueError) as exc:
            raise FieldTypeError(f"camera {i}: {exc}", str(path), None) from None
    names = [c.name for c in cams]
    if len(set(names)) != len(names):
        raise InputSchemaError("camera names must be unique", str(path), None)
    return cams


def write_cameras(path, cameras) -> None:
    write_json(path, [c.to_json() for c in cameras])


def read_camera_track(path) -> list[CameraModel]:
    """Per-frame cameras: JSON Lines {frame, camera: {...}}."""
    out = {}
    for line, obj in _lines(path):
        for key in ("frame", "camera"):
            if key not in obj:
                raise MissingFieldError(f"missing field '{key}'", str(path), line)
        try:
            out[_int_field(obj, "frame", str(path), line)] = CameraModel.from_json(obj["camera"])
        except (StructuralError, ValidationError, TypeError, KeyError, ValueError) as exc:
            raise FieldTypeError(f"bad camera: {exc}", str(path), line) from None
    return [out[k] for k in sorted(out)]


def write_camera_track(path, cameras) -> None:
    write_jsonl(path, ({"frame": i, "camera": c.to_json()} for i, c in enumerate(cameras)))


# -- poses


def write_motion(path, motion: MotionSequence, topology_name: str = "wholebody53") -> None:
    """Pose file: header {topology, fps, bone_lengths} then one PoseState per line."""
    recs = [{"topology": topology_name, "fps": float(motion.fps),
             "bone_lengths": motion.shape.bone_lengths.tolist()}]
    for i, p in enumerate(motion.frames):
        rec = {"frame": i}
        for k in _POSE_FIELDS:
            rec[k] = getattr(p, k).tolist()
        recs.append(rec)
    write_jsonl(path, recs)


def read_motion(path, strict: bool = True) -> tuple[MotionSequence, str]:
    """Read a pose file; returns (motion, topology name)."""
    path_s = str(path)
    header = None
    frames = {}
    shapes = {"theta_body": (22, 3), "theta_hands": (30, 3), "theta_jaw": (3,), "psi": (50,), "r": (3,)}
    for line, obj in _lines(path):
        if header is None:
            for key in ("topology", "fps", "bone_lengths"):
                if key not in obj:
                    raise MissingFieldError(f"pose header misses '{key}'", path_s, line)
            unknown = sorted(set(obj) - {"topology", "fps", "bone_lengths"})
            if unknown and strict:
                raise UnknownFieldError(f"unknown header field(s) {unknown}", path_s, line)
            if not _is_number(obj["fps"]) or not obj["fps"] > 0:
                raise FieldTypeError("'fps' must be a positive number", path_s, line)
            if not isinstance(obj["topology"], str):
                raise FieldTypeError("'topology' must be a string", path_s, line)
            if not isinstance(obj["bone_lengths"], list):
                raise FieldTypeError("'bone_lengths' must be a list", path_s, line)
            lengths = _vector(obj, "bone_lengths", len(obj["bone_lengths"]), path_s, line)
            header = (obj["topology"], float(obj["fps"]), lengths)
            continue
        for key in ("frame", *_POSE_FIELDS):
            if key not in obj:
                raise MissingFieldError(f"missing field '{key}'", path_s, line)
        unknown = sorted(set(obj) - {"frame", *_POSE_FIELDS})
        if unknown and strict:
            raise UnknownFieldError(f"unknown field(s) {unknown}", path_s, line)
        fi = _int_field(obj, "frame", path_s, line)
        vals = {}
        for key, shp in shapes.items():
            try:
                a = np.asarray(obj[key], dtype=np.float64)
            except (TypeError, ValueError):
                raise FieldTypeError(f"'{key}' must be numeric", path_s, line) from None
            if a.shape != shp:
                raise FieldTypeError(f"'{key}' must have shape {shp}, got {a.shape}", path_s, line)
            if not np.all(np.isfinite(a)):
                raise CoordinateError(f"'{key}' contains non-finite values", path_s, line)
            vals[key] = a
        if fi in frames:
            raise InputSchemaError(f"duplicate frame {fi}", path_s, line)
        frames[fi] = PoseState(**vals)
    if header is None or not frames:
        raise InputSchemaError("pose file needs a header and at least one frame", path_s, None)
    try:
        shape = SkeletonShape(header[2])
    except (StructuralError, ValidationError) as exc:
        raise FieldTypeError(f"bad bone lengths: {exc}", path_s, 1) from None
    motion = MotionSequence(header[1], tuple(frames[k] for k in sorted(frames)), shape)
    return motion, header[0]


# -- trajectory prior, emotions, captions


def read_trajectory_prior(path):
    from .global_fit import TrajectoryPrior

    rows = {}
    for line, obj in _lines(path):
        for key in ("frame", "x", "y", "z", "yaw", "confidence"):
            if key not in obj:
                raise MissingFieldError(f"missing field '{key}'", str(path), line)
            if key != "frame" and (not _is_number(obj[key]) or not math.isfinite(obj[key])):
                raise FieldTypeError(f"'{key}' must be a finite number", str(path), line)
        c = obj["confidence"]
        if not 0.0 <= c <= 1.0:
            raise ScoreRangeError(f"confidence {c} is outside [0, 1]", str(path), line)
        rows[_int_field(obj, "frame", str(path), line)] = (obj["x"], obj["y"], obj["z"], obj["yaw"], c)
    if not rows:
        raise InputSchemaError("empty trajectory prior", str(path), None)
    a = np.array([rows[k] for k in sorted(rows)], dtype=np.float64)
    return TrajectoryPrior(a[:, :3], a[:, 3], a[:, 4])


def write_trajectory_prior(path, prior) -> None:
    write_jsonl(path, ({"frame": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
                        "yaw": float(y), "confidence": float(c)}
                       for i, (p, y, c) in enumerate(zip(prior.positions, prior.yaw, prior.confidence))))


def read_emotions(path, num_frames: int | None = None) -> list[str | None]:
    """Emotion labels {frame, label}; frames without a label get None."""
    labels = {}
    for line, obj in _lines(path):
        for key in ("frame", "label"):
            if key not in obj:
                raise MissingFieldError(f"missing field '{key}'", str(path), line)
        if not isinstance(obj["label"], str):
            raise FieldTypeError("'label' must be a string", str(path), line)
        labels[_int_field(obj, "frame", str(path), line)] = obj["label"]
    n = num_frames if num_frames is not None else (max(labels) + 1 if labels else 0)
    return [labels.get(i) for i in range(n)]


def write_captions(path, descriptions) -> None:
    write_jsonl(path, (d.to_dict() for d in descriptions))


def read_captions(path) -> list[dict]:
    return [obj for _, obj in _lines(path)]
