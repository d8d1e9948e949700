"""File-based annotation pipeline over a directory of sequences.

Each subdirectory of the input directory is one sequence. Recognised input
files (all optional, stages skip when their inputs are missing)::

    keypoints2d.jsonl        2D keypoints, one or more views
    cameras.json             camera array (>= 2 cameras selects multi-view mode)
    keypoints3d.jsonl        single-view 3D keypoints (ingested as given)
    init_pose.jsonl          initial pose estimate (pose file)
    trajectory_prior.jsonl   root trajectory prior for the global fit
    emotions.jsonl           per-frame emotion labels
    gt_pose.jsonl            ground-truth pose for evaluation

Stages always run in the order smooth -> triangulate (multi-view) ->
fit_local -> fit_global (single-view) -> caption -> evaluate, and write
their products to ``<output>/<sequence id>/``.
"""

from __future__ import annotations

import hashlib
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .captioner import aggregate_and_render, body_posecodes, hand_posecodes, hands_from_joints
from .config import PipelineConfig
from .errors import InputSchemaError, MotionAnnoError, UnderdeterminedError
from .filtering import smooth_sequence
from .geometry import bone_length_targets, triangulate_sequence
from .global_fit import TrajectoryPrior, fit_global
from .keypoints import stack_frames
from .local_fit import FOOT_JOINTS, CollisionProxy, FitTargets, fit_local, pen_term
from .metrics import jerk_rms, mpjpe, temporal_std
from .rotations import exp_so3, log_so3
from .skeleton import MotionSequence, SkeletonShape, SkeletonTopology, default_topology, fk_batch

log = logging.getLogger(__name__)

FILES = {
    "smoothed": "smoothed2d.jsonl",
    "keypoints3d": "keypoints3d.jsonl",
    "triangulation": "triangulation_report.json",
    "pose_local": "pose_local.jsonl",
    "local_report": "fit_local_report.json",
    "pose_global": "pose_global.jsonl",
    "cameras_global": "cameras_global.jsonl",
    "global_report": "fit_global_report.json",
    "captions": "captions.jsonl",
    "metrics": "metrics.json",
}
SUMMARY_FILE = "run_summary.json"


@dataclass
class SequenceResult:
    id: str
    status: str = "ok"  # ok | failed | skipped
    stages: list = field(default_factory=list)
    error: str = ""

    def to_dict(self) -> dict:
        return {"id": self.id, "status": self.status, "stages": self.stages, "error": self.error}


def sequence_seed(seed: int, seq_id: str) -> int:
    """Per-sequence seed derived from (global seed, sequence id)."""
    h = hashlib.sha256(f"{seed}:{seq_id}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def discover_sequences(input_dir: Path) -> list[Path]:
    return sorted((p for p in Path(input_dir).iterdir() if p.is_dir()), key=lambda p: p.name)


def estimate_shape(frames3d, topology: SkeletonTopology) -> SkeletonShape:
    """Bone lengths from per-sequence medians of observed bones; defaults elsewhere."""
    pts, sc = stack_frames(frames3d)
    targets = bone_length_targets(pts, sc > 0, topology)
    lengths = topology.default_shape().full().copy()
    km = topology.keypoint_map
    parents = topology.parents
    for j in range(1, topology.num_joints):
        if km[j] >= 0 and km[parents[j]] >= 0 and targets.get(int(km[j]), 0.0) > 0:
            lengths[j] = targets[int(km[j])]
    return SkeletonShape(lengths[1:])


def _kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R minimising sum |R src_i - dst_i|^2."""
    U, _, Vt = np.linalg.svd(dst.T @ src)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def _swing(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking direction a onto direction b."""
    axis = np.cross(a, b)
    s, c = np.linalg.norm(axis), float(a @ b)
    if s < 1e-12:
        return np.eye(3)
    return exp_so3(axis / s * np.arctan2(s, c))


def initial_motion(frames3d, topology: SkeletonTopology, shape: SkeletonShape, fps: float) -> MotionSequence:
    """Initial pose sequence from 3D keypoints by per-joint aiming.

    The root is placed by a rigid fit of the hip and shoulder keypoints.
    Every other joint is rotated so that its bones point at the observed
    child keypoints: a rigid fit when two or more children are observed,
    the minimal swing for one (twist is left at rest for the fit to settle).
    """
    names = ["l_hip", "r_hip", "l_shoulder", "r_shoulder"]
    idx = [topology.index(n) for n in names]
    km = topology.keypoint_map
    rest = topology.rest_joints(shape)
    src = rest[idx] - rest[0]
    offsets = topology.rest_directions * shape.full()[:, None]
    aim = [[c for c in topology.children[j] if km[c] >= 0] for j in range(topology.num_joints)]
    F, J = len(frames3d), topology.num_joints
    theta = np.zeros((F, J, 3))
    r = np.zeros((F, 3))
    for f, fr in enumerate(frames3d):
        if np.any(fr.scores[km[idx]] <= 0):
            if f > 0:
                theta[f], r[f] = theta[f - 1], r[f - 1]
            continue
        dst = fr.points[km[idx]]
        mx, my = src.mean(axis=0), dst.mean(axis=0)
        R = _kabsch(src - mx, dst - my)
        theta[f, 0] = log_so3(R)
        r[f] = my - R @ mx
        G = np.empty((J, 3, 3))
        pos = np.empty((J, 3))
        G[0], pos[0] = R, r[f]
        for j in range(1, J):
            p = topology.parents[j]
            pos[j] = pos[p] + G[p] @ offsets[j]
            kids = [c for c in aim[j] if fr.scores[km[c]] > 0]
            Gj = G[p]
            if len(kids) == 1:
                t = fr.points[km[kids[0]]] - pos[j]
                if np.linalg.norm(t) > 1e-9:
                    d = Gj @ offsets[kids[0]]
                    Gj = _swing(d / np.linalg.norm(d), t / np.linalg.norm(t)) @ Gj
            elif len(kids) >= 2:
                a = np.stack([G[p] @ offsets[c] for c in kids])
                b = np.stack([fr.points[km[c]] - pos[j] for c in kids])
                if np.linalg.matrix_rank(a, 1e-9) >= 2:
                    Gj = _kabsch(a, b) @ Gj
            G[j] = Gj
            theta[f, j] = log_so3(G[p].T @ Gj)
    return MotionSequence.from_arrays(fps, shape, theta, r)


def pose_diagnostics(motion: MotionSequence, topology: SkeletonTopology, ground_height: float = 0.0,
                     proxy: CollisionProxy | None = None) -> dict:
    """Plausibility diagnostics used by evaluation and review."""
    proxy = proxy or CollisionProxy.from_topology(topology)
    pos, _ = fk_batch(topology, motion.shape, motion.rotations(), motion.translations())
    feet = [topology.index(n) for n in FOOT_JOINTS]
    depth = float(np.max(ground_height - pos[:, feet, 2]))
    return {
        "penetration_total": pen_term(pos, proxy, topology)[0],
        "ground_penetration_max": max(depth, 0.0),
        "jerk_rms": jerk_rms(pos, motion.fps) if len(motion) >= 4 else 0.0,
    }


class SequenceRunner:
    def __init__(self, seq_dir: Path, config: PipelineConfig, topology: SkeletonTopology):
        self.dir = Path(seq_dir)
        self.id = self.dir.name
        self.cfg = config
        self.topo = topology
        self.out = Path(config.output_dir) / self.id
        self.seed = sequence_seed(config.seed, self.id)
        self.result = SequenceResult(self.id)

    def _in(self, name):
        p = self.dir / name
        return p if p.exists() else None

    def run(self) -> SequenceResult:
        cfg, st, topo = self.cfg, self.cfg.stages, self.topo
        strict = cfg.strict
        done = self.result.stages

        views = {}
        if self._in("keypoints2d.jsonl"):
            views = io.read_keypoints2d(self.dir / "keypoints2d.jsonl", strict)
        cameras = io.read_cameras(self.dir / "cameras.json") if self._in("cameras.json") else []
        cam_by_name = {c.name: c for c in cameras}
        multiview = len(cameras) >= 2 and len(views) >= 2
        fps = cfg.fps
        init = None
        if self._in("init_pose.jsonl"):
            init, _ = io.read_motion(self.dir / "init_pose.jsonl", strict)
            fps = init.fps

        # smooth
        if st["smooth"] and views:
            views = {v: smooth_sequence(frames, cfg.filter) for v, frames in views.items()}
            io.write_keypoints(self.out / FILES["smoothed"], [f for v in views.values() for f in v])
            done.append("smooth")

        # triangulate (multi-view) or ingest 3D (single-view)
        k3d = None
        if multiview:
            if st["triangulate"]:
                names = [n for n in views if n in cam_by_name]
                if len(names) < 2:
                    raise UnderdeterminedError("fewer than 2 views have matching cameras")
                k3d, rep = triangulate_sequence([views[n] for n in names], [cam_by_name[n] for n in names],
                                                topo, shape_prior=init.shape if init else None,
                                                filter_spec=None, return_report=True)
                io.write_keypoints(self.out / FILES["keypoints3d"], k3d)
                io.write_json(self.out / FILES["triangulation"],
                              {"residual_rms_px": rep.residual_rms, "failed": rep.failed, "total": rep.total})
                done.append("triangulate")
        elif self._in("keypoints3d.jsonl"):
            k3d = io.read_keypoints3d(self.dir / "keypoints3d.jsonl", strict)

        motion = None
        if st["fit_local"] and k3d is not None:
            shape = init.shape if init is not None else estimate_shape(k3d, topo)
            start = init if init is not None else initial_motion(k3d, topo, shape, fps)
            if len(start) != len(k3d):
                raise InputSchemaError(f"init pose has {len(start)} frames, keypoints have {len(k3d)}",
                                       str(self.dir / "init_pose.jsonl"))
            k2d_views, k2d_cams = None, None
            if views and cameras:
                names = [n for n in views if n in cam_by_name and len(views[n]) == len(k3d)]
                if names:
                    k2d_views = [views[n] for n in names]
                    k2d_cams = [cam_by_name[n] for n in names]
            targets = FitTargets(k3d, start, k2d_views, k2d_cams)
            motion, report = fit_local(targets, cfg.local_weights, topo, shape, cfg.local_options)
            io.write_motion(self.out / FILES["pose_local"], motion, topo.name)
            io.write_json(self.out / FILES["local_report"], _report_dict(report))
            done.append("fit_local")

        if st["fit_global"] and not multiview and motion is not None and views and cameras:
            view_name = next((n for n in views if n in cam_by_name), None)
            if view_name is not None:
                k2d = views[view_name]
                if self._in("trajectory_prior.jsonl"):
                    prior = io.read_trajectory_prior(self.dir / "trajectory_prior.jsonl")
                else:
                    log.info("%s: no trajectory prior, using the local-fit trajectory", self.id)
                    prior = TrajectoryPrior.from_motion(motion)
                motion, cams, rep = fit_global(motion, k2d, cam_by_name[view_name], prior, cfg.global_weights,
                                               topo, cfg.global_options)
                io.write_motion(self.out / FILES["pose_global"], motion, topo.name)
                io.write_camera_track(self.out / FILES["cameras_global"], cams)
                io.write_json(self.out / FILES["global_report"], _report_dict(rep))
                done.append("fit_global")

        if st["caption"] and (motion is not None or k3d is not None):
            self._caption(motion, k3d)
            done.append("caption")

        if st["evaluate"] and motion is not None:
            self._evaluate(motion)
            done.append("evaluate")
        return self.result

    def _caption(self, motion, k3d):
        from .captioner import caption_frame

        n = len(motion) if motion is not None else len(k3d)
        emotions = io.read_emotions(self.dir / "emotions.jsonl", n) if self._in("emotions.jsonl") else [None] * n
        cs = self.cfg.captioner
        if motion is not None:
            joints, _ = fk_batch(self.topo, motion.shape, motion.rotations(), motion.translations())
        descs = []
        for i in range(0, n, cs.stride):
            if motion is not None:
                body = body_posecodes(joints[i], self.topo)
                hands = hand_posecodes(hands_from_joints(joints[i], self.topo))
                d = aggregate_and_render(body, hands, emotions[i], self.seed, i, cs.eps_angle, cs.eps_ratio)
            else:
                d = caption_frame(k3d[i], self.topo, emotions[i], self.seed, i, cs.eps_angle, cs.eps_ratio)
            descs.append(d)
        io.write_captions(self.out / FILES["captions"], descs)

    def _evaluate(self, motion):
        topo = self.topo
        out = pose_diagnostics(motion, topo, self.cfg.local_options.ground_height)
        pos, _ = fk_batch(topo, motion.shape, motion.rotations(), motion.translations())
        out["temporal_std"] = {p: temporal_std(pos, p, topo) for p in ("body", "hands", "face")}
        tri = self.out / FILES["triangulation"]
        if tri.exists():
            out["reprojection_px"] = io.read_json(tri)["residual_rms_px"]
        if self._in("gt_pose.jsonl"):
            gt, _ = io.read_motion(self.dir / "gt_pose.jsonl", self.cfg.strict)
            gpos, _ = fk_batch(topo, gt.shape, gt.rotations(), gt.translations())
            if gpos.shape != pos.shape:
                raise InputSchemaError("ground truth length differs from the fitted sequence",
                                       str(self.dir / "gt_pose.jsonl"))
            out["mpjpe_mm"] = mpjpe(pos, gpos)
            out["pa_mpjpe_mm"] = mpjpe(pos, gpos, aligned=True)
        io.write_json(self.out / FILES["metrics"], out)


def _report_dict(report) -> dict:
    from dataclasses import asdict

    return asdict(report)


def run_sequence(seq_dir: Path, config: PipelineConfig, topology: SkeletonTopology | None = None) -> SequenceResult:
    """Run all enabled stages on one sequence, isolating failures."""
    runner = SequenceRunner(seq_dir, config, topology or default_topology())
    try:
        return runner.run()
    except (MotionAnnoError, OSError) as exc:
        log.error("sequence %s failed: %s", runner.id, exc)
        log.debug("%s", traceback.format_exc())
        runner.result.status = "failed"
        runner.result.error = f"{type(exc).__name__}: {exc}"
        return runner.result


def run_pipeline(config: PipelineConfig, topology: SkeletonTopology | None = None) -> tuple[int, list[SequenceResult]]:
    """Process every sequence; returns (exit status, per-sequence results).

    Exit status is 0 when every sequence succeeded and 4 when some failed.
    With every stage disabled nothing is written.
    """
    topology = topology or default_topology()
    seqs = discover_sequences(config.input_dir)
    if not any(config.stages.values()):
        log.info("all stages disabled; validated %d sequence directories", len(seqs))
        return 0, [SequenceResult(p.name, "skipped") for p in seqs]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(lambda p: run_sequence(p, config, topology), seqs))
    io.write_json(Path(config.output_dir) / SUMMARY_FILE, {"sequences": [r.to_dict() for r in results]})
    failed = [r.id for r in results if r.status == "failed"]
    if failed:
        log.warning("%d of %d sequences failed: %s", len(failed), len(results), ", ".join(failed))
        return 4, results
    return 0, results
