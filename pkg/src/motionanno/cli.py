"""Command-line entry point: ``motionanno <subcommand> ...``.

Exit codes: 0 success, 1 processing error, 2 configuration error,
3 input schema error, 4 partial failure (some sequences failed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, io
from .config import PipelineConfig, load_config
from .errors import ConfigError, InputSchemaError, MotionAnnoError

log = logging.getLogger("motionanno")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_SCHEMA, EXIT_PARTIAL = 0, 1, 2, 3, 4


def _settings(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config, seed=args.seed, strict=args.strict, require_paths=False)
    else:
        cfg = PipelineConfig(Path("."), Path("."))
        if args.seed is not None:
            cfg.seed = args.seed
        if args.strict is not None:
            cfg.strict = args.strict
    return cfg


def cmd_smooth(args) -> int:
    from .filtering import smooth_sequence

    cfg = _settings(args)
    views = io.read_keypoints2d(args.input, cfg.strict)
    out = [f for frames in views.values() for f in smooth_sequence(frames, cfg.filter)]
    io.write_keypoints(args.output, out)
    return EXIT_OK


def cmd_triangulate(args) -> int:
    from .geometry import triangulate_sequence
    from .skeleton import default_topology

    cfg = _settings(args)
    views = io.read_keypoints2d(args.keypoints, cfg.strict)
    cams = {c.name: c for c in io.read_cameras(args.cameras)}
    names = [n for n in views if n in cams]
    missing = sorted(set(views) - set(cams))
    if missing:
        log.warning("views without cameras are ignored: %s", ", ".join(missing))
    frames, rep = triangulate_sequence([views[n] for n in names], [cams[n] for n in names], default_topology(),
                                       filter_spec=cfg.filter if args.smooth_3d else None, return_report=True)
    io.write_keypoints(args.output, frames)
    if args.report:
        io.write_json(args.report, {"residual_rms_px": rep.residual_rms, "failed": rep.failed, "total": rep.total})
    return EXIT_OK


def cmd_fit_local(args) -> int:
    from dataclasses import asdict

    from .local_fit import FitTargets, fit_local
    from .pipeline import estimate_shape, initial_motion
    from .skeleton import default_topology

    cfg = _settings(args)
    topo = default_topology()
    k3d = io.read_keypoints3d(args.keypoints3d, cfg.strict)
    if args.init:
        init, _ = io.read_motion(args.init, cfg.strict)
    else:
        init = initial_motion(k3d, topo, estimate_shape(k3d, topo), args.fps or cfg.fps)
    k2d, cams = None, None
    if args.keypoints2d and args.cameras:
        views = io.read_keypoints2d(args.keypoints2d, cfg.strict)
        cam_by_name = {c.name: c for c in io.read_cameras(args.cameras)}
        names = [n for n in views if n in cam_by_name]
        k2d, cams = [views[n] for n in names], [cam_by_name[n] for n in names]
    motion, report = fit_local(FitTargets(k3d, init, k2d, cams), cfg.local_weights, topo, init.shape,
                               cfg.local_options)
    io.write_motion(args.output, motion, topo.name)
    if args.report:
        io.write_json(args.report, asdict(report))
    print(f"fit-local: {report.iterations} iterations, loss {report.initial_loss:.6g} -> {report.final_loss:.6g}")
    return EXIT_OK


def cmd_fit_global(args) -> int:
    from dataclasses import asdict

    from .global_fit import TrajectoryPrior, fit_global
    from .skeleton import default_topology

    cfg = _settings(args)
    motion, _ = io.read_motion(args.pose, cfg.strict)
    views = io.read_keypoints2d(args.keypoints2d, cfg.strict)
    cams = io.read_cameras(args.cameras)
    view = args.view or next(iter(views))
    if view not in views:
        raise InputSchemaError(f"view {view!r} not found", args.keypoints2d)
    cam = next((c for c in cams if c.name == view), cams[0])
    prior = io.read_trajectory_prior(args.prior) if args.prior else TrajectoryPrior.from_motion(motion)
    motion, cameras, report = fit_global(motion, views[view], cam, prior, cfg.global_weights, default_topology(),
                                         cfg.global_options)
    io.write_motion(args.output, motion)
    if args.cameras_out:
        io.write_camera_track(args.cameras_out, cameras)
    if args.report:
        io.write_json(args.report, asdict(report))
    for w in report.warnings:
        log.warning("%s", w)
    print(f"fit-global: {report.iterations} iterations, loss {report.initial_loss:.6g} -> {report.final_loss:.6g}")
    return EXIT_OK


def cmd_caption(args) -> int:
    from .captioner import caption_sequence

    cfg = _settings(args)
    if bool(args.pose) == bool(args.keypoints3d):
        raise ConfigError("caption needs exactly one of --pose or --keypoints3d")
    source = io.read_motion(args.pose, cfg.strict)[0] if args.pose else io.read_keypoints3d(args.keypoints3d,
                                                                                              cfg.strict)
    n = len(source)
    emotions = io.read_emotions(args.emotions, n) if args.emotions else None
    stride = args.stride or cfg.captioner.stride
    descs = caption_sequence(source, emotions, stride, cfg.seed)
    io.write_captions(args.output, descs)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import jerk_rms, mpjpe, temporal_std
    from .skeleton import default_topology, sequence_joints

    cfg = _settings(args)
    topo = default_topology()
    pred, _ = io.read_motion(args.pred, cfg.strict)
    gt, _ = io.read_motion(args.gt, cfg.strict)
    P, G = sequence_joints(topo, pred), sequence_joints(topo, gt)
    report = {
        "mpjpe_mm": mpjpe(P, G),
        "pa_mpjpe_mm": mpjpe(P, G, aligned=True),
        "jerk_rms": jerk_rms(P, pred.fps) if len(pred) >= 4 else None,
        "temporal_std": {p: temporal_std(P, p, topo) for p in ("body", "hands", "face")},
    }
    rows = [("MPJPE (mm)", report["mpjpe_mm"]), ("PA-MPJPE (mm)", report["pa_mpjpe_mm"]),
            ("jerk RMS (m/s^3)", report["jerk_rms"])]
    rows += [(f"temporal std {k} (m)", v) for k, v in report["temporal_std"].items()]
    width = max(len(r[0]) for r in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {'n/a' if value is None else f'{value:.4f}'}")
    if args.output:
        io.write_json(args.output, report)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    if not args.config:
        raise ConfigError("pipeline needs --config")
    cfg = load_config(args.config, seed=args.seed, workers=args.workers, strict=args.strict)
    status, results = run_pipeline(cfg)
    for r in results:
        print(f"{r.id}: {r.status}" + (f" ({r.error})" if r.error else ""))
    return status


def cmd_review(args) -> int:
    from .review import export_review_manifest, set_verdict

    if args.review_cmd == "export":
        thresholds = None
        ground = 0.0
        if args.config:
            cfg = load_config(args.config, require_paths=False)
            thresholds = cfg.review
            ground = cfg.local_options.ground_height
        manifest = export_review_manifest(args.results, thresholds, ground_height=ground, output=args.output)
        for row in manifest["sequences"]:
            raised = [k for k, v in row["flags"].items() if v]
            print(f"{row['id']}: {row['verdict']}; flags: {', '.join(raised) or 'none'}"
                  + (f"; gaps: {len(row['gaps'])}" if row["gaps"] else ""))
        return EXIT_OK
    set_verdict(args.manifest, args.sequence, args.verdict, args.reason)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--strict", action=argparse.BooleanOptionalAction, default=None,
                        help="reject unknown fields in input files (--no-strict keeps them)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="motionanno", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("smooth", parents=[common], help="adaptive Savitzky-Golay smoothing of 2D keypoints")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("triangulate", parents=[common], help="multi-view triangulation")
    s.add_argument("--keypoints", required=True, help="2D keypoints JSONL (views named like the cameras)")
    s.add_argument("--cameras", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--report")
    s.add_argument("--smooth-3d", action="store_true", help="also smooth the triangulated trajectories")
    s.set_defaults(func=cmd_triangulate)

    s = sub.add_parser("fit-local", parents=[common], help="fit skeleton rotations to 3D (and 2D) keypoints")
    s.add_argument("--keypoints3d", required=True)
    s.add_argument("--init", help="initial pose file")
    s.add_argument("--keypoints2d")
    s.add_argument("--cameras")
    s.add_argument("--fps", type=float)
    s.add_argument("--output", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_fit_local)

    s = sub.add_parser("fit-global", parents=[common], help="refine root trajectory and camera")
    s.add_argument("--pose", required=True)
    s.add_argument("--keypoints2d", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--view")
    s.add_argument("--prior")
    s.add_argument("--output", required=True)
    s.add_argument("--cameras-out")
    s.add_argument("--report")
    s.set_defaults(func=cmd_fit_global)

    s = sub.add_parser("caption", parents=[common], help="frame-level pose descriptions")
    s.add_argument("--pose")
    s.add_argument("--keypoints3d")
    s.add_argument("--emotions")
    s.add_argument("--stride", type=int)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("evaluate", parents=[common], help="joint error metrics against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common], help="run all enabled stages over a sequence directory")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("review", help="review manifest export and verdicts")
    rsub = s.add_subparsers(dest="review_cmd", required=True)
    e = rsub.add_parser("export", parents=[common])
    e.add_argument("results", help="pipeline output directory")
    e.add_argument("--output")
    e.set_defaults(func=cmd_review)
    v = rsub.add_parser("set", parents=[common])
    v.add_argument("manifest")
    v.add_argument("sequence")
    v.add_argument("verdict", choices=["accepted", "rejected"])
    v.add_argument("--reason", default="")
    v.set_defaults(func=cmd_review)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputSchemaError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (MotionAnnoError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
