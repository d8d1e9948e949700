"""Human-verification manifest for pipeline results.

One row per sequence with summary metrics, threshold flags and a verdict
slot. Verdicts move only from pending to accepted or rejected, and every
transition is appended to the manifest's log.
"""

from __future__ import annotations

import logging
from dataclasses import asdict
from pathlib import Path

from . import io
from .config import ReviewThresholds
from .errors import InputSchemaError, ValidationError
from .pipeline import FILES, SUMMARY_FILE, pose_diagnostics
from .skeleton import SkeletonTopology, default_topology

log = logging.getLogger(__name__)

MANIFEST_FILE = "review_manifest.json"
VERDICTS = ("pending", "accepted", "rejected")


def _sequence_row(seq_dir: Path, thr: ReviewThresholds, topology: SkeletonTopology, ground_height: float) -> dict:
    metrics = {"reprojection_px": None, "penetration_total": None, "ground_penetration_max": None,
               "jerk_rms": None, "local_final_loss": None, "global_final_loss": None}
    gaps = []
    tri = seq_dir / FILES["triangulation"]
    glob_rep = seq_dir / FILES["global_report"]
    loc_rep = seq_dir / FILES["local_report"]
    if tri.exists():
        metrics["reprojection_px"] = io.read_json(tri)["residual_rms_px"]
    if loc_rep.exists():
        metrics["local_final_loss"] = io.read_json(loc_rep)["final_loss"]
    if glob_rep.exists():
        rep = io.read_json(glob_rep)
        metrics["global_final_loss"] = rep["final_loss"]
        if metrics["reprojection_px"] is None and rep["history"] and "2d" in rep["history"][-1]:
            metrics["reprojection_px"] = rep["history"][-1]["2d"]
    if metrics["reprojection_px"] is None:
        gaps.append("no reprojection residual (triangulation or global fit output missing)")

    pose_path = next((seq_dir / FILES[k] for k in ("pose_global", "pose_local") if (seq_dir / FILES[k]).exists()),
                     None)
    if pose_path is None:
        gaps.append("no fitted pose output")
    else:
        try:
            motion, _ = io.read_motion(pose_path)
            metrics.update(pose_diagnostics(motion, topology, ground_height))
        except (InputSchemaError, ValidationError) as exc:
            gaps.append(f"unreadable pose output: {exc}")

    def over(key, limit):
        v = metrics[key]
        return v is not None and v > limit

    flags = {
        "reprojection": over("reprojection_px", thr.max_reprojection_px),
        "penetration": over("penetration_total", thr.max_penetration),
        "physics": over("ground_penetration_max", thr.max_ground_penetration),
        "jerk": over("jerk_rms", thr.max_jerk),
    }
    return {"id": seq_dir.name, "metrics": metrics, "flags": flags, "gaps": gaps, "verdict": "pending",
            "reason": ""}


def export_review_manifest(results_dir, thresholds: ReviewThresholds | None = None,
                           topology: SkeletonTopology | None = None, ground_height: float = 0.0,
                           output: str | Path | None = None) -> dict:
    """Build the manifest for every sequence directory under ``results_dir``.

    Verdicts and the transition log of an existing manifest are preserved.
    """
    results_dir = Path(results_dir)
    thresholds = thresholds or ReviewThresholds()
    topology = topology or default_topology()
    path = Path(output) if output else results_dir / MANIFEST_FILE
    previous = io.read_json(path) if path.exists() else {"sequences": [], "log": []}
    old_rows = {row["id"]: row for row in previous.get("sequences", [])}
    # sequences that failed before writing anything are known only from the run summary
    failures = {}
    if (results_dir / SUMMARY_FILE).exists():
        for s in io.read_json(results_dir / SUMMARY_FILE)["sequences"]:
            if s["status"] == "failed":
                failures[s["id"]] = s["error"]
    ids = {p.name for p in results_dir.iterdir() if p.is_dir()} | set(failures)
    rows = []
    for seq_id in sorted(ids):
        row = _sequence_row(results_dir / seq_id, thresholds, topology, ground_height)
        if seq_id in failures:
            row["gaps"].insert(0, f"sequence failed: {failures[seq_id]}")
        if row["id"] in old_rows:
            row["verdict"] = old_rows[row["id"]]["verdict"]
            row["reason"] = old_rows[row["id"]]["reason"]
        rows.append(row)
    manifest = {"thresholds": asdict(thresholds), "sequences": rows, "log": list(previous.get("log", []))}
    io.write_json(path, manifest)
    return manifest


def set_verdict(manifest_path, sequence_id: str, verdict: str, reason: str = "") -> dict:
    """Move a pending sequence to accepted/rejected and log the transition."""
    if verdict not in ("accepted", "rejected"):
        raise ValidationError(f"verdict must be 'accepted' or 'rejected', got {verdict!r}")
    manifest = io.read_json(manifest_path)
    row = next((r for r in manifest["sequences"] if r["id"] == sequence_id), None)
    if row is None:
        raise ValidationError(f"unknown sequence {sequence_id!r}")
    if row["verdict"] != "pending":
        raise ValidationError(f"sequence {sequence_id!r} already {row['verdict']}; only pending verdicts can change")
    manifest["log"].append({"index": len(manifest["log"]), "sequence": sequence_id, "from": row["verdict"],
                            "to": verdict, "reason": reason})
    row["verdict"] = verdict
    row["reason"] = reason
    io.write_json(manifest_path, manifest)
    return manifest
