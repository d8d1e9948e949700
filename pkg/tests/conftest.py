from __future__ import annotations

import time

import pytest

from motionanno.config import load_config
from motionanno.pipeline import run_pipeline
from motionanno.review import export_review_manifest

from synth import write_pipeline_fixture


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    """The pipeline fixture processed three times: twice with 1 worker, once with 8.

    Returns a dict with the config path, the output directories, exit
    statuses, the first run's results and review manifest, and the total
    wall time.
    """
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_pipeline_fixture(root)
    start = time.perf_counter()
    outs, statuses, results = [], [], None
    for i, workers in enumerate((1, 1, 8)):
        cfg = load_config(cfg_path, workers=workers)
        cfg.output_dir = root / f"out{i}"
        status, res = run_pipeline(cfg)
        statuses.append(status)
        outs.append(cfg.output_dir)
        results = results or res
    manifest = export_review_manifest(outs[0], cfg.review, output=root / "manifest.json")
    return {"config": cfg_path, "outs": outs, "statuses": statuses, "results": results, "manifest": manifest,
            "seconds": time.perf_counter() - start}


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
