"""Pipeline configuration (a single JSON document).

Unknown keys are rejected so that typos fail loudly before any work starts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, MotionAnnoError
from .filtering import FilterSpec
from .global_fit import GlobalLossWeights, GlobalOptions
from .local_fit import TERMS, FitOptions, LossWeights

STAGES = ("smooth", "triangulate", "fit_local", "fit_global", "caption", "evaluate")


@dataclass(frozen=True)
class CaptionSettings:
    stride: int = 1
    eps_angle: float = 2.0
    eps_ratio: float = 0.02

    def __post_init__(self):
        if not isinstance(self.stride, int) or self.stride < 1:
            raise ConfigError(f"captioner.stride must be a positive integer, got {self.stride!r}")
        if self.eps_angle < 0 or self.eps_ratio < 0:
            raise ConfigError("captioner margins must be non-negative")


@dataclass(frozen=True)
class ReviewThresholds:
    max_reprojection_px: float = 5.0  # mean triangulation / fit residual
    max_penetration: float = 1e-3  # summed capsule overlap penalty over the sequence (m^2)
    max_ground_penetration: float = 0.02  # deepest foot joint below ground (m)
    max_jerk: float = 500.0  # RMS joint jerk (m/s^3)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigError(f"review.{k} must be non-negative")


@dataclass
class PipelineConfig:
    input_dir: Path
    output_dir: Path
    stages: dict = field(default_factory=lambda: {s: True for s in STAGES})
    filter: FilterSpec = field(default_factory=FilterSpec)
    local_weights: LossWeights = field(default_factory=LossWeights)
    local_options: FitOptions = field(default_factory=FitOptions)
    global_weights: GlobalLossWeights = field(default_factory=GlobalLossWeights)
    global_options: GlobalOptions = field(default_factory=GlobalOptions)
    captioner: CaptionSettings = field(default_factory=CaptionSettings)
    review: ReviewThresholds = field(default_factory=ReviewThresholds)
    fps: float = 30.0
    seed: int = 0
    workers: int = 1
    strict: bool = True

    @classmethod
    def from_dict(cls, doc: dict, base: Path | None = None, require_paths: bool = True) -> PipelineConfig:
        """Build and validate; relative paths resolve against ``base``.

        Single-stage commands pass ``require_paths=False`` and only use the
        stage settings.
        """
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"paths", "stages", "filter", "local_weights", "local_options", "global_weights",
                 "global_options", "captioner", "review", "fps", "seed", "workers", "strict"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        base = Path(base or ".")
        paths = doc.get("paths")
        if paths is None and not require_paths:
            paths = {"input": ".", "output": "."}
        if not isinstance(paths, dict) or "input" not in paths or "output" not in paths:
            raise ConfigError("config needs paths.input and paths.output")
        if set(paths) - {"input", "output"}:
            raise ConfigError(f"unknown path keys {sorted(set(paths) - {'input', 'output'})}")
        input_dir = (base / paths["input"]).resolve()
        output_dir = (base / paths["output"]).resolve()
        if not input_dir.is_dir():
            raise ConfigError(f"input directory does not exist: {input_dir}")

        stages = {s: True for s in STAGES}
        st = doc.get("stages", {})
        if not isinstance(st, dict) or set(st) - set(STAGES):
            raise ConfigError(f"stages must map a subset of {list(STAGES)} to booleans")
        for k, v in st.items():
            if not isinstance(v, bool):
                raise ConfigError(f"stages.{k} must be a boolean")
            stages[k] = v

        def section(name, factory):
            d = doc.get(name, {})
            if not isinstance(d, dict):
                raise ConfigError(f"{name} must be an object")
            try:
                return factory(d)
            except ConfigError:
                raise
            except (MotionAnnoError, TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None

        def local_options(d):
            d = dict(d)
            if "terms" in d:
                bad = set(d["terms"]) - set(TERMS)
                if bad:
                    raise ConfigError(f"local_options.terms has unknown terms {sorted(bad)}")
                d["terms"] = tuple(d["terms"])
            return FitOptions(**d)

        seed = doc.get("seed", 0)
        workers = doc.get("workers", 1)
        strict = doc.get("strict", True)
        fps = doc.get("fps", 30.0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
            raise ConfigError("workers must be a positive integer")
        if not isinstance(strict, bool):
            raise ConfigError("strict must be a boolean")
        if not isinstance(fps, (int, float)) or isinstance(fps, bool) or not fps > 0:
            raise ConfigError("fps must be a positive number")
        return cls(
            input_dir=input_dir,
            output_dir=output_dir,
            stages=stages,
            filter=section("filter", FilterSpec.from_dict),
            local_weights=section("local_weights", LossWeights.from_dict),
            local_options=section("local_options", local_options),
            global_weights=section("global_weights", GlobalLossWeights.from_dict),
            global_options=section("global_options", GlobalOptions.from_dict),
            captioner=section("captioner", lambda d: CaptionSettings(**d)),
            review=section("review", lambda d: ReviewThresholds(**{k: float(v) for k, v in d.items()})),
            fps=float(fps),
            seed=seed,
            workers=workers,
            strict=strict,
        )


def load_config(path, seed: int | None = None, workers: int | None = None,
                strict: bool | None = None, require_paths: bool = True) -> PipelineConfig:
    """Read a config file, applying command-line overrides."""
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if isinstance(doc, dict):
        doc = dict(doc)
        if seed is not None:
            doc["seed"] = seed
        if workers is not None:
            doc["workers"] = workers
        if strict is not None:
            doc["strict"] = strict
    return PipelineConfig.from_dict(doc, base=p.parent, require_paths=require_paths)
