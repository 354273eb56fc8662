"""Run configuration: INI-style sections of ``key = value`` lines, validated against typed defaults."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace

from .align import AlignOptions
from .bow import SelectorParams
from .explore.viewpoints import ExplorationConfig
from .features import FeatureConfig
from .geometry import CameraModel
from .simworld import WorldSpec


class ConfigError(ValueError):
    pass


@dataclass
class CameraSection:
    width: int = 128
    height: int = 96
    focal: float = 64.0

    def model(self) -> CameraModel:
        return CameraModel.centered(self.width, self.height, self.focal)


@dataclass
class SelectorSection:
    tau: float = 0.03
    thr_in: float = 0.04
    t_max: float = 2.0
    max_pairs_per_frame: int = 3
    compare_to: str = "last_selected"
    fast_threshold: int = 5
    max_keypoints: int = 500
    brief_window: int = 31
    brief_tests: int = 256
    pattern_seed: int = 0
    vocab_k: int = 10
    vocab_depth: int = 3
    vocab_seed: int = 0
    vocabulary: str = ""          # existing vocabulary file; empty = train from a survey of the scene
    survey_positions: int = 4
    survey_yaws: int = 8

    def params(self) -> SelectorParams:
        return SelectorParams(self.tau, self.thr_in, self.t_max, self.max_pairs_per_frame, self.compare_to)

    def features(self) -> FeatureConfig:
        return FeatureConfig(self.fast_threshold, self.max_keypoints, self.brief_window, self.brief_tests,
                             self.pattern_seed)


@dataclass
class BackendSection:
    kind: str = "oracle"
    sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    executable: str = ""
    timeout: float = 600.0


@dataclass
class AlignSection:
    max_iters: int = 500
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    squared: bool = True
    estimate_intrinsics: bool = True
    voxel_downsample: float = 0.02

    def options(self) -> AlignOptions:
        return AlignOptions(self.max_iters, self.grad_tol, self.step_tol, self.squared)


@dataclass
class SplatSection:
    base_scale: float = 0.02
    refine_steps: int = 0


@dataclass
class PipelineConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    camera: CameraSection = field(default_factory=CameraSection)
    explore: ExplorationConfig = field(default_factory=ExplorationConfig)
    selector: SelectorSection = field(default_factory=SelectorSection)
    backend: BackendSection = field(default_factory=BackendSection)
    align: AlignSection = field(default_factory=AlignSection)
    splat: SplatSection = field(default_factory=SplatSection)


SECTIONS = [f.name for f in fields(PipelineConfig)]


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _build_section(name: str, obj, values: dict):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        updates[key] = _convert(name, key, raw, known[key])
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def parse_config(text: str, base_dir: str | None = None) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = PipelineConfig()
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        setattr(cfg, name, _build_section(name, getattr(cfg, name), dict(parser[name])))
    validate(cfg, base_dir)
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


def resolve(path: str, base_dir: str | None) -> str:
    if not path or os.path.isabs(path) or base_dir is None:
        return path
    return os.path.join(base_dir, path)


def validate(cfg: PipelineConfig, base_dir: str | None = None):
    w = cfg.world
    if len(w.dims) != 3 or min(w.dims) < 8:
        raise ConfigError("[world] dims must be three integers >= 8")
    if not 0 <= w.obstacle_density <= 0.3:
        raise ConfigError("[world] obstacle_density must be in [0, 0.3]")
    if w.voxel_size <= 0:
        raise ConfigError("[world] voxel_size must be positive")
    c = cfg.camera
    if c.width < 32 or c.height < 32 or c.focal <= 0:
        raise ConfigError("[camera] width and height must be >= 32 and focal positive")
    try:
        cfg.selector.params()
        cfg.selector.features()
    except ValueError as e:
        raise ConfigError(f"[selector] {e}") from e
    if cfg.selector.vocab_k < 2 or cfg.selector.vocab_depth < 1:
        raise ConfigError("[selector] vocab_k must be >= 2 and vocab_depth >= 1")
    if cfg.selector.vocabulary and not os.path.exists(resolve(cfg.selector.vocabulary, base_dir)):
        raise ConfigError(f"[selector] vocabulary file not found: {cfg.selector.vocabulary}")
    b = cfg.backend
    if b.kind not in ("oracle", "external"):
        raise ConfigError("[backend] kind must be 'oracle' or 'external'")
    if b.sigma < 0 or not 0 <= b.dropout <= 1:
        raise ConfigError("[backend] sigma must be >= 0 and dropout in [0, 1]")
    if b.kind == "external":
        exe = resolve(b.executable, base_dir)
        if not exe or not os.path.exists(exe):
            raise ConfigError(f"[backend] executable not found: {b.executable!r}")
    a = cfg.align
    if a.max_iters < 0 or a.voxel_downsample < 0:
        raise ConfigError("[align] max_iters and voxel_downsample must be non-negative")
    if cfg.splat.base_scale <= 0 or cfg.splat.refine_steps < 0:
        raise ConfigError("[splat] base_scale must be positive and refine_steps non-negative")


def format_config(cfg: PipelineConfig) -> str:
    """Inverse of :func:`parse_config` (every key written explicitly)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
