"""Run configuration: nested dataclasses, JSON round-trip, canonical hashing.

A run config is the single source of truth for every command.  Unknown keys
are rejected so ablation grids cannot silently misspell a switch, and the
canonical hash over the fully materialized config is stamped into every
output file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONDITION_TYPES = ("none", "per_action", "shared_only", "specific_only", "suc")
UNIFY_STRATEGIES = ("fsa", "fsa_mean", "addition", "concat")
PROMPT_TOKEN_TYPES = ("none", "learnable", "video", "foreground")
PROMPT_INJECTIONS = ("feature_concat", "extra_token")
FG_LOSSES = ("focal", "bce")

DEFAULT_PROMPT_TEMPLATE = (
    "You are given the following action categories ⟨Actions⟩: Please "
    "summarize the shared characteristics across these action categories, "
    "from the perspective of motion patterns and body dynamics."
)

# Used when suc.fixture_path is null: a deterministic stand-in for a stored
# language-model response.
DEFAULT_SHARED_SUMMARY = (
    "These action categories share sustained, goal-directed whole-body "
    "movement: repeated limb swings or strides build momentum, the torso "
    "stabilizes balance through weight shifts, and each action concentrates "
    "energy into a brief, distinctive burst of motion before returning to "
    "rest."
)


@dataclass
class DataConfig:
    num_categories: int = 20
    videos_per_split: int = 48
    segments_per_video: int = 48
    feature_dim: int = 16
    actions_per_video: tuple[int, int] = (2, 4)
    action_len: tuple[int, int] = (4, 6)
    fg_noise: float = 0.1
    bg_noise: float = 0.1
    # Background unit directions are drawn inside a fixed random subspace of
    # this dimension (shared by train and test, like real scene statistics),
    # and prototypes inside its orthogonal complement; null disables the
    # structure and makes backgrounds isotropic.
    bg_subspace_dim: int | None = 6
    # Each video carries one random prototype-space "context" direction mixed
    # into its background segments: scene content that resembles action
    # semantics and misleads text-video matching.
    distractor_scale: float = 0.5
    # Text embeddings are the prototypes seen through a fixed per-category
    # distortion of this magnitude (the cross-encoder semantic gap).
    text_gap: float = 0.5
    split_ratio: float = 0.5
    seed: int = 0


@dataclass
class SucConfig:
    condition_type: str = "suc"
    unify_strategy: str = "fsa"
    mode: str = "fixture"            # fixture | live
    fixture_path: str | None = None  # null -> built-in summary text
    endpoint: str | None = None
    timeout_ms: int = 10000
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    fsa_layers: int = 2
    fsa_heads: int = 2
    shared_noise: float = 0.05
    condition_from_train_labels: bool = False  # reuse the training-label condition at eval


@dataclass
class DiffusionConfig:
    steps: int = 8
    gamma_min: float = 0.01
    sigma: float = 0.05
    shape: str = "linear"
    paper_literal_forward: bool = False


@dataclass
class ModelConfig:
    d_model: int = 16
    blocks: int = 2
    heads: int = 2
    hidden: int = 32
    backbone_layers: int = 3
    backbone_kernel: int = 3


@dataclass
class FpaConfig:
    enabled: bool = True
    prompt_token_type: str = "foreground"
    prompt_injection: str = "extra_token"
    fg_loss: str = "focal"
    w_df: float = 1.0
    w_cls: float = 1.0
    w_fg: float = 1.0
    w_loc: float = 1.0


@dataclass
class DetectConfig:
    sigma_nms: float = 0.5
    score_floor: float = 0.001
    fg_threshold: float = 0.1
    iou_thresholds: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch: int = 2
    lr: float = 2e-3
    warmup_epochs: int = 2
    seeds: tuple[int, ...] = (0, 1, 2)
    # Multiplicative shrink applied to denoiser-block and aggregator weights
    # after each step; keeps the learned reverse map close to its linear,
    # class-agnostic core so it survives the jump to unseen categories.
    denoiser_weight_decay: float = 1e-3
    # Pull similarity-critical projections back toward their initialization
    # (per step); limits drift away from the raw matching geometry.
    anchor_decay: float = 2e-3
    teacher_force_prompt: bool = False   # use the pooled foreground target as prompt
    backprop_prompt: bool = False        # 1-step differentiable prompt approximation


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    suc: SucConfig = field(default_factory=SucConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fpa: FpaConfig = field(default_factory=FpaConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def default_config() -> RunConfig:
    return RunConfig()


def _build_section(cls, payload: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    sections = {}
    classes = {
        "data": DataConfig, "suc": SucConfig, "diffusion": DiffusionConfig,
        "model": ModelConfig, "fpa": FpaConfig, "detect": DetectConfig,
        "train": TrainConfig,
    }
    for key, value in payload.items():
        if key not in classes:
            raise ConfigError(f"unknown config section '{key}'")
        if not isinstance(value, dict):
            raise ConfigError(f"config section '{key}' must be an object")
        sections[key] = _build_section(classes[key], value, key)
    cfg = RunConfig(**{k: sections.get(k, cls()) for k, cls in classes.items()})
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(_canonical(config_to_dict(cfg)), sort_keys=True,
                      separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a new config with dotted-key overrides applied, e.g.
    {"suc.condition_type": "none"}."""
    payload = config_to_dict(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key '{dotted}' must be 'section.field'")
        section, name = parts
        if section not in payload or name not in payload[section]:
            raise ConfigError(f"unknown override key '{dotted}'")
        payload[section][name] = value
    return config_from_dict(payload)


def validate_config(cfg: RunConfig) -> None:
    d, s, df, m, f, dt, t = (cfg.data, cfg.suc, cfg.diffusion, cfg.model,
                             cfg.fpa, cfg.detect, cfg.train)
    checks = [
        (d.num_categories >= 2, "data.num_categories must be >= 2"),
        (d.videos_per_split >= 1, "data.videos_per_split must be >= 1"),
        (d.segments_per_video >= 1, "data.segments_per_video must be >= 1"),
        (d.feature_dim >= 1, "data.feature_dim must be >= 1"),
        (0.0 < d.split_ratio < 1.0, "data.split_ratio must lie in (0, 1)"),
        (d.fg_noise >= 0 and d.bg_noise >= 0, "data noise scales must be >= 0"),
        (1 <= d.actions_per_video[0] <= d.actions_per_video[1],
         "data.actions_per_video must be an increasing range starting at >= 1"),
        (d.bg_subspace_dim is None or 1 <= d.bg_subspace_dim < d.feature_dim,
         "data.bg_subspace_dim must be null or in [1, feature_dim)"),
        (d.distractor_scale >= 0 and d.text_gap >= 0,
         "data.distractor_scale and data.text_gap must be >= 0"),
        (1 <= d.action_len[0] <= d.action_len[1],
         "data.action_len must be an increasing range starting at >= 1"),
        (s.condition_type in CONDITION_TYPES,
         f"suc.condition_type must be one of {CONDITION_TYPES}"),
        (s.unify_strategy in UNIFY_STRATEGIES,
         f"suc.unify_strategy must be one of {UNIFY_STRATEGIES}"),
        (s.mode in ("fixture", "live"), "suc.mode must be 'fixture' or 'live'"),
        (s.fsa_layers >= 1 and s.fsa_heads >= 1, "suc.fsa sizes must be >= 1"),
        ("⟨Actions⟩" in s.prompt_template or "<Actions>" in s.prompt_template,
         "suc.prompt_template must contain the ⟨Actions⟩ placeholder"),
        (df.steps >= 0, "diffusion.steps must be >= 0 (0 disables diffusion)"),
        (df.steps == 0 or 0.0 < df.gamma_min < 1.0,
         "diffusion.gamma_min must lie in (0, 1)"),
        (df.sigma >= 0.0, "diffusion.sigma must be >= 0"),
        (df.shape in ("linear", "geometric"),
         "diffusion.shape must be 'linear' or 'geometric'"),
        (m.d_model >= 1 and m.hidden >= 1, "model dims must be >= 1"),
        (m.d_model % m.heads == 0, "model.d_model must be divisible by model.heads"),
        (m.blocks >= 1 and m.backbone_layers >= 0, "model depths must be valid"),
        (m.backbone_kernel % 2 == 1, "model.backbone_kernel must be odd"),
        (m.d_model % cfg.suc.fsa_heads == 0,
         "model.d_model must be divisible by suc.fsa_heads"),
        (f.prompt_token_type in PROMPT_TOKEN_TYPES,
         f"fpa.prompt_token_type must be one of {PROMPT_TOKEN_TYPES}"),
        (f.prompt_injection in PROMPT_INJECTIONS,
         f"fpa.prompt_injection must be one of {PROMPT_INJECTIONS}"),
        (f.fg_loss in FG_LOSSES, f"fpa.fg_loss must be one of {FG_LOSSES}"),
        (all(w >= 0 for w in (f.w_df, f.w_cls, f.w_fg, f.w_loc)),
         "fpa loss weights must be >= 0"),
        (dt.sigma_nms > 0, "detect.sigma_nms must be > 0"),
        (0 <= dt.score_floor < 1, "detect.score_floor must lie in [0, 1)"),
        (0 <= dt.fg_threshold <= 1, "detect.fg_threshold must lie in [0, 1]"),
        (len(dt.iou_thresholds) >= 1, "detect.iou_thresholds must be nonempty"),
        (t.epochs >= 0 and t.batch >= 1, "train.epochs/batch must be valid"),
        (t.lr > 0 and t.warmup_epochs >= 0, "train.lr/warmup must be valid"),
        (len(t.seeds) >= 1, "train.seeds must be nonempty"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
