"""Run configuration: a flat key = value text format with typed validation.

Every knob of every stage lives here so that a (config, seed) pair fully
determines a run. Unknown keys, type mismatches and out-of-range values are
rejected at load time with a ConfigError.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # global
    seed: int = 0

    # synthetic dataset
    synth_height: int = 32
    synth_width: int = 32
    synth_classes: int = 8
    synth_train_per_class: int = 6
    synth_eval_per_class: int = 4
    synth_duration_s: float = 0.8
    synth_fps: float = 10.0
    synth_substeps: int = 4
    synth_threshold: float = 0.2

    # accumulation
    percentile: int = 99
    bins_per_frame: int = 1

    # augmentation (alignment stage)
    aug_polarity_swap_prob: float = 0.5
    aug_hflip_prob: float = 0.5
    aug_crop_scale_min: float = 0.25
    aug_crop_scale_max: float = 1.0
    aug_upscale_prob: float = 0.1
    aug_upscale_factor: float = 2.0

    # alignment
    embed_dim: int = 32
    lambda_cos: float = 1.0
    lambda_nce: float = 1.0
    mu: float = 1.0
    tau: float = 0.07
    head_hidden_dim: int = 64
    teacher_gain: float = 4.0
    align_steps: int = 300
    align_batch: int = 16
    align_lr: float = 1e-2
    align_warmup: int = 20
    align_weight_decay: float = 0.0

    # autoregressive pretraining
    layers: int = 2
    heads: int = 2
    d_ff: int = 64
    window: int = 64
    max_len: int = 128
    pretrain_steps: int = 400
    pretrain_lr: float = 5e-4
    pretrain_warmup: int = 100
    pretrain_weight_decay: float = 1e-5

    # task heads
    patch_size: int = 4
    seg_classes: int = 2
    head_train_frames: int = 16
    seg_steps: int = 200
    seg_lr: float = 1e-2
    depth_steps: int = 200
    depth_lr: float = 1e-2
    d_min: float = 1.0
    d_max: float = 16.0
    silog_lambda: float = 0.85
    w_silog: float = 1.0
    w_ms_grad: float = 0.25
    depth_scales: tuple = (1, 2, 4)

    # rollout
    rollout_context: int = 32
    rollout_horizon: int = 64

    def validate(self) -> None:
        c = self
        checks = [
            (c.synth_classes >= 2, "synth_classes must be >= 2"),
            (c.synth_classes <= 8, "synth_classes must be <= 8 (pattern count)"),
            (c.synth_train_per_class >= 1, "synth_train_per_class must be >= 1"),
            (c.synth_eval_per_class >= 1, "synth_eval_per_class must be >= 1"),
            (c.synth_height >= 8 and c.synth_width >= 8, "scene must be >= 8x8"),
            (c.synth_duration_s > 0, "synth_duration_s must be positive"),
            (c.synth_fps > 0, "synth_fps must be positive"),
            (c.synth_substeps >= 1, "synth_substeps must be >= 1"),
            (c.synth_threshold > 0, "synth_threshold must be positive"),
            (0 < c.percentile <= 100, "percentile must lie in (0, 100]"),
            (c.bins_per_frame >= 1, "bins_per_frame must be >= 1"),
            (0 <= c.aug_polarity_swap_prob <= 1, "aug_polarity_swap_prob in [0,1]"),
            (0 <= c.aug_hflip_prob <= 1, "aug_hflip_prob in [0,1]"),
            (0 <= c.aug_upscale_prob <= 1, "aug_upscale_prob in [0,1]"),
            (
                0 < c.aug_crop_scale_min <= c.aug_crop_scale_max <= 1.0,
                "crop scale range must satisfy 0 < min <= max <= 1",
            ),
            (c.aug_upscale_factor >= 1.0, "aug_upscale_factor must be >= 1"),
            (c.embed_dim >= 2, "embed_dim must be >= 2"),
            (c.lambda_cos > 0, "lambda_cos must be strictly positive"),
            (c.lambda_nce > 0, "lambda_nce must be strictly positive"),
            (c.mu > 0, "mu must be strictly positive"),
            (c.tau > 0, "tau must be strictly positive"),
            (c.head_hidden_dim >= 1, "head_hidden_dim must be >= 1"),
            (c.teacher_gain > 0, "teacher_gain must be positive"),
            (c.align_steps >= 1, "align_steps must be >= 1"),
            (c.align_batch >= 2, "align_batch must be >= 2"),
            (c.align_lr >= 0 and c.pretrain_lr >= 0, "learning rates must be >= 0"),
            (c.embed_dim % c.heads == 0, "embed_dim must be divisible by heads"),
            (c.layers >= 1 and c.heads >= 1 and c.d_ff >= 1, "transformer dims >= 1"),
            (c.window >= 2, "window must be >= 2"),
            (c.window <= c.max_len, "window must not exceed max_len"),
            (c.pretrain_steps >= 1, "pretrain_steps must be >= 1"),
            (
                c.synth_height % c.patch_size == 0
                and c.synth_width % c.patch_size == 0,
                "patch_size must divide the scene size",
            ),
            (c.seg_classes >= 2, "seg_classes must be >= 2"),
            (c.head_train_frames >= 1, "head_train_frames must be >= 1"),
            (0 < c.d_min < c.d_max, "need 0 < d_min < d_max"),
            (0 <= c.silog_lambda <= 1, "silog_lambda must lie in [0, 1]"),
            (c.w_silog >= 0 and c.w_ms_grad >= 0, "depth weights must be >= 0"),
            (len(c.depth_scales) >= 1, "depth_scales must be non-empty"),
            (
                all(int(s) >= 1 for s in c.depth_scales),
                "depth_scales must be positive",
            ),
            (c.rollout_context >= 1, "rollout_context must be >= 1"),
            (c.rollout_context <= c.window, "rollout_context must fit the window"),
            (c.rollout_horizon >= 0, "rollout_horizon must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                rendered = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                rendered = repr(v)
            else:
                rendered = str(v)
            lines.append(f"{f.name} = {rendered}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _coerce(name: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse flat key = value text into a validated RunConfig."""
    field_types = {f.name: f.type for f in fields(RunConfig)}
    kind_of = {
        "int": int,
        "float": float,
        "str": str,
        "bool": bool,
        "tuple": tuple,
    }
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, kind_of[field_types[key]])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, seed_override: int | None = None) -> RunConfig:
    """Load a config file (or defaults when path is None), optionally
    overriding the seed."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text())
    if seed_override is not None:
        cfg.seed = seed_override
    cfg.validate()
    return cfg
