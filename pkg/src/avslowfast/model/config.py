"""Architecture configuration and the per-stage specification table."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

PATHWAYS = ("slow", "fast", "audio")
FUSION_KINDS = ("AtoFS", "AtoFtoS", "AVNonlocal")
FUSION_STAGES = ("res2", "res3", "res4", "pool5")
AVS_STAGES = ("res3", "res4", "res5")
RES_STAGES = ("res2", "res3", "res4", "res5")

# ResNet-50 reference widths of the Slow pathway (Table 1 instantiation)
SLOW_STEM = 64
SLOW_INNER = (64, 128, 256, 512)
SLOW_OUT = (256, 512, 1024, 2048)
# temporal extent of the first 1x1 conv of each bottleneck
SLOW_TEMPORAL = (1, 1, 3, 3)
FAST_TEMPORAL = (3, 3, 3, 3)
# audio res2/res3 factorize their centre filter into a frequency and a time filter
AUDIO_FACTORIZED = (True, True, False, False)

FUSION_KERNEL = 5
FUSION_CHANNEL_RATIO = 2
MIN_CHANNELS = 4
# embedding width of the audiovisual non-local block, as a divisor of the visual width
NONLOCAL_REDUCTION = 8


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ModelConfig:
    T: int = 4
    tau: int = 16
    alpha_f: int = 8
    alpha_a: int = 32
    beta_f: float = 1 / 8
    beta_a: float = 1 / 2
    S: int = 224
    test_crop: int = 256
    F_mel: int = 80
    T_a: int = 128
    fusion_kind: str = "AtoFS"
    fusion_stages: tuple[str, ...] = ("res3", "res4", "pool5")
    avs_stages: tuple[str, ...] = ("res3", "res4", "res5")
    width_mult: float = 1.0
    num_classes: int = 400
    pathways: tuple[str, ...] = PATHWAYS
    depth: tuple[int, ...] = (3, 4, 6, 3)
    audio_stage_strides: tuple[int, ...] = (1, 2, 2, 2)

    def __post_init__(self):
        for name in ("fusion_stages", "avs_stages", "pathways", "depth", "audio_stage_strides"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = (value,) if value else ()
            object.__setattr__(self, name, tuple(value))

    # derived quantities
    @property
    def has(self) -> dict[str, bool]:
        return {p: p in self.pathways for p in PATHWAYS}

    @property
    def fast_frames(self) -> int:
        return self.T * self.alpha_f

    @property
    def raw_frames(self) -> int:
        return self.T * self.tau

    @property
    def audio_in_head(self) -> bool:
        return "audio" in self.pathways and "pool5" in self.fusion_stages

    @property
    def lateral_stages(self) -> tuple[str, ...]:
        return tuple(s for s in self.fusion_stages if s != "pool5")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def validate(self) -> "ModelConfig":
        has = self.has
        for p in self.pathways:
            if p not in PATHWAYS:
                raise ConfigError("pathways", f"unknown pathway {p!r}")
        if not self.pathways:
            raise ConfigError("pathways", "at least one pathway is required")
        if has["fast"] and not has["slow"]:
            raise ConfigError("pathways", "the Fast pathway needs the Slow pathway to fuse into")
        for key in ("T", "tau", "alpha_f", "alpha_a", "S", "test_crop", "F_mel", "T_a", "num_classes"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(key, f"must be a positive integer, got {getattr(self, key)}")
        if not self.alpha_f > 1:
            raise ConfigError("alpha_f", f"speed ratio must exceed 1, got {self.alpha_f}")
        if self.alpha_a < self.alpha_f:
            raise ConfigError("alpha_a", f"must be >= alpha_f ({self.alpha_f}), got {self.alpha_a}")
        if not self.beta_f < 1 or self.beta_f <= 0:
            raise ConfigError("beta_f", f"channel ratio must lie in (0, 1), got {self.beta_f}")
        if not 0 < self.beta_a <= 1:
            raise ConfigError("beta_a", f"channel ratio must lie in (0, 1], got {self.beta_a}")
        if self.tau % self.alpha_f:
            raise ConfigError("tau", f"tau ({self.tau}) must be divisible by alpha_f ({self.alpha_f})")
        if has["audio"] and self.T_a % self.fast_frames:
            raise ConfigError(
                "T_a", f"audio frames {self.T_a} must be divisible by the Fast length {self.fast_frames}"
            )
        if self.width_mult <= 0:
            raise ConfigError("width_mult", "must be positive")
        if len(self.depth) != 4 or any(int(d) < 1 for d in self.depth):
            raise ConfigError("depth", f"need four positive block counts, got {self.depth}")
        if len(self.audio_stage_strides) != 4 or any(s not in (1, 2) for s in self.audio_stage_strides):
            raise ConfigError("audio_stage_strides", f"need four strides in {{1, 2}}, got {self.audio_stage_strides}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError("fusion_kind", f"expected one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        for s in self.fusion_stages:
            if s not in FUSION_STAGES:
                raise ConfigError("fusion_stages", f"{s!r} is not a fusion point (before any audio feature "
                                  f"exists or unknown); choose from {FUSION_STAGES}")
        for s in self.avs_stages:
            if s not in AVS_STAGES:
                raise ConfigError("avs_stages", f"{s!r} is not one of {AVS_STAGES}")
        if not has["audio"] and (self.fusion_stages or self.avs_stages):
            key = "fusion_stages" if self.fusion_stages else "avs_stages"
            raise ConfigError(key, "audio pathway disabled but audio fusion / synchronization requested")
        if self.lateral_stages and not has["slow"]:
            raise ConfigError("fusion_stages", "lateral audio fusion needs a visual pathway")
        if self.fusion_kind == "AtoFtoS" and self.lateral_stages and not has["fast"]:
            raise ConfigError("fusion_kind", "A->F->S fusion needs the Fast pathway")
        if self.avs_stages and not has["slow"]:
            raise ConfigError("avs_stages", "synchronization heads need a visual pathway")
        if not has["slow"] and not self.audio_in_head:
            raise ConfigError("fusion_stages", "audio-only models must route audio to the head (pool5)")
        if has["audio"]:
            time, freq = self.T_a, self.F_mel
            for i, stage in enumerate(RES_STAGES):
                s = self.audio_stage_strides[i]
                time, freq = -(-time // s), -(-freq // s)
                target = self.fast_frames if self.fusion_kind == "AtoFtoS" else self.T
                if stage in self.lateral_stages and self.fusion_kind != "AVNonlocal" and time % target:
                    raise ConfigError(
                        "fusion_stages",
                        f"audio length {time} at {stage} is not a multiple of the visual length {target}",
                    )
        return self


def channels(cfg: ModelConfig, reference: int, ratio: float = 1.0) -> int:
    """Scaled width: round-half-up of reference * ratio * width_mult, floored at 4."""
    return max(MIN_CHANNELS, round_half_up(reference * ratio * cfg.width_mult))


@dataclass(frozen=True)
class PathwayStage:
    """One pathway's part of a stage.

    ``kernel`` is the stem kernel (a tuple of tuples for stacked convolutions)
    or, for residual stages, the kernel of the first bottleneck conv. ``stride``
    is applied by the stem or by the centre filter of the first block.
    """

    out: int
    kernel: tuple = ()
    stride: tuple = ()
    inner: int = 0
    blocks: int = 0
    factorized: bool = False


@dataclass(frozen=True)
class StageSpec:
    name: str
    slow: PathwayStage | None = None
    fast: PathwayStage | None = None
    audio: PathwayStage | None = None
    pooled: bool = False

    def get(self, pathway: str) -> PathwayStage | None:
        return getattr(self, pathway)


def stage_table(cfg: ModelConfig) -> list[StageSpec]:
    """Stem, pool and residual stages for each enabled pathway."""
    has = cfg.has
    bf, ba = cfg.beta_f, cfg.beta_a
    table = [
        StageSpec(
            "conv1",
            slow=PathwayStage(channels(cfg, SLOW_STEM), (1, 7, 7), (1, 2, 2)) if has["slow"] else None,
            fast=PathwayStage(channels(cfg, SLOW_STEM, bf), (5, 7, 7), (1, 2, 2)) if has["fast"] else None,
            audio=PathwayStage(channels(cfg, SLOW_STEM, ba), ((9, 1), (1, 9)), (1, 1)) if has["audio"] else None,
        ),
        StageSpec(
            "pool1",
            slow=PathwayStage(channels(cfg, SLOW_STEM), (1, 3, 3), (1, 2, 2)) if has["slow"] else None,
            fast=PathwayStage(channels(cfg, SLOW_STEM, bf), (1, 3, 3), (1, 2, 2)) if has["fast"] else None,
            pooled=True,
        ),
    ]
    for i, name in enumerate(RES_STAGES):
        spatial = 1 if i == 0 else 2
        a = cfg.audio_stage_strides[i]
        table.append(
            StageSpec(
                name,
                slow=PathwayStage(channels(cfg, SLOW_OUT[i]), (SLOW_TEMPORAL[i], 1, 1), (1, spatial, spatial),
                                  channels(cfg, SLOW_INNER[i]), cfg.depth[i]) if has["slow"] else None,
                fast=PathwayStage(channels(cfg, SLOW_OUT[i], bf), (FAST_TEMPORAL[i], 1, 1), (1, spatial, spatial),
                                  channels(cfg, SLOW_INNER[i], bf), cfg.depth[i]) if has["fast"] else None,
                audio=PathwayStage(channels(cfg, SLOW_OUT[i], ba), (1, 1), (a, a),
                                   channels(cfg, SLOW_INNER[i], ba), cfg.depth[i],
                                   AUDIO_FACTORIZED[i]) if has["audio"] else None,
            )
        )
    return table


def nonlocal_width(visual_channels: int) -> int:
    return max(MIN_CHANNELS, visual_channels // NONLOCAL_REDUCTION)


def fast_fusion_width(cfg: ModelConfig, stage: str) -> int:
    """Channels the Fast->Slow lateral adds to Slow after ``stage``."""
    spec = {s.name: s for s in stage_table(cfg)}[stage]
    return FUSION_CHANNEL_RATIO * spec.fast.out if cfg.has["fast"] else 0


# presets --------------------------------------------------------------------

PRESETS: dict[str, ModelConfig] = {
    "avslowfast-r50-4x16": ModelConfig(),
    "slowfast-r50-4x16": ModelConfig(pathways=("slow", "fast"), fusion_stages=(), avs_stages=()),
    "slow-only": ModelConfig(pathways=("slow",), fusion_stages=(), avs_stages=()),
    "audio-only": ModelConfig(pathways=("audio",), fusion_stages=("pool5",), avs_stages=()),
    "desk-default": ModelConfig(
        T=2, tau=4, alpha_f=4, alpha_a=8, S=32, test_crop=32, F_mel=16, T_a=32,
        width_mult=1 / 8, num_classes=4,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def desk_config(**changes) -> ModelConfig:
    return PRESETS["desk-default"].replace(**changes).validate()


def fraction(text: str | float) -> float:
    """Parse ``"1/8"`` style ratios as well as plain numbers."""
    if isinstance(text, (int, float)):
        return float(text)
    if "/" in text:
        num, den = text.split("/")
        return float(num) / float(den)
    return float(text)


__all__ = [
    "ConfigError", "ModelConfig", "PathwayStage", "StageSpec", "stage_table", "channels",
    "PRESETS", "preset", "desk_config", "fraction", "round_half_up", "fast_fusion_width", "nonlocal_width",
    "FUSION_KERNEL", "FUSION_CHANNEL_RATIO", "RES_STAGES", "FUSION_STAGES", "AVS_STAGES",
]
