"""Slow, Fast and Audio pathways with their lateral connections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import functional as F
from ..nn import BatchNorm, Conv, Init, Linear, Module
from ..tensor import Tensor
from .config import (
    FUSION_CHANNEL_RATIO,
    FUSION_KERNEL,
    RES_STAGES,
    ModelConfig,
    PathwayStage,
    nonlocal_width,
    stage_table,
)


class VisualBottleneck(Module):
    def __init__(self, c_in, inner, c_out, temporal, stride, *, init, name):
        self.a = Conv(c_in, inner, (temporal, 1, 1), init=init, name=f"{name}.a")
        self.a_bn = BatchNorm(inner, name=f"{name}.a_bn")
        self.b = Conv(inner, inner, (1, 3, 3), (1, stride, stride), init=init, name=f"{name}.b")
        self.b_bn = BatchNorm(inner, name=f"{name}.b_bn")
        self.c = Conv(inner, c_out, (1, 1, 1), init=init, name=f"{name}.c")
        self.c_bn = BatchNorm(c_out, name=f"{name}.c_bn", zero_init=True)
        self.shortcut = None
        if c_in != c_out or stride != 1:
            self.shortcut = Conv(c_in, c_out, (1, 1, 1), (1, stride, stride), init=init, name=f"{name}.sc")
            self.shortcut_bn = BatchNorm(c_out, name=f"{name}.sc_bn")

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.a_bn(self.a(x)))
        y = F.relu(self.b_bn(self.b(y)))
        y = self.c_bn(self.c(y))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(F.add(y, skip))


class AudioBottleneck(Module):
    """Frequency x time bottleneck; ``factorized`` splits the centre 3x3 into 3x1 then 1x3."""

    def __init__(self, c_in, inner, c_out, factorized, stride, *, init, name):
        self.a = Conv(c_in, inner, (1, 1), init=init, name=f"{name}.a")
        self.a_bn = BatchNorm(inner, name=f"{name}.a_bn")
        if factorized:
            self.b = [
                Conv(inner, inner, (3, 1), (stride, 1), init=init, name=f"{name}.b_freq"),
                Conv(inner, inner, (1, 3), (1, stride), init=init, name=f"{name}.b_time"),
            ]
        else:
            self.b = [Conv(inner, inner, (3, 3), (stride, stride), init=init, name=f"{name}.b")]
        self.b_bn = BatchNorm(inner, name=f"{name}.b_bn")
        self.c = Conv(inner, c_out, (1, 1), init=init, name=f"{name}.c")
        self.c_bn = BatchNorm(c_out, name=f"{name}.c_bn", zero_init=True)
        self.shortcut = None
        if c_in != c_out or stride != 1:
            self.shortcut = Conv(c_in, c_out, (1, 1), (stride, stride), init=init, name=f"{name}.sc")
            self.shortcut_bn = BatchNorm(c_out, name=f"{name}.sc_bn")

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.a_bn(self.a(x)))
        for conv in self.b:
            y = conv(y)
        y = F.relu(self.b_bn(y))
        y = self.c_bn(self.c(y))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(F.add(y, skip))


class ResStage(Module):
    def __init__(self, c_in: int, spec: PathwayStage, audio: bool, *, init, name):
        self.blocks = []
        for i in range(spec.blocks):
            stride = spec.stride[-1] if i == 0 else 1
            ci = c_in if i == 0 else spec.out
            if audio:
                block = AudioBottleneck(ci, spec.inner, spec.out, spec.factorized, stride,
                                        init=init, name=f"{name}.{i}")
            else:
                block = VisualBottleneck(ci, spec.inner, spec.out, spec.kernel[0], stride,
                                         init=init, name=f"{name}.{i}")
            self.blocks.append(block)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class VisualStem(Module):
    def __init__(self, spec: PathwayStage, *, init, name):
        self.conv = Conv(3, spec.out, spec.kernel, spec.stride, init=init, name=f"{name}.conv")
        self.bn = BatchNorm(spec.out, name=f"{name}.bn")

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn(self.conv(x)))
        return F.max_pool(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))


class AudioStem(Module):
    """Stacked 9x1 (frequency) and 1x9 (time) convolutions, no pooling."""

    def __init__(self, spec: PathwayStage, *, init, name):
        (kf, _), (_, kt) = spec.kernel
        self.conv_freq = Conv(1, spec.out, (kf, 1), init=init, name=f"{name}.conv_freq")
        self.conv_time = Conv(spec.out, spec.out, (1, kt), init=init, name=f"{name}.conv_time")
        self.bn = BatchNorm(spec.out, name=f"{name}.bn")

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv_time(self.conv_freq(x))))


class FastToSlow(Module):
    """Time-strided convolution of Fast features concatenated onto Slow channels."""

    def __init__(self, c_fast: int, alpha: int, *, init, name):
        self.alpha = alpha
        self.conv = Conv(c_fast, FUSION_CHANNEL_RATIO * c_fast, (FUSION_KERNEL, 1, 1), (alpha, 1, 1),
                         (FUSION_KERNEL // 2, 0, 0), init=init, name=f"{name}.conv")
        self.bn = BatchNorm(FUSION_CHANNEL_RATIO * c_fast, name=f"{name}.bn")

    def forward(self, fast: Tensor, slow: Tensor) -> Tensor:
        if fast.shape[2] != slow.shape[2] * self.alpha:
            raise ValueError(
                f"Fast length {fast.shape[2]} is not alpha_f={self.alpha} times the Slow length {slow.shape[2]}"
            )
        return F.concat([slow, F.relu(self.bn(self.conv(fast)))], axis=1)


def fuse_slowfast(module: FastToSlow, fast_feats: Tensor, slow_feats: Tensor) -> Tensor:
    return module(fast_feats, slow_feats)


class AudioToVisual(Module):
    """Audio summand for a visual stream of length ``target_len``.

    Frequency is averaged away, a bias-free time-strided convolution resamples
    the audio to ``target_len`` while projecting channels, then BN. The result
    has shape [N, C_visual, T, 1, 1] and broadcasts over space.
    """

    def __init__(self, c_audio: int, c_visual: int, stride: int, *, init, name):
        self.stride = stride
        self.conv = Conv(c_audio, c_visual, (1, FUSION_KERNEL), (1, stride), (0, FUSION_KERNEL // 2),
                         init=init, name=f"{name}.conv")
        self.bn = BatchNorm(c_visual, name=f"{name}.bn")

    def forward(self, audio: Tensor, target_len: int) -> Tensor:
        t_audio = audio.shape[3]
        if t_audio % target_len or t_audio // target_len != self.stride:
            raise ValueError(
                f"audio length {t_audio} is not {self.stride} x the visual length {target_len}"
            )
        pooled = F.mean(audio, axis=2, keepdims=True)          # [N, Ca, 1, Ta]
        y = self.bn(self.conv(pooled))                          # [N, Cv, 1, T]
        n, c, _, t = y.shape
        return F.reshape(y, (n, c, t, 1, 1))


class AVNonlocal(Module):
    """Pooled audio query attending over every T x H x W visual position."""

    def __init__(self, c_audio: int, c_visual: int, *, init, name):
        ci = nonlocal_width(c_visual)
        self.query = Linear(c_audio, ci, init=init, name=f"{name}.query", bias=False)
        self.key = Conv(c_visual, ci, (1, 1, 1), init=init, name=f"{name}.key")
        self.value = Conv(c_visual, ci, (1, 1, 1), init=init, name=f"{name}.value")
        self.out = Linear(ci, c_visual, init=init, name=f"{name}.out", bias=False)
        self.bn = BatchNorm(c_visual, name=f"{name}.bn")
        self.last_attention: np.ndarray | None = None

    def attend(self, audio: Tensor, visual: Tensor) -> tuple[Tensor, Tensor]:
        """Return (attended feature [N, Ci], attention weights [N, 1, P])."""
        if visual.shape[1] != self.key.weight.shape[1]:
            raise ValueError(
                f"visual channels {visual.shape[1]} do not match the projection input {self.key.weight.shape[1]}"
            )
        if audio.shape[1] != self.query.weight.shape[1]:
            raise ValueError(
                f"audio channels {audio.shape[1]} do not match the query input {self.query.weight.shape[1]}"
            )
        n = visual.shape[0]
        q = self.query(F.global_avg_pool(audio))                 # [N, Ci]
        ci = q.shape[1]
        k = F.reshape(self.key(visual), (n, ci, -1))             # [N, Ci, P]
        v = F.reshape(self.value(visual), (n, ci, -1))
        affinity = F.matmul(F.reshape(q, (n, 1, ci)), k)         # [N, 1, P]
        weights = F.softmax(affinity, axis=-1)
        attended = F.matmul(weights, F.transpose(v, (0, 2, 1)))  # [N, 1, Ci]
        return F.reshape(attended, (n, ci)), weights

    def forward(self, audio: Tensor, visual: Tensor) -> Tensor:
        attended, weights = self.attend(audio, visual)
        self.last_attention = weights.data
        z = self.bn(self.out(attended))
        return F.reshape(z, (*z.shape, 1, 1, 1))


class SyncHead(Module):
    """In-sync logit from pooled visual and audio features of one stage.

    The pooled concat is batch-normalized before the perceptron: global
    pooling leaves large per-channel offsets and little variation across
    clips, and the head does not train on the raw values.
    """

    def __init__(self, c_visual: int, c_audio: int, *, init, name):
        self.bn = BatchNorm(c_visual + c_audio, name=f"{name}.bn")
        self.hidden = Linear(c_visual + c_audio, c_audio, init=init, name=f"{name}.hidden")
        self.out = Linear(c_audio, 1, init=init, name=f"{name}.out", std=0.01)

    def forward(self, visual: list[Tensor], audio: Tensor) -> Tensor:
        pooled = [F.global_avg_pool(v) for v in visual] + [F.global_avg_pool(audio)]
        h = F.relu(self.hidden(self.bn(F.concat(pooled, axis=1))))
        return F.reshape(self.out(h), (-1,))


class ClassifierHead(Module):
    """Global average pool, concat, dropout, fc.

    The fc is stored as a visual block (with bias) and an audio block (no
    bias, unless audio is the only input); this equals one fc over the
    concatenation and lets a fully dropped Audio pathway leave the visual
    logits untouched bit for bit.
    """

    def __init__(self, d_visual: int, d_audio: int, num_classes: int, *, init, name):
        self.fc = Linear(d_visual, num_classes, init=init, name=f"{name}.fc", std=0.01) if d_visual else None
        self.fc_audio = None
        if d_audio:
            self.fc_audio = Linear(d_audio, num_classes, init=init, name=f"{name}.fc_audio", std=0.01,
                                   bias=not d_visual)

    def forward(self, visual: Tensor | None, audio: Tensor | None, dropout_rate: float, rngs) -> Tensor:
        rng_v, rng_a = rngs
        logits = None
        if visual is not None:
            logits = self.fc(F.dropout(visual, dropout_rate, rng_v, self.training))
        if audio is not None and self.fc_audio is not None:
            a = self.fc_audio(F.dropout(audio, dropout_rate, rng_a, self.training))
            logits = a if logits is None else F.add(logits, a)
        return logits


@dataclass
class ForwardOutput:
    logits: Tensor
    features: dict[tuple[str, str], Tensor] = field(default_factory=dict)
    pooled: Tensor | None = None
    audio_active: bool = True


class AVSlowFast(Module):
    """Three-pathway network; input ports slow [N,3,T,S,S], fast [N,3,T*alpha_f,S,S], audio [N,1,F,T_a]."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        init = Init(seed)
        has = cfg.has
        table = {s.name: s for s in stage_table(cfg)}
        self.stems, self.stages, self.fuse_fs, self.fuse_av, self.avs_heads = {}, {}, {}, {}, {}
        width: dict[str, int] = {}
        for p in ("slow", "fast"):
            if has[p]:
                self.stems[p] = VisualStem(table["conv1"].get(p), init=init, name=f"{p}.conv1")
                width[p] = table["conv1"].get(p).out
        if has["audio"]:
            self.stems["audio"] = AudioStem(table["conv1"].audio, init=init, name="audio.conv1")
            width["audio"] = table["conv1"].audio.out
        time_audio = cfg.T_a
        if has["fast"]:
            self.fuse_fs["pool1"] = FastToSlow(width["fast"], cfg.alpha_f, init=init, name="fuse_fs.pool1")
            width["slow"] += FUSION_CHANNEL_RATIO * width["fast"]
        for i, stage in enumerate(RES_STAGES):
            spec = table[stage]
            for p in ("slow", "fast", "audio"):
                if has[p]:
                    self.stages[f"{p}.{stage}"] = ResStage(width[p], spec.get(p), p == "audio",
                                                           init=init, name=f"{p}.{stage}")
                    width[p] = spec.get(p).out
            if has["audio"]:
                time_audio = -(-time_audio // cfg.audio_stage_strides[i])
            if stage in cfg.avs_stages:
                c_visual = spec.slow.out + (spec.fast.out if has["fast"] else 0)
                self.avs_heads[stage] = SyncHead(c_visual, spec.audio.out, init=init, name=f"avs.{stage}")
            if stage == "res5":
                break
            lateral = stage in cfg.lateral_stages
            if lateral and cfg.fusion_kind == "AtoFtoS":
                self.fuse_av[stage] = AudioToVisual(width["audio"], width["fast"], time_audio // cfg.fast_frames,
                                                    init=init, name=f"fuse_av.{stage}")
            if has["fast"]:
                self.fuse_fs[stage] = FastToSlow(width["fast"], cfg.alpha_f, init=init, name=f"fuse_fs.{stage}")
                width["slow"] += FUSION_CHANNEL_RATIO * width["fast"]
            if lateral and cfg.fusion_kind == "AtoFS":
                self.fuse_av[stage] = AudioToVisual(width["audio"], width["slow"], time_audio // cfg.T,
                                                    init=init, name=f"fuse_av.{stage}")
            if lateral and cfg.fusion_kind == "AVNonlocal":
                self.fuse_av[stage] = AVNonlocal(width["audio"], width["slow"], init=init, name=f"fuse_av.{stage}")
        d_visual = width.get("slow", 0) + width.get("fast", 0)
        d_audio = width["audio"] if cfg.audio_in_head else 0
        self.head = ClassifierHead(d_visual, d_audio, cfg.num_classes, init=init, name="head")
        self.feature_dim = d_visual + d_audio

    def _audio_summand(self, stage: str, audio: Tensor, visual: Tensor, mask) -> Tensor:
        module = self.fuse_av[stage]
        if isinstance(module, AVNonlocal):
            summand = module(audio, visual)
        else:
            summand = module(audio, visual.shape[2])
        return summand if mask is None else F.mul(summand, mask)

    def forward(
        self,
        slow: Tensor | None,
        fast: Tensor | None,
        audio: Tensor | None,
        *,
        keep: np.ndarray | None = None,
        dropout_rate: float = 0.0,
        rngs=(None, None),
    ) -> ForwardOutput:
        """Run the network.

        ``keep`` is the per-clip DropPathway decision (True keeps audio). A
        clip with ``keep`` False receives zeros for every audio contribution;
        if no clip keeps audio the Audio pathway is not evaluated at all.
        """
        cfg, has = self.cfg, self.cfg.has
        n = next(x.shape[0] for x in (slow, fast, audio) if x is not None)
        audio_on = has["audio"] and (keep is None or bool(np.any(keep)))
        mask_shape = {5: (n, 1, 1, 1, 1), 2: (n, 1)}
        masks = None
        if audio_on and keep is not None and not np.all(keep):
            kept = np.asarray(keep, dtype=np.float64)
            masks = {r: kept.reshape(s) for r, s in mask_shape.items()}
        feats: dict[tuple[str, str], Tensor] = {}
        x = {}
        if has["slow"]:
            x["slow"] = self.stems["slow"](slow)
        if has["fast"]:
            x["fast"] = self.stems["fast"](fast)
            x["slow"] = self.fuse_fs["pool1"](x["fast"], x["slow"])
        if audio_on:
            x["audio"] = self.stems["audio"](audio)
        for stage in RES_STAGES:
            for p in ("slow", "fast", "audio"):
                if p in x:
                    x[p] = self.stages[f"{p}.{stage}"](x[p])
                    feats[(p, stage)] = x[p]
            if stage == "res5":
                break
            lateral = audio_on and stage in cfg.lateral_stages
            if lateral and cfg.fusion_kind == "AtoFtoS":
                x["fast"] = F.add(x["fast"], self._audio_summand(stage, x["audio"], x["fast"],
                                                                 masks and masks[5]))
            if has["fast"]:
                x["slow"] = self.fuse_fs[stage](x["fast"], x["slow"])
            if lateral and cfg.fusion_kind != "AtoFtoS":
                x["slow"] = F.add(x["slow"], self._audio_summand(stage, x["audio"], x["slow"],
                                                                 masks and masks[5]))
        visual = None
        if has["slow"]:
            pooled = [F.global_avg_pool(x["slow"])]
            if has["fast"]:
                pooled.append(F.global_avg_pool(x["fast"]))
            visual = F.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
        audio_pooled = None
        if audio_on and cfg.audio_in_head:
            audio_pooled = F.global_avg_pool(x["audio"])
            if masks is not None:
                audio_pooled = F.mul(audio_pooled, masks[2])
        logits = self.head(visual, audio_pooled, dropout_rate, rngs)
        parts = [t for t in (visual, audio_pooled) if t is not None]
        if cfg.audio_in_head and audio_pooled is None:
            parts.append(Tensor._wrap(np.zeros((n, self.head.fc_audio.weight.shape[1]))))
        pooled_all = F.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return ForwardOutput(logits, feats, pooled_all, audio_on)

    def sync_logits(self, out: ForwardOutput, audio_feats: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
        """In-sync logits per AVS stage; ``audio_feats`` overrides the audio side."""
        result = {}
        for stage, head in self.avs_heads.items():
            if ("slow", stage) not in out.features:
                raise ValueError(f"no visual features recorded at {stage}")
            audio = (audio_feats or {}).get(stage, out.features.get(("audio", stage)))
            if audio is None:
                raise ValueError(f"stage {stage} has no audio features (Audio pathway inactive)")
            visual = [out.features[(p, stage)] for p in ("slow", "fast") if (p, stage) in out.features]
            result[stage] = head(visual, audio)
        return result

    def audio_features(self, audio: Tensor) -> dict[str, Tensor]:
        """Audio pathway alone (it receives nothing from the visual side)."""
        x = self.stems["audio"](audio)
        feats = {}
        for stage in RES_STAGES:
            x = self.stages[f"audio.{stage}"](x)
            feats[stage] = x
        return feats


def build_model(cfg: ModelConfig, seed: int = 0) -> AVSlowFast:
    return AVSlowFast(cfg, seed)
