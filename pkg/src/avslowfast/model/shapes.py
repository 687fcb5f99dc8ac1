"""Analytic shape inference, FLOPs and parameter accounting.

Works from :func:`stage_table` alone, without instantiating weights, so a
full-scale ResNet-50 configuration is costed in milliseconds. One FLOP is one
multiply-add; only convolutions, fully-connected layers and the attention
products of the non-local fusion are counted.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

from .config import (
    FUSION_KERNEL,
    nonlocal_width,
    RES_STAGES,
    ConfigError,
    ModelConfig,
    PathwayStage,
    fast_fusion_width,
    stage_table,
)


@dataclass(frozen=True)
class ShapeRow:
    stage: str
    pathway: str
    t: int
    h: int
    w: int
    c: int
    flops: int = 0
    params: int = 0


@dataclass
class ShapeReport:
    rows: list[ShapeRow] = field(default_factory=list)

    def add(self, row: ShapeRow) -> None:
        for name in ("t", "h", "w", "c"):
            if getattr(row, name) < 1:
                raise ConfigError(
                    "shape", f"stage {row.stage} ({row.pathway}) has non-positive extent {name}={getattr(row, name)}"
                )
        self.rows.append(row)

    def get(self, stage: str, pathway: str) -> ShapeRow:
        for row in self.rows:
            if row.stage == stage and row.pathway == pathway:
                return row
        raise KeyError((stage, pathway))

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def pathway_flops(self, pathway: str) -> int:
        return sum(r.flops for r in self.rows if r.pathway == pathway)

    @property
    def audio_fraction(self) -> float:
        total = self.total_flops
        return self.pathway_flops("audio") / total if total else 0.0

    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("stage,pathway,t,h,w,c,flops,params\n")
        for r in self.rows:
            out.write(f"{r.stage},{r.pathway},{r.t},{r.h},{r.w},{r.c},{r.flops},{r.params}\n")
        return out.getvalue()

    def to_table(self) -> str:
        header = ("stage", "pathway", "t", "h", "w", "c", "GFLOPs", "params")
        lines = [header] + [
            (r.stage, r.pathway, str(r.t), str(r.h), str(r.w), str(r.c), f"{r.flops / 1e9:.4f}", str(r.params))
            for r in self.rows
        ]
        lines.append(("total", "", "", "", "", "", f"{self.total_flops / 1e9:.4f}", str(self.total_params)))
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.ljust(wd) if i < 2 else cell.rjust(wd) for i, (cell, wd) in enumerate(zip(line, widths)))
            for line in lines
        ) + "\n"


def _out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_cost(out_extent, c_in: int, c_out: int, kernel) -> tuple[int, int]:
    """(multiply-adds, weights) of a bias-free convolution."""
    k = math.prod(kernel)
    return math.prod(out_extent) * c_out * c_in * k, c_out * c_in * k


def bn_params(c: int) -> int:
    return 2 * c


def visual_block_cost(c_in, inner, c_out, ta, stride, t, h, w):
    """One bottleneck: returns (flops, params, (t, h', w'))."""
    h2, w2 = _out(h, 3, stride, 1), _out(w, 3, stride, 1)
    f = p = 0
    for extent, ci, co, kernel in (
        ((t, h, w), c_in, inner, (ta, 1, 1)),
        ((t, h2, w2), inner, inner, (1, 3, 3)),
        ((t, h2, w2), inner, c_out, (1, 1, 1)),
    ):
        df, dp = conv_cost(extent, ci, co, kernel)
        f, p = f + df, p + dp + bn_params(co)
    if c_in != c_out or stride != 1:
        df, dp = conv_cost((t, h2, w2), c_in, c_out, (1, 1, 1))
        f, p = f + df, p + dp + bn_params(c_out)
    return f, p, (t, h2, w2)


def audio_block_cost(c_in, inner, c_out, factorized, stride, fr, tm):
    f2, t2 = _out(fr, 3, stride, 1), _out(tm, 3, stride, 1)
    layers = [((fr, tm), c_in, inner, (1, 1))]
    if factorized:
        layers += [((f2, tm), inner, inner, (3, 1)), ((f2, t2), inner, inner, (1, 3))]
    else:
        layers += [((f2, t2), inner, inner, (3, 3))]
    layers += [((f2, t2), inner, c_out, (1, 1))]
    f = p = 0
    for extent, ci, co, kernel in layers:
        df, dp = conv_cost(extent, ci, co, kernel)
        f, p = f + df, p + dp
    p += bn_params(inner) * 2 + bn_params(c_out)
    if c_in != c_out or stride != 1:
        df, dp = conv_cost((f2, t2), c_in, c_out, (1, 1))
        f, p = f + df, p + dp + bn_params(c_out)
    return f, p, (f2, t2)


def _stage(report, name, pathway, spec: PathwayStage, c_in, extent, audio=False):
    flops = params = 0
    for b in range(spec.blocks):
        stride = spec.stride[-1] if b == 0 else 1
        ci = c_in if b == 0 else spec.out
        if audio:
            df, dp, extent = audio_block_cost(ci, spec.inner, spec.out, spec.factorized, stride, *extent)
        else:
            df, dp, extent = visual_block_cost(ci, spec.inner, spec.out, spec.kernel[0], stride, *extent)
        flops, params = flops + df, params + dp
    if audio:
        report.add(ShapeRow(name, pathway, extent[1], extent[0], 1, spec.out, flops, params))
    else:
        report.add(ShapeRow(name, pathway, *extent, spec.out, flops, params))
    return extent


def _analyse(cfg: ModelConfig, spatial: int) -> ShapeReport:
    cfg.validate()
    has = cfg.has
    table = {s.name: s for s in stage_table(cfg)}
    report = ShapeReport()
    ext: dict[str, tuple] = {}
    width: dict[str, int] = {}

    # stems
    conv1 = table["conv1"]
    for p, t in (("slow", cfg.T), ("fast", cfg.fast_frames)):
        spec = conv1.get(p)
        if spec is None:
            continue
        kt, kh, kw = spec.kernel
        e = (t, _out(spatial, kh, 2, kh // 2), _out(spatial, kw, 2, kw // 2))
        f, w = conv_cost(e, 3, spec.out, spec.kernel)
        report.add(ShapeRow("conv1", p, *e, spec.out, f, w + bn_params(spec.out)))
        pooled = (e[0], _out(e[1], 3, 2, 1), _out(e[2], 3, 2, 1))
        report.add(ShapeRow("pool1", p, *pooled, spec.out))
        ext[p], width[p] = pooled, spec.out
    if has["audio"]:
        spec = conv1.audio
        e = (cfg.F_mel, cfg.T_a)
        f1, w1 = conv_cost(e, 1, spec.out, spec.kernel[0])
        f2, w2 = conv_cost(e, spec.out, spec.out, spec.kernel[1])
        report.add(ShapeRow("conv1", "audio", e[1], e[0], 1, spec.out, f1 + f2, w1 + w2 + bn_params(spec.out)))
        ext["audio"], width["audio"] = e, spec.out

    def fast_to_slow(stage: str) -> None:
        if not has["fast"]:
            return
        cf = width["fast"]
        t, h, w = ext["slow"]
        f, p = conv_cost((t, h, w), cf, 2 * cf, (FUSION_KERNEL, 1, 1))
        report.add(ShapeRow(stage, "fuse_fs", t, h, w, width["slow"] + 2 * cf, f, p + bn_params(2 * cf)))
        width["slow"] += 2 * cf

    def audio_to_visual(stage: str) -> None:
        ca = width["audio"]
        if cfg.fusion_kind == "AVNonlocal":
            cv = width["slow"]
            ci = nonlocal_width(cv)
            t, h, w = ext["slow"]
            positions = t * h * w
            f = ca * ci + 2 * positions * cv * ci + 2 * positions * ci + ci * cv
            p = ca * ci + 2 * cv * ci + ci * cv + bn_params(cv)
            report.add(ShapeRow(stage, "fuse_av", t, h, w, cv, f, p))
            return
        target = "fast" if cfg.fusion_kind == "AtoFtoS" else "slow"
        cv = width[target]
        t, h, w = ext[target]
        f, p = conv_cost((t,), ca, cv, (FUSION_KERNEL,))
        report.add(ShapeRow(stage, "fuse_av", t, h, w, cv, f, p + bn_params(cv)))

    fast_to_slow("pool1")
    for name in RES_STAGES:
        spec = table[name]
        for p in ("slow", "fast"):
            if spec.get(p) is not None:
                ext[p] = _stage(report, name, p, spec.get(p), width[p], ext[p])
                width[p] = spec.get(p).out
        if has["audio"]:
            ext["audio"] = _stage(report, name, "audio", spec.audio, width["audio"], ext["audio"], audio=True)
            width["audio"] = spec.audio.out
        if name == "res5":
            break
        if name in cfg.lateral_stages and cfg.fusion_kind == "AtoFtoS":
            audio_to_visual(name)
        fast_to_slow(name)
        if name in cfg.lateral_stages and cfg.fusion_kind != "AtoFtoS":
            audio_to_visual(name)

    # classifier: global average pool, concat, fc
    dims = [width[p] for p in ("slow", "fast") if p in width]
    if cfg.audio_in_head:
        dims.append(width["audio"])
    d = sum(dims)
    report.add(ShapeRow("head", "fc", 1, 1, 1, cfg.num_classes, d * cfg.num_classes,
                        d * cfg.num_classes + cfg.num_classes))
    return report


def infer_shapes(cfg: ModelConfig) -> ShapeReport:
    """Per-stage output extents at the training crop ``cfg.S``."""
    return _analyse(cfg, cfg.S)


def count_flops(cfg: ModelConfig) -> ShapeReport:
    """Same accounting at the inference crop ``cfg.test_crop`` (FLOPs per view)."""
    return _analyse(cfg, cfg.test_crop)


def avs_head_params(cfg: ModelConfig) -> int:
    """Weights of the synchronization heads; training-only, excluded from FLOPs."""
    table = {s.name: s for s in stage_table(cfg)}
    total = 0
    for stage in cfg.avs_stages:
        spec = table[stage]
        d = spec.slow.out + (spec.fast.out if spec.fast else 0) + spec.audio.out
        hidden = spec.audio.out
        total += bn_params(d) + d * hidden + hidden + hidden + 1
    return total


def count_params(cfg: ModelConfig) -> int:
    """Parameters of the network built by :func:`build_model`, heads included."""
    return infer_shapes(cfg).total_params + avs_head_params(cfg)


__all__ = [
    "ShapeRow", "ShapeReport", "infer_shapes", "count_flops", "count_params", "avs_head_params",
    "fast_fusion_width",
]
