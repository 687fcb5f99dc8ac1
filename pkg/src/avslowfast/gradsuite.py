"""Named gradient-check cases: every differentiable op, the fusion modules and
tiny end-to-end networks for each audiovisual fusion kind."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .functional import RunningStats
from .gradcheck import directional_check, gradcheck
from .model.config import ConfigError, desk_config
from .model.network import (AudioToVisual, AVNonlocal, FastToSlow, SyncHead, build_model)
from .nn import Init
from .rng import stream
from .tensor import Tensor

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20


@dataclass(frozen=True)
class Case:
    name: str
    suite: str                                   # ops | fusion
    build: Callable[[np.random.Generator, int], tuple[Callable[..., Tensor], list[Tensor]]]
    max_entries: int | None = None
    directions: int = 0                          # >0: joint random-direction check
    eps: float = 1e-5


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _op(fn, *shapes, **kw):
    def build(rng, seed):
        return fn, [_t(rng, *s) for s in shapes]
    return build


def _bn_train(rng, seed):
    return (lambda x, g, b: F.batch_norm(x, g, b, True)), [_t(rng, 4, 3, 2, 3), _t(rng, 3), _t(rng, 3)]


def _bn_eval(rng, seed):
    stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3), 1)
    return (lambda x, g, b: F.batch_norm(x, g, b, False, stats)), [_t(rng, 4, 3, 2, 3), _t(rng, 3), _t(rng, 3)]


def _dropout(rng, seed):
    return (lambda x: F.dropout(x, 0.5, stream(seed, "gradsuite-dropout"), True)), [_t(rng, 4, 6)]


def _softmax_ce(rng, seed):
    labels = rng.integers(0, 5, 6)
    return (lambda z: F.softmax_cross_entropy(z, labels)), [_t(rng, 6, 5)]


def _bce(rng, seed):
    labels = rng.integers(0, 2, 7)
    return (lambda z: F.sigmoid_bce(z, labels)), [_t(rng, 7, scale=2.0)]


def _take(rng, seed):
    idx = rng.integers(0, 5, 7)             # repeated indices accumulate
    return (lambda x: F.take(x, idx, axis=1)), [_t(rng, 3, 5, 2)]


def _conv3d(stride, padding):
    def build(rng, seed):
        return (lambda x, w: F.conv3d(x, w, stride, padding)), [_t(rng, 2, 3, 4, 5, 5), _t(rng, 4, 3, 3, 3, 3)]
    return build


def _conv2d(kernel, stride, padding):
    def build(rng, seed):
        return (lambda x, w: F.conv2d(x, w, stride, padding)), [_t(rng, 2, 3, 6, 7), _t(rng, 4, 3, *kernel)]
    return build


def _max_pool(rng, seed):
    return (lambda x: F.max_pool(x, (1, 3, 3), (1, 2, 2), (0, 1, 1))), [_t(rng, 2, 2, 2, 6, 6)]


OP_CASES = [
    Case("add", "ops", _op(F.add, (3, 4), (4,))),
    Case("sub", "ops", _op(F.sub, (3, 1), (3, 4))),
    Case("mul", "ops", _op(F.mul, (2, 3, 4), (3, 1))),
    Case("relu", "ops", _op(F.relu, (5, 6))),
    Case("sigmoid", "ops", _op(F.sigmoid, (5, 6))),
    Case("sum", "ops", _op(lambda x: F.sum(x, axis=(0, 2)), (3, 4, 5))),
    Case("mean", "ops", _op(lambda x: F.mean(x, axis=1, keepdims=True), (3, 4, 5))),
    Case("reshape", "ops", _op(lambda x: F.reshape(x, (6, -1)), (3, 4, 2))),
    Case("transpose", "ops", _op(lambda x: F.transpose(x, (2, 0, 1)), (3, 4, 2))),
    Case("take", "ops", _take),
    Case("concat", "ops", _op(lambda a, b: F.concat([a, b], axis=1), (2, 3, 4), (2, 5, 4))),
    Case("global_avg_pool", "ops", _op(F.global_avg_pool, (2, 3, 2, 4, 4))),
    Case("matmul", "ops", _op(F.matmul, (2, 3, 4), (2, 4, 5))),
    Case("softmax", "ops", _op(lambda x: F.softmax(x, axis=-1), (3, 6))),
    Case("fully_connected", "ops", _op(F.fully_connected, (4, 6), (3, 6), (3,))),
    Case("dropout", "ops", _dropout),
    Case("conv3d", "ops", _conv3d(1, 1)),
    Case("conv3d_strided", "ops", _conv3d((2, 1, 2), (1, 0, 1))),
    Case("conv2d_freq", "ops", _conv2d((3, 1), (2, 1), (1, 0))),
    Case("conv2d_time", "ops", _conv2d((1, 5), (1, 2), (0, 2))),
    Case("max_pool", "ops", _max_pool),
    Case("batch_norm_train", "ops", _bn_train),
    Case("batch_norm_eval", "ops", _bn_eval),
    Case("softmax_cross_entropy", "ops", _softmax_ce),
    Case("sigmoid_bce", "ops", _bce),
]


# fusion modules ----------------------------------------------------------------

def _module_case(module, inputs, call):
    params = list(module.parameters())
    return (lambda *args: call(*args[:len(inputs)])), list(inputs) + params


def _fast_to_slow(rng, seed):
    m = FastToSlow(3, 4, init=Init(seed), name="f2s")
    return _module_case(m, [_t(rng, 2, 3, 8, 3, 3), _t(rng, 2, 5, 2, 3, 3)], m)


def _audio_to_visual(rng, seed):
    m = AudioToVisual(4, 6, 2, init=Init(seed), name="a2v")
    visual = _t(rng, 2, 6, 3, 2, 2)
    return _module_case(m, [_t(rng, 2, 4, 3, 6), visual],
                        lambda a, v: F.add(v, m(a, v.shape[2])))


def _nonlocal(rng, seed):
    m = AVNonlocal(5, 8, init=Init(seed), name="nl")
    visual = _t(rng, 2, 8, 2, 3, 3)
    return _module_case(m, [_t(rng, 2, 5, 3, 4), visual], lambda a, v: F.add(v, m(a, v)))


def _sync_head(rng, seed):
    m = SyncHead(7, 4, init=Init(seed), name="avs")
    return _module_case(m, [_t(rng, 3, 5, 2, 2, 2), _t(rng, 3, 2, 2, 2, 2), _t(rng, 3, 4, 2, 3)],
                        lambda s, f, a: m([s, f], a))


TINY = dict(T=2, tau=2, alpha_f=2, alpha_a=4, S=16, test_crop=16, F_mel=8, T_a=16, width_mult=1 / 32,
            depth=(1, 1, 1, 1), num_classes=3, fusion_stages=("res2", "res3", "res4", "pool5"),
            avs_stages=("res3", "res5"))


def _network(kind):
    def build(rng, seed):
        cfg = desk_config(fusion_kind=kind, **TINY)
        model = build_model(cfg, seed)
        # zero-initialized residual gammas put every block exactly on a ReLU kink
        for name, p in model.named_parameters():
            if name.endswith("gamma"):
                p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        n = 2
        slow = _t(rng, n, 3, cfg.T, cfg.S, cfg.S)
        fast = _t(rng, n, 3, cfg.fast_frames, cfg.S, cfg.S)
        audio = _t(rng, n, 1, cfg.F_mel, cfg.T_a)
        labels = rng.integers(0, cfg.num_classes, n)
        sync = np.array([1, 0])

        def loss(s, f, a, *params):
            out = model(s, f, a)
            total = F.softmax_cross_entropy(out.logits, labels)
            for z in model.sync_logits(out).values():
                total = F.add(total, F.sigmoid_bce(z, sync))
            return total

        return loss, [slow, fast, audio] + model.parameters()
    return build


FUSION_CASES = [
    Case("fast_to_slow", "fusion", _fast_to_slow),
    Case("audio_to_visual", "fusion", _audio_to_visual),
    Case("av_nonlocal", "fusion", _nonlocal),
    Case("sync_head", "fusion", _sync_head),
    Case("network_AtoFS", "fusion", _network("AtoFS"), directions=4, eps=1e-7),
    Case("network_AtoFtoS", "fusion", _network("AtoFtoS"), directions=4, eps=1e-7),
    Case("network_AVNonlocal", "fusion", _network("AVNonlocal"), directions=4, eps=1e-7),
]

CASES = {c.name: c for c in OP_CASES + FUSION_CASES}
SUITES = ("all", "ops", "fusion")


@dataclass(frozen=True)
class CaseResult:
    name: str
    suite: str
    seeds: int
    max_error: float
    kinks: int = 0                               # directions redrawn after crossing a kink

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def select(suite: str) -> list[Case]:
    if suite in CASES:
        return [CASES[suite]]
    if suite not in SUITES:
        raise ConfigError("suite", f"unknown gradcheck suite {suite!r}; choose from {SUITES} or a case name")
    return [c for c in CASES.values() if suite == "all" or c.suite == suite]


def run_case(case: Case, seeds: Sequence[int]) -> CaseResult:
    worst, kinks = 0.0, 0
    for seed in seeds:
        fn, inputs = case.build(stream(seed, "gradsuite", case.name), seed)
        if case.directions:
            err, skipped = directional_check(fn, inputs, case.directions, case.eps, seed)
            kinks += skipped
        else:
            err = gradcheck(fn, inputs, case.eps, case.max_entries)
        worst = max(worst, err)
    return CaseResult(case.name, case.suite, len(seeds), worst, kinks)


def run_suite(suite: str = "all", seeds: int = DEFAULT_SEEDS) -> list[CaseResult]:
    return [run_case(c, range(seeds)) for c in select(suite)]


def report(results: Sequence[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case':<{width}}  suite   seeds  max_rel_error  kinks  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.suite:<6}  {r.seeds:>5}  {r.max_error:13.3e}  {r.kinks:>5}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
