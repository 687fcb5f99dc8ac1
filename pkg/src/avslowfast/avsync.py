"""Audiovisual synchronization, rotation pretext task, curriculum negatives, linear probe."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .clips import make_batch, uniform_starts, window_count
from .model.network import AVSlowFast, ForwardOutput
from .nn import Init, Linear, Module
from .rng import stream
from .synth import FPS, SAMPLES_PER_FRAME, ClipSample
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, TrainState, lr_at, sgd_step, softmax_np, write_logs

MIN_DISPLACEMENT_S = 0.5
HARD_FRACTION = 0.25
CURRICULUM_SWITCH = 0.5


@dataclass(frozen=True)
class SyncPair:
    visual: int                # dataset index of the visual clip
    visual_start: int          # raw-frame window start
    audio: int                 # dataset index of the audio clip
    audio_start: int
    label: int                 # 1 in-sync, 0 out-of-sync
    kind: str                  # positive | easy | hard
    displacement_seconds: float = 0.0


@dataclass
class SyncBatch:
    pairs: list[SyncPair]
    fallbacks: int = 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs])


def pair_label(dataset: Sequence[ClipSample], pair: SyncPair) -> int:
    """Ground truth recomputed from clip identity and displacement."""
    same = dataset[pair.visual].clip_id == dataset[pair.audio].clip_id
    return int(same and pair.audio_start == pair.visual_start)


def min_displacement_frames() -> int:
    return math.ceil(MIN_DISPLACEMENT_S * FPS)


def hard_count(negatives: int, phase: float) -> int:
    """Hard negatives among ``negatives``: none before the switch, a quarter after."""
    return int(round(HARD_FRACTION * negatives)) if phase >= CURRICULUM_SWITCH else 0


def _hard_start(clip: ClipSample, cfg, start: int, rng) -> int | None:
    lo = min_displacement_frames()
    hi = clip.frames - lo
    last = window_count(clip, cfg) - 1
    options = [start + s * d for d in range(lo, hi + 1) for s in (-1, 1) if 0 <= start + s * d <= last]
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def sample_pairs(dataset: Sequence[ClipSample], idx: Sequence[int], starts: Sequence[int], cfg,
                 phase: float, rng: np.random.Generator) -> SyncBatch:
    """Half positives; negatives all easy before the curriculum switch, 1/4 hard after.

    Easy negatives take another batch item's clip (a different clip) and
    play its audio over the same clip-time window. Hard negatives shift the clip's own audio by at least half
    a second; when the clip is too short for that they fall back to easy.
    """
    b = len(idx)
    clip_ids = [dataset[i].clip_id for i in idx]
    if b < 2 or len(set(clip_ids)) < 2:
        raise ValueError("pair sampling needs at least two distinct clips in the batch")
    order = rng.permutation(b)
    n_pos = b - b // 2
    negatives = order[n_pos:]
    n_hard = hard_count(len(negatives), phase)
    hard = set(int(j) for j in negatives[:n_hard])
    pairs: list[SyncPair | None] = [None] * b
    fallbacks = 0
    for j in order[:n_pos]:
        pairs[j] = SyncPair(idx[j], starts[j], idx[j], starts[j], 1, "positive")
    for j in negatives:
        j = int(j)
        clip = dataset[idx[j]]
        if j in hard:
            a_start = _hard_start(clip, cfg, starts[j], rng)
            if a_start is not None:
                pairs[j] = SyncPair(idx[j], starts[j], idx[j], a_start, 0, "hard",
                                    (a_start - starts[j]) / FPS)
                continue
            fallbacks += 1
        donors = [k for k in range(b) if clip_ids[k] != clip_ids[j]]
        k = donors[int(rng.integers(len(donors)))]
        # the donor's audio at the same clip time, not at the donor's own event
        a_start = min(starts[j], window_count(dataset[idx[k]], cfg) - 1)
        pairs[j] = SyncPair(idx[j], starts[j], idx[k], a_start, 0, "easy")
    return SyncBatch(pairs, fallbacks)


def pair_items(dataset: Sequence[ClipSample], batch: SyncBatch):
    return [(dataset[p.visual], p.visual_start, dataset[p.audio], p.audio_start) for p in batch.pairs]


def avs_pairs_step(dataset, idx, starts, cfg, phase, rng):
    """Pairs plus the (visual, audio) items a supervised step feeds the network."""
    batch = sample_pairs(dataset, idx, starts, cfg, phase, rng)
    return pair_items(dataset, batch), batch


def sync_head(model: AVSlowFast, stage: str, visual: Sequence[Tensor], audio: Tensor) -> Tensor:
    """In-sync logit of the stage's head from raw stage features."""
    if stage not in model.avs_heads:
        raise ValueError(f"no synchronization head at {stage}")
    return model.avs_heads[stage](list(visual), audio)


def avs_loss(model: AVSlowFast, out: ForwardOutput, labels, rows: Sequence[int] | None = None) -> Tensor:
    """Mean over AVS stages of the mean binary cross-entropy over pairs (``rows`` selects pairs)."""
    logits = model.sync_logits(out)
    if not logits:
        raise ValueError("the model has no AVS stages")
    labels = np.asarray(labels)
    losses = []
    for stage in sorted(logits):
        z = logits[stage]
        y = labels
        if rows is not None:
            z = F.take(z, np.asarray(rows, dtype=np.int64), axis=0)
            y = labels[np.asarray(rows, dtype=np.int64)]
        losses.append(F.sigmoid_bce(z, y))
    total = losses[0]
    for extra in losses[1:]:
        total = F.add(total, extra)
    return F.mul(total, 1.0 / len(losses))


# rotation -------------------------------------------------------------------

def rotate(frames: np.ndarray, k: int) -> np.ndarray:
    """Rotate the two trailing (spatial) axes by k * 90 degrees."""
    if frames.shape[-1] != frames.shape[-2]:
        raise ValueError(f"rotation needs square frames, got {frames.shape[-2]}x{frames.shape[-1]}")
    return np.rot90(frames, k=int(k) % 4, axes=(-2, -1))


def rot_task(frames: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """All frames of one clip rotated by one shared multiple of 90 degrees."""
    k = int(rng.integers(4))
    return np.ascontiguousarray(rotate(frames, k)), k


def rot_loss(logits: Tensor, labels) -> Tensor:
    return F.softmax_cross_entropy(logits, labels)


class RotationHead(Module):
    """Four-way rotation classifier on pooled Slow and Fast features."""

    def __init__(self, model: AVSlowFast, seed: int = 0):
        d_visual = model.head.fc.weight.shape[1]
        self.fc = Linear(d_visual, 4, init=Init(seed), name="rot.fc", std=0.01)
        self.d_visual = d_visual

    def forward(self, out: ForwardOutput) -> Tensor:
        visual = F.take(out.pooled, np.arange(self.d_visual), axis=1)
        return self.fc(visual)


# self-supervised pretraining -----------------------------------------------------

def anchored_start(clip: ClipSample, cfg, rng: np.random.Generator) -> int:
    """Random window start whose span contains the visual event."""
    raw = cfg.raw_frames
    onset = clip.sync_anchor_seconds * FPS
    lo = max(0, math.floor(onset) - raw + 1)
    hi = min(window_count(clip, cfg) - 1, math.floor(onset))
    if lo > hi:
        return int(rng.integers(window_count(clip, cfg)))
    return int(rng.integers(lo, hi + 1))


def sample_ssl_windows(dataset: Sequence[ClipSample], cfg, batch: int, rng):
    idx = rng.choice(len(dataset), size=batch, replace=batch > len(dataset))
    return [int(i) for i in idx], [anchored_start(dataset[int(i)], cfg, rng) for i in idx]


@dataclass
class SSLResult:
    state: TrainState
    rot_head: RotationHead
    sync_accuracy: list[float] = field(default_factory=list)


def ssl_step_inputs(dataset, idx, starts, cfg, phase, rng_pairs, rng_rot, rotation: bool = True):
    batch = sample_pairs(dataset, idx, starts, cfg, phase, rng_pairs)
    slow, fast, audio = make_batch(pair_items(dataset, batch), cfg)
    rot = np.zeros(len(idx), dtype=np.int64)
    if rotation and slow is not None:
        s, f = slow.data.copy(), fast.data.copy() if fast is not None else None
        for j in range(len(idx)):
            rot[j] = int(rng_rot.integers(4))
            s[j] = rotate(s[j], rot[j])
            if f is not None:
                f[j] = rotate(f[j], rot[j])
        slow = Tensor._wrap(s)
        fast = Tensor._wrap(f) if f is not None else None
    return batch, rot, (slow, fast, audio)


def ssl_pretrain(model: AVSlowFast, dataset: Sequence[ClipSample], cfg: TrainConfig, *,
                 tasks: Sequence[str] = ("avs", "rot"), rot_weight: float = 0.1,
                 out_dir: str | Path | None = None) -> SSLResult:
    """Train the backbone with AVS and rotation losses only; the classifier head is untouched.

    Hard negatives enter once ``n / n_max`` reaches one half. The rotation loss
    is scaled by ``rot_weight`` before it is added to the AVS loss.
    """
    cfg.validate()
    if "avs" in tasks and not model.avs_heads:
        raise ValueError("AVS pretraining needs avs_stages")
    mcfg = model.cfg
    rot_head = RotationHead(model, cfg.seed)
    params = {k: v for k, v in model.named_parameters() if not k.startswith("head.")}
    params.update({f"rot.{k}": v for k, v in rot_head.named_parameters()})
    state = TrainState()
    model.train()
    while state.iteration < cfg.n_max:
        n = state.iteration
        lr = lr_at(n, cfg)
        idx, starts = sample_ssl_windows(dataset, mcfg, cfg.batch_size, stream(cfg.seed, "batch", n))
        batch, rot, (slow, fast, audio) = ssl_step_inputs(
            dataset, idx, starts, mcfg, n / cfg.n_max, stream(cfg.seed, "pairs", n),
            stream(cfg.seed, "rot", n), rotation="rot" in tasks)
        model.zero_grad()
        rot_head.zero_grad()
        out = model(slow, fast, audio, dropout_rate=0.0)
        parts = {}
        if "avs" in tasks:
            parts["avs"] = avs_loss(model, out, batch.labels)
        if "rot" in tasks:
            parts["rot"] = rot_loss(rot_head(out), rot)
        loss = parts.get("avs")
        if "rot" in parts:
            scaled = F.mul(parts["rot"], rot_weight) if rot_weight != 1.0 else parts["rot"]
            loss = scaled if loss is None else F.add(loss, scaled)
        backward(loss)
        sgd_step(params, state.velocity, lr, cfg.momentum, cfg.weight_decay)
        for task, value in parts.items():
            state.log.append({"iter": n, "loss": float(value.item()), "lr": lr, "dropped_frac": 0.0,
                              "task": task, "hard_fallbacks": batch.fallbacks})
        state.iteration += 1
    if out_dir is not None:
        write_logs(state, out_dir, extra_columns=("task",))
    return SSLResult(state, rot_head)


def sync_accuracy(model: AVSlowFast, dataset: Sequence[ClipSample], *, seed: int = 0, phase: float = 1.0,
                  batches: int = 8, batch_size: int = 16) -> float:
    """Pair classification accuracy (logits averaged over AVS stages) on freshly sampled pairs."""
    model.eval()
    cfg = model.cfg
    correct = total = 0
    with no_grad():
        for b in range(batches):
            idx, starts = sample_ssl_windows(dataset, cfg, batch_size, stream(seed, "sync-eval", b))
            batch = sample_pairs(dataset, idx, starts, cfg, phase, stream(seed, "sync-eval-pairs", b))
            slow, fast, audio = make_batch(pair_items(dataset, batch), cfg, crop=cfg.test_crop)
            out = model(slow, fast, audio)
            logits = model.sync_logits(out)
            z = np.mean([t.data for t in logits.values()], axis=0)
            correct += int(np.sum((z > 0).astype(int) == batch.labels))
            total += len(batch.pairs)
    return correct / total


# linear probe ---------------------------------------------------------------------

def parameter_checksum(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def calibrate_bn(model: AVSlowFast, dataset: Sequence[ClipSample], *, seed: int = 0, batches: int = 4,
                 batch_size: int = 16) -> None:
    """Record BN statistics with train-mode forwards (no parameter changes)."""
    from .training import sample_windows

    model.train()
    with no_grad():
        for b in range(batches):
            idx, starts = sample_windows(dataset, model.cfg, batch_size, stream(seed, "bn-calibration", b))
            slow, fast, audio = make_batch([(dataset[i], s, dataset[i], s) for i, s in zip(idx, starts)],
                                           model.cfg)
            model(slow, fast, audio)


def _needs_calibration(model: AVSlowFast) -> bool:
    return any(stats.count == 0 for _, stats in model.named_buffers())


def pooled_features(model: AVSlowFast, dataset: Sequence[ClipSample], clips_per_video: int,
                    batch: int = 16) -> np.ndarray:
    """Frozen eval-mode features [videos, clips_per_video, D]."""
    model.eval()
    cfg = model.cfg
    items = [(c, s, c, s) for c in dataset for s in uniform_starts(c, cfg, clips_per_video)]
    rows = []
    with no_grad():
        for i in range(0, len(items), batch):
            slow, fast, audio = make_batch(items[i:i + batch], cfg, crop=cfg.test_crop)
            rows.append(model(slow, fast, audio).pooled.data)
    return np.concatenate(rows).reshape(len(dataset), clips_per_video, -1)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.1
    iters: int = 300
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clips_per_video: int = 5
    seed: int = 0


def linear_probe(model: AVSlowFast, train_set: Sequence[ClipSample], val_set: Sequence[ClipSample],
                 cfg: ProbeConfig = ProbeConfig()) -> float:
    """Train one fc layer on frozen pooled features; returns multi-clip val top-1.

    Features are standardized with training-set statistics, which is an affine
    map folded into the fc. BN statistics are calibrated first if the backbone
    has never run in train mode.
    """
    if _needs_calibration(model):
        calibrate_bn(model, train_set, seed=cfg.seed)
    before = parameter_checksum(model)
    train_x = pooled_features(model, train_set, cfg.clips_per_video)
    val_x = pooled_features(model, val_set, cfg.clips_per_video)
    mu = train_x.reshape(-1, train_x.shape[-1]).mean(axis=0)
    sd = train_x.reshape(-1, train_x.shape[-1]).std(axis=0) + 1e-6
    train_x, val_x = (train_x - mu) / sd, (val_x - mu) / sd
    y = np.repeat([c.label for c in train_set], cfg.clips_per_video)
    flat = train_x.reshape(-1, train_x.shape[-1])
    fc = Linear(flat.shape[1], model.cfg.num_classes, init=Init(cfg.seed), name="probe.fc", std=0.01)
    params = dict(fc.named_parameters())
    velocity: dict[str, np.ndarray] = {}
    tcfg = TrainConfig(lr=cfg.lr, n_max=cfg.iters, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for n in range(cfg.iters):
        rows = stream(cfg.seed, "probe", n).choice(len(flat), size=min(cfg.batch_size, len(flat)), replace=False)
        fc.zero_grad()
        loss = F.softmax_cross_entropy(fc(Tensor._wrap(flat[rows])), y[rows])
        backward(loss)
        sgd_step(params, velocity, lr_at(n, tcfg), cfg.momentum, cfg.weight_decay)
    if parameter_checksum(model) != before:
        raise AssertionError("backbone parameters changed during linear probing")
    with no_grad():
        logits = fc(Tensor._wrap(val_x.reshape(-1, val_x.shape[-1]))).data
    probs = softmax_np(logits).reshape(len(val_set), cfg.clips_per_video, -1).mean(axis=1)
    return float(np.mean(probs.argmax(axis=1) == np.array([c.label for c in val_set])))
