"""Supervised training: DropPathway, momentum SGD, warm-up + cosine, multi-clip eval."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .clips import make_batch, uniform_starts, window_count
from .model.network import AVSlowFast
from .rng import stream
from .serialization import save_tensors
from .synth import ClipSample
from .tensor import Tensor, backward, no_grad


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    n_max: int = 300
    warmup_iters: int | None = None          # default: 5% of n_max
    warmup_start_lr: float | None = None     # default: 0.001 * lr
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    P_d: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0
    avs_weight: float = 0.5
    clips_per_video: int = 3
    eval_every: int = 0

    @property
    def warmup(self) -> int:
        return int(round(0.05 * self.n_max)) if self.warmup_iters is None else self.warmup_iters

    @property
    def start_lr(self) -> float:
        return 0.001 * self.lr if self.warmup_start_lr is None else self.warmup_start_lr

    def validate(self) -> "TrainConfig":
        from .model.config import ConfigError

        if not 0.0 <= self.P_d <= 1.0:
            raise ConfigError("P_d", f"must lie in [0, 1], got {self.P_d}")
        if self.n_max < 1:
            raise ConfigError("n_max", "must be positive")
        if not 0 <= self.warmup < self.n_max:
            raise ConfigError("warmup_iters", f"must lie in [0, n_max={self.n_max}), got {self.warmup}")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate}")
        if self.clips_per_video < 1:
            raise ConfigError("clips_per_video", "must be positive")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainState:
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    best_val: float | None = None
    log: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def lr_at(n: int, cfg: TrainConfig) -> float:
    """Linear warm-up into a half-period cosine decaying to zero at n_max."""
    if not 0 <= n <= cfg.n_max:
        raise ValueError(f"iteration {n} outside [0, {cfg.n_max}]")

    def cosine(i):
        return cfg.lr * 0.5 * (math.cos(i / cfg.n_max * math.pi) + 1.0)

    w = cfg.warmup
    if n < w:
        return cfg.start_lr + (cosine(w) - cfg.start_lr) * n / w
    return cosine(n)


def drop_decisions(n: int, P_d: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    """Per-clip keep mask; one Bernoulli(P_d) drop draw per clip, never in eval."""
    if not training:
        return np.ones(n, dtype=bool)
    return rng.random(n) >= P_d


def drop_pathway(audio_feats, P_d: float, rng: np.random.Generator, mode: str):
    """Zero every audio contribution of dropped clips.

    ``audio_feats`` is a list or dict of [N, ...] tensors (one per fusion
    point). Returns (features, keep mask). Zeroing is a multiplication by the
    mask, so dropped clips pass no gradient back to the audio pathway.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    items = list(audio_feats.items()) if isinstance(audio_feats, dict) else list(enumerate(audio_feats))
    n = items[0][1].shape[0]
    keep = drop_decisions(n, P_d, rng, mode == "train")
    out = {}
    for key, t in items:
        mask = keep.astype(np.float64).reshape((n,) + (1,) * (t.ndim - 1))
        out[key] = t if keep.all() else F.mul(t, mask)
    return (out if isinstance(audio_feats, dict) else [out[i] for i in range(len(items))]), keep


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """v <- m*v + g + wd*p ; p <- p - lr*v. Parameters without a gradient are left alone."""
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} of {p.grad.size} entries)")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad + weight_decay * p.data
        velocity[name] = v
        p.data -= lr * v


def sample_windows(dataset: Sequence[ClipSample], model_cfg, batch: int, rng: np.random.Generator):
    """Random clips (without replacement when possible) and random window starts."""
    idx = rng.choice(len(dataset), size=batch, replace=batch > len(dataset))
    starts = [int(rng.integers(window_count(dataset[i], model_cfg))) for i in idx]
    return [int(i) for i in idx], starts


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model: AVSlowFast, dataset: Sequence[ClipSample], cfg: TrainConfig, *,
          val: Sequence[ClipSample] | None = None, out_dir: str | Path | None = None,
          state: TrainState | None = None) -> TrainState:
    """Supervised training; every random choice comes from a named per-iteration stream."""
    from .avsync import avs_loss, avs_pairs_step

    cfg.validate()
    if not dataset:
        raise ValueError("training set is empty")
    mcfg = model.cfg
    state = state or TrainState()
    params = dict(model.named_parameters())
    labels = np.array([c.label for c in dataset])
    model.train()
    while state.iteration < cfg.n_max:
        n = state.iteration
        lr = lr_at(n, cfg)
        idx, starts = sample_windows(dataset, mcfg, cfg.batch_size, stream(cfg.seed, "batch", n))
        keep = None
        if mcfg.has["audio"]:
            keep = drop_decisions(len(idx), cfg.P_d, stream(cfg.seed, "drop", n), True)
        items = [(dataset[i], s, dataset[i], s) for i, s in zip(idx, starts)]
        sync = None
        if model.avs_heads and keep is not None and keep.any():
            items, sync = avs_pairs_step(dataset, idx, starts, mcfg, n / cfg.n_max, stream(cfg.seed, "pairs", n))
        slow, fast, audio = make_batch(items, mcfg)
        model.zero_grad()
        out = model(slow, fast, audio, keep=keep, dropout_rate=cfg.dropout_rate,
                    rngs=(stream(cfg.seed, "dropout-visual", n), stream(cfg.seed, "dropout-audio", n)))
        y = labels[idx]
        if sync is None:
            loss = F.softmax_cross_entropy(out.logits, y)
        else:
            # clips paired with foreign audio take no classification loss
            use = np.flatnonzero((sync.labels == 1) | ~keep)
            loss = F.softmax_cross_entropy(F.take(out.logits, use, axis=0), y[use])
            kept = np.flatnonzero(keep)
            loss = F.add(loss, F.mul(avs_loss(model, out, sync.labels, kept), cfg.avs_weight))
        backward(loss)
        sgd_step(params, state.velocity, lr, cfg.momentum, cfg.weight_decay)
        dropped = 0.0 if keep is None else float(np.mean(~keep))
        state.log.append({"iter": n, "loss": float(loss.item()), "lr": lr, "dropped_frac": dropped})
        state.iteration += 1
        if val is not None and cfg.eval_every and state.iteration % cfg.eval_every == 0:
            acc = evaluate(model, val, cfg.clips_per_video)
            model.train()
            state.events.append({"iter": state.iteration, "val_top1": acc})
            state.best_val = acc if state.best_val is None else max(state.best_val, acc)
    if out_dir is not None:
        write_logs(state, out_dir)
        save_checkpoint(model, state, Path(out_dir) / "checkpoint.avsa")
    return state


def write_logs(state: TrainState, out_dir: str | Path, extra_columns: Sequence[str] = ()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["iter", "loss", "lr", "dropped_frac", *extra_columns]
    lines = [",".join(columns)]
    for row in state.log:
        lines.append(",".join(_fmt(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns))
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with (out / "events.jsonl").open("w", encoding="utf-8") as f:
        for event in state.events:
            f.write(json.dumps(event, sort_keys=True) + "\n")


def save_checkpoint(model: AVSlowFast, state: TrainState, path: str | Path) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    tensors["iteration"] = np.array([state.iteration], dtype=np.float64)
    save_tensors(path, tensors)


def load_checkpoint(model: AVSlowFast, path: str | Path) -> TrainState:
    from .serialization import load_tensors

    tensors = {k: v.data for k, v in load_tensors(path).items()}
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    velocity = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
    return TrainState(iteration=int(tensors["iteration"][0]), velocity=velocity)


# evaluation -------------------------------------------------------------------

def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def video_predictions(clip_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Argmax of the mean softmax over each video's clips; input is one [clips, K] array per video."""
    return np.array([int(np.argmax(softmax_np(np.asarray(l)).mean(axis=0))) for l in clip_logits])


def clip_logits(model: AVSlowFast, dataset: Sequence[ClipSample], clips_per_video: int,
                batch: int = 16) -> list[np.ndarray]:
    """Eval-mode logits [clips_per_video, K] for every video (uniformly spaced windows)."""
    model.eval()
    mcfg = model.cfg
    items, owner = [], []
    for v, clip in enumerate(dataset):
        for s in uniform_starts(clip, mcfg, clips_per_video):
            items.append((clip, s, clip, s))
            owner.append(v)
    rows = []
    with no_grad():
        for i in range(0, len(items), batch):
            slow, fast, audio = make_batch(items[i:i + batch], mcfg, crop=mcfg.test_crop)
            rows.append(model(slow, fast, audio).logits.data)
    logits = np.concatenate(rows)
    owner = np.array(owner)
    return [logits[owner == v] for v in range(len(dataset))]


def evaluate(model: AVSlowFast, dataset: Sequence[ClipSample], clips_per_video: int = 1) -> float:
    """Top-1 video accuracy from softmax scores averaged over ``clips_per_video`` windows."""
    if not dataset:
        raise ValueError("evaluation set is empty")
    preds = video_predictions(clip_logits(model, dataset, clips_per_video))
    return float(np.mean(preds == np.array([c.label for c in dataset])))


__all__ = [
    "TrainConfig", "TrainState", "lr_at", "drop_decisions", "drop_pathway", "sgd_step", "train",
    "evaluate", "video_predictions", "clip_logits", "save_checkpoint", "load_checkpoint", "write_logs",
]
