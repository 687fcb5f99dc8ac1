"""Cutting network inputs (Slow frames, Fast frames, log-mel) out of a clip."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .audio import Waveform, log_mel
from .model.config import ModelConfig
from .synth import FPS, SAMPLES_PER_FRAME, ClipSample
from .tensor import Tensor


def window_count(clip: ClipSample, cfg: ModelConfig) -> int:
    """Number of valid start frames for a window of ``T * tau`` raw frames."""
    count = clip.frames - cfg.raw_frames + 1
    if count < 1:
        raise ValueError(f"clip {clip.clip_id} has {clip.frames} frames, a window needs {cfg.raw_frames}")
    return count


def uniform_starts(clip: ClipSample, cfg: ModelConfig, clips_per_video: int) -> list[int]:
    """Evenly spaced window starts covering the clip (multi-clip inference)."""
    last = window_count(clip, cfg) - 1
    if clips_per_video == 1:
        return [last // 2]
    return [int(round(i * last / (clips_per_video - 1))) for i in range(clips_per_video)]


def _crop(frames: np.ndarray, size: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"frames of {h}x{w} are smaller than the crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return frames[..., top:top + size, left:left + size]


def audio_window(clip: ClipSample, cfg: ModelConfig, start: int) -> np.ndarray:
    """Log-mel [1, F_mel, T_a] of the audio under raw frames [start, start + T*tau)."""
    raw = cfg.raw_frames
    if start < 0 or start + raw > clip.frames:
        raise ValueError(f"audio window at frame {start} leaves clip {clip.clip_id}")
    samples = clip.waveform.samples[start * SAMPLES_PER_FRAME:(start + raw) * SAMPLES_PER_FRAME]
    spec = log_mel(Waveform(samples, clip.waveform.sample_rate), cfg.T_a, cfg.F_mel,
                   expected_seconds=raw / FPS)
    return spec.bins.data[None]


def visual_window(clip: ClipSample, cfg: ModelConfig, start: int, crop: int | None = None):
    """(slow [3, T, S, S], fast [3, T*alpha_f, S, S]) sampled from raw frames."""
    if start < 0 or start + cfg.raw_frames > clip.frames:
        raise ValueError(f"window at frame {start} leaves clip {clip.clip_id}")
    video = _crop(clip.video.data, crop or cfg.S)
    slow = video[:, start:start + cfg.raw_frames:cfg.tau]
    fast_stride = cfg.tau // cfg.alpha_f
    fast = video[:, start:start + cfg.fast_frames * fast_stride:fast_stride]
    return slow, fast


def make_batch(items: Sequence[tuple[ClipSample, int, ClipSample, int]], cfg: ModelConfig,
               crop: int | None = None) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    """Stack (visual clip, visual start, audio clip, audio start) items into input tensors."""
    has = cfg.has
    slow, fast, audio = [], [], []
    for vclip, vstart, aclip, astart in items:
        if has["slow"]:
            s, f = visual_window(vclip, cfg, vstart, crop)
            slow.append(s)
            fast.append(f)
        if has["audio"]:
            audio.append(audio_window(aclip, cfg, astart))
    return (
        Tensor._wrap(np.stack(slow)) if has["slow"] else None,
        Tensor._wrap(np.stack(fast)) if has["fast"] else None,
        Tensor._wrap(np.stack(audio)) if has["audio"] else None,
    )
