"""Deterministic synthetic audiovisual clips.

Class ``k`` owns a motion direction for a drifting grating (all directions lie
in the first quadrant, so a rotated clip never looks like another class) and
a tone frequency on the mel grid. Every clip also carries one audiovisual
event at ``anchor``: a coloured flash starts in the frames and an event tone
starts in the audio. The flash colour and the event tone share a per-clip
event identity, so audio from another clip usually mismatches in content
while displaced audio from the same clip mismatches in timing.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .audio import SAMPLE_RATE, Waveform, mel_centers, quantize_pcm16, wav_bytes, wav_from_bytes
from .rng import stream
from .serialization import FormatError, pack_archive, tensor_from_bytes, tensor_to_bytes, unpack_archive
from .tensor import Tensor

SAMPLES_PER_FRAME = 1024
FPS = SAMPLE_RATE / SAMPLES_PER_FRAME          # 15.625 frames per second
TONE_BANK = 16                                  # mel grid the class tones sit on
TONE_SPACING = 4                                # mel bins between neighbouring classes
EVENT_COLOURS = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [0.8, 0.8, 0.2]])
MANIFEST = "manifest.csv"
FLASH_GAIN = 0.5


@dataclass(frozen=True)
class DatasetSpec:
    """``rho``: probability that a clip's video is replaced by noise, leaving
    the tone as the only class cue. ``audio_reliability``: probability that
    the tone also names the class when the video carries it. ``shuffled``
    draws the audio (tone and event time) independently of the video.
    """

    num_classes: int = 4
    clips_per_class: int = 16
    rho: float = 0.0
    noise: float = 0.1
    seed: int = 0
    split: str = "train"
    audio_reliability: float = 0.0
    shuffled: bool = False
    frames: int = 32
    size: int = 32

    def validate(self) -> "DatasetSpec":
        if self.num_classes < 1 or self.clips_per_class < 1:
            raise ValueError("num_classes and clips_per_class must be positive")
        if self.num_classes > max_classes():
            raise ValueError(f"at most {max_classes()} classes fit on the tone grid")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.audio_reliability <= 1.0:
            raise ValueError(f"audio_reliability must lie in [0, 1], got {self.audio_reliability}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")
        if self.frames < 4 or self.size < 4:
            raise ValueError("clips need at least 4 frames of 4x4 pixels")
        return self

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class


@dataclass
class ClipSample:
    video: Tensor            # [3, T_raw, S, S]
    waveform: Waveform
    label: int
    clip_id: str
    sync_anchor_seconds: float
    audio_anchor_seconds: float | None = None

    def __post_init__(self):
        if self.audio_anchor_seconds is None:
            self.audio_anchor_seconds = self.sync_anchor_seconds

    @property
    def frames(self) -> int:
        return self.video.shape[1]

    @property
    def duration(self) -> float:
        return self.frames / FPS

    @property
    def flash_frame(self) -> int:
        return int(np.floor(self.sync_anchor_seconds * FPS))

    @property
    def onset_sample(self) -> int:
        return int(round(self.audio_anchor_seconds * SAMPLE_RATE))


def max_classes() -> int:
    return (TONE_BANK - 2) // TONE_SPACING + 1


def class_direction(k: int, num_classes: int) -> float:
    """Motion direction (radians) of class ``k``; evenly spread inside (0, pi/2)."""
    return (k + 0.5) * (np.pi / 2) / num_classes


def class_tone(k: int) -> float:
    """Tone frequency (Hz) of class ``k``: a centre of the 16-band mel grid."""
    return float(mel_centers(TONE_BANK)[1 + TONE_SPACING * k])


def _grating(rng, direction: float, frames: int, size: int) -> np.ndarray:
    period = rng.uniform(6.0, 10.0)
    speed = rng.uniform(0.8, 1.2)        # pixels per frame
    phase = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.arange(frames, dtype=np.float64)[:, None, None]
    along = x * np.cos(direction) + y * np.sin(direction)
    return 0.5 + 0.5 * np.sin(2 * np.pi * (along[None] - speed * t) / period + phase)


def event_tone(e: int) -> float:
    """Event tone (Hz) of identity ``e``: grid centres between the class tones."""
    return float(mel_centers(TONE_BANK)[3 + TONE_SPACING * e])


def _flash(anchor: float, frames: int) -> np.ndarray:
    """Fraction of each frame's exposure interval that lies after the anchor."""
    start = np.arange(frames) / FPS
    return np.clip((start + 1 / FPS - anchor) * FPS, 0.0, 1.0)


def _draw_anchor(rng, frames: int) -> float:
    # the event stays half a second clear of both clip ends when the clip allows it
    n = frames * SAMPLES_PER_FRAME
    margin = min(SAMPLE_RATE // 2, n // 4)
    return int(rng.integers(margin, n - margin)) / SAMPLE_RATE


def synthesize_clip(spec: DatasetSpec, index: int) -> ClipSample:
    spec.validate()
    label = index % spec.num_classes
    rng = stream(spec.seed, "synth", spec.split, index)
    frames, size = spec.frames, spec.size
    visual_informative = rng.random() >= spec.rho
    if visual_informative:
        luma = _grating(rng, class_direction(label, spec.num_classes), frames, size)
    else:
        luma = rng.uniform(0.0, 1.0, (frames, size, size))
    anchor = _draw_anchor(rng, frames)
    audio_anchor = _draw_anchor(rng, frames) if spec.shuffled else anchor
    event = int(rng.integers(len(EVENT_COLOURS)))
    audio_event = int(rng.integers(len(EVENT_COLOURS))) if spec.shuffled else event
    flash = FLASH_GAIN * EVENT_COLOURS[event][:, None, None, None] * _flash(anchor, frames)[None, :, None, None]
    video = luma[None] + flash + spec.noise * rng.standard_normal((3, frames, size, size))

    n = frames * SAMPLES_PER_FRAME
    t = np.arange(n) / SAMPLE_RATE
    if spec.shuffled:
        tone_class = int(rng.integers(spec.num_classes))
    elif not visual_informative or rng.random() < spec.audio_reliability:
        tone_class = label
    else:
        tone_class = int(rng.integers(spec.num_classes))
    tone = 0.25 * np.sin(2 * np.pi * class_tone(tone_class) * t + rng.uniform(0, 2 * np.pi))
    onset = 0.25 * np.sin(2 * np.pi * event_tone(audio_event) * t + rng.uniform(0, 2 * np.pi)) * (t >= audio_anchor)
    audio = tone + onset + 0.1 * spec.noise * rng.standard_normal(n)
    wave = Waveform(quantize_pcm16(audio), SAMPLE_RATE)
    return ClipSample(Tensor(video), wave, label, f"{spec.split}-{index:05d}", anchor, audio_anchor)


def synthesize(spec: DatasetSpec) -> list[ClipSample]:
    """All clips of ``spec`` in memory, in manifest order."""
    spec.validate()
    return [synthesize_clip(spec, i) for i in range(spec.num_clips)]


# files ----------------------------------------------------------------------

def clip_bytes(clip: ClipSample) -> bytes:
    meta = {"label": clip.label, "clip_id": clip.clip_id, "anchor": clip.sync_anchor_seconds,
            "audio_anchor": clip.audio_anchor_seconds, "flash_frame": clip.flash_frame,
            "onset_sample": clip.onset_sample}
    return pack_archive({
        "video": tensor_to_bytes(clip.video),
        "audio.wav": wav_bytes(clip.waveform),
        "meta.json": json.dumps(meta, sort_keys=True).encode("utf-8"),
    })


def clip_from_bytes(data: bytes) -> ClipSample:
    entries = unpack_archive(data)
    for key in ("video", "audio.wav", "meta.json"):
        if key not in entries:
            raise FormatError(f"clip archive lacks {key!r}")
    meta = json.loads(entries["meta.json"].decode("utf-8"))
    return ClipSample(tensor_from_bytes(entries["video"]), wav_from_bytes(entries["audio.wav"]),
                      int(meta["label"]), meta["clip_id"], float(meta["anchor"]), float(meta["audio_anchor"]))


def generate(spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Write one clip file per sample plus ``manifest.csv``; returns the manifest path."""
    spec.validate()
    root = Path(out_dir) / spec.split
    try:
        root.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(spec.num_clips):
            clip = synthesize_clip(spec, i)
            data = clip_bytes(clip)
            name = f"{clip.clip_id}.avsc"
            (root / name).write_bytes(data)
            rows.append((clip.clip_id, name, clip.label, repr(clip.sync_anchor_seconds),
                         hashlib.sha256(data).hexdigest()))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clip_id", "path", "label", "anchor", "checksum"])
        writer.writerows(rows)
        manifest = root / MANIFEST
        manifest.write_text(buf.getvalue(), encoding="utf-8")
        (root / "spec.json").write_text(json.dumps(asdict(spec), sort_keys=True) + "\n", encoding="utf-8")
    except OSError as err:
        raise OSError(f"writing the dataset failed at {err.filename or root}: {err.strerror}") from err
    return manifest


def load(manifest: str | Path) -> Iterator[ClipSample]:
    """Stream clips in manifest order, verifying each checksum."""
    manifest = Path(manifest)
    with manifest.open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["clip_id", "path", "label", "anchor", "checksum"]:
            raise FormatError(f"{manifest}: unexpected header {reader.fieldnames}")
        for row in reader:
            data = (manifest.parent / row["path"]).read_bytes()
            if hashlib.sha256(data).hexdigest() != row["checksum"]:
                raise FormatError(f"checksum mismatch for clip {row['clip_id']}")
            clip = clip_from_bytes(data)
            if clip.clip_id != row["clip_id"] or clip.label != int(row["label"]):
                raise FormatError(f"clip {row['clip_id']} disagrees with its manifest row")
            yield clip
