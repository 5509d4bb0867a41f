"""Planted-signal synthetic videos for desk-scale verification.

Each video draws a scalar latent ``z`` in ``[c + 0.1, c + 0.9]`` for its class
``c``, so the label is ``floor(z)``. The planted modality renders ``z``; the
other modality carries unrelated random content.

* planted video: frames get a colour offset ``amplitude * a * direction`` with
  ``a = (z - C/2) / (C/2)``, on top of a per-video nuisance colour offset and
  per-pixel noise, both scaled by ``noise``.
* planted audio: a sine whose frequency grows linearly with ``z``, plus noise.

A ``missing_audio`` / ``missing_text`` share of videos has no audio track or no
text at all, as in real short-video corpora. The video track is always present.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hfn.dataset import LABEL_MODES, Label, VideoRecord
from hfn.errors import ValidationError

_WORDS = (
    "breaking news today update clip watch share look story people city weather market "
    "health science phone music travel food sport school video live report trend daily"
).split()

SIGNAL_AMPLITUDE = 80.0
NUISANCE_STD = 20.0
PIXEL_NOISE_STD = 30.0
COLOUR_DIRECTION = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 600
    k: int = 4
    planted: str = "video"
    noise: float = 0.5
    n_classes: int = 2
    seed: int = 0
    frame_size: int = 32
    sr: int = 1000
    fps: int = 3
    clip_seconds: int = 8
    ragged: bool = True
    with_text: bool = True
    missing_audio: float = 0.2
    missing_text: float = 0.2

    def __post_init__(self):
        if self.planted not in ("video", "audio"):
            raise ValidationError(f"planted modality must be 'video' or 'audio', got {self.planted!r}")
        if self.n_classes not in (2, 3):
            raise ValidationError("n_classes must be 2 or 3")
        if self.n < 1 or self.k < 1 or self.noise < 0:
            raise ValidationError("n and k must be positive and noise non-negative")
        if not (0 <= self.missing_audio <= 1 and 0 <= self.missing_text <= 1):
            raise ValidationError("missing_audio and missing_text must lie in [0, 1]")
        if self.planted == "audio" and self.missing_audio > 0:
            raise ValidationError("an audio-planted benchmark cannot drop audio tracks")

    @property
    def label_mode(self) -> str:
        return "binary" if self.n_classes == 2 else "ternary"


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    records: list[VideoRecord]
    latents: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.records)


def _frames(rng, spec: SyntheticSpec, n_frames: int, a: float | None) -> np.ndarray:
    h = w = spec.frame_size
    nuisance = spec.noise * NUISANCE_STD * rng.standard_normal(3)
    base = 128.0 + nuisance
    if a is not None:
        base = base + SIGNAL_AMPLITUDE * a * COLOUR_DIRECTION
    pixels = np.broadcast_to(base, (n_frames, h, w, 3)).astype(np.float32)
    if spec.noise > 0:
        pixels = pixels + (spec.noise * PIXEL_NOISE_STD) * rng.standard_normal((n_frames, h, w, 3), dtype=np.float32)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def _audio(rng, spec: SyntheticSpec, n_samples: int, z: float | None) -> np.ndarray:
    t = np.arange(n_samples) / spec.sr
    nyquist = spec.sr / 2
    if z is None:
        freq = rng.uniform(0.05, 0.8) * nyquist
        amp = rng.uniform(0.1, 0.5)
    else:
        freq = (0.1 + 0.6 * z / spec.n_classes) * nyquist
        amp = 0.3
    wave = amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    wave = wave + 0.05 * max(spec.noise, 0.0) * rng.standard_normal(n_samples)
    return wave.astype(np.float32)


def make_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n) % spec.n_classes)
    latents = labels + rng.uniform(0.1, 0.9, size=spec.n)
    vocab = LABEL_MODES[spec.label_mode]
    f_per_clip = spec.fps * spec.clip_seconds
    records = []
    for i in range(spec.n):
        n_frames = spec.k * f_per_clip
        if spec.ragged:
            n_frames -= int(rng.integers(0, f_per_clip // 2))
        n_samples = n_frames * spec.sr // spec.fps
        z = float(latents[i])
        a = (z - spec.n_classes / 2) / (spec.n_classes / 2)
        frames = _frames(rng, spec, n_frames, a if spec.planted == "video" else None)
        audio = _audio(rng, spec, n_samples, z if spec.planted == "audio" else None)
        if rng.random() < spec.missing_audio:
            audio = None
        text = {}
        if spec.with_text and not rng.random() < spec.missing_text:
            words = rng.choice(_WORDS, size=6)
            text = {
                "username": f"user{int(rng.integers(1000))}",
                "hashtags": [f"#{w}" for w in rng.choice(_WORDS, size=2, replace=False)],
                "caption": " ".join(words),
            }
        records.append(VideoRecord(
            id=f"syn{spec.seed}-{i:05d}", label=vocab[int(labels[i])], frames_ref=frames, audio_ref=audio, **text,
        ))
    return SyntheticDataset(spec=spec, records=records, latents=latents, labels=labels)


def decode_video_latent(frames: np.ndarray, n_classes: int = 2) -> float:
    """Invert the planted colour offset of a noiseless video back to its latent."""
    mean_colour = frames.reshape(-1, 3).astype(np.float64).mean(axis=0) - 128.0
    a = float(mean_colour @ COLOUR_DIRECTION) / SIGNAL_AMPLITUDE
    return a * (n_classes / 2) + n_classes / 2


def label_of(record: VideoRecord, n_classes: int) -> int:
    vocab = LABEL_MODES["binary" if n_classes == 2 else "ternary"]
    return vocab.index(Label(record.label))
