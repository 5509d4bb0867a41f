"""Manifest ingestion, text expansion, clip segmentation and fold planning."""

from __future__ import annotations

import datetime as _dt
import json
import math
import wave
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from hfn.errors import AlignmentError, MissingInputError, MissingMediaError, ValidationError

N_PARTS = 6


class Label(str, Enum):
    FAKE = "Fake"
    REAL = "Real"
    AMBIGUOUS = "Ambiguous"

    @classmethod
    def parse(cls, value: str) -> "Label":
        for member in cls:
            if isinstance(value, str) and value.strip().lower() == member.value.lower():
                return member
        raise ValidationError(f"unknown label {value!r}; expected one of Fake, Real, Ambiguous")


# Class index order is fixed: Fake=0, Real=1, Ambiguous=2.
LABEL_MODES = {
    "binary": (Label.FAKE, Label.REAL),
    "ternary": (Label.FAKE, Label.REAL, Label.AMBIGUOUS),
}


def class_names(mode: str) -> list[str]:
    if mode not in LABEL_MODES:
        raise ValidationError(f"label mode must be one of {sorted(LABEL_MODES)}, got {mode!r}")
    return [label.value for label in LABEL_MODES[mode]]


def label_index(label: Label, mode: str) -> int:
    vocab = LABEL_MODES[mode]
    if label not in vocab:
        raise ValidationError(f"label {label.value!r} is not part of the {mode} vocabulary")
    return vocab.index(label)


@dataclass
class VideoRecord:
    """One short-video sample.

    ``frames_ref`` and ``audio_ref`` hold either a path (resolved against the
    manifest directory) or an already-decoded array: frames as T x H x W x 3
    integer pixels at the configured fps, audio as a mono waveform.
    """

    id: str
    label: Label
    frames_ref: str | Path | np.ndarray | None = None
    audio_ref: str | Path | np.ndarray | None = None
    transcript: str = ""
    caption: str = ""
    hashtags: list[str] = field(default_factory=list)
    username: str = ""
    url: str = ""
    publish_date: str = ""

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("record id must be a nonempty string")
        if not isinstance(self.label, Label):
            self.label = Label.parse(self.label)
        if self.publish_date:
            try:
                _dt.date.fromisoformat(self.publish_date)
            except (TypeError, ValueError):
                raise ValidationError(
                    f"record {self.id!r}: publish_date {self.publish_date!r} is not an ISO-8601 date"
                ) from None
        if self.frames_ref is None and self.audio_ref is None and not (self.transcript or self.caption):
            raise ValidationError(f"record {self.id!r} has no frames, audio, transcript or caption")


_MANIFEST_FIELDS = {
    "id", "label", "frames_ref", "audio_ref", "transcript", "caption",
    "hashtags", "username", "url", "publish_date",
}
_STR_FIELDS = ("transcript", "caption", "username", "url", "publish_date")


def _record_from_json(obj: dict, base_dir: Path, lineno: int) -> VideoRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    unknown = set(obj) - _MANIFEST_FIELDS
    if unknown:
        raise ValidationError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
    if "id" not in obj or "label" not in obj:
        raise ValidationError(f"line {lineno}: 'id' and 'label' are required")
    kwargs = {k: v for k, v in obj.items() if v is not None}
    for key in _STR_FIELDS:
        if key in kwargs and not isinstance(kwargs[key], str):
            raise ValidationError(f"line {lineno}: field {key!r} must be a string")
    tags = kwargs.get("hashtags", [])
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise ValidationError(f"line {lineno}: 'hashtags' must be a list of strings")
    for key in ("frames_ref", "audio_ref"):
        if key in kwargs:
            if not isinstance(kwargs[key], str) or not kwargs[key]:
                raise ValidationError(f"line {lineno}: {key!r} must be a nonempty path string")
            kwargs[key] = base_dir / kwargs[key]
    try:
        return VideoRecord(**kwargs)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def load_manifest(path: str | Path) -> list[VideoRecord]:
    """Read a JSON Lines manifest, one VideoRecord per line, in file order.

    Blank lines are skipped. Media paths are resolved relative to the
    manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"manifest not found: {path}")
    records: list[VideoRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            record = _record_from_json(obj, path.parent, lineno)
            if record.id in seen:
                raise ValidationError(f"line {lineno}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


def write_manifest(records: Sequence[VideoRecord], path: str | Path) -> None:
    """Write records whose media are path references back to JSON Lines."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            obj = {"id": r.id, "label": r.label.value}
            for key in ("frames_ref", "audio_ref"):
                ref = getattr(r, key)
                if isinstance(ref, np.ndarray):
                    raise ValidationError(f"record {r.id!r}: inline arrays cannot be written to a manifest")
                if ref is not None:
                    ref = Path(ref)
                    obj[key] = str(ref.relative_to(path.parent) if ref.is_absolute() else ref)
            for key in _STR_FIELDS:
                if getattr(r, key):
                    obj[key] = getattr(r, key)
            if r.hashtags:
                obj["hashtags"] = list(r.hashtags)
            fh.write(json.dumps(obj) + "\n")


def load_frames(ref) -> np.ndarray | None:
    """Decode a frame reference into a T x H x W x 3 uint8 array.

    Accepted containers: ``.npy`` (the array itself) and ``.npz`` (key ``frames``).
    """
    if ref is None:
        return None
    if isinstance(ref, np.ndarray):
        arr = ref
    else:
        p = Path(ref)
        if not p.is_file():
            raise MissingInputError(f"frames not found: {p}")
        if p.suffix == ".npy":
            arr = np.load(p, allow_pickle=False)
        elif p.suffix == ".npz":
            with np.load(p, allow_pickle=False) as z:
                arr = z["frames"]
        else:
            raise ValidationError(f"unsupported frame container {p.suffix!r} (use .npy or .npz)")
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValidationError(f"frames must be T x H x W x 3, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"frames must hold integer pixels, got {arr.dtype}")
    return arr.astype(np.uint8, copy=False)


def load_audio(ref) -> np.ndarray | None:
    """Decode an audio reference into a mono float32 waveform.

    ``.npy`` arrays are taken as-is (already at the configured rate); ``.wav``
    files must be 16-bit PCM and are down-mixed to mono.
    """
    if ref is None:
        return None
    if isinstance(ref, np.ndarray):
        arr = ref
    else:
        p = Path(ref)
        if not p.is_file():
            raise MissingInputError(f"audio not found: {p}")
        if p.suffix == ".npy":
            arr = np.load(p, allow_pickle=False)
        elif p.suffix == ".wav":
            with wave.open(str(p), "rb") as w:
                if w.getsampwidth() != 2:
                    raise ValidationError(f"{p}: only 16-bit PCM wav is supported")
                raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
                arr = raw.reshape(-1, w.getnchannels()).mean(axis=1) / 32768.0
        else:
            raise ValidationError(f"unsupported audio container {p.suffix!r} (use .npy or .wav)")
    if arr.ndim != 1:
        raise ValidationError(f"audio must be a mono 1-d waveform, got shape {arr.shape}")
    return np.asarray(arr, dtype=np.float32)


@dataclass
class ClipSet:
    """Segmented media for one video.

    frames: k x F x H x W x 3 uint8, audio: k x S float32 where F and S are
    the per-clip frame and sample counts. ``pad_mask[i]`` marks clips holding
    nothing but padding. ``n_frames``/``n_samples`` are the unpadded lengths.
    """

    frames: np.ndarray
    audio: np.ndarray
    pad_mask: np.ndarray
    modality_mask: tuple[bool, bool]
    clip_index: np.ndarray
    n_frames: int
    n_samples: int

    @property
    def k(self) -> int:
        return len(self.clip_index)

    def unpadded_frames(self) -> np.ndarray:
        flat = self.frames.reshape(-1, *self.frames.shape[2:])
        return flat[: self.n_frames]

    def unpadded_audio(self) -> np.ndarray:
        return self.audio.reshape(-1)[: self.n_samples]


def segment_clips(
    record: VideoRecord,
    fps: int = 3,
    clip_seconds: int = 8,
    sr: int = 16000,
    frame_size: tuple[int, int] = (224, 224),
) -> ClipSet:
    """Cut a record's media into aligned clips of ``clip_seconds`` each.

    ``frame_size`` is only used to shape the zero frames of a video with no
    visual track. When both tracks exist and their durations differ by at
    most one clip, both are truncated to the shorter clip count.
    """
    frames = load_frames(record.frames_ref)
    audio = load_audio(record.audio_ref)
    if frames is None and audio is None:
        raise MissingMediaError(f"record {record.id!r} has neither frames nor audio")
    if frames is not None and len(frames) == 0:
        frames = None
    if audio is not None and len(audio) == 0:
        audio = None
    if frames is None and audio is None:
        raise MissingMediaError(f"record {record.id!r} has empty frames and audio")

    f_per_clip = fps * clip_seconds
    s_per_clip = sr * clip_seconds
    k_v = math.ceil(len(frames) / f_per_clip) if frames is not None else None
    k_a = math.ceil(len(audio) / s_per_clip) if audio is not None else None

    if k_v is not None and k_a is not None:
        gap = abs(len(frames) / fps - len(audio) / sr)
        if gap > clip_seconds:
            raise AlignmentError(
                f"record {record.id!r}: video and audio durations differ by {gap:.2f}s (> one clip)"
            )
        k = min(k_v, k_a)
        frames = frames[: k * f_per_clip]
        audio = audio[: k * s_per_clip]
    else:
        k = k_v if k_v is not None else k_a

    if frames is not None:
        h, w = frames.shape[1:3]
        clip_frames = np.zeros((k * f_per_clip, h, w, 3), dtype=np.uint8)
        clip_frames[: len(frames)] = frames
        n_frames = len(frames)
    else:
        h, w = frame_size
        clip_frames = np.zeros((k * f_per_clip, h, w, 3), dtype=np.uint8)
        n_frames = 0
    clip_audio = np.zeros(k * s_per_clip, dtype=np.float32)
    n_samples = 0
    if audio is not None:
        clip_audio[: len(audio)] = audio
        n_samples = len(audio)

    return ClipSet(
        frames=clip_frames.reshape(k, f_per_clip, h, w, 3),
        audio=clip_audio.reshape(k, s_per_clip),
        pad_mask=np.zeros(k, dtype=bool),
        modality_mask=(frames is not None, audio is not None),
        clip_index=np.arange(k),
        n_frames=n_frames,
        n_samples=n_samples,
    )


def expand_text(record: VideoRecord) -> str:
    """Turn the record's text fields into one sentence string.

    Standalone tags become template sentences (username, then URL, then
    hashtags); caption and transcript follow verbatim. Empty fields are skipped.
    """
    parts = []
    if record.username:
        parts.append(f"This video is published by {record.username}.")
    if record.url:
        parts.append(f"It links to {record.url}.")
    tags = [t for t in record.hashtags if t]
    if tags:
        parts.append(f"It is tagged with {', '.join(tags)}.")
    if record.caption:
        parts.append(record.caption)
    if record.transcript:
        parts.append(record.transcript)
    return " ".join(parts)


@dataclass(frozen=True)
class FoldPlan:
    """One repetition's random 6-part split: part 0 tests, part 1 validates, the rest train."""

    parts: tuple[np.ndarray, ...]
    seed: int
    repetition: int
    test_part: int = 0
    val_part: int = 1

    @property
    def train_parts(self) -> tuple[int, ...]:
        return tuple(i for i in range(len(self.parts)) if i not in (self.test_part, self.val_part))

    @property
    def test(self) -> np.ndarray:
        return self.parts[self.test_part]

    @property
    def val(self) -> np.ndarray:
        return self.parts[self.val_part]

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate([self.parts[i] for i in self.train_parts]))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "repetition": self.repetition,
            "test_part": self.test_part,
            "val_part": self.val_part,
            "train_parts": list(self.train_parts),
            "parts": [p.tolist() for p in self.parts],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldPlan":
        return cls(
            parts=tuple(np.asarray(p, dtype=np.int64) for p in obj["parts"]),
            seed=obj["seed"],
            repetition=obj["repetition"],
            test_part=obj["test_part"],
            val_part=obj["val_part"],
        )


def make_folds(n: int, seed: int, repetitions: int = 3) -> list[FoldPlan]:
    if n < N_PARTS:
        raise ValidationError(f"need at least {N_PARTS} samples to split into {N_PARTS} parts, got {n}")
    plans = []
    for rep in range(repetitions):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rep]))
        perm = rng.permutation(n)
        parts = tuple(np.sort(p) for p in np.array_split(perm, N_PARTS))
        plans.append(FoldPlan(parts=parts, seed=seed, repetition=rep))
    return plans
