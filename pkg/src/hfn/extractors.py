"""Frozen per-clip feature extraction and the trainable clip heads.

The video and audio backbones are pluggable. Anything exposing ``name``,
``out_dim`` and a deterministic ``forward`` can stand in for the defaults,
which are fixed-seed random projections so the pipeline runs without
downloading pretrained weights.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hfn.errors import ContractError, NumericError, ShapeError

PATCH_DIM = 96
TEMPORAL_PATCH = 2
SPATIAL_PATCH = 4
BACKBONE_STRIDE = 32


def _fixed_linear(in_dim: int, out_dim: int, generator: torch.Generator) -> nn.Linear:
    layer = nn.Linear(in_dim, out_dim)
    with torch.no_grad():
        layer.weight.copy_(torch.randn(out_dim, in_dim, generator=generator) / math.sqrt(in_dim))
        layer.bias.copy_(0.1 * torch.randn(out_dim, generator=generator))
    return layer


def check_frame_size(height: int, width: int) -> None:
    if height % BACKBONE_STRIDE or width % BACKBONE_STRIDE:
        raise ShapeError(f"frame size {height}x{width} is not divisible by {BACKBONE_STRIDE}")


def global_avg_pool(x: torch.Tensor, batch_dims: int = 0) -> torch.Tensor:
    """Average over every axis between the leading batch axes and the channel axis."""
    if x.dim() - batch_dims <= 1:
        return x
    return x.flatten(batch_dims, -2).mean(dim=batch_dims)


class PatchEmbed3D(nn.Module):
    """Learned linear 2x4x4 tube projection to 96 channels.

    Input is channel-last pixels ``(..., T, H, W, 3)``; output is
    ``(..., T/2, H/4, W/4, 96)``. Pixels are scaled by 1/255 so the map stays
    linear in the raw values.
    """

    def __init__(self, seed: int = 0, embed_dim: int = PATCH_DIM):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.proj = nn.Conv3d(
            3, embed_dim,
            kernel_size=(TEMPORAL_PATCH, SPATIAL_PATCH, SPATIAL_PATCH),
            stride=(TEMPORAL_PATCH, SPATIAL_PATCH, SPATIAL_PATCH),
        )
        fan_in = 3 * TEMPORAL_PATCH * SPATIAL_PATCH * SPATIAL_PATCH
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(self.proj.weight.shape, generator=g) / math.sqrt(fan_in))
            self.proj.bias.zero_()
        self.embed_dim = embed_dim

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        *lead, t, h, w, c = frames.shape
        if c != 3:
            raise ShapeError(f"expected RGB frames, got {c} channels")
        if t % TEMPORAL_PATCH:
            raise ShapeError(f"frame count {t} is not divisible by {TEMPORAL_PATCH}")
        check_frame_size(h, w)
        x = frames.reshape(-1, t, h, w, c).to(self.proj.weight.dtype) / 255.0
        x = self.proj(x.permute(0, 4, 1, 2, 3))
        x = x.permute(0, 2, 3, 4, 1)
        return x.reshape(*lead, *x.shape[1:])


def patch_embed_3d(clip_frames, embed: PatchEmbed3D) -> torch.Tensor:
    """Embed one clip of frames (T x H x W x 3) into (T/2, H/4, W/4, 96) patches."""
    clip_frames = torch.as_tensor(np.asarray(clip_frames))
    with torch.no_grad():
        return embed(clip_frames)


class VideoBackbone(Protocol):
    name: str
    out_dim: int

    def __call__(self, patches: torch.Tensor) -> torch.Tensor: ...


class SyntheticVideoBackbone(nn.Module):
    """Fixed-seed stand-in for a video transformer.

    Spatially average-pools the patch grid by 8 (overall stride 32 from pixels),
    then applies a fixed random projection 96 -> ``out_dim`` and a GELU.
    """

    def __init__(self, out_dim: int = 64, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 1)
        self.proj = _fixed_linear(PATCH_DIM, out_dim, g)
        self.out_dim = out_dim
        self.name = f"synthetic-video-{out_dim}-s{seed}"

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        *lead, t, h, w, c = patches.shape
        x = patches.reshape(-1, t, h, w, c).permute(0, 4, 1, 2, 3)
        stride = BACKBONE_STRIDE // SPATIAL_PATCH
        x = F.avg_pool3d(x, kernel_size=(1, stride, stride), stride=(1, stride, stride))
        x = F.gelu(self.proj(x.permute(0, 2, 3, 4, 1)))
        return x.reshape(*lead, *x.shape[1:])


def extract_video_features(patches: torch.Tensor, backbone: VideoBackbone) -> torch.Tensor:
    *lead, t, h, w, _ = patches.shape
    with torch.no_grad():
        out = backbone(patches)
    expected = (*lead, t, h * SPATIAL_PATCH // BACKBONE_STRIDE, w * SPATIAL_PATCH // BACKBONE_STRIDE, backbone.out_dim)
    if tuple(out.shape) != expected:
        raise ContractError(f"backbone {backbone.name!r} returned shape {tuple(out.shape)}, expected {expected}")
    return out


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    bins = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lower) / (center - lower)
    down = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


class SyntheticAudioEncoder(nn.Module):
    """Mel front-end, patch tokenizer and fixed random audio encoder.

    ``tokenize`` maps an 8-second slice to a (n_tokens, token_dim) tensor
    built from groups of ``token_frames`` log-mel frames; ``encode`` pools the
    tokens into a single (1, out_dim) clip vector.
    """

    def __init__(
        self,
        sr: int = 16000,
        clip_seconds: int = 8,
        n_fft: int = 400,
        hop: int = 160,
        n_mels: int = 32,
        token_frames: int = 4,
        token_dim: int = 64,
        out_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        self.sr, self.clip_seconds = sr, clip_seconds
        self.n_fft, self.hop, self.n_mels, self.token_frames = n_fft, hop, n_mels, token_frames
        self.token_dim, self.out_dim = token_dim, out_dim
        self.name = f"synthetic-audio-{sr}-{n_mels}-{token_dim}-{out_dim}-s{seed}"
        if clip_seconds * sr < n_fft:
            raise ShapeError(f"slice of {clip_seconds * sr} samples is shorter than n_fft={n_fft}")
        self.register_buffer("window", torch.hann_window(n_fft, periodic=True, dtype=torch.float64))
        self.register_buffer("mel_fb", torch.from_numpy(mel_filterbank(sr, n_fft, n_mels)))
        g = torch.Generator().manual_seed(seed + 2)
        self.token_proj = _fixed_linear(n_mels * token_frames, token_dim, g)
        self.encoder = _fixed_linear(token_dim, out_dim, g)

    @property
    def slice_len(self) -> int:
        return self.sr * self.clip_seconds

    def mel_spectrogram(self, wave: torch.Tensor) -> torch.Tensor:
        """Mel power spectrogram, shape (..., n_mels, n_frames); no centering."""
        lead = wave.shape[:-1]
        spec = torch.stft(
            wave.reshape(-1, wave.shape[-1]).double(), n_fft=self.n_fft, hop_length=self.hop,
            window=self.window, center=False, return_complex=True,
        )
        power = spec.abs() ** 2
        mel = torch.einsum("mf,bft->bmt", self.mel_fb, power)
        return mel.reshape(*lead, *mel.shape[1:])

    def tokenize(self, wave: torch.Tensor) -> torch.Tensor:
        if wave.shape[-1] != self.slice_len:
            raise ShapeError(f"audio slice must hold {self.slice_len} samples, got {wave.shape[-1]}")
        logmel = torch.log(self.mel_spectrogram(wave) + 1e-6).to(self.token_proj.weight.dtype)
        n_frames = logmel.shape[-1]
        n_tokens = max(1, n_frames // self.token_frames)
        usable = n_tokens * self.token_frames
        if n_frames < usable:
            logmel = F.pad(logmel, (0, usable - n_frames))
        logmel = logmel[..., :usable]
        groups = logmel.unflatten(-1, (n_tokens, self.token_frames)).transpose(-3, -2)
        return self.token_proj(groups.flatten(-2))

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.encoder(tokens)).mean(dim=-2, keepdim=True)

    def forward(self, wave: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = self.tokenize(wave)
        return tokens, self.encode(tokens)


def extract_audio_features(slice_wave, encoder: SyntheticAudioEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (tokens, pooled 1 x d_clap feature) for one audio slice."""
    wave = torch.as_tensor(np.asarray(slice_wave, dtype=np.float32))
    if wave.dim() != 1 or wave.shape[0] != encoder.slice_len:
        raise ShapeError(f"audio slice must be 1-d with {encoder.slice_len} samples, got {tuple(wave.shape)}")
    with torch.no_grad():
        return encoder(wave)


class ClipHead(nn.Module):
    """Pooling -> LayerNorm -> one-hidden-layer ReLU MLP.

    Used for both the I3D head (video) and the audio head. Inputs may be a
    full per-clip feature map or an already pooled vector; pooling runs over
    every axis after the first ``batch_dims``.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = out_dim if hidden is None else hidden
        self.norm = nn.LayerNorm(in_dim)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor, batch_dims: int | None = None) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise NumericError("non-finite values in clip head input")
        if batch_dims is not None:
            x = global_avg_pool(x, batch_dims)
        return self.fc2(F.relu(self.fc1(self.norm(x))))


def i3d_head(video_feat: torch.Tensor, head: ClipHead) -> torch.Tensor:
    """Single clip: (12, H/32, W/32, d_swin) -> (d,)."""
    return head(video_feat, batch_dims=0)


def audio_head(audio_feat: torch.Tensor, head: ClipHead) -> torch.Tensor:
    """Single clip: (1, d_clap) -> (d,). The pool is the identity on a single vector."""
    return head(audio_feat, batch_dims=0)


@dataclass
class ClipFeatures:
    """Frozen, pooled per-clip features of one video (all arrays have k rows).

    Pooling is parameter-free, so caching the pooled tensors is equivalent to
    pooling inside the trainable model.
    """

    patch: np.ndarray  # k x 96, AvgPool of the patch embeddings
    video: np.ndarray  # k x d_swin, AvgPool of the backbone output
    tokens: np.ndarray  # k x token_dim, AvgPool of the audio tokens
    audio: np.ndarray  # k x d_clap
    pad_mask: np.ndarray
    modality_mask: tuple[bool, bool]

    def to_npz_dict(self) -> dict:
        return {
            "patch": self.patch, "video": self.video, "tokens": self.tokens, "audio": self.audio,
            "pad_mask": self.pad_mask, "modality_mask": np.asarray(self.modality_mask),
        }

    @classmethod
    def from_npz_dict(cls, d) -> "ClipFeatures":
        return cls(
            patch=d["patch"], video=d["video"], tokens=d["tokens"], audio=d["audio"],
            pad_mask=d["pad_mask"].astype(bool), modality_mask=tuple(bool(b) for b in d["modality_mask"]),
        )


class FrozenExtractors(nn.Module):
    """Patch embed, video backbone and audio encoder; never trained."""

    def __init__(self, patch_embed: PatchEmbed3D, video_backbone: nn.Module, audio_encoder: SyntheticAudioEncoder,
                 batch_clips: int = 16):
        super().__init__()
        self.patch_embed = patch_embed
        self.video_backbone = video_backbone
        self.audio_encoder = audio_encoder
        self.batch_clips = batch_clips
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen modules stay in inference mode
        return super().train(False)

    @property
    def name(self) -> str:
        return f"{self.video_backbone.name}+{self.audio_encoder.name}"

    @torch.no_grad()
    def extract(self, clips) -> ClipFeatures:
        dtype = self.patch_embed.proj.weight.dtype
        patch_rows, video_rows, token_rows, audio_rows = [], [], [], []
        for start in range(0, clips.k, self.batch_clips):
            frames = torch.from_numpy(clips.frames[start:start + self.batch_clips])
            p = self.patch_embed(frames)
            v = extract_video_features(p, self.video_backbone)
            wave = torch.from_numpy(clips.audio[start:start + self.batch_clips]).to(dtype)
            tokens, feat = self.audio_encoder(wave)
            patch_rows.append(global_avg_pool(p, 1))
            video_rows.append(global_avg_pool(v, 1))
            token_rows.append(global_avg_pool(tokens, 1))
            audio_rows.append(feat[:, 0])
        cat = lambda rows: torch.cat(rows).numpy()  # noqa: E731
        return ClipFeatures(
            patch=cat(patch_rows), video=cat(video_rows), tokens=cat(token_rows), audio=cat(audio_rows),
            pad_mask=clips.pad_mask.copy(), modality_mask=tuple(clips.modality_mask),
        )


def content_hash(clips) -> str:
    h = hashlib.sha256()
    for arr in (clips.frames, clips.audio, clips.pad_mask):
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr(tuple(clips.modality_mask)).encode())
    return h.hexdigest()


class FeatureCache:
    """On-disk cache of :class:`ClipFeatures`, one ``.npz`` per (extractor, content hash)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, extractor_name: str, key: str) -> Path:
        return self.root / extractor_name / f"{key}.npz"

    def get(self, extractor_name: str, key: str) -> ClipFeatures | None:
        p = self.path(extractor_name, key)
        if not p.is_file():
            return None
        with np.load(p, allow_pickle=False) as z:
            return ClipFeatures.from_npz_dict(z)

    def put(self, extractor_name: str, key: str, feats: ClipFeatures) -> Path:
        p = self.path(extractor_name, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, **feats.to_npz_dict())
        tmp.replace(p)
        return p

    def get_or_extract(self, extractors: FrozenExtractors, clips) -> ClipFeatures:
        key = content_hash(clips)
        cached = self.get(extractors.name, key)
        if cached is not None:
            return cached
        feats = extractors.extract(clips)
        self.put(extractors.name, key, feats)
        return feats
