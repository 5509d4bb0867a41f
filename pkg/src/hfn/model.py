"""Full network: frozen extractors, clip heads, DecisionNet, clip fusion, LSTM, text fusion, classifier."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from hfn.dataset import VideoRecord, expand_text, label_index, segment_clips
from hfn.decision_net import DecisionNet, apply_modality_mask
from hfn.errors import ValidationError
from hfn.evaluation.baselines import FUSION_KINDS, AddFusion, ConcatFusion, CrossAttnFusion
from hfn.extractors import (
    PATCH_DIM,
    ClipFeatures,
    ClipHead,
    FeatureCache,
    FrozenExtractors,
    PatchEmbed3D,
    SyntheticAudioEncoder,
    SyntheticVideoBackbone,
    check_frame_size,
)
from hfn.temporal import ClassificationHead, GlobalFusion, HashedNgramEncoder, TemporalLSTM
from hfn.wmff import WMFF


@dataclass
class ModelConfig:
    d: int = 128
    d_h: int = 128
    d_f: int = 128
    n_heads: int = 4
    dn_hidden: int = 32
    dropout: float = 0.1
    dn_dropout: float = 0.1
    fusion: str = "wmff_dn"
    use_timestamp: bool = True
    d_swin: int = 64
    d_clap: int = 64
    token_dim: int = 64
    d_text: int = 128
    text_buckets: int = 4096
    fps: int = 3
    clip_seconds: int = 8
    sr: int = 16000
    frame_size: int = 224
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 32
    token_frames: int = 4
    extractor_seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValidationError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.d % self.n_heads:
            raise ValidationError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        check_frame_size(self.frame_size, self.frame_size)


@dataclass
class Sample:
    """Model-ready features of one video."""

    id: str
    clips: ClipFeatures
    text: np.ndarray
    text_present: bool
    label: int


@dataclass
class FeatureBatch:
    ids: list[str]
    patch: torch.Tensor  # B x L x 96
    video: torch.Tensor  # B x L x d_swin
    tokens: torch.Tensor  # B x L x token_dim
    audio: torch.Tensor  # B x L x d_clap
    pad_mask: torch.Tensor  # B x L
    modality: torch.Tensor  # B x 2 (video_present, audio_present)
    text: torch.Tensor  # B x d_text
    text_present: torch.Tensor  # B
    labels: torch.Tensor  # B

    def __len__(self):
        return len(self.ids)

    def select(self, idx) -> "FeatureBatch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        out = {f.name: getattr(self, f.name)[idx] for f in dataclasses.fields(self) if f.name != "ids"}
        batch = FeatureBatch(ids=[self.ids[i] for i in idx.tolist()], **out)
        return batch.trim()

    def trim(self) -> "FeatureBatch":
        """Drop trailing clip positions that are padding in every row."""
        valid = (~self.pad_mask).any(dim=0)
        length = int(valid.nonzero().max()) + 1 if valid.any() else 1
        if length == self.pad_mask.shape[1]:
            return self
        return dataclasses.replace(
            self, patch=self.patch[:, :length], video=self.video[:, :length], tokens=self.tokens[:, :length],
            audio=self.audio[:, :length], pad_mask=self.pad_mask[:, :length],
        )

    def masked(self, audio: bool = True, text: bool = True) -> "FeatureBatch":
        """Copy with audio and/or text marked absent (``False`` removes the modality)."""
        modality = self.modality.clone()
        text_vec, text_present = self.text, self.text_present
        if not audio:
            modality[:, 1] = False
        if not text:
            text_vec = torch.zeros_like(self.text)
            text_present = torch.zeros_like(self.text_present)
        return dataclasses.replace(self, modality=modality, text=text_vec, text_present=text_present)


def collate(samples: Sequence[Sample], dtype: torch.dtype = torch.float32) -> FeatureBatch:
    length = max(s.clips.pad_mask.shape[0] for s in samples)

    def stack(attr):
        rows = []
        for s in samples:
            arr = getattr(s.clips, attr)
            padded = np.zeros((length, arr.shape[1]), dtype=np.float64)
            padded[: len(arr)] = arr
            rows.append(padded)
        return torch.from_numpy(np.stack(rows)).to(dtype)

    pad = np.ones((len(samples), length), dtype=bool)
    for i, s in enumerate(samples):
        pad[i, : len(s.clips.pad_mask)] = s.clips.pad_mask
    return FeatureBatch(
        ids=[s.id for s in samples],
        patch=stack("patch"), video=stack("video"), tokens=stack("tokens"), audio=stack("audio"),
        pad_mask=torch.from_numpy(pad),
        modality=torch.tensor([list(s.clips.modality_mask) for s in samples], dtype=torch.bool),
        text=torch.from_numpy(np.stack([s.text for s in samples]).astype(np.float64)).to(dtype),
        text_present=torch.tensor([s.text_present for s in samples], dtype=torch.bool),
        labels=torch.tensor([s.label for s in samples], dtype=torch.long),
    )


@dataclass
class ModelOutput:
    logits: torch.Tensor  # B x C
    weights: torch.Tensor  # B x L x 2 decision weights actually applied
    fused: torch.Tensor  # B x L x d


def build_extractors(cfg: ModelConfig) -> FrozenExtractors:
    return FrozenExtractors(
        PatchEmbed3D(seed=cfg.extractor_seed),
        SyntheticVideoBackbone(cfg.d_swin, seed=cfg.extractor_seed),
        SyntheticAudioEncoder(
            sr=cfg.sr, clip_seconds=cfg.clip_seconds, n_fft=cfg.n_fft, hop=cfg.hop, n_mels=cfg.n_mels,
            token_frames=cfg.token_frames, token_dim=cfg.token_dim, out_dim=cfg.d_clap, seed=cfg.extractor_seed,
        ),
    )


class HFN(nn.Module):
    def __init__(self, cfg: ModelConfig, n_classes: int, extractors: FrozenExtractors | None = None,
                 text_encoder: HashedNgramEncoder | None = None):
        super().__init__()
        self.cfg, self.n_classes = cfg, n_classes
        self.extractors = extractors if extractors is not None else build_extractors(cfg)
        self.text_encoder = text_encoder if text_encoder is not None else HashedNgramEncoder(
            cfg.d_text, cfg.text_buckets, seed=cfg.extractor_seed)
        self.video_head = ClipHead(cfg.d_swin, cfg.d)
        self.audio_head = ClipHead(cfg.d_clap, cfg.d)
        self.decision = DecisionNet(cfg.token_dim, cfg.dn_hidden, cfg.dn_dropout) if cfg.fusion == "wmff_dn" else None
        if cfg.fusion in ("wmff_dn", "wmff"):
            self.fusion = WMFF(cfg.d, cfg.n_heads, cfg.dropout, cfg.use_timestamp)
        elif cfg.fusion == "cross_attn":
            self.fusion = CrossAttnFusion(cfg.d, cfg.n_heads, cfg.dropout, cfg.use_timestamp)
        elif cfg.fusion == "concat":
            self.fusion = ConcatFusion(cfg.d, cfg.d, cfg.d)
        else:
            self.fusion = AddFusion()
        self.temporal = TemporalLSTM(cfg.d, cfg.d_h)
        self.global_fusion = GlobalFusion(cfg.d_h, cfg.d_text, cfg.d_f, cfg.dropout)
        self.classifier = ClassificationHead(cfg.d_f, n_classes)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def clip_weights(self, batch: FeatureBatch) -> torch.Tensor:
        """Per-clip (w_v, w_a) with the modality mask applied; all ones without a DecisionNet."""
        if self.decision is None:
            ones = torch.ones(*batch.pad_mask.shape, 2, dtype=batch.video.dtype)
            return apply_modality_mask(ones, batch.modality[:, None, :])
        return self.decision(batch.patch, batch.tokens, batch.modality)

    def forward(self, batch: FeatureBatch) -> ModelOutput:
        v_seq = self.video_head(batch.video)
        a_seq = self.audio_head(batch.audio)
        clip_index = torch.arange(v_seq.shape[1])
        kind = self.cfg.fusion
        if kind in ("wmff_dn", "wmff"):
            weights = self.clip_weights(batch)
            fused = self.fusion(v_seq, a_seq, weights, clip_index, batch.pad_mask)
        else:
            # no decision weights: an absent modality is zeroed instead
            weights = batch.modality[:, None, :].to(v_seq.dtype).expand(*v_seq.shape[:2], 2)
            v_seq = torch.where(weights[..., 0:1] > 0, v_seq, torch.zeros_like(v_seq))
            a_seq = torch.where(weights[..., 1:2] > 0, a_seq, torch.zeros_like(a_seq))
            if kind == "cross_attn":
                fused = self.fusion(v_seq, a_seq, clip_index, batch.pad_mask)
            else:
                fused = self.fusion(v_seq, a_seq).masked_fill(batch.pad_mask[..., None], 0.0)
        _, video_global = self.temporal(fused, batch.pad_mask)
        f_att = self.global_fusion(video_global, batch.text, batch.text_present)
        return ModelOutput(logits=self.classifier(f_att), weights=weights, fused=fused)

    @torch.no_grad()
    def featurize(self, records: Sequence[VideoRecord], label_mode: str, cache: FeatureCache | None = None,
                  progress=None) -> list[Sample]:
        """Segment, extract and encode records into :class:`Sample` objects (frozen path only)."""
        cfg = self.cfg
        samples = []
        for rec in records:
            clips = segment_clips(rec, fps=cfg.fps, clip_seconds=cfg.clip_seconds, sr=cfg.sr,
                                  frame_size=(cfg.frame_size, cfg.frame_size))
            feats = cache.get_or_extract(self.extractors, clips) if cache else self.extractors.extract(clips)
            text, present = self.text_encoder(expand_text(rec))
            samples.append(Sample(rec.id, feats, text, present, label_index(rec.label, label_mode)))
            if progress is not None:
                progress(rec)
        return samples


def config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
