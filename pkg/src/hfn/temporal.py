"""Recurrent aggregation over fused clips, global text encoding, video-text fusion and the classifier."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hfn.errors import ContractError, NumericError

_WORD = re.compile(r"\w+", re.UNICODE)


class TemporalLSTM(nn.Module):
    """Single-layer LSTM; the video summary is the hidden state at the last non-pad clip."""

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.lstm = nn.LSTM(d_in, d_hidden, num_layers=1, batch_first=True)

    def forward(self, f_seq: torch.Tensor, pad_mask: torch.Tensor | None = None):
        squeeze = f_seq.dim() == 2
        if squeeze:
            f_seq = f_seq[None]
            pad_mask = None if pad_mask is None else torch.as_tensor(pad_mask)[None]
        b, length, _ = f_seq.shape
        if length == 0:
            raise ContractError("cannot run the recurrent pass over an empty clip sequence")
        hidden_seq, _ = self.lstm(f_seq)
        if pad_mask is None:
            last = torch.full((b,), length - 1, dtype=torch.long)
        else:
            valid = ~torch.as_tensor(pad_mask, dtype=torch.bool)
            if (~valid.any(dim=1)).any():
                raise ContractError("a sequence has no non-pad clip")
            positions = torch.arange(length).expand(b, length)
            last = torch.where(valid, positions, -1).max(dim=1).values
        final = hidden_seq[torch.arange(b), last]
        if squeeze:
            return hidden_seq[0], final[0]
        return hidden_seq, final


def lstm_forward(f_seq: torch.Tensor, pad_mask, lstm: TemporalLSTM):
    return lstm(f_seq, pad_mask)


def text_ngrams(sentence: str, n_max: int = 2) -> list[str]:
    words = [w.lower() for w in _WORD.findall(sentence)]
    grams = list(words)
    for n in range(2, n_max + 1):
        grams += [" ".join(words[i:i + n]) for i in range(len(words) - n + 1)]
    return grams


class HashedNgramEncoder(nn.Module):
    """Frozen bag of hashed word uni/bi-grams followed by a fixed random projection.

    Bucket of an n-gram is ``crc32(ngram) % n_buckets``; counts are L2
    normalized before projecting to ``out_dim``.
    """

    def __init__(self, out_dim: int = 128, n_buckets: int = 4096, n_max: int = 2, seed: int = 0):
        super().__init__()
        self.out_dim, self.n_buckets, self.n_max = out_dim, n_buckets, n_max
        self.name = f"hashed-ngram-{n_buckets}-{n_max}-{out_dim}-s{seed}"
        g = torch.Generator().manual_seed(seed + 3)
        self.projection = nn.Parameter(torch.randn(n_buckets, out_dim, generator=g) / math.sqrt(out_dim),
                                       requires_grad=False)

    def counts(self, sentence: str) -> np.ndarray:
        vec = np.zeros(self.n_buckets, dtype=np.float64)
        for gram in text_ngrams(sentence, self.n_max):
            vec[zlib.crc32(gram.encode("utf-8")) % self.n_buckets] += 1.0
        return vec

    def forward(self, sentence: str) -> tuple[np.ndarray, bool]:
        counts = self.counts(sentence)
        norm = np.linalg.norm(counts)
        if norm == 0.0:
            return np.zeros(self.out_dim, dtype=np.float32), False
        proj = self.projection.detach().double().numpy()
        return (counts / norm @ proj).astype(np.float32), True


def encode_text(sentence: str, encoder: HashedNgramEncoder) -> tuple[np.ndarray, bool]:
    """Return (text feature, text_present). An empty sentence gives zeros and ``False``."""
    return encoder(sentence)


class GlobalFusion(nn.Module):
    """Single-head attention with the text as query over {video summary, text}.

    Both inputs are first projected to width ``d_f``. When the text is absent
    its key is masked out and its content zeroed, so the result reduces to a
    learned projection of the video summary alone.
    """

    def __init__(self, d_video: int, d_text: int, d_f: int, dropout: float = 0.1):
        super().__init__()
        self.d_f, self.dropout = d_f, dropout
        self.video_proj = nn.Linear(d_video, d_f)
        self.text_proj = nn.Linear(d_text, d_f)
        self.q_proj = nn.Linear(d_f, d_f)
        self.k_proj = nn.Linear(d_f, d_f)
        self.v_proj = nn.Linear(d_f, d_f)
        self.out_proj = nn.Linear(d_f, d_f)
        self.norm = nn.LayerNorm(d_f)

    def attend(self, video_global, text, text_present):
        """Pre-projection attention output, shape (B, d_f)."""
        present = torch.as_tensor(text_present, dtype=torch.bool, device=text.device).reshape(-1)
        text = torch.where(present[:, None], text, torch.zeros_like(text))
        pv, pt = self.video_proj(video_global), self.text_proj(text)
        keys_in = torch.stack([pv, pt], dim=1)
        q = self.q_proj(pt)[:, None]
        k, v = self.k_proj(keys_in), self.v_proj(keys_in)
        scores = (q @ k.transpose(1, 2))[:, 0] / math.sqrt(self.d_f)
        scores = scores.masked_fill(torch.stack([torch.zeros_like(present), ~present], dim=1), float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return (attn[:, :, None] * v).sum(dim=1)

    def forward(self, video_global, text, text_present):
        squeeze = video_global.dim() == 1
        if squeeze:
            video_global, text = video_global[None], text[None]
        if not (torch.isfinite(video_global).all() and torch.isfinite(text).all()):
            raise NumericError("non-finite input to global fusion")
        out = self.norm(F.dropout(self.out_proj(self.attend(video_global, text, text_present)),
                                  self.dropout, self.training))
        return out[0] if squeeze else out


def fuse_global(video_global, text, text_present, fusion: GlobalFusion):
    return fusion(video_global, text, text_present)


@dataclass
class Prediction:
    probs: np.ndarray
    logits: np.ndarray
    predicted: int


class ClassificationHead(nn.Module):
    def __init__(self, d_f: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(d_f, n_classes)

    def forward(self, f_att: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(f_att).all():
            raise NumericError("non-finite input to the classification head")
        return self.fc(f_att)


def classify(f_att: torch.Tensor, head: ClassificationHead) -> Prediction:
    """One video: fused feature -> logits -> softmax distribution and argmax."""
    with torch.no_grad():
        logits = head(f_att)
        probs = torch.softmax(logits.double(), dim=-1)
    return Prediction(probs=probs.numpy(), logits=logits.double().numpy(), predicted=int(probs.argmax()))
