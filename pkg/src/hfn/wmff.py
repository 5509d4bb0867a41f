"""Weighted multi-modal feature fusion.

Clip features are scaled by their decision weights, offset by a sinusoidal
timestamp embedding, and fused with multi-head cross attention where video
clips query audio clips. The attention output goes through a linear
projection, dropout and LayerNorm.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from hfn.errors import ContractError, NumericError, ShapeError


def scale_features(v_seq: torch.Tensor, a_seq: torch.Tensor, weights: torch.Tensor):
    """Multiply each clip row by its weight; ``weights[..., 0]`` is video, ``[..., 1]`` audio."""
    if v_seq.shape[:-1] != a_seq.shape[:-1] or weights.shape[:-1] != v_seq.shape[:-1]:
        raise ShapeError(
            f"sequence shapes disagree: video {tuple(v_seq.shape)}, audio {tuple(a_seq.shape)}, "
            f"weights {tuple(weights.shape)}"
        )
    return v_seq * weights[..., 0:1], a_seq * weights[..., 1:2]


def timestamp_embedding(clip_index: torch.Tensor, dim: int, base: float = 10000.0,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal encoding: even coordinates sin(t / base^(2i/dim)), odd ones cos."""
    t = torch.as_tensor(clip_index).to(torch.float64)[..., None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = t / base ** (i / dim)
    emb = torch.zeros(*t.shape[:-1], dim, dtype=torch.float64)
    emb[..., 0::2] = torch.sin(angle)
    emb[..., 1::2] = torch.cos(angle[..., : dim // 2])
    return emb.to(dtype)


def add_timestamp(x: torch.Tensor, clip_index) -> torch.Tensor:
    return x + timestamp_embedding(clip_index, x.shape[-1], dtype=x.dtype).to(x.device)


class WMFF(nn.Module):
    def __init__(self, d: int, n_heads: int = 4, dropout: float = 0.1, use_timestamp: bool = True):
        super().__init__()
        if d % n_heads:
            raise ShapeError(f"fusion width {d} is not divisible by {n_heads} heads")
        self.d, self.n_heads, self.d_k = d, n_heads, d // n_heads
        self.dropout = dropout
        self.use_timestamp = use_timestamp
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.norm = nn.LayerNorm(d)

    def cross_attention(self, q_seq: torch.Tensor, kv_seq: torch.Tensor, pad_mask: torch.Tensor | None = None,
                        return_attention: bool = False):
        """Scaled dot-product attention of ``q_seq`` over ``kv_seq``, (B, L, d) each.

        Padded key positions are excluded (-inf logits, so exactly zero mass).
        Heads are concatenated back to width d.
        """
        squeeze = q_seq.dim() == 2
        if squeeze:
            q_seq, kv_seq = q_seq[None], kv_seq[None]
            pad_mask = None if pad_mask is None else torch.as_tensor(pad_mask)[None]
        b, lq, _ = q_seq.shape
        lk = kv_seq.shape[1]
        heads = lambda x, n: x.view(b, n, self.n_heads, self.d_k).transpose(1, 2)  # noqa: E731
        q = heads(self.q_proj(q_seq), lq)
        k = heads(self.k_proj(kv_seq), lk)
        v = heads(self.v_proj(kv_seq), lk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        if pad_mask is not None:
            pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool, device=scores.device)
            if pad_mask.all(dim=-1).any():
                raise ContractError("every key position is padded")
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, self.d)
        if squeeze:
            out, attn = out[0], attn[0]
        return (out, attn) if return_attention else out

    def project_norm(self, att_out: torch.Tensor, training: bool | None = None) -> torch.Tensor:
        training = self.training if training is None else training
        if not torch.isfinite(att_out).all():
            raise NumericError("non-finite attention output")
        return self.norm(F.dropout(self.out_proj(att_out), self.dropout, training))

    def fuse(self, v_seq, a_seq, clip_index, pad_mask=None, return_attention=False):
        """The fusion path after weighting: timestamps, attention, projection, norm."""
        if self.use_timestamp:
            v_seq = add_timestamp(v_seq, clip_index)
            a_seq = add_timestamp(a_seq, clip_index)
        att, attn = self.cross_attention(v_seq, a_seq, pad_mask, return_attention=True)
        out = self.project_norm(att)
        if pad_mask is not None:
            pad = torch.as_tensor(pad_mask, dtype=torch.bool, device=out.device)
            out = out.masked_fill(pad[..., None], 0.0)
        return (out, attn) if return_attention else out

    def forward(self, v_seq, a_seq, weights, clip_index, pad_mask=None, return_attention=False):
        """``weights`` is (..., L, 2) or None for unweighted fusion."""
        if weights is not None:
            v_seq, a_seq = scale_features(v_seq, a_seq, weights)
        return self.fuse(v_seq, a_seq, clip_index, pad_mask, return_attention)


def attention_dump(attn: torch.Tensor) -> dict:
    """Per-head attention matrices of one video as nested lists, for small-L inspection."""
    if attn.dim() == 4:
        attn = attn[0]
    return {f"head_{h}": attn[h].detach().cpu().tolist() for h in range(attn.shape[0])}
