"""Alternative clip fusion schemes compared against weighted fusion."""

from __future__ import annotations

import torch
import torch.nn as nn

from hfn.errors import ShapeError, ValidationError
from hfn.wmff import WMFF

FUSION_KINDS = ("wmff_dn", "wmff", "concat", "add", "cross_attn")


class ConcatFusion(nn.Module):
    def __init__(self, d_v: int, d_a: int, d: int):
        super().__init__()
        self.proj = nn.Linear(d_v + d_a, d)

    def forward(self, v_seq, a_seq):
        return self.proj(torch.cat([v_seq, a_seq], dim=-1))


class AddFusion(nn.Module):
    def forward(self, v_seq, a_seq):
        if v_seq.shape != a_seq.shape:
            raise ShapeError(f"add fusion needs equal shapes, got {tuple(v_seq.shape)} and {tuple(a_seq.shape)}")
        return v_seq + a_seq


class CrossAttnFusion(nn.Module):
    """Plain cross attention: the weighted-fusion block with the weighting step removed."""

    def __init__(self, d: int, n_heads: int = 4, dropout: float = 0.1, use_timestamp: bool = True):
        super().__init__()
        self.wmff = WMFF(d, n_heads, dropout, use_timestamp)

    def forward(self, v_seq, a_seq, clip_index, pad_mask=None):
        return self.wmff.fuse(v_seq, a_seq, clip_index, pad_mask)


def fusion_baseline(kind: str, v_seq, a_seq, module: nn.Module, clip_index=None, pad_mask=None):
    if kind == "concat":
        out = module(v_seq, a_seq)
    elif kind == "add":
        out = module(v_seq, a_seq)
    elif kind == "cross_attn":
        if clip_index is None:
            clip_index = torch.arange(v_seq.shape[-2])
        return module(v_seq, a_seq, clip_index, pad_mask)
    else:
        raise ValidationError(f"unknown fusion baseline {kind!r}; expected concat, add or cross_attn")
    if pad_mask is not None:
        out = out.masked_fill(torch.as_tensor(pad_mask, dtype=torch.bool)[..., None], 0.0)
    return out
