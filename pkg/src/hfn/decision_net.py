"""Per-clip modality reliance weights from pooled patch embeddings and audio tokens."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from hfn.errors import ContractError, MissingMediaError, ShapeError
from hfn.extractors import PATCH_DIM, global_avg_pool


def two_way_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over a trailing axis of size 2, exact on the simplex.

    The larger weight is computed as one minus the smaller, which is exact in
    floating point, so ``w[..., 0] + w[..., 1] == 1`` holds to the last bit and
    swapping the two logits swaps the weights exactly.
    """
    diff = logits[..., 0] - logits[..., 1]
    first = torch.sigmoid(diff)
    second = torch.sigmoid(-diff)
    video_wins = diff >= 0
    w_first = torch.where(video_wins, first, 1.0 - second)
    w_second = torch.where(video_wins, 1.0 - first, second)
    return torch.stack([w_first, w_second], dim=-1)


def _check_mask(mask: torch.Tensor) -> None:
    if (~mask.any(dim=-1)).any():
        raise MissingMediaError("both video and audio are absent for at least one video")


def apply_modality_mask(weights: torch.Tensor, mask) -> torch.Tensor:
    """Force the weight of an absent modality to 0 and the other to 1.

    ``mask`` is (video_present, audio_present), broadcast against ``weights``
    whose trailing axis is (w_v, w_a).
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    _check_mask(mask)
    mask = mask.expand_as(weights)
    one, zero = torch.ones_like(weights), torch.zeros_like(weights)
    only_present = torch.where(mask, one, zero)
    both = mask.all(dim=-1, keepdim=True)
    return torch.where(both, weights, only_present)


class DecisionNet(nn.Module):
    """pool -> dropout -> LayerNorm per modality, then concat -> Conv1d -> ReLU -> Conv1d(2).

    Both convolutions have kernel size 1 and slide over the clip axis, so each
    clip gets its own (w_v, w_a) pair.
    """

    def __init__(self, token_dim: int, hidden: int = 32, dropout: float = 0.1, patch_dim: int = PATCH_DIM):
        super().__init__()
        self.patch_dim, self.token_dim = patch_dim, token_dim
        self.dropout = dropout
        self.patch_norm = nn.LayerNorm(patch_dim)
        self.token_norm = nn.LayerNorm(token_dim)
        self.conv1 = nn.Conv1d(patch_dim + token_dim, hidden, kernel_size=1)
        self.conv2 = nn.Conv1d(hidden, 2, kernel_size=1)

    def pool_and_norm(self, patches: torch.Tensor, tokens: torch.Tensor, training: bool | None = None,
                      batch_dims: int | None = None):
        """Average-pool, drop out (training only) and normalize each modality.

        With ``batch_dims`` set, everything after those leading axes except the
        channel axis is pooled; otherwise the inputs are taken as pre-pooled.
        """
        training = self.training if training is None else training
        if batch_dims is not None:
            if tokens.dim() > batch_dims + 1 and tokens.shape[-2] == 0:
                raise ContractError("empty audio token set")
            patches = global_avg_pool(patches, batch_dims)
            tokens = global_avg_pool(tokens, batch_dims)
        p = F.dropout(patches, self.dropout, training)
        t = F.dropout(tokens, self.dropout, training)
        return self.patch_norm(p), self.token_norm(t)

    def logits(self, p_bar: torch.Tensor, t_bar: torch.Tensor) -> torch.Tensor:
        """(..., L, patch_dim), (..., L, token_dim) -> (..., L, 2)."""
        if p_bar.shape[-1] + t_bar.shape[-1] != self.conv1.in_channels:
            raise ShapeError(
                f"concatenated width {p_bar.shape[-1] + t_bar.shape[-1]} != conv input width {self.conv1.in_channels}"
            )
        x = torch.cat([p_bar, t_bar], dim=-1)
        lead = x.shape[:-2]
        x = x.reshape(-1, *x.shape[-2:]).transpose(1, 2)
        out = self.conv2(F.relu(self.conv1(x))).transpose(1, 2)
        return out.reshape(*lead, *out.shape[1:])

    def decide(self, p_bar, t_bar, modality_mask=None) -> torch.Tensor:
        logits = self.logits(p_bar, t_bar)
        if modality_mask is not None:
            mask = torch.as_tensor(modality_mask, dtype=torch.bool, device=logits.device)
            _check_mask(mask)
            while mask.dim() < logits.dim():
                mask = mask.unsqueeze(-2)
            logits = logits.masked_fill(~mask, float("-inf"))
        return two_way_softmax(logits)

    def forward(self, patches, tokens, modality_mask=None) -> torch.Tensor:
        """Pooled per-clip inputs (B, L, C) -> weights (B, L, 2); ``modality_mask`` is (B, 2)."""
        p_bar, t_bar = self.pool_and_norm(patches, tokens)
        return self.decide(p_bar, t_bar, modality_mask)


def decision_forward(p_bar: torch.Tensor, t_bar: torch.Tensor, net: DecisionNet) -> torch.Tensor:
    """Weights for single-clip or stacked normalized vectors; accepts (C,) inputs."""
    squeeze = p_bar.dim() == 1
    if squeeze:
        p_bar, t_bar = p_bar[None], t_bar[None]
    w = net.decide(p_bar, t_bar)
    return w[0] if squeeze else w
