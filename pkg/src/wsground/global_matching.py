"""Caption head, image-caption cosine score, and the hardest-negative ranking loss."""

import warnings

import torch
from torch import nn

from wsground.aggregator import ACTIVATIONS
from wsground.matching import cosine

DEFAULT_MARGIN = 0.1


class CaptionHead(nn.Module):
    """Two-layer perceptron taking the caption encoding into the joint space."""

    def __init__(self, d_s, hidden=64, d_e=64, activation="relu"):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(d_s, hidden), ACTIVATIONS[activation](), nn.Linear(hidden, d_e))

    def forward(self, caption_encoding):
        return self.mlp(caption_encoding)


def score_pair(image_repr, caption_encoding, head):
    """Cosine between the caption-conditioned image vector and the embedded caption."""
    c_hat = head(caption_encoding)
    if c_hat.shape[-1] != image_repr.shape[-1]:
        raise ValueError(f"joint-space dims disagree: {c_hat.shape[-1]} vs {image_repr.shape[-1]}")
    score, n_zero = cosine(c_hat, image_repr)
    if n_zero:
        warnings.warn("zero-norm vector in score_pair; score set to 0", RuntimeWarning, stacklevel=2)
    return score


def default_negative_mask(B, device=None):
    return ~torch.eye(B, dtype=torch.bool, device=device)


def ranking_loss(S, margin=DEFAULT_MARGIN, negative_mask=None, reduction="mean"):
    """Bidirectional max-margin loss with the hardest in-batch negatives.

    ``S[i, j]`` scores image ``i`` against caption ``j``; the diagonal holds the
    positive pairs. For each ``i`` the hinge uses the highest-scoring valid
    caption negative in row ``i`` and image negative in column ``i``.
    ``negative_mask[i, j]`` marks pairs allowed to act as negatives. Rows or
    columns without a valid negative contribute nothing.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    B = S.shape[0]
    if S.ndim != 2 or S.shape[1] != B:
        raise ValueError("score matrix must be square")
    if negative_mask is None:
        negative_mask = default_negative_mask(B, S.device)
    if B < 2 or not bool(negative_mask.any()):
        if B < 2:
            warnings.warn("ranking loss on a batch of one has no negatives", RuntimeWarning, stacklevel=2)
        zero = S.sum() * 0.0
        return zero if reduction == "mean" else S.diagonal() * 0.0

    pos = S.diagonal()
    neg_inf = torch.finfo(S.dtype).min
    hardest_caption = S.masked_fill(~negative_mask, neg_inf).max(dim=1).values
    hardest_image = S.masked_fill(~negative_mask, neg_inf).max(dim=0).values
    has_c = negative_mask.any(dim=1)
    has_i = negative_mask.any(dim=0)
    zero = torch.zeros_like(pos)
    loss_c = torch.where(has_c, (margin - pos + hardest_caption).clamp(min=0), zero)
    loss_i = torch.where(has_i, (margin - pos + hardest_image).clamp(min=0), zero)
    per_pair = loss_c + loss_i
    if reduction == "none":
        return per_pair
    return per_pair.mean()
