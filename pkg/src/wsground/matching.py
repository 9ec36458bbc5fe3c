"""Region-phrase scoring and matched-region selection (max, top-k random, attention)."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

STRATEGIES = ("max", "topk", "attention")
_TINY = 1e-30


def cosine(a, b):
    """Cosine along the last axis with broadcasting; zero-norm inputs give 0.

    Returns ``(cos, n_zero)`` where ``n_zero`` counts output entries that
    involved a zero-norm vector.
    """
    a_sq = (a * a).sum(-1, keepdim=True)
    b_sq = (b * b).sum(-1, keepdim=True)
    a_n = a / a_sq.clamp_min(_TINY).sqrt()
    b_n = b / b_sq.clamp_min(_TINY).sqrt()
    cos = (a_n * b_n).sum(-1).clamp(-1.0, 1.0)
    dead = ((a_sq == 0) | (b_sq == 0)).squeeze(-1)
    n_zero = int(torch.broadcast_to(dead, cos.shape).sum()) if dead.any() else 0
    return cos, n_zero


def normalize(x):
    sq = (x * x).sum(-1, keepdim=True)
    return x / sq.clamp_min(_TINY).sqrt(), (sq == 0).squeeze(-1)


class ProjectionHead(nn.Module):
    """Linear map of region features into phrase space (``x_hat = W^T x``)."""

    def __init__(self, d_v, d_s):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_v, d_s))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return x @ self.weight


def score_pairs(region_features, phrase_embeddings, head):
    """Cosine of every projected region against every phrase: ``(R, P)`` tensor.

    Returns ``(scores, n_zero)``.
    """
    x_hat = head(region_features)
    return cosine(x_hat[:, None, :], phrase_embeddings[None, :, :])


def _as_numpy(row):
    if isinstance(row, torch.Tensor):
        row = row.detach().cpu().numpy()
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ValueError("similarity row must be a non-empty vector")
    return row


def select_max(row):
    """Index of the best-scoring region; ties go to the lowest index."""
    return int(np.argmax(_as_numpy(row)))


def top_candidates(row, k):
    row = _as_numpy(row)
    k = min(max(int(k), 1), row.size)
    return np.argsort(-row, kind="stable")[:k]


def select_topk_random(row, k, rng):
    """Uniform draw among the ``min(k, R)`` best-scoring regions (training only)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cand = top_candidates(row, k)
    return int(cand[rng.integers(len(cand))])


def select_attention(row, region_features, temperature=1.0):
    """Softmax weights over regions and the attended raw feature vector."""
    if not isinstance(row, torch.Tensor):
        row = torch.as_tensor(np.asarray(row), dtype=region_features.dtype)
    weights = torch.softmax(row / temperature, dim=-1)
    return weights, weights @ region_features


@dataclass
class MatchOutcome:
    strategy: str
    scores: torch.Tensor  # (R, P)
    indices: list  # selected (max/topk) or argmax-attention region per phrase
    weights: torch.Tensor = None  # (P, R), attention only
    matched: torch.Tensor = None  # (P, d_v) caption-conditioned RoI list

    def __len__(self):
        return len(self.indices)


def match_caption(region_features, phrase_embeddings, head, strategy="topk", mode="infer", rng=None, k=3,
                  temperature=1.0):
    """Caption-conditioned RoI list for one scene and one caption's phrases.

    In ``infer`` mode max and topk both use argmax selection; attention keeps
    its soft weights and reports ``argmax`` of the weights as the index.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if phrase_embeddings.shape[0] == 0:
        raise ValueError("caption has no phrases")
    scores, _ = score_pairs(region_features, phrase_embeddings, head)
    P = scores.shape[1]
    if strategy == "attention":
        weights = torch.softmax(scores.T / temperature, dim=-1)
        matched = weights @ region_features
        indices = [select_max(weights[p]) for p in range(P)]
        return MatchOutcome(strategy, scores, indices, weights, matched)
    if strategy == "topk" and mode == "train":
        if rng is None:
            raise ValueError("topk training selection needs an explicit rng")
        indices = [select_topk_random(scores[:, p], k, rng) for p in range(P)]
    else:
        indices = [select_max(scores[:, p]) for p in range(P)]
    matched = region_features[torch.as_tensor(indices, dtype=torch.long)]
    return MatchOutcome(strategy, scores, indices, None, matched)


def batched_selection(scores, region_mask, strategy, *, k=3, rng=None, random_pairs=None, temperature=1.0):
    """Selection over a block of pair scores.

    ``scores`` is ``(I, C, P, R)``; ``region_mask`` is ``(I, R)``. Returns
    ``(indices, weights)``: integer ``(I, C, P)`` indices, plus ``(I, C, P, R)``
    softmax weights for attention (else ``None``). ``random_pairs`` is an
    optional ``(I, C)`` boolean mask of pairs that use top-k random draws;
    every other pair uses argmax.
    """
    masked = scores.masked_fill(~region_mask[:, None, None, :], float("-inf"))
    if strategy == "attention":
        weights = torch.softmax(masked / temperature, dim=-1)
        return weights.argmax(-1), weights
    idx = masked.argmax(-1)
    if strategy == "topk" and random_pairs is not None and bool(random_pairs.any()):
        if rng is None:
            raise ValueError("topk training selection needs an explicit rng")
        order = torch.sort(masked.detach(), dim=-1, descending=True, stable=True).indices
        k_eff = region_mask.sum(-1).clamp(max=k)  # (I,)
        u = torch.as_tensor(rng.random(idx.shape), dtype=torch.float64)
        pick = (u * k_eff[:, None, None].to(torch.float64)).floor().long()
        drawn = order.gather(-1, pick.unsqueeze(-1)).squeeze(-1)
        idx = torch.where(random_pairs[:, :, None], drawn, idx)
    return idx, None
