"""Encoders that turn a caption-conditioned RoI list into one image vector."""

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

AGGREGATORS = ("permInv", "sequence")

ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "gelu": nn.GELU,
    "identity": nn.Identity,
}


def order_free_mean(x, mask):
    """Masked mean over axis -2 that is bitwise independent of element order.

    Values are sorted along the set axis before summing, so any permutation of
    the elements yields the same floating point sum.
    """
    x = x.masked_fill(~mask.unsqueeze(-1), 0.0)
    total = torch.sort(x, dim=-2).values.sum(-2)
    count = mask.sum(-1, keepdim=True).clamp_min(1).to(x.dtype)
    return total / count


class SetEncoder(nn.Module):
    """Per-element two-layer perceptron followed by a mean over the set."""

    def __init__(self, d_v, hidden=64, d_e=64, activation="relu"):
        super().__init__()
        self.phi = nn.Sequential(nn.Linear(d_v, hidden), ACTIVATIONS[activation](), nn.Linear(hidden, d_e))
        self.out_dim = d_e

    def forward(self, rois, mask=None):
        """``rois``: ``(..., P, d_v)``; ``mask``: ``(..., P)`` boolean."""
        if rois.shape[-2] == 0:
            raise ValueError("empty RoI list")
        if mask is None:
            mask = torch.ones(rois.shape[:-1], dtype=torch.bool, device=rois.device)
        return order_free_mean(self.phi(rois), mask)


class SequenceEncoder(nn.Module):
    """Stacked bidirectional GRU over the RoI list; final states concatenated."""

    def __init__(self, d_v, d_e=64, num_layers=2):
        super().__init__()
        if d_e % 2:
            raise ValueError("sequence aggregator needs an even output dimension")
        self.gru = nn.GRU(d_v, d_e // 2, num_layers=num_layers, bidirectional=True, batch_first=True)
        self.out_dim = d_e

    def forward(self, rois, mask=None):
        if rois.shape[-2] == 0:
            raise ValueError("empty RoI list")
        lead = rois.shape[:-2]
        P, d_v = rois.shape[-2:]
        flat = rois.reshape(-1, P, d_v)
        if mask is None:
            lengths = torch.full((flat.shape[0],), P, dtype=torch.long)
        else:
            lengths = mask.reshape(-1, P).sum(-1).cpu()
        if bool((lengths == 0).any()):
            raise ValueError("empty RoI list")
        packed = pack_padded_sequence(flat, lengths, batch_first=True, enforce_sorted=False)
        _, h_n = self.gru(packed)
        out = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        return out.reshape(*lead, self.out_dim)


def build_aggregator(kind, d_v, d_e, hidden=64, activation="relu"):
    if kind == "permInv":
        return SetEncoder(d_v, hidden, d_e, activation)
    if kind == "sequence":
        return SequenceEncoder(d_v, d_e)
    raise ValueError(f"unknown aggregator {kind!r}")


def encode_set(rois, params):
    return params(rois)


def encode_sequence(rois, params):
    return params(rois)
