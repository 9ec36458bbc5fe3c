"""Independent reference computations used by the tests.

Nothing here imports the code under test; each oracle recomputes a quantity
the slow, obvious way.
"""

import math

import numpy as np
import torch


def raster_iou(a, b):
    """IoU of integer boxes ``[x1, y1, x2, y2]`` by counting covered unit cells."""
    cells_a = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    cells_b = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    union = len(cells_a | cells_b)
    return len(cells_a & cells_b) / union if union else 0.0


def brute_ranks(scores, gt):
    ranks = []
    for c, row in enumerate(scores):
        target = row[gt[c]]
        rank = 1
        for v in row:
            if v > target:
                rank += 1
        ranks.append(rank)
    return ranks


def brute_recall(ranks, k):
    return 100.0 * len([r for r in ranks if r <= k]) / len(ranks)


def brute_lower_median(values):
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def scalar_ranking_loss(S, margin, valid=None):
    """Per-pair hinge with the hardest negative in each direction, averaged, in plain Python."""
    B = len(S)
    total = 0.0
    for i in range(B):
        row = [S[i][j] for j in range(B) if j != i and (valid is None or valid[i][j])]
        col = [S[j][i] for j in range(B) if j != i and (valid is None or valid[j][i])]
        if row:
            total += max(0.0, margin - S[i][i] + max(row))
        if col:
            total += max(0.0, margin - S[i][i] + max(col))
    return total / B


def central_difference(fn, params, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``params`` (float64, in place perturbation)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-7):
    for a, n in zip(analytic, numeric):
        a = a.detach().numpy()
        n = n.detach().numpy()
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    return [v / sum(e) for v in e]
