"""Localization (Det%, PointIt%) and caption-to-image retrieval (R@K, median rank)."""

from dataclasses import dataclass

import numpy as np
import torch


class EvaluationError(ValueError):
    pass


def iou(a, b):
    """Intersection over union of two boxes; 0 when they do not overlap."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def point_in_box(point, box):
    x, y = point
    return box.x1 <= x <= box.x2 and box.y1 <= y <= box.y2


@dataclass
class LocalizationResult:
    scene_id: str
    caption_index: int
    phrase_index: int
    predicted_region: int
    predicted_box: object
    gold_box: object
    iou: float

    @property
    def det_hit(self):
        return self.iou >= 0.5

    @property
    def point_hit(self):
        return point_in_box(self.predicted_box.center, self.gold_box)


def det_percent(results):
    if not results:
        raise EvaluationError("no localization results")
    return 100.0 * sum(r.det_hit for r in results) / len(results)


def point_percent(results):
    if not results:
        raise EvaluationError("no localization results")
    return 100.0 * sum(r.point_hit for r in results) / len(results)


@dataclass
class RetrievalResult:
    ranks: np.ndarray

    def recall(self, k):
        return 100.0 * int((self.ranks <= k).sum()) / len(self.ranks)

    @property
    def median_rank(self):
        ordered = np.sort(self.ranks)
        return int(ordered[(len(ordered) - 1) // 2])

    def summary(self):
        return {"R@1": self.recall(1), "R@5": self.recall(5), "R@10": self.recall(10),
                "MedR": self.median_rank}


def retrieval_eval(scores, gt):
    """Rank of each caption's ground-truth image in a ``(captions, images)`` score matrix.

    Rank is one plus the number of images scoring strictly higher, so ties
    resolve optimistically.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != gt.shape[0] or scores.shape[0] == 0:
        raise EvaluationError("score matrix must be (captions, images) with one gt index per caption")
    positive = scores[np.arange(len(gt)), gt]
    ranks = 1 + (scores > positive[:, None]).sum(axis=1)
    return RetrievalResult(ranks.astype(np.int64))


def localize(model, corpus, items, chunk=256):
    """Argmax region for every phrase of the given ``(scene, caption)`` items."""
    model.eval()
    out = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        images = corpus.image_batch([i for i, _ in part])
        captions = corpus.caption_batch(part)
        idx = model.localize_indices(images, captions)
        for n, (_, c) in enumerate(part):
            P = int(captions.phrase_mask[n].sum())
            out.append(idx[n, :P].tolist())
    return out


def localize_phrase(model, corpus, scene_index, caption_index, phrase_index):
    """Predicted box for one phrase of one caption (inference selection, no randomness)."""
    idx = localize(model, corpus, [(scene_index, caption_index)])[0]
    return corpus.scenes[scene_index].regions[idx[phrase_index]].box


def evaluate_localization(model, corpus):
    """Score every gold phrase alignment in ``corpus``."""
    items = sorted({(i, g.caption_index) for i, s in enumerate(corpus.scenes) for g in s.gold_alignments})
    if not items:
        raise EvaluationError("split has no gold alignments; localization needs an evaluation split")
    predictions = dict(zip(items, localize(model, corpus, items)))
    results = []
    for i, scene in enumerate(corpus.scenes):
        for g in scene.gold_alignments:
            j = predictions[(i, g.caption_index)][g.phrase_index]
            box = scene.regions[j].box
            results.append(LocalizationResult(scene.scene_id, g.caption_index, g.phrase_index, j, box, g.box,
                                              iou(box, g.box)))
    return results


def score_matrix(model, corpus, chunk=64):
    """``(captions, images)`` inference scores over the whole corpus plus gt image indices."""
    model.eval()
    images = corpus.image_batch(range(len(corpus)))
    rows = []
    with torch.no_grad():
        for start in range(0, len(corpus.items), chunk):
            part = corpus.items[start:start + chunk]
            S = model.pair_scores(images, corpus.caption_batch(part), mode="infer")
            rows.append(S.T.double().cpu().numpy())
    gt = np.array([i for i, _ in corpus.items], dtype=np.int64)
    return np.concatenate(rows, axis=0), gt


def evaluate_retrieval(model, corpus):
    scores, gt = score_matrix(model, corpus)
    return retrieval_eval(scores, gt)


def evaluate(model, corpus, localization=True):
    metrics = evaluate_retrieval(model, corpus).summary()
    if localization:
        loc = evaluate_localization(model, corpus)
        metrics["Det%"] = det_percent(loc)
        metrics["PointIt%"] = point_percent(loc)
        metrics["num_phrases"] = len(loc)
    metrics["num_captions"] = len(corpus.items)
    metrics["num_images"] = len(corpus)
    return metrics


TABLE_COLUMNS = ("R@1", "R@5", "R@10", "MedR", "Det%", "PointIt%")


def format_table(rows):
    """Plain-text table; ``rows`` is a list of ``(label, metrics)``."""
    width = max([len("model")] + [len(label) for label, _ in rows])
    header = "model".ljust(width) + "".join(f"{c:>10}" for c in TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, m in rows:
        cells = []
        for c in TABLE_COLUMNS:
            v = m.get(c)
            if v is None:
                cells.append(f"{'-':>10}")
            elif c == "MedR":
                cells.append(f"{int(v):>10d}")
            else:
                cells.append(f"{v:>10.1f}")
        lines.append(label.ljust(width) + "".join(cells))
    return "\n".join(lines)
