import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_lower_median, brute_ranks, brute_recall, raster_iou
from wsground.dataset import BoundingBox, WorldConfig, generate_world
from wsground.evaluation import (EvaluationError, LocalizationResult, det_percent, evaluate_localization, iou,
                                 localize_phrase, point_in_box, point_percent, retrieval_eval)
from wsground.model import Corpus, ModelConfig
from wsground.baselines import PoolingModel
from wsground.text import Vocabulary


def box(*c):
    return BoundingBox(*c)


def test_iou_examples():
    assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0
    assert iou(box(0, 0, 2, 2), box(3, 3, 5, 5)) == 0.0
    assert iou(box(0, 0, 2, 2), box(2, 0, 4, 2)) == 0.0
    assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1 / 7)


int_box = st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(1, 8), st.integers(1, 8)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=300, deadline=None)
@given(int_box, int_box)
def test_iou_matches_raster_oracle_and_is_symmetric(a, b):
    got = iou(box(*a), box(*b))
    assert got == pytest.approx(raster_iou(a, b), abs=1e-12)
    assert got == iou(box(*b), box(*a))
    assert 0.0 <= got <= 1.0


@settings(max_examples=100, deadline=None)
@given(int_box, int_box, st.integers(1, 5))
def test_iou_monotone_when_moving_away(a, b, shift):
    # Slide b right; once it is to the right of a's left edge, overlap can only shrink.
    if b[0] < a[0]:
        return
    moved = (b[0] + shift, b[1], b[2] + shift, b[3])
    assert iou(box(*a), box(*moved)) <= iou(box(*a), box(*b)) + 1e-12


def result(iou_value, pred=(0, 0, 10, 10), gold=(0, 0, 10, 10)):
    return LocalizationResult("s", 0, 0, 0, box(*pred), box(*gold), iou_value)


def test_det_percent_inclusive_threshold():
    assert det_percent([result(0.6), result(0.4), result(0.5)]) == pytest.approx(200 / 3)


def test_point_hits():
    assert point_in_box((5, 5), box(0, 0, 10, 10))
    assert not point_in_box((11, 5), box(0, 0, 10, 10))
    assert point_in_box((10, 10), box(0, 0, 10, 10))
    assert result(0.0, pred=(4, 4, 6, 6)).point_hit
    assert not result(0.0, pred=(10, 0, 14, 10)).point_hit


def test_empty_results_rejected():
    with pytest.raises(EvaluationError):
        det_percent([])
    with pytest.raises(EvaluationError):
        point_percent([])


def test_retrieval_worked_examples():
    s = retrieval_eval(np.eye(4), np.arange(4)).summary()
    assert s == {"R@1": 100.0, "R@5": 100.0, "R@10": 100.0, "MedR": 1}
    # Build rows where the gt lands at ranks 1, 3 and 12 among 15 images.
    scores = np.zeros((3, 15))
    for c, rank in enumerate((1, 3, 12)):
        scores[c, :rank - 1] = 1.0
        scores[c, 14] = 0.5
    gt = np.array([14, 14, 14])
    res = retrieval_eval(scores, gt)
    assert res.ranks.tolist() == [1, 3, 12]
    s = res.summary()
    assert s["R@1"] == pytest.approx(100 / 3) and s["R@5"] == pytest.approx(200 / 3)
    assert s["R@10"] == pytest.approx(200 / 3) and s["MedR"] == 3


def test_all_equal_scores_rank_one():
    assert retrieval_eval(np.full((5, 7), 0.3), np.arange(5) % 7).ranks.tolist() == [1] * 5


def test_lower_median_for_even_counts():
    scores = np.zeros((4, 10))
    for c, rank in enumerate((1, 2, 5, 9)):
        scores[c, :rank - 1] = 1.0
    res = retrieval_eval(scores, np.full(4, 9))
    assert res.median_rank == 2


def test_retrieval_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n_img = int(rng.integers(1, 51))
        n_cap = int(rng.integers(1, 51))
        scores = np.round(rng.standard_normal((n_cap, n_img)), 1)  # coarse rounding forces ties
        gt = rng.integers(0, n_img, n_cap)
        res = retrieval_eval(scores, gt)
        ranks = brute_ranks(scores.tolist(), gt.tolist())
        assert res.ranks.tolist() == ranks
        assert all(1 <= r <= n_img for r in ranks)
        for k in (1, 5, 10):
            assert res.recall(k) == brute_recall(ranks, k)
        assert res.median_rank == brute_lower_median(ranks)


def test_metric_recounts_on_random_result_sets():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(1, 40))
        results = []
        for _ in range(n):
            a = [int(v) for v in rng.integers(0, 20, 2)]
            b = [int(v) for v in rng.integers(0, 20, 2)]
            pa = (a[0], a[1], a[0] + int(rng.integers(1, 10)), a[1] + int(rng.integers(1, 10)))
            pb = (b[0], b[1], b[0] + int(rng.integers(1, 10)), b[1] + int(rng.integers(1, 10)))
            results.append(LocalizationResult("s", 0, 0, 0, box(*pa), box(*pb), iou(box(*pa), box(*pb))))
        hits = 0
        points = 0
        for r in results:
            hits += raster_iou(r.predicted_box.as_list(), r.gold_box.as_list()) >= 0.5
            cx = (r.predicted_box.x1 + r.predicted_box.x2) / 2
            cy = (r.predicted_box.y1 + r.predicted_box.y2) / 2
            points += r.gold_box.x1 <= cx <= r.gold_box.x2 and r.gold_box.y1 <= cy <= r.gold_box.y2
        assert det_percent(results) == pytest.approx(100.0 * hits / n, abs=1e-12)
        assert point_percent(results) == pytest.approx(100.0 * points / n, abs=1e-12)


def test_localize_phrase_recovers_gold_in_noiseless_world():
    world = WorldConfig(num_scenes=15, sigma=0.0)
    scenes = generate_world(world, 3, split="test")
    vocab = Vocabulary(world.vocabulary())
    corpus = Corpus(scenes, vocab, dtype=torch.float64)
    config = ModelConfig(vocab_size=len(vocab), d_v=world.d_v, embed_dim=4, text_hidden=world.d_v // 2 + 1)
    model = PoolingModel(config).double()
    attrs = list(world.colors) + list(world.shapes) + list(world.sizes)

    def oracle_scores(images, captions):
        # Phrase embedding = indicator of the attribute words it mentions, compared by cosine to raw features.
        out = torch.zeros(len(captions), captions.max_phrases, images.features.shape[1], dtype=torch.float64)
        for n in range(len(captions)):
            ids = captions.caption_ids[n]
            for k, (start, length) in enumerate(captions.phrase_spans[n]):
                q = torch.zeros(world.d_v, dtype=torch.float64)
                for t in ids[start:start + length]:
                    tok = vocab.tokens[t - 1]
                    if tok in attrs:
                        q[attrs.index(tok)] = 1.0
                f = images.features[n]
                out[n, k] = (f @ q) / (f.norm(dim=-1) * q.norm())
        return out

    model.phrase_region_scores = oracle_scores
    results = evaluate_localization(model, corpus)
    assert det_percent(results) == 100.0 and point_percent(results) == 100.0
    g = scenes[0].gold_alignments[0]
    assert localize_phrase(model, corpus, 0, g.caption_index, g.phrase_index) == g.box


def test_localization_without_gold_is_an_error():
    world = WorldConfig(num_scenes=3)
    scenes = [s.__class__(s.scene_id, s.regions, s.captions, []) for s in generate_world(world, 0)]
    vocab = Vocabulary(world.vocabulary())
    config = ModelConfig(vocab_size=len(vocab), d_v=world.d_v)
    with pytest.raises(EvaluationError):
        evaluate_localization(PoolingModel(config), Corpus(scenes, vocab))
