import itertools
import warnings

import numpy as np
import pytest
import torch

from oracles import assert_grads_close, central_difference, scalar_ranking_loss
from wsground.global_matching import CaptionHead, ranking_loss, score_pair
from wsground.model import Align2Ground, Corpus, ModelConfig, make_caption_batch
from wsground.dataset import WorldConfig, generate_world
from wsground.text import Vocabulary, chunk_caption


def identity_head(d):
    head = CaptionHead(d, d, d, activation="identity").double()
    with torch.no_grad():
        for layer in (head.mlp[0], head.mlp[2]):
            layer.weight.copy_(torch.eye(d))
            layer.bias.zero_()
    return head


@pytest.mark.parametrize("c, r, expected", [
    ([1.0, 2.0, 0.0], [1.0, 2.0, 0.0], 1.0),
    ([1.0, 0.0, 0.0], [0.0, 3.0, 0.0], 0.0),
    ([1.0, -2.0, 0.5], [-1.0, 2.0, -0.5], -1.0),
])
def test_score_pair_cases(c, r, expected):
    s = score_pair(torch.tensor(r, dtype=torch.float64), torch.tensor(c, dtype=torch.float64), identity_head(3))
    assert s.item() == pytest.approx(expected, abs=1e-12)


def test_score_pair_zero_norm_warns():
    with pytest.warns(RuntimeWarning):
        s = score_pair(torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64), identity_head(3))
    assert s.item() == 0.0


def test_score_pair_dim_mismatch():
    with pytest.raises(ValueError):
        score_pair(torch.ones(4, dtype=torch.float64), torch.ones(3, dtype=torch.float64), identity_head(3))


def test_loss_examples():
    S = torch.tensor([[0.9, 0.3], [0.2, 0.9]], dtype=torch.float64)
    assert ranking_loss(S, 0.1, reduction="none")[0].item() == pytest.approx(0.0)
    S = torch.full((3, 3), 0.4, dtype=torch.float64)
    assert ranking_loss(S, 0.1).item() == pytest.approx(0.2)
    S = torch.tensor([[0.5, 0.6, 0.1], [0.45, 0.9, 0.0], [0.2, 0.0, 0.9]], dtype=torch.float64)
    oracle = max(0.0, 0.1 - 0.5 + 0.6) + max(0.0, 0.1 - 0.5 + 0.45)
    assert oracle == pytest.approx(0.25)
    assert ranking_loss(S, 0.1, reduction="none")[0].item() == pytest.approx(0.25)


def test_loss_batch_of_one_warns_and_is_zero():
    with pytest.warns(RuntimeWarning):
        assert ranking_loss(torch.tensor([[0.3]]), 0.1).item() == 0.0


def test_loss_rejects_nonpositive_margin():
    with pytest.raises(ValueError):
        ranking_loss(torch.eye(2), 0.0)


def test_loss_matches_scalar_oracle_with_masks():
    rng = np.random.default_rng(0)
    for _ in range(200):
        B = int(rng.integers(2, 7))
        S = rng.uniform(-1, 1, (B, B))
        valid = rng.random((B, B)) < 0.7
        np.fill_diagonal(valid, False)
        got = ranking_loss(torch.as_tensor(S), 0.2, torch.as_tensor(valid)).item()
        assert got == pytest.approx(scalar_ranking_loss(S.tolist(), 0.2, valid.tolist()), abs=1e-12)


def test_loss_gradient_reaches_hardest_negatives_only():
    S = torch.tensor([[0.5, 0.6, 0.1], [0.45, 0.9, 0.0], [0.2, 0.0, 0.9]], dtype=torch.float64, requires_grad=True)
    ranking_loss(S, 0.1, reduction="none")[0].backward()
    g = S.grad
    assert g[0, 0] == -2 and g[0, 1] == 1 and g[1, 0] == 1
    assert g[0, 2] == 0 and g[2, 0] == 0


def tiny_setup(seed=0, dtype=torch.float64, **cfg_kw):
    world = WorldConfig(num_scenes=4, objects_min=3, objects_max=3, distractors=0, R=3,
                        colors=("red", "blue"), shapes=("circle", "square"), sizes=("big",))
    scenes = generate_world(world, seed, split="val")
    vocab = Vocabulary(world.vocabulary())
    torch.manual_seed(seed)
    config = ModelConfig(vocab_size=len(vocab), d_v=world.d_v, **cfg_kw)
    model = Align2Ground(config).to(dtype)
    return scenes, vocab, model, Corpus(scenes, vocab, dtype=dtype)


def test_batch_scores_shape_range_and_duplicate_masking():
    scenes, vocab, model, corpus = tiny_setup(embed_dim=4, text_hidden=2, d_e=4, hidden=4, strategy="max")
    items = [(0, 0), (0, 0)]
    S = model.pair_scores(corpus.image_batch([0, 0]), corpus.caption_batch(items))
    assert S.shape == (2, 2) and bool(((S >= -1) & (S <= 1)).all())
    mask = corpus.negative_mask(items)
    assert not mask.any()
    assert ranking_loss(S, 0.1, mask).item() == 0.0
    items = [(0, 0), (1, 0), (2, 1)]
    mask = corpus.negative_mask(items)
    assert mask.tolist() == [[False, True, True], [True, False, True], [True, True, False]]


def test_batch_scores_off_diagonal_deterministic_in_training():
    scenes, vocab, model, corpus = tiny_setup(embed_dim=4, text_hidden=2, d_e=4, hidden=4, strategy="topk", topk=3)
    items = [(0, 0), (1, 0), (2, 0)]
    images, captions = corpus.image_batch([0, 1, 2]), corpus.caption_batch(items)
    eye = torch.eye(3, dtype=torch.bool)
    infer = model.pair_scores(images, captions, mode="infer")
    for seed in range(5):
        train = model.pair_scores(images, captions, mode="train", rng=np.random.default_rng(seed), random_pairs=eye)
        assert torch.equal(train[~eye], infer[~eye])
    assert torch.equal(infer, model.pair_scores(images, captions, mode="infer"))


def test_scores_equal_single_pair_ops():
    """Batched block scores agree with the one-scene, one-caption operations."""
    from wsground.matching import match_caption

    scenes, vocab, model, corpus = tiny_setup(embed_dim=4, text_hidden=3, d_e=4, hidden=5, strategy="max")
    S = model.pair_scores(corpus.image_batch([0, 1]), corpus.caption_batch([(0, 0), (1, 0)]))
    for i in range(2):
        for j in range(2):
            feats = corpus.features[i]
            phrases = model.text([vocab.encode(p.tokens) for p in chunk_caption(scenes[j].captions[0])])
            out = match_caption(feats, phrases, model.proj, "max")
            r = model.aggregator(out.matched)
            s = score_pair(r, model.text([vocab.encode(scenes[j].captions[0])])[0], model.caption_head)
            assert s.item() == pytest.approx(S[i, j].item(), abs=1e-12)


def test_set_aggregator_scores_invariant_to_phrase_order():
    scenes, vocab, model, corpus = tiny_setup(embed_dim=4, text_hidden=3, d_e=4, hidden=5, strategy="max")
    images = corpus.image_batch([0, 1, 2])
    cap = scenes[0].captions[0]
    phrases = chunk_caption(cap)
    ref = None
    for perm in itertools.permutations(range(len(phrases))):
        batch = make_caption_batch([vocab.encode(cap)], [[phrases[p] for p in perm]], vocab)
        S = model.pair_scores(images, batch)
        ref = S if ref is None else ref
        assert torch.equal(S, ref)


@pytest.mark.parametrize("strategy, aggregator", [("max", "permInv"), ("topk", "permInv"), ("max", "sequence"),
                                                  ("attention", "permInv")])
@pytest.mark.parametrize("roi_space", ["raw", "projected"])
def test_end_to_end_gradient_with_frozen_selection(strategy, aggregator, roi_space):
    scenes, vocab, model, corpus = tiny_setup(seed=3, embed_dim=3, text_hidden=2, d_e=4, hidden=4, activation="tanh",
                                              strategy=strategy, aggregator=aggregator, roi_space=roi_space)
    items = [(0, 0), (1, 1)]
    images, captions = corpus.image_batch([0, 1]), corpus.caption_batch(items)
    selection = None
    if strategy != "attention":
        _, details = model.pair_scores(images, captions, mode="train", rng=np.random.default_rng(0),
                                       random_pairs=torch.eye(2, dtype=torch.bool), return_details=True)
        selection = details["indices"]

    def loss_fn():
        return ranking_loss(model.pair_scores(images, captions, selection=selection), 0.5)

    params = [p for p in model.parameters()]
    model.zero_grad()
    loss = loss_fn()
    assert loss.item() > 0
    loss.backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    assert_grads_close(analytic, central_difference(loss_fn, params), rtol=1e-3, atol=1e-8)
