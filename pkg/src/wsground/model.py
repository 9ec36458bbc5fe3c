"""Batched data views and the caption-conditioned grounding model.

Scores are computed in blocks: ``I`` images against ``C`` captions give an
``(I, C)`` matrix. Every entry re-runs local matching of image ``i`` against
the phrases of caption ``j``, because the image representation depends on the
caption it is compared with.
"""

from dataclasses import dataclass, field

import torch
from torch import nn

from wsground.aggregator import AGGREGATORS, build_aggregator
from wsground.global_matching import CaptionHead
from wsground.matching import STRATEGIES, ProjectionHead, batched_selection, normalize
from wsground.text import TextEncoder, Vocabulary, chunk_caption

MODEL_KINDS = ("align2ground", "global", "pool-words", "pool-phrases")
ROI_SPACES = ("raw", "projected")


@dataclass
class ModelConfig:
    vocab_size: int
    d_v: int
    embed_dim: int = 32
    text_hidden: int = 32
    d_e: int = 64
    hidden: int = 64
    activation: str = "relu"
    kind: str = "align2ground"
    strategy: str = "topk"
    aggregator: str = "permInv"
    topk: int = 3
    temperature: float = 1.0
    roi_space: str = "raw"

    @property
    def d_s(self):
        return 2 * self.text_hidden

    @property
    def roi_dim(self):
        return self.d_v if self.roi_space == "raw" else self.d_s

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown match strategy {self.strategy!r}")
        if self.roi_space not in ROI_SPACES:
            raise ValueError(f"unknown roi_space {self.roi_space!r}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        for name in ("vocab_size", "d_v", "embed_dim", "text_hidden", "d_e", "hidden", "topk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class ImageBatch:
    features: torch.Tensor  # (I, R, d_v)
    mask: torch.Tensor  # (I, R) bool

    def __len__(self):
        return self.features.shape[0]


@dataclass
class CaptionBatch:
    caption_ids: list  # C lists of token ids
    phrase_ids: list  # flat list of phrase token-id lists
    phrase_slots: torch.Tensor  # flat position of each phrase in (C * P_max)
    phrase_mask: torch.Tensor  # (C, P_max) bool
    phrase_spans: list = field(default_factory=list)  # per caption: [(start, length), ...]

    def __len__(self):
        return len(self.caption_ids)

    @property
    def max_phrases(self):
        return self.phrase_mask.shape[1]


class Corpus:
    """Scenes with precomputed feature tensors and chunked, id-encoded captions."""

    def __init__(self, scenes, vocab, dtype=torch.float32):
        self.scenes = list(scenes)
        self.vocab = vocab
        self.dtype = dtype
        self.features = [torch.as_tensor(s.features(), dtype=dtype) for s in self.scenes]
        self.caption_ids = []
        self.phrases = []
        for s in self.scenes:
            self.caption_ids.append([vocab.encode(c) for c in s.captions])
            self.phrases.append([chunk_caption(c) for c in s.captions])
        self.items = [(i, c) for i, s in enumerate(self.scenes) for c in range(len(s.captions))]

    def __len__(self):
        return len(self.scenes)

    def image_batch(self, scene_indices):
        feats = [self.features[i] for i in scene_indices]
        R = max(f.shape[0] for f in feats)
        d_v = feats[0].shape[1]
        out = torch.zeros(len(feats), R, d_v, dtype=self.dtype)
        mask = torch.zeros(len(feats), R, dtype=torch.bool)
        for n, f in enumerate(feats):
            out[n, : f.shape[0]] = f
            mask[n, : f.shape[0]] = True
        return ImageBatch(out, mask)

    def caption_batch(self, items):
        return make_caption_batch(
            [self.caption_ids[i][c] for i, c in items],
            [self.phrases[i][c] for i, c in items],
            self.vocab,
        )

    def negative_mask(self, items):
        """``mask[i, j]`` is True when caption ``j`` is not paired with image ``i``."""
        B = len(items)
        mask = torch.ones(B, B, dtype=torch.bool)
        for a, (si, _) in enumerate(items):
            own = {tuple(t) for t in self.scenes[si].captions}
            for b, (sj, cj) in enumerate(items):
                if si == sj or self.scenes[si].scene_id == self.scenes[sj].scene_id \
                        or tuple(self.scenes[sj].captions[cj]) in own:
                    mask[a, b] = False
        return mask


def make_caption_batch(caption_ids, phrase_lists, vocab):
    P = max(len(p) for p in phrase_lists)
    if P == 0:
        raise ValueError("caption has no phrases")
    phrase_ids, slots, spans = [], [], []
    mask = torch.zeros(len(caption_ids), P, dtype=torch.bool)
    for c, phrases in enumerate(phrase_lists):
        if not phrases:
            raise ValueError("caption has no phrases")
        spans.append([(ph.start, len(ph.tokens)) for ph in phrases])
        for k, ph in enumerate(phrases):
            phrase_ids.append(vocab.encode(ph.tokens))
            slots.append(c * P + k)
            mask[c, k] = True
    return CaptionBatch(list(caption_ids), phrase_ids, torch.as_tensor(slots, dtype=torch.long), mask, spans)


def caption_batch_from_tokens(captions, vocab):
    return make_caption_batch([vocab.encode(c) for c in captions], [chunk_caption(c) for c in captions], vocab)


def single_image(features, dtype=None):
    feats = torch.as_tensor(features, dtype=dtype)
    return ImageBatch(feats[None], torch.ones(1, feats.shape[0], dtype=torch.bool))


class GroundingModel(nn.Module):
    """Common interface for the full model and the baselines.

    ``pair_scores(images, captions)`` returns the ``(I, C)`` image-caption
    score block; ``phrase_region_scores(images, captions)`` returns
    ``(N, P, R)`` phrase-to-region scores for ``N`` paired image/caption rows
    and drives localization.
    """

    def __init__(self, config):
        super().__init__()
        config.validate()
        self.config = config
        self.text = TextEncoder(config.vocab_size, config.embed_dim, config.text_hidden)
        self.zero_norm_events = 0

    def encode_phrases(self, captions):
        enc = self.text(captions.phrase_ids)
        C, P = captions.phrase_mask.shape
        flat = enc.new_zeros(C * P, enc.shape[-1]).index_copy(0, captions.phrase_slots, enc)
        return flat.reshape(C, P, -1)

    def _count_dead(self, dead):
        n = int(dead.sum())
        self.zero_norm_events += n

    def region_phrase_cosines(self, x_hat, region_mask, phrases, phrase_mask):
        """``(I, C, P, R)`` cosines; zero-norm pairs give 0 and are counted."""
        xn, x_dead = normalize(x_hat)
        pn, p_dead = normalize(phrases)
        self._count_dead(x_dead & region_mask)
        self._count_dead(p_dead & phrase_mask)
        return torch.einsum("ird,cpd->icpr", xn, pn).clamp(-1.0, 1.0)

    def localize_indices(self, images, captions):
        """Argmax region per phrase for paired rows: ``(N, P)`` long tensor."""
        with torch.no_grad():
            s = self.phrase_region_scores(images, captions)
            s = s.masked_fill(~images.mask[:, None, :], float("-inf"))
            return s.argmax(-1)


def pooled_scores(s, phrase_mask, region_mask):
    """Average over phrases of each phrase's best region score: ``(I, C)``."""
    best = s.masked_fill(~region_mask[:, None, None, :], float("-inf")).max(-1).values
    best = best.masked_fill(~phrase_mask[None], 0.0)
    return best.sum(-1) / phrase_mask.sum(-1)[None].to(s.dtype)


class Align2Ground(GroundingModel):
    """Local matching, caption-conditioned aggregation, global matching."""

    def __init__(self, config):
        super().__init__(config)
        self.proj = ProjectionHead(config.d_v, config.d_s)
        self.aggregator = build_aggregator(config.aggregator, config.roi_dim, config.d_e, config.hidden, config.activation)
        self.caption_head = CaptionHead(config.d_s, config.hidden, config.d_e, config.activation)

    def local_scores(self, images, captions):
        phrases = self.encode_phrases(captions)
        return self.region_phrase_cosines(self.proj(images.features), images.mask, phrases, captions.phrase_mask)

    def roi_features(self, images):
        """Per-region vectors handed to the aggregator: raw features or their projections."""
        if self.config.roi_space == "projected":
            return self.proj(images.features)
        return images.features

    def select(self, s, images, *, mode="infer", rng=None, random_pairs=None):
        cfg = self.config
        if mode == "train" and cfg.strategy == "topk" and random_pairs is None:
            raise ValueError("training-mode topk selection needs random_pairs")
        if mode != "train":
            random_pairs = None
        return batched_selection(s, images.mask, cfg.strategy, k=cfg.topk, rng=rng, random_pairs=random_pairs,
                                 temperature=cfg.temperature)

    def matched_rois(self, images, idx, weights):
        feats = self.roi_features(images)
        if weights is not None:
            return torch.einsum("icpr,ird->icpd", weights, feats)
        I, C, P = idx.shape
        flat = idx.reshape(I, C * P)
        gathered = feats.gather(1, flat.unsqueeze(-1).expand(I, C * P, feats.shape[-1]))
        return gathered.reshape(I, C, P, feats.shape[-1])

    def caption_embeddings(self, captions):
        return self.caption_head(self.text(captions.caption_ids))

    def pair_scores(self, images, captions, *, mode="infer", rng=None, random_pairs=None, selection=None,
                    return_details=False):
        """``(I, C)`` scores; ``selection`` freezes the ``(I, C, P)`` region indices."""
        s = self.local_scores(images, captions)
        if selection is not None:
            idx, weights = selection, None
        else:
            idx, weights = self.select(s, images, mode=mode, rng=rng, random_pairs=random_pairs)
        rois = self.matched_rois(images, idx, weights)
        I = len(images)
        pmask = captions.phrase_mask[None].expand(I, -1, -1)
        r_hat = self.aggregator(rois, pmask)
        c_hat = self.caption_embeddings(captions)
        rn, r_dead = normalize(r_hat)
        cn, c_dead = normalize(c_hat)
        self._count_dead(r_dead)
        self._count_dead(c_dead)
        S = (rn * cn[None]).sum(-1).clamp(-1.0, 1.0)
        if return_details:
            return S, {"local": s, "indices": idx, "weights": weights, "rois": rois}
        return S

    def pooling_scores(self, images, captions):
        """Warm-start objective: phrase-level pooled local scores on shared weights."""
        s = self.local_scores(images, captions)
        return pooled_scores(s, captions.phrase_mask, images.mask)

    def phrase_region_scores(self, images, captions):
        phrases = self.encode_phrases(captions)
        xn, _ = normalize(self.proj(images.features))
        pn, _ = normalize(phrases)
        return torch.einsum("nrd,npd->npr", xn, pn)


def build_model(config):
    from wsground.baselines import GlobalModel, PoolingModel

    config.validate()
    if config.kind == "align2ground":
        return Align2Ground(config)
    if config.kind == "global":
        return GlobalModel(config)
    return PoolingModel(config, units="words" if config.kind == "pool-words" else "phrases")


def vocab_for(scenes, tokens=None):
    if tokens is not None:
        return Vocabulary(tokens)
    return Vocabulary({t for s in scenes for c in s.captions for t in c})
