"""Comparison systems: a global joint embedding and local-score pooling (words or phrases)."""

import torch
from torch import nn
from torch.nn.utils.rnn import pad_sequence

from wsground.global_matching import CaptionHead
from wsground.matching import ProjectionHead, normalize
from wsground.model import GroundingModel, pooled_scores


class GlobalModel(GroundingModel):
    """Whole image (mean of region features) and caption embedded in one space."""

    def __init__(self, config):
        super().__init__(config)
        self.image_head = nn.Linear(config.d_v, config.d_e)
        self.caption_head = CaptionHead(config.d_s, config.hidden, config.d_e, config.activation)

    def image_embeddings(self, images):
        m = images.mask.unsqueeze(-1).to(images.features.dtype)
        whole = (images.features * m).sum(1) / m.sum(1)
        return self.image_head(whole)

    def pair_scores(self, images, captions, **_):
        vn, v_dead = normalize(self.image_embeddings(images))
        cn, c_dead = normalize(self.caption_head(self.text(captions.caption_ids)))
        self._count_dead(v_dead)
        self._count_dead(c_dead)
        return (vn @ cn.T).clamp(-1.0, 1.0)

    def phrase_region_scores(self, images, captions):
        # Individual regions and phrases go through the same heads as whole images and captions.
        rn, _ = normalize(self.image_head(images.features))
        pn, _ = normalize(self.caption_head(self.encode_phrases(captions)))
        return torch.einsum("nrd,npd->npr", rn, pn)


class PoolingModel(GroundingModel):
    """Image-caption score = mean over caption units of the best region cosine.

    ``units="phrases"`` encodes each chunked phrase separately; ``units="words"``
    uses the caption encoder's per-token outputs.
    """

    def __init__(self, config, units="phrases"):
        super().__init__(config)
        if units not in ("phrases", "words"):
            raise ValueError(f"unknown pooling units {units!r}")
        self.units = units
        self.proj = ProjectionHead(config.d_v, config.d_s)

    def word_units(self, captions):
        outs = self.text.contextual(captions.caption_ids)
        mask = pad_sequence([torch.ones(o.shape[0], dtype=torch.bool) for o in outs], batch_first=True)
        return pad_sequence(outs, batch_first=True), mask

    def unit_embeddings(self, captions):
        if self.units == "words":
            return self.word_units(captions)
        return self.encode_phrases(captions), captions.phrase_mask

    def pair_scores(self, images, captions, **_):
        units, umask = self.unit_embeddings(captions)
        s = self.region_phrase_cosines(self.proj(images.features), images.mask, units, umask)
        return pooled_scores(s, umask, images.mask)

    def phrase_region_scores(self, images, captions):
        xn, _ = normalize(self.proj(images.features))
        if self.units == "phrases":
            pn, _ = normalize(self.encode_phrases(captions))
            return torch.einsum("nrd,npd->npr", xn, pn)
        # Words variant: a phrase scores a region by the mean cosine of its words in caption context.
        units, _ = self.word_units(captions)
        un, _ = normalize(units)
        word_s = torch.einsum("nrd,nld->nlr", xn, un)
        N, P = captions.phrase_mask.shape
        out = word_s.new_zeros(N, P, xn.shape[1])
        for n, spans in enumerate(captions.phrase_spans):
            for k, (start, length) in enumerate(spans):
                out[n, k] = word_s[n, start:start + length].mean(0)
        return out
