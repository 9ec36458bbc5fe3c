"""Training loop, warm start, checkpoint selection and the checkpoint container."""

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from wsground.blobs import decode_blob, encode_blob
from wsground.evaluation import evaluate
from wsground.global_matching import ranking_loss
from wsground.model import Corpus, ModelConfig, build_model
from wsground.text import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wsground-checkpoint/1"


@dataclass
class TrainConfig:
    model: str = "align2ground"
    strategy: str = "topk"
    aggregator: str = "permInv"
    topk: int = 3
    temperature: float = 1.0
    roi_space: str = "raw"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    margin: float = 0.1
    seed: int = 0
    embed_dim: int = 32
    text_hidden: int = 32
    d_e: int = 64
    hidden: int = 64
    activation: str = "relu"
    warm_start: bool = True
    warm_start_fraction: float = 0.2
    eval_every: int = 1

    def validate(self):
        for name in ("epochs", "batch_size", "topk", "embed_dim", "text_hidden", "d_e", "hidden", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 to form negatives")
        if self.lr <= 0 or self.margin <= 0 or self.temperature <= 0:
            raise ValueError("lr, margin and temperature must be positive")
        if not 0 <= self.warm_start_fraction < 1:
            raise ValueError("warm_start_fraction must lie in [0, 1)")

    def model_config(self, vocab_size, d_v):
        return ModelConfig(vocab_size=vocab_size, d_v=d_v, embed_dim=self.embed_dim, text_hidden=self.text_hidden,
                           d_e=self.d_e, hidden=self.hidden, activation=self.activation, kind=self.model,
                           strategy=self.strategy, aggregator=self.aggregator, topk=self.topk,
                           temperature=self.temperature, roi_space=self.roi_space)

    def warm_epochs(self):
        if not self.warm_start or self.model != "align2ground":
            return 0
        return int(round(self.warm_start_fraction * self.epochs))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocabulary: list
    state: dict
    epoch: int
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def build(self):
        model = build_model(copy.deepcopy(self.model_config))
        model.load_state_dict({k: v.clone() for k, v in self.state.items()})
        model.eval()
        return model

    def vocab(self):
        return Vocabulary(self.vocabulary)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def save_checkpoint(ckpt, path):
    names = list(ckpt.state)
    blobs, params, offset = [], [], 0
    for name in names:
        blob = encode_blob(ckpt.state[name].detach().cpu().numpy())
        params.append({"name": name, "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": ckpt.train_config.to_dict(),
        "config_digest": ckpt.train_config.digest(),
        "vocabulary": ckpt.vocabulary,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "history": ckpt.history,
        "params": params,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(b"".join(blobs))
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    newline = buf.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: not a checkpoint (missing header)")
    header = json.loads(buf[:newline])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    train_config = TrainConfig.from_dict(header["train_config"])
    if train_config.digest() != header["config_digest"]:
        raise ValueError(f"{path}: train config digest mismatch")
    body = buf[newline + 1:]
    state = {}
    for p in header["params"]:
        arr, _ = decode_blob(body, p["offset"])
        state[p["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(ModelConfig(**header["model_config"]), train_config, header["vocabulary"], state,
                      header["epoch"], header["metrics"], header["history"])


def _selection_key(metrics):
    return (metrics.get("R@1", 0.0), metrics.get("Det%", 0.0))


def train(config, train_scenes, val_scenes, vocab=None, callback=None):
    """Train one model variant; returns the checkpoint with the best validation R@1 (ties: Det%)."""
    config.validate()
    if vocab is None:
        vocab = Vocabulary({t for s in train_scenes for c in s.captions for t in c})
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    d_v = train_scenes[0].regions[0].feature.shape[0]
    model_config = config.model_config(len(vocab), d_v)
    model = build_model(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    corpus = Corpus(train_scenes, vocab)
    val = Corpus(val_scenes, vocab)
    val_has_gold = any(s.gold_alignments for s in val_scenes)
    warm = config.warm_epochs()
    B = config.batch_size
    eye = torch.eye(B, dtype=torch.bool)

    best, last, history = None, None, []
    for epoch in range(config.epochs):
        phase = "warm" if epoch < warm else "main"
        model.train()
        order = rng.permutation(len(corpus.items))
        losses = []
        for start in range(0, len(order) - B + 1, B):
            items = [corpus.items[i] for i in order[start:start + B]]
            images = corpus.image_batch([i for i, _ in items])
            captions = corpus.caption_batch(items)
            if phase == "warm":
                S = model.pooling_scores(images, captions)
            else:
                S = model.pair_scores(images, captions, mode="train", rng=rng, random_pairs=eye)
            loss = ranking_loss(S, config.margin, corpus.negative_mask(items))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {start // B}", last)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        record = {"epoch": epoch, "phase": phase, "train_loss": float(np.mean(losses)) if losses else 0.0}
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            record["val"] = evaluate(model, val, localization=val_has_gold)
            state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            last = Checkpoint(model_config, config, vocab.tokens, state, epoch, record["val"])
            if phase == "main" and (best is None or _selection_key(record["val"]) > _selection_key(best.metrics)):
                best = last
        history.append(record)
        log.info("epoch %d [%s] loss %.4f %s", epoch, phase, record["train_loss"], record.get("val", ""))
        if callback is not None:
            callback(record)
        if not math.isfinite(record["train_loss"]):
            raise TrainingDiverged(f"non-finite mean loss at epoch {epoch}", last)
    if best is None:
        best = last
    best.history = history
    return best
