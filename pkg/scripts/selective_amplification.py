"""Clean captions vs captions carrying one unlocalizable noise phrase.

Trains the phrase-pooling baseline and the full model on both worlds and
reports how much each loses in retrieval R@1 and in Det%. The direction is
recorded, not asserted.

    python3 scripts/selective_amplification.py --epochs 12
"""

import argparse
import dataclasses
import json
import logging

import torch

from wsground.dataset import WorldConfig, generate_world
from wsground.evaluation import evaluate, format_table
from wsground.model import Corpus
from wsground.text import Vocabulary
from wsground.trainer import TrainConfig, train


def run(world, config):
    tr = generate_world(world, 0, "train")
    va = generate_world(dataclasses.replace(world, num_scenes=100), 0, "val")
    te = generate_world(dataclasses.replace(world, num_scenes=100), 0, "test")
    vocab = Vocabulary(world.vocabulary())
    ckpt = train(config, tr, va, vocab)
    return evaluate(ckpt.build(), Corpus(te, vocab))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train-scenes", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    rows, deltas = [], {}
    for model in ("pool-phrases", "align2ground"):
        config = TrainConfig(model=model, epochs=args.epochs, seed=args.seed)
        clean = run(WorldConfig(num_scenes=args.train_scenes), config)
        noisy = run(WorldConfig(num_scenes=args.train_scenes, noise_phrase_prob=1.0), config)
        rows += [(f"{model} clean", clean), (f"{model} noisy", noisy)]
        deltas[model] = {"R@1 drop": clean["R@1"] - noisy["R@1"], "Det% drop": clean["Det%"] - noisy["Det%"]}
    print(format_table(rows))
    print(json.dumps(deltas, indent=1))


if __name__ == "__main__":
    main()
