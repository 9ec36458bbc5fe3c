"""Train the matching x aggregation grid plus baselines on one world and print the table.

    python3 scripts/ablation.py --epochs 12 --seeds 0 1 2 --out runs/ablation
"""

import argparse
import dataclasses
import json
import logging
import os

import torch

from wsground.ablation import ablation_report, run_ablation
from wsground.dataset import WorldConfig, generate_world
from wsground.text import Vocabulary
from wsground.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--train-scenes", type=int, default=2000)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    world = WorldConfig(num_scenes=args.train_scenes, sigma=args.sigma)
    train = generate_world(world, 0, "train")
    val = generate_world(dataclasses.replace(world, num_scenes=100), 0, "val")
    test = generate_world(dataclasses.replace(world, num_scenes=100), 0, "test")
    vocab = Vocabulary(world.vocabulary())
    os.makedirs(args.out, exist_ok=True)
    for seed in args.seeds:
        results = run_ablation(TrainConfig(epochs=args.epochs, seed=seed), train, val, test, vocab)
        report = ablation_report(results, seed)
        with open(os.path.join(args.out, f"ablation_seed{seed}.json"), "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
        print(f"seed {seed}\n{report['table']}\nfull >= pool-phrases Det%: {report['full_ge_pool_phrases_det']}\n")


if __name__ == "__main__":
    main()
