"""Command line entry point: gen, train, eval-loc, eval-retrieval, ablate, visualize."""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

import torch

from wsground.ablation import ablation_report, run_ablation
from wsground.dataset import DatasetError, WorldConfig, dataset_digest, generate_world, load_dataset, \
    read_manifest, save_dataset
from wsground.evaluation import EvaluationError, det_percent, evaluate_localization, evaluate_retrieval, \
    format_table, localize, point_percent
from wsground.matching import STRATEGIES
from wsground.model import MODEL_KINDS, Corpus
from wsground.text import Vocabulary, chunk_caption
from wsground.trainer import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("wsground")

SPLITS = ("train", "val", "test")


class CLIError(Exception):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def digest_of(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write(path, text):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(text)


def _split_dir(data, split):
    path = os.path.join(data, split)
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise CLIError(f"missing {split} split under {data}", field="data")
    return path


def _vocab_for(data_path, scenes):
    info, _ = read_manifest(data_path)
    return Vocabulary(info.vocabulary) if info.vocabulary else Vocabulary({t for s in scenes for c in s.captions
                                                                           for t in c})


def _train_config(args):
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {
        "model": args.model, "strategy": args.match, "aggregator": args.agg, "margin": args.margin,
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed, "topk": args.topk,
    }
    config = dataclasses.replace(config, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_warm_start:
        config = dataclasses.replace(config, warm_start=False)
    config.validate()
    return config


def cmd_gen(args):
    config = WorldConfig.from_file(args.config) if args.config else WorldConfig()
    if args.sigma is not None:
        config = dataclasses.replace(config, sigma=args.sigma)
    if args.R is not None:
        config = dataclasses.replace(config, R=args.R)
    sizes = {"train": args.train_scenes, "val": args.val_scenes, "test": args.test_scenes}
    vocabulary = config.vocabulary()
    os.makedirs(args.out, exist_ok=True)
    digests = {}
    for split in SPLITS:
        n = sizes[split] if sizes[split] is not None else config.num_scenes
        scenes = generate_world(dataclasses.replace(config, num_scenes=n), args.seed, split)
        path = os.path.join(args.out, split)
        save_dataset(scenes, path, split=split, d_v=config.d_v, canvas=config.canvas, vocabulary=vocabulary,
                     seed=args.seed, config_digest=config.digest())
        digests[split] = dataset_digest(path)
    Vocabulary(vocabulary).save(os.path.join(args.out, "vocab.txt"))
    _write(os.path.join(args.out, "world_config.json"), canonical_json(config.to_dict()))
    result = {"out": args.out, "seed": args.seed, "config_digest": config.digest(), "digests": digests}
    print(canonical_json(result), end="")
    return 0


def cmd_train(args):
    config = _train_config(args)
    train_path, val_path = _split_dir(args.data, "train"), _split_dir(args.data, "val")
    train_scenes, val_scenes = load_dataset(train_path), load_dataset(val_path)
    vocab = _vocab_for(train_path, train_scenes)
    try:
        ckpt = train(config, train_scenes, val_scenes, vocab)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, args.out + ".last_finite")
        raise CLIError(str(exc), field="loss") from exc
    save_checkpoint(ckpt, args.out)
    summary = {"checkpoint": args.out, "epoch": ckpt.epoch, "val": ckpt.metrics,
               "train_loss": [h["train_loss"] for h in ckpt.history]}
    _write(args.metrics, canonical_json(summary))
    print(canonical_json(summary), end="")
    return 0


def _load_eval(args):
    if not os.path.exists(args.checkpoint):
        raise CLIError(f"checkpoint not found: {args.checkpoint}", field="checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.data)
    info, _ = read_manifest(args.data)
    if info.d_v != ckpt.model_config.d_v:
        raise CLIError(f"feature width mismatch: data d_v={info.d_v}, model d_v={ckpt.model_config.d_v}",
                       field="d_v")
    return ckpt.build(), Corpus(scenes, ckpt.vocab())


def _emit_metrics(args, metrics, label):
    metrics = dict(metrics)
    metrics["digest"] = digest_of(metrics)
    _write(args.metrics, canonical_json(metrics))
    if args.table:
        print(format_table([(label, metrics)]))
    print(canonical_json(metrics), end="")


def cmd_eval_loc(args):
    model, corpus = _load_eval(args)
    if not any(s.gold_alignments for s in corpus.scenes):
        raise CLIError("split has no gold alignments; phrase localization needs an evaluation split",
                       field="gold_alignments")
    results = evaluate_localization(model, corpus)
    _emit_metrics(args, {"Det%": det_percent(results), "PointIt%": point_percent(results),
                         "num_phrases": len(results)}, "localization")
    return 0


def cmd_eval_retrieval(args):
    model, corpus = _load_eval(args)
    result = evaluate_retrieval(model, corpus)
    metrics = result.summary()
    metrics["num_captions"] = len(result.ranks)
    metrics["num_images"] = len(corpus)
    _emit_metrics(args, metrics, "retrieval")
    return 0


def cmd_ablate(args):
    config = _train_config(args)
    splits = {s: load_dataset(_split_dir(args.data, s)) for s in SPLITS}
    vocab = _vocab_for(_split_dir(args.data, "train"), splits["train"])
    results = run_ablation(config, splits["train"], splits["val"], splits["test"], vocab)
    report = ablation_report(results, config.seed)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "ablation.json"), canonical_json(report))
    _write(os.path.join(args.out, "ablation.txt"), report["table"] + "\n")
    print(report["table"])
    return 0


def cmd_visualize(args):
    from wsground.visualize import render_overlay

    model, corpus = _load_eval(args)
    ids = [s.scene_id for s in corpus.scenes]
    if args.scene in ids:
        si = ids.index(args.scene)
    elif args.scene.isdigit() and int(args.scene) < len(ids):
        si = int(args.scene)
    else:
        raise CLIError(f"unknown scene {args.scene!r}", field="scene")
    scene = corpus.scenes[si]
    if not 0 <= args.caption < len(scene.captions):
        raise CLIError(f"scene has {len(scene.captions)} captions", field="caption")
    predicted = localize(model, corpus, [(si, args.caption)])[0]
    gold = [g for g in scene.gold_alignments if g.caption_index == args.caption]
    info, _ = read_manifest(args.data)
    img = render_overlay(scene, chunk_caption(scene.captions[args.caption]), predicted, gold, info.canvas)
    img.save(args.out)
    print(canonical_json({"image": args.out, "scene_id": scene.scene_id, "predicted": predicted}), end="")
    return 0


def _add_train_flags(p):
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--match", choices=STRATEGIES)
    p.add_argument("--agg", choices=("permInv", "sequence"))
    p.add_argument("--margin", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--no-warm-start", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="wsground", description=__doc__)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic shape world")
    p.add_argument("--config", help="world config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--train-scenes", type=int)
    p.add_argument("--val-scenes", type=int, default=100)
    p.add_argument("--test-scenes", type=int, default=100)
    p.add_argument("--sigma", type=float)
    p.add_argument("--R", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True, help="directory holding train/ and val/ splits")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="write training summary JSON here")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func in (("eval-loc", cmd_eval_loc), ("eval-retrieval", cmd_eval_retrieval)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="split directory or manifest")
        p.add_argument("--metrics", help="write metrics JSON here")
        p.add_argument("--table", action="store_true", help="also print a plain-text table")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and evaluate the full variant grid and baselines")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="write a PNG box overlay for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", default="0", help="scene id or index")
    p.add_argument("--caption", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except (CLIError, DatasetError, EvaluationError, ValueError, FileNotFoundError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "field": getattr(exc, "field", None)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
