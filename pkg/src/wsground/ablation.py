"""The matching x aggregation grid plus baselines, trained and evaluated on one split."""

import dataclasses
import logging

from wsground.evaluation import evaluate, format_table
from wsground.model import Corpus
from wsground.trainer import train

log = logging.getLogger(__name__)

BASELINE_ROWS = (
    ("Global", {"model": "global"}),
    ("Pooling-based (words)", {"model": "pool-words"}),
    ("Pooling-based (phrases)", {"model": "pool-phrases"}),
)
GRID_ROWS = tuple(
    (f"{agg}-{match}", {"model": "align2ground", "aggregator": agg, "strategy": match})
    for agg in ("permInv", "sequence")
    for match in ("max", "topk", "attention")
)
FULL_MODEL = "permInv-topk"
POOL_PHRASES = "Pooling-based (phrases)"


def run_ablation(base_config, train_scenes, val_scenes, test_scenes, vocab, rows=BASELINE_ROWS + GRID_ROWS):
    """Train every row and evaluate on ``test_scenes``; returns ``[(label, metrics), ...]``."""
    test = Corpus(test_scenes, vocab)
    results = []
    for label, overrides in rows:
        config = dataclasses.replace(base_config, **overrides)
        log.info("ablation: training %s", label)
        ckpt = train(config, train_scenes, val_scenes, vocab)
        metrics = evaluate(ckpt.build(), test)
        metrics["best_epoch"] = ckpt.epoch
        results.append((label, metrics))
    return results


def localization_trend(results):
    """True when the full model localizes at least as well as the phrase-pooling baseline."""
    by_label = dict(results)
    return by_label[FULL_MODEL]["Det%"] >= by_label[POOL_PHRASES]["Det%"]


def ablation_report(results, seed):
    return {
        "seed": seed,
        "rows": [{"model": label, **metrics} for label, metrics in results],
        "full_ge_pool_phrases_det": localization_trend(results) if {FULL_MODEL, POOL_PHRASES} <= dict(results).keys()
        else None,
        "table": format_table(results),
    }
