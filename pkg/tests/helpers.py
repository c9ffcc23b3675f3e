"""Shared fixtures-by-function for the slow experiment tests.

Runs are memoised per process so the trainer tests and the acceptance
suite reuse one pretrained backbone per seed and one run per configuration.
"""

from __future__ import annotations

import time
from dataclasses import replace
from functools import lru_cache

import numpy as np

from mdcdet.synth import StreamSpec, generate_stream
from mdcdet.trainer import (
    ContinualModel,
    JsonlLog,
    TrainConfig,
    evaluate,
    load_backbone,
    pretrain_only,
    train_task,
    with_components,
)

SEEDS = (0, 1, 2)
PRETRAIN_SECONDS: dict[int, float] = {}


def tiny_spec(**kw) -> StreamSpec:
    base = dict(n_tasks=2, n_classes=4, train_per_task=24, eval_per_task=8, image_size=16, size_range=(4, 7), seed=5)
    base.update(kw)
    return StreamSpec(**base)


def tiny_config(**kw) -> TrainConfig:
    base = dict(dim=8, n_heads=2, n_points=2, n_proposals=5, enc_layers=1, dec_layers=1, ffn_dim=16, patch=4,
                n_units=4, mem_length=4, pretrain_epochs=2, epochs_first=1, epochs_later=1, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


@lru_cache(maxsize=None)
def default_stream(seed: int):
    return generate_stream(StreamSpec(seed=seed))


@lru_cache(maxsize=None)
def backbone(seed: int):
    start = time.perf_counter()
    weights = pretrain_only(default_stream(seed), TrainConfig(seed=seed))
    PRETRAIN_SECONDS[seed] = time.perf_counter() - start
    return weights


@lru_cache(maxsize=None)
def run(seed: int, components: str, n_tasks: int = 4, **overrides):
    """Per-task reports and per-task pseudo-label counts of one configuration."""
    stream = default_stream(seed)
    config = replace(with_components(TrainConfig(seed=seed), components), **overrides)
    model = ContinualModel.build(stream, config)
    load_backbone(model, backbone(seed))
    log = JsonlLog(None, False)
    reports = []
    start = time.perf_counter()
    for t in range(1, n_tasks + 1):
        train_task(model, stream, t, log)
        reports.append(evaluate(model, stream, t))
    pseudo = [sum(r["n_pseudo_labels"] for r in log.records if r["task"] == t) for t in range(1, n_tasks + 1)]
    return {"reports": reports, "pseudo": pseudo, "seconds": time.perf_counter() - start}


def kink_margin(boxes, gt, pairs) -> float:
    """Distance of matched boxes from the kinks of the L1 and GIoU terms.

    Central differences are only a valid gradient oracle when no kink lies
    within a step of the evaluation point.
    """
    margins = [np.inf]
    for p, g in pairs:
        b, t = np.asarray(boxes[p]), np.asarray(gt[g])
        margins += list(np.abs(b - t))
        b_lo, b_hi, t_lo, t_hi = b[:2] - b[2:] / 2, b[:2] + b[2:] / 2, t[:2] - t[2:] / 2, t[:2] + t[2:] / 2
        margins += list(np.abs(b_lo - t_lo)) + list(np.abs(b_hi - t_hi))
        margins += list(np.abs(np.minimum(b_hi, t_hi) - np.maximum(b_lo, t_lo)))
    return float(min(margins))
