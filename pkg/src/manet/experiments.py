"""Desk-scale pipelines: pre-train, self-train, evaluate; plus the alpha and stage sweeps."""

import dataclasses
import logging

from manet.dataset import split_dataset
from manet.metrics import macro_average
from manet.training import evaluate, pretrain, self_train

logger = logging.getLogger(__name__)

ALPHA_SWEEP = (0.1, 0.05, 0.01, 0.001)
# (use_manifold_pretrain, use_manifold_selftrain)
STAGE_SWEEP = ((False, False), (True, False), (False, True), (True, True))


def run_pipeline(train_samples, test_samples, cfg, labeled_ratio=0.1, split_seed=0):
    """Returns ``(test MetricsReport, pretrain state, selftrain state)``."""
    split = split_dataset(train_samples, labeled_ratio, split_seed)
    pre = pretrain(split.labeled, cfg)
    post = self_train(split, pre.student, cfg)
    report = macro_average(r for _, _, r in evaluate(post.student, test_samples))
    logger.info("alpha=%s flags=(%s,%s) -> %s", cfg.alpha, cfg.use_manifold_pretrain, cfg.use_manifold_selftrain, report)
    return report, pre, post


def alpha_sweep(train_samples, test_samples, cfg, alphas=ALPHA_SWEEP, **kw):
    return {a: run_pipeline(train_samples, test_samples, dataclasses.replace(cfg, alpha=a), **kw)[0] for a in alphas}


def stage_sweep(train_samples, test_samples, cfg, **kw):
    out = {}
    for pre_flag, self_flag in STAGE_SWEEP:
        c = dataclasses.replace(cfg, use_manifold_pretrain=pre_flag, use_manifold_selftrain=self_flag)
        out[(pre_flag, self_flag)] = run_pipeline(train_samples, test_samples, c, **kw)[0]
    return out
