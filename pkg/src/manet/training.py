"""Two-stage schedule: supervised pre-training, then mean-teacher self-training.

Each self-training step concatenates the labeled and unlabeled inputs along
the batch axis, runs one student forward pass, splits both heads at the
labeled/unlabeled index and combines Dice (segmentation) and cross-entropy
(manifold) losses.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from manet.losses import LossWeights, base_loss, manifold_loss, total_loss
from manet.manifold import OPERATORS, generate_manifold_batch
from manet.metrics import class_reports
from manet.network import (
    NetworkConfig,
    build_network,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from manet.pseudo import TeacherState, ema_update, make_pseudo_labels

logger = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ("iteration", "l_base", "l_mf", "l_total")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.05
    ema_decay: float = 0.99
    operator: str = "sobel"
    sigma: float = 1.0
    t_low: float = 0.1
    t_high: float = 0.2
    use_manifold_pretrain: bool = True
    use_manifold_selftrain: bool = True
    pretrain_iters: int = 200
    selftrain_iters: int = 500
    labeled_bs: int = 4
    unlabeled_bs: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    base_width: int = 8
    depth: int = 3

    def validate(self):
        LossWeights(self.alpha)
        if not 0.0 <= self.ema_decay <= 1.0:
            raise TrainingError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.operator not in OPERATORS:
            raise TrainingError(f"operator must be one of {OPERATORS}, got {self.operator!r}")
        if not 0.0 <= self.t_low <= self.t_high <= 1.0:
            raise TrainingError("need 0 <= t_low <= t_high <= 1")
        if self.sigma < 0:
            raise TrainingError("sigma must be non-negative")
        if self.pretrain_iters < 1 or self.selftrain_iters < 1:
            raise TrainingError("iterations per stage must be >= 1")
        if self.labeled_bs < 1 or self.unlabeled_bs < 1:
            raise TrainingError("batch halves must be >= 1")
        return self

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}

    def manifold_params(self):
        if self.operator == "canny":
            return {"sigma": self.sigma, "t_low": self.t_low, "t_high": self.t_high}
        return {}


@dataclass
class TrainState:
    student: torch.nn.Module
    optimizer: torch.optim.Optimizer
    teacher: TeacherState = None
    iteration: int = 0
    history: list = field(default_factory=list)


def stack_images(samples):
    return torch.from_numpy(np.stack([s.image for s in samples])[:, None].astype(np.float32))


def stack_labels(samples):
    return torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))


def _manifold_targets(labels, cfg):
    m = generate_manifold_batch(labels.numpy(), cfg.operator, **cfg.manifold_params())
    return torch.from_numpy(m.astype(np.int64))


def _batch_indices(rng, n, size):
    return rng.choice(n, size=size, replace=n < size)


def _make_optimizer(net, cfg):
    return torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)


def _record(state, l_base, l_mf, l_total):
    row = {
        "iteration": state.iteration,
        "l_base": float(l_base),
        "l_mf": float(l_mf) if l_mf is not None else math.nan,
        "l_total": float(l_total),
    }
    state.history.append(row)
    return row


def _check_operator(cfg, dims):
    if cfg.operator == "canny" and dims != 2:
        raise TrainingError("canny operator supports 2D data only")


def _losses(seg_parts, mf_parts, alpha):
    """(l_base, l_mf, l_total). With ``alpha == 0`` L_mf is logged but kept out of the graph."""
    l_base = base_loss(*seg_parts)
    if alpha > 0:
        l_mf = manifold_loss(*mf_parts)
        return l_base, l_mf, total_loss(l_base, l_mf, LossWeights(alpha))
    l_mf = None
    if mf_parts[0] is not None:
        with torch.no_grad():
            l_mf = manifold_loss(*(p.detach() if torch.is_tensor(p) else p for p in mf_parts))
    return l_base, l_mf, l_base


def _step(state, losses):
    l_base, l_mf, l_total = losses
    state.optimizer.zero_grad(set_to_none=True)
    l_total.backward()
    state.optimizer.step()
    state.iteration += 1
    return _record(state, l_base.detach(), None if l_mf is None else l_mf.detach(), l_total.detach())


def _effective_alpha(net, cfg, enabled):
    alpha = cfg.alpha if enabled else 0.0
    if alpha > 0 and not net.has_manifold:
        raise TrainingError("manifold supervision requested but the network has no manifold branch")
    return alpha


def pretrain_losses(student, x_l, y_l, cfg):
    alpha = _effective_alpha(student, cfg, cfg.use_manifold_pretrain)
    need_mf = student.has_manifold
    m_l = _manifold_targets(y_l, cfg) if need_mf else None
    seg, mf = student(x_l, with_manifold=need_mf)
    return _losses((seg, y_l), (mf, m_l), alpha)


def pretrain_step(state, x_l, y_l, cfg):
    return _step(state, pretrain_losses(state.student, x_l, y_l, cfg))


def self_train_losses(student, x_l, y_l, x_u, y_p, cfg):
    """Joint forward of the concatenated batch, split at the labeled count, losses on both halves."""
    alpha = _effective_alpha(student, cfg, cfg.use_manifold_selftrain)
    need_mf = student.has_manifold
    m_l = _manifold_targets(y_l, cfg) if need_mf else None
    m_p = _manifold_targets(y_p, cfg) if need_mf else None

    n_l = x_l.shape[0]
    seg, mf = student(torch.cat([x_l, x_u], dim=0), with_manifold=need_mf)
    seg_l, seg_p = seg[:n_l], seg[n_l:]
    mf_l, mf_p = (mf[:n_l], mf[n_l:]) if mf is not None else (None, None)
    return _losses((seg_l, y_l, seg_p, y_p), (mf_l, m_l, mf_p, m_p), alpha)


def train_step(state, labeled_batch, unlabeled_batch, cfg):
    """One self-training step; returns the loss breakdown dict."""
    if state.teacher is None:
        raise TrainingError("self-training needs an initialised teacher")
    x_l, y_l = labeled_batch
    y_p = make_pseudo_labels(state.teacher, unlabeled_batch)
    row = _step(state, self_train_losses(state.student, x_l, y_l, unlabeled_batch, y_p, cfg))
    ema_update(state.teacher, state.student, cfg.ema_decay)
    return row


def network_config(cfg, dims, num_classes):
    return NetworkConfig(dims=dims, in_channels=1, num_classes=num_classes, base_width=cfg.base_width, depth=cfg.depth)


def _dataset_shape(samples):
    dims = samples[0].dims
    num_classes = max(s.num_classes for s in samples)
    return dims, num_classes


def pretrain(labeled, cfg, with_manifold=True):
    """Supervised stage on labeled samples only. Returns the final :class:`TrainState`."""
    cfg.validate()
    if not labeled:
        raise TrainingError("pre-training needs at least one labeled sample")
    dims, num_classes = _dataset_shape(labeled)
    _check_operator(cfg, dims)
    student = build_network(network_config(cfg, dims, num_classes), seed=cfg.seed, with_manifold=with_manifold)
    state = TrainState(student=student, optimizer=_make_optimizer(student, cfg))
    rng = np.random.default_rng([cfg.seed, 0])
    images, labels = stack_images(labeled), stack_labels(labeled)
    student.train()
    for _ in range(cfg.pretrain_iters):
        idx = torch.from_numpy(_batch_indices(rng, len(labeled), cfg.labeled_bs))
        row = pretrain_step(state, images[idx], labels[idx], cfg)
        if state.iteration % 50 == 0:
            logger.info("pretrain %d: %s", state.iteration, row)
    return state


def self_train(split, init, cfg):
    """Mean-teacher stage starting from ``init`` (network or checkpoint path)."""
    cfg.validate()
    if not split.unlabeled:
        raise TrainingError("self-training needs at least one unlabeled sample")
    if not split.labeled:
        raise TrainingError("self-training needs at least one labeled sample")
    student = load_checkpoint(init) if isinstance(init, (str, Path)) else init
    dims = student.cfg.dims
    _check_operator(cfg, dims)
    state = TrainState(student=student, optimizer=_make_optimizer(student, cfg))
    state.teacher = TeacherState(student, cfg.ema_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    images_l, labels_l = stack_images(split.labeled), stack_labels(split.labeled)
    # unlabeled labels are never read here
    images_u = stack_images(split.unlabeled)
    student.train()
    for _ in range(cfg.selftrain_iters):
        il = torch.from_numpy(_batch_indices(rng, len(split.labeled), cfg.labeled_bs))
        iu = torch.from_numpy(_batch_indices(rng, len(split.unlabeled), cfg.unlabeled_bs))
        row = train_step(state, (images_l[il], labels_l[il]), images_u[iu], cfg)
        if state.iteration % 50 == 0:
            logger.info("selftrain %d: %s", state.iteration, row)
    return state


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOSS_CSV_FIELDS})


def save_stage(state, out_dir, cfg, stage):
    """Write ``<out_dir>/checkpoint`` (+ ``teacher`` for self-training) and ``loss.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"stage": stage, "iterations": state.iteration, "train_config": vars(cfg)}
    save_checkpoint(state.student, out_dir / "checkpoint", extra=extra)
    if state.teacher is not None:
        save_checkpoint(state.teacher.net, out_dir / "teacher", extra={**extra, "ema_decay": state.teacher.ema_decay})
    write_loss_csv(state.history, out_dir / "loss.csv")
    return out_dir / "checkpoint"


def evaluate(net, samples, batch_size=8):
    """Per-sample, per-foreground-class metric rows ``(id, class, MetricsReport)``."""
    net.eval()
    rows = []
    k = net.cfg.num_classes
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds = predict(net, stack_images(chunk)).numpy()
        for s, p in zip(chunk, preds):
            for cls, rep in class_reports(p, s.label, k).items():
                rows.append((s.id, cls, rep))
    return rows
