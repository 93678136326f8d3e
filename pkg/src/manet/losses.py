from dataclasses import dataclass

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5
DEFAULT_ALPHA = 0.05


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossError(f"alpha must be in [0, 1], got {self.alpha}")


def one_hot_channels(labels, num_classes):
    """[B, *spatial] integer labels -> [B, K, *spatial] float one-hot."""
    oh = F.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def soft_dice_loss(probs, target, eps=DICE_EPS):
    """1 - mean over (batch, class) of (2 sum p t + eps) / (sum p + sum t + eps)."""
    if probs.shape != target.shape:
        raise LossError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    target = target.to(probs.dtype)
    axes = tuple(range(2, probs.ndim))
    inter = (probs * target).sum(dim=axes)
    denom = probs.sum(dim=axes) + target.sum(dim=axes)
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def _dice_term(logits, labels):
    if logits is None or logits.shape[0] == 0:
        return None
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise LossError(f"label shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    probs = torch.softmax(logits, dim=1)
    return soft_dice_loss(probs, one_hot_channels(labels, logits.shape[1]).to(probs.dtype))


def base_loss(seg_logits_l, y_l, seg_logits_p=None, y_pseudo=None):
    """Dice on the labeled half plus Dice on the pseudo-labeled half; an empty half adds 0."""
    terms = [t for t in (_dice_term(seg_logits_l, y_l), _dice_term(seg_logits_p, y_pseudo)) if t is not None]
    if not terms:
        raise LossError("base_loss needs at least one non-empty half")
    return sum(terms[1:], terms[0])


def _ce_term(logits, target):
    if logits is None or logits.shape[0] == 0:
        return None
    if logits.shape[1] != 2:
        raise LossError(f"manifold logits need 2 channels, got {logits.shape[1]}")
    target = torch.as_tensor(target)
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise LossError(f"manifold target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    if ((target != 0) & (target != 1)).any():
        raise LossError("manifold target must be binary")
    return F.cross_entropy(logits, target.long())


def manifold_loss(mf_logits_l, m_l, mf_logits_p=None, m_pseudo=None):
    """Mean per-location 2-class cross-entropy, summed over the labeled and pseudo halves."""
    terms = [t for t in (_ce_term(mf_logits_l, m_l), _ce_term(mf_logits_p, m_pseudo)) if t is not None]
    if not terms:
        raise LossError("manifold_loss needs at least one non-empty half")
    return sum(terms[1:], terms[0])


def total_loss(l_base, l_mf, weights):
    alpha = weights.alpha if isinstance(weights, LossWeights) else LossWeights(weights).alpha
    return (1.0 - alpha) * l_base + alpha * l_mf

