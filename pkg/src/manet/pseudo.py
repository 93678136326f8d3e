"""Mean-teacher pseudo-labels: an EMA copy of the student labels the unlabeled half."""

import copy

import torch

from manet.network import argmax_lowest

DEFAULT_EMA_DECAY = 0.99


class TeacherError(ValueError):
    pass


class TeacherState:
    """Frozen copy of a student network, updated only through :func:`ema_update`."""

    def __init__(self, student, ema_decay=DEFAULT_EMA_DECAY):
        if not 0.0 <= ema_decay <= 1.0:
            raise TeacherError(f"ema_decay must be in [0, 1], got {ema_decay}")
        self.net = copy.deepcopy(student)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.ema_decay = ema_decay

    def manifest(self):
        return {k: tuple(v.shape) for k, v in self.net.state_dict().items()}


def _check_manifests(teacher_net, student):
    t = {k: tuple(v.shape) for k, v in teacher_net.state_dict().items()}
    s = {k: tuple(v.shape) for k, v in student.state_dict().items()}
    if t != s:
        diff = sorted(set(t.items()) ^ set(s.items()))[:3]
        raise TeacherError(f"teacher/student manifest mismatch near {diff}")


@torch.no_grad()
def ema_update(teacher, student, m=None):
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter."""
    m = teacher.ema_decay if m is None else m
    if not 0.0 <= m <= 1.0:
        raise TeacherError(f"EMA decay must be in [0, 1], got {m}")
    _check_manifests(teacher.net, student)
    t_state = teacher.net.state_dict()
    for name, s_value in student.state_dict().items():
        t_state[name].mul_(m).add_(s_value.detach(), alpha=1.0 - m)
    return teacher


@torch.no_grad()
def make_pseudo_labels(teacher, unlabeled):
    """Teacher argmax on the unlabeled batch ``[B, C, *spatial]``; no graph is recorded."""
    if teacher is None or getattr(teacher, "net", None) is None:
        raise TeacherError("teacher is not initialised; run pre-training first")
    seg, _ = teacher.net(unlabeled, with_manifold=False)
    return argmax_lowest(seg)
