"""Overlap and surface-distance metrics for binary and multi-class masks.

Distances are in index units (isotropic spacing). HD95 and ASD are taken
over the pooled set of directed nearest-surface distances in both
directions, so both metrics are symmetric in their arguments.
"""

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    hd95: float
    asd: float


def _pair(pred, ref):
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def overlap_scores(pred, ref):
    """(dice, jaccard) in percent; both 100 when the two masks are empty."""
    pred, ref = _pair(pred, ref)
    inter = np.count_nonzero(pred & ref)
    total = np.count_nonzero(pred) + np.count_nonzero(ref)
    if total == 0:
        return 100.0, 100.0
    union = total - inter
    return 200.0 * inter / total, 100.0 * inter / union


def surface_mask(mask):
    """Foreground locations with at least one background face-neighbour (outside the array counts as background)."""
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    core = tuple(slice(1, -1) for _ in range(mask.ndim))
    for axis in range(mask.ndim):
        for shift in (-1, 1):
            window = list(core)
            window[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            interior &= padded[tuple(window)]
    return mask & ~interior


def surface_points(mask):
    return np.argwhere(surface_mask(mask))


def surface_distances(pred, ref):
    """Pooled directed nearest-surface distances pred->ref and ref->pred."""
    pred, ref = _pair(pred, ref)
    if not pred.any() or not ref.any():
        raise MetricError("surface distance undefined for an empty mask")
    sp, sr = surface_mask(pred), surface_mask(ref)
    # exact Euclidean distance to the nearest surface location of the other mask
    to_ref = ndimage.distance_transform_edt(~sr)
    to_pred = ndimage.distance_transform_edt(~sp)
    return np.concatenate([to_ref[sp], to_pred[sr]])


def hd95(pred, ref):
    return float(np.percentile(surface_distances(pred, ref), 95))


def asd(pred, ref):
    return float(np.mean(surface_distances(pred, ref)))


def binary_report(pred, ref, empty_distance=None):
    """All four metrics for one binary pair.

    ``empty_distance`` replaces HD95/ASD when exactly one mask is empty
    (default: the array diagonal); two empty masks score 0.
    """
    pred, ref = _pair(pred, ref)
    dice, jac = overlap_scores(pred, ref)
    if pred.any() and ref.any():
        d = surface_distances(pred, ref)
        return MetricsReport(dice, jac, float(np.percentile(d, 95)), float(d.mean()))
    if not pred.any() and not ref.any():
        return MetricsReport(dice, jac, 0.0, 0.0)
    if empty_distance is None:
        empty_distance = math.sqrt(sum(n * n for n in pred.shape))
    return MetricsReport(dice, jac, empty_distance, empty_distance)


def class_reports(pred, ref, num_classes):
    """Per-foreground-class reports ``{k: MetricsReport}`` for label maps."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    return {k: binary_report(pred == k, ref == k) for k in range(1, num_classes)}


def macro_average(reports):
    reports = list(reports)
    if not reports:
        raise MetricError("nothing to average")
    return MetricsReport(*(float(np.mean([getattr(r, f) for r in reports])) for f in ("dice", "jaccard", "hd95", "asd")))


CSV_FIELDS = ("id", "class", "dice", "jaccard", "hd95", "asd")


def write_metrics_csv(rows, path):
    """``rows``: iterable of (id, class, MetricsReport). A final ``mean`` row averages all rows."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for sample_id, cls, rep in rows:
            w.writerow([sample_id, cls, *(f"{v:.6f}" for v in asdict(rep).values())])
        if rows:
            mean = macro_average(r for _, _, r in rows)
            w.writerow(["mean", "all", *(f"{v:.6f}" for v in asdict(mean).values())])
