"""Segmentation metrics (region overlap, boundary distances, AUC-ROC), fold
aggregation, and the Wilcoxon signed-rank comparison."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage, stats

log = logging.getLogger(__name__)

PREDICTION_THRESHOLD = 0.5
ALPHA = 0.05
EXACT_MAX_N = 25
PER_IMAGE_METRICS = ("dsc", "ji", "tpr", "fpr", "hd", "md")
FOLD_METRICS = PER_IMAGE_METRICS + ("acc", "auc_roc")


class Scope(str, enum.Enum):
    PER_IMAGE = "per_image"
    PER_FOLD = "per_fold"


@dataclass
class MetricsRecord:
    dsc: float
    ji: float
    tpr: float
    fpr: float
    hd: float
    md: float
    acc: float | None = None
    auc_roc: float | None = None
    scope: Scope = Scope.PER_IMAGE
    n_images: int = 1
    n_distance_undefined: int = 0

    def __post_init__(self):
        if self.scope is Scope.PER_IMAGE and (self.acc is not None or self.auc_roc is not None):
            raise ValueError("acc and auc_roc are fold-level metrics only")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scope"] = self.scope.value
        return d


class RegionMetrics(NamedTuple):
    dsc: float
    ji: float
    tpr: float
    fpr: float


def _binary(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def _check_pair(pred, truth):
    pred, truth = _binary(pred, "prediction"), _binary(truth, "ground truth")
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    return pred, truth


def region_metrics(pred_mask, truth_mask) -> RegionMetrics:
    """DSC, JI, TPR and FPR; FPR counts false positives relative to the tumor size."""
    pred, truth = _check_pair(pred_mask, truth_mask)
    n_truth = int(truth.sum())
    if n_truth == 0:
        raise ValueError("ground truth has no tumor pixels; TPR and FPR are undefined")
    n_pred = int(pred.sum())
    inter = int(np.count_nonzero(pred & truth))
    union = n_truth + n_pred - inter
    return RegionMetrics(
        dsc=2 * inter / (n_truth + n_pred),
        ji=inter / union,
        tpr=inter / n_truth,
        fpr=(n_pred - inter) / n_truth,
    )


def global_accuracy(pred_masks: Sequence, truth_masks: Sequence) -> float:
    """Pixel accuracy pooled over every image of a fold."""
    if len(pred_masks) == 0 or len(pred_masks) != len(truth_masks):
        raise ValueError("need equally many, and at least one, predictions and ground truths")
    correct = total = 0
    for p, t in zip(pred_masks, truth_masks):
        p, t = _check_pair(p, t)
        correct += int(np.count_nonzero(p == t))
        total += t.size
    return correct / total


def auc_roc(pred_probs: Sequence, truth_masks: Sequence) -> float:
    """Pixel-pooled ROC AUC via the Mann-Whitney U statistic (ties count one half)."""
    if len(pred_probs) != len(truth_masks) or len(pred_probs) == 0:
        raise ValueError("need equally many, and at least one, probability maps and ground truths")
    scores = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in pred_probs])
    labels = np.concatenate([_binary(t, "ground truth").ravel() for t in truth_masks])
    if scores.shape != labels.shape:
        raise ValueError("probability maps and ground truths differ in size")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC-ROC needs both tumor and background pixels in the fold")
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def boundary(mask) -> np.ndarray:
    """Region pixels with an 8-neighbour outside the region; the image border counts as outside."""
    mask = _binary(mask, "mask")
    inner = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=0)
    return mask & ~inner


def boundary_distances(pred_mask, truth_mask) -> tuple[float, float]:
    """Symmetric Hausdorff and mean boundary distance in pixels.

    Returns ``(nan, nan)`` when either mask is empty.
    """
    pred, truth = _check_pair(pred_mask, truth_mask)
    if not pred.any() or not truth.any():
        return math.nan, math.nan
    bp, bt = boundary(pred), boundary(truth)
    # distance from every pixel to the nearest boundary pixel of the other mask
    to_pred = ndimage.distance_transform_edt(~bp)
    to_truth = ndimage.distance_transform_edt(~bt)
    d_tp = to_pred[bt]
    d_pt = to_truth[bp]
    hd = float(max(d_tp.max(), d_pt.max()))
    md = float((d_tp.mean() + d_pt.mean()) / 2.0)
    return hd, md


def image_metrics(prob_or_mask, truth_mask, threshold: float = PREDICTION_THRESHOLD) -> MetricsRecord:
    arr = np.asarray(prob_or_mask)
    pred = arr >= threshold if arr.dtype != bool else arr
    r = region_metrics(pred, truth_mask)
    hd, md = boundary_distances(pred, truth_mask)
    return MetricsRecord(*r, hd=hd, md=md, n_distance_undefined=int(math.isnan(hd)))


def aggregate_fold(records: Sequence[MetricsRecord], acc: float | None = None,
                   auc: float | None = None) -> MetricsRecord:
    """Average per-image records within a fold; undefined distances are skipped and counted."""
    if not records:
        raise ValueError("cannot aggregate an empty fold")
    means = {m: float(np.mean([getattr(r, m) for r in records])) for m in ("dsc", "ji", "tpr", "fpr")}
    hd = np.array([r.hd for r in records], dtype=np.float64)
    md = np.array([r.md for r in records], dtype=np.float64)
    undefined = int(np.isnan(hd).sum())
    if undefined:
        log.info("%d of %d images have undefined boundary distances; excluded from HD/MD", undefined, len(records))
    defined = ~np.isnan(hd)
    return MetricsRecord(
        **means,
        hd=float(hd[defined].mean()) if defined.any() else math.nan,
        md=float(md[defined].mean()) if defined.any() else math.nan,
        acc=acc,
        auc_roc=auc,
        scope=Scope.PER_FOLD,
        n_images=len(records),
        n_distance_undefined=undefined,
    )


def evaluate_fold(probs: Sequence, truths: Sequence, threshold: float = PREDICTION_THRESHOLD):
    """Per-image records plus the fold record (ACC and AUC-ROC pooled over the fold)."""
    per_image = [image_metrics(p, t, threshold) for p, t in zip(probs, truths)]
    preds = [np.asarray(p) >= threshold for p in probs]
    fold = aggregate_fold(per_image, global_accuracy(preds, truths), auc_roc(probs, truths))
    return per_image, fold


def summarize_folds(fold_records: Sequence[MetricsRecord]) -> dict[str, tuple[float, float]]:
    """Cross-fold mean and sample standard deviation for each metric."""
    out = {}
    for m in FOLD_METRICS:
        vals = np.array([getattr(r, m) for r in fold_records if getattr(r, m) is not None], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if len(vals) == 0:
            out[m] = (math.nan, math.nan)
        else:
            out[m] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


@dataclass(frozen=True)
class ComparisonResult:
    metric: str
    model_a: str
    model_b: str
    p_value: float
    n_pairs: int
    statistic: float
    method: str

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA


def _exact_signed_rank_p(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """Two-sided exact p for the positive-rank sum, by counting sign patterns.

    Ranks are doubled so tied (half-integer) ranks stay integral.
    """
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks.tolist():
        for s in range(reach, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        reach += r
    n_patterns = 2 ** len(doubled_ranks)
    lower = sum(counts[: w_doubled + 1])
    upper = sum(counts[w_doubled:])
    return min(1.0, 2 * min(lower, upper) / n_patterns)


def wilcoxon_signed_rank(a, b, *, metric: str = "", model_a: str = "a", model_b: str = "b",
                         min_pairs: int = 6) -> ComparisonResult:
    """Two-sided paired test; zero differences are dropped, ties get average ranks.

    Exact null distribution up to 25 non-zero pairs, normal approximation with
    continuity and tie corrections above that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError(f"{metric or 'values'}: all paired differences are zero; the test is undefined")
    if n < min_pairs:
        raise ValueError(f"{metric or 'values'}: only {n} non-zero differences, need at least {min_pairs}")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_signed_rank_p(doubled, int(round(2 * w_plus)))
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        dev = abs(w_plus - mean) - 0.5
        p = 1.0 if dev <= 0 else float(min(1.0, 2 * stats.norm.sf(dev / math.sqrt(var))))
        method = "normal"
    return ComparisonResult(metric, model_a, model_b, p, n, w_plus, method)
