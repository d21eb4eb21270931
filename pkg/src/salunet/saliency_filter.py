"""Contour statistics of thresholded saliency maps and the confidence gate that
rejects maps whose tumor location is ambiguous."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class EmptySaliencyWarning(UserWarning):
    """A saliency map has no pixel above the contour threshold."""


@dataclass(frozen=True)
class ConfidenceParams:
    threshold: float = 0.3
    a1: float = 2.0
    a2: float = 3.0
    a3: float = 0.2
    a4: float = 0.55

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.a1 > 1.0:
            raise ValueError(f"a1 must exceed 1, got {self.a1}")
        if not self.a2 > self.a1:
            raise ValueError(f"a2 must exceed a1, got a1={self.a1}, a2={self.a2}")
        if not 0.0 < self.a3 < 1.0:
            raise ValueError(f"a3 must be in (0, 1), got {self.a3}")
        # a4 = 0 is accepted: it turns rule 3 into a pure argmax comparison
        if not 0.0 <= self.a4 < 1.0:
            raise ValueError(f"a4 must be in [0, 1), got {self.a4}")


@dataclass(frozen=True)
class SaliencyContour:
    """One 8-connected component of ``saliency > threshold``.

    ``pixels`` is an (area, 2) array of (row, col) in raster order, so
    ``anchor`` (its first row) is the component's smallest coordinate.
    """

    pixels: np.ndarray
    area: int
    cum_intensity: float
    mean_intensity: float

    @property
    def anchor(self) -> tuple[int, int]:
        return (int(self.pixels[0, 0]), int(self.pixels[0, 1]))


def _order_key(c) -> tuple:
    anchor = getattr(c, "anchor", (0, 0))
    return (-c.cum_intensity, -c.mean_intensity, anchor)


def extract_contours(saliency: np.ndarray, threshold: float = 0.3) -> list[SaliencyContour]:
    """Connected components of the strict super-level set, largest cumulative
    intensity first (ties: higher mean, then smaller anchor pixel)."""
    saliency = np.asarray(saliency, dtype=np.float64)
    labels, n = ndimage.label(saliency > threshold, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    sums = np.bincount(flat, weights=saliency.ravel(), minlength=n + 1)
    starts = np.concatenate([[0], np.cumsum(counts)])
    width = saliency.shape[1]
    contours = []
    for lab in range(1, n + 1):
        idx = order[starts[lab]:starts[lab + 1]]
        pixels = np.stack([idx // width, idx % width], axis=1)
        area = int(counts[lab])
        total = float(sums[lab])
        contours.append(SaliencyContour(pixels, area, total, total / area))
    contours.sort(key=_order_key)
    return contours


def confidence_decision(contours: Sequence, p: ConfidenceParams = ConfidenceParams()) -> tuple[bool, int | None]:
    """Apply the three rejection rules; returns ``(rejected, fired_rule)``.

    Accepts anything exposing ``cum_intensity`` and ``mean_intensity``. The
    contour with the largest cumulative intensity is compared against the
    runner-up by cumulative intensity and against the contour with the largest
    mean intensity. Ties in the argmax resolve by the canonical contour order,
    which makes the result independent of the input ordering.
    """
    if len(contours) < 2:
        return False, None
    ranked = sorted(contours, key=_order_key)
    top, runner_up = ranked[0], ranked[1]
    m_max = max(c.mean_intensity for c in ranked)
    top_by_mean = next(c for c in ranked if c.mean_intensity == m_max)
    i_max, i_2nd, m_top = top.cum_intensity, runner_up.cum_intensity, top.mean_intensity

    if i_max < p.a1 * i_2nd and m_top < m_max:
        return True, 1
    if i_max < p.a2 * i_2nd and m_top + p.a3 < m_max:
        return True, 2
    if m_max > p.a4 and top_by_mean is not top:
        return True, 3
    return False, None


@dataclass
class ConfidenceReport:
    id: str
    contours: list[tuple[int, float, float]] = field(default_factory=list)
    rejected: bool = False
    fired_rule: int | None = None

    def __post_init__(self):
        if self.rejected != (self.fired_rule is not None):
            raise ValueError("rejected must be true exactly when a rule fired")

    @property
    def n_contours(self) -> int:
        return len(self.contours)

    def row(self) -> dict:
        cs = self.contours
        return {
            "id": self.id,
            "n_contours": len(cs),
            "I_max": cs[0][1] if cs else "",
            "I_2nd": cs[1][1] if len(cs) > 1 else "",
            "M_of_Imax": cs[0][2] if cs else "",
            "M_max": max(c[2] for c in cs) if cs else "",
            "rejected": int(self.rejected),
            "fired_rule": self.fired_rule if self.fired_rule is not None else "",
        }


REPORT_COLUMNS = ("id", "n_contours", "I_max", "I_2nd", "M_of_Imax", "M_max", "rejected", "fired_rule")


def assess(sample_id: str, saliency: np.ndarray, p: ConfidenceParams = ConfidenceParams()) -> ConfidenceReport:
    contours = extract_contours(saliency, p.threshold)
    rejected, rule = confidence_decision(contours, p)
    summaries = [(c.area, c.cum_intensity, c.mean_intensity) for c in contours]
    return ConfidenceReport(sample_id, summaries, rejected, rule)


def filter_dataset(samples, p: ConfidenceParams = ConfidenceParams()):
    """Split samples into (kept, reports). Only the saliency channel is read."""
    kept, reports = [], []
    for s in samples:
        report = assess(s.id, s.saliency, p)
        reports.append(report)
        if not report.rejected:
            kept.append(s)
    n_empty = sum(1 for r in reports if r.n_contours == 0)
    if n_empty:
        log.warning("%d saliency map(s) have no contour above %.3g; kept", n_empty, p.threshold)
    return kept, reports


def reduce_to_top_contour(saliency: np.ndarray, p: ConfidenceParams = ConfidenceParams()) -> np.ndarray:
    """Keep only the contour with the largest cumulative intensity; zero elsewhere."""
    saliency = np.asarray(saliency, dtype=np.float64)
    out = np.zeros_like(saliency)
    contours = extract_contours(saliency, p.threshold)
    if not contours:
        warnings.warn("saliency map has no contour above threshold; returning zeros",
                      EmptySaliencyWarning, stacklevel=2)
        return out
    rows, cols = contours[0].pixels.T
    out[rows, cols] = saliency[rows, cols]
    return out


def write_reports(reports: Sequence[ConfidenceReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
