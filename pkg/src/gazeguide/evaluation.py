"""ROC-AUC with bootstrap percentile intervals, and heatmap overlap metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import CLASS_NAMES

MAX_REDRAWS = 100
QUANTITIES = ("mean",) + CLASS_NAMES
DISPLAY_NAMES = {"mean": "Average", "normal": "Normal", "chf": "CHF", "pneumonia": "Pneumonia"}


class UndefinedAUCError(ValueError):
    """Raised when the labels contain only one class."""


@dataclass(frozen=True)
class ScoredExample:
    image_id: str
    scores: tuple[float, float, float]
    true_label: int

    def __post_init__(self):
        if len(self.scores) != len(CLASS_NAMES) or not np.all(np.isfinite(self.scores)):
            raise ValueError(f"{self.image_id}: need {len(CLASS_NAMES)} finite scores")
        if not 0 <= self.true_label < len(CLASS_NAMES):
            raise ValueError(f"{self.image_id}: label {self.true_label} out of range")


def auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (P * N)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape:
        raise ValueError(f"scores {s.shape} and labels {pos.shape} differ in shape")
    p_scores = s[pos]
    neg = np.sort(s[~pos])
    n_pos, n_neg = p_scores.size, neg.size
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    below = np.searchsorted(neg, p_scores, side="left")
    upto = np.searchsorted(neg, p_scores, side="right")
    concordant = int(below.sum())
    ties = int((upto - below).sum())
    return (concordant + 0.5 * ties) / (n_pos * n_neg)


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One-vs-rest AUC per class; the last entry is their mean."""
    out = [auc(scores[:, k], labels == k) for k in range(len(CLASS_NAMES))]
    return np.array([np.mean(out)] + out)


@dataclass
class AucReport:
    """Percentiles per quantity: ``{"mean": (p50, p2.5, p97.5), "normal": ...}``."""

    percentiles: dict[str, tuple[float, float, float]]
    n_iterations: int
    resample_size: int
    seed: int
    samples: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for name, (mid, lo, hi) in self.percentiles.items():
            if not lo <= mid <= hi:
                raise ValueError(f"{name}: percentiles out of order ({lo}, {mid}, {hi})")


def _as_arrays(examples: Sequence[ScoredExample]):
    scores = np.array([e.scores for e in examples], dtype=np.float64)
    labels = np.array([e.true_label for e in examples], dtype=int)
    return scores, labels


def bootstrap_auc(examples: Sequence[ScoredExample], iterations: int = 30, seed: int = 0,
                  resample_size: int | None = None) -> AucReport:
    """Percentile bootstrap of per-class and mean one-vs-rest AUC.

    Iteration ``i`` draws from its own generator seeded by ``(seed, i)``,
    so iterations are independent and order-free. Draws that leave a
    class without positives or negatives are redrawn.
    """
    scores, labels = _as_arrays(examples)
    missing = [CLASS_NAMES[k] for k in range(len(CLASS_NAMES)) if not np.any(labels == k)]
    if missing:
        raise ValueError(f"test set lacks class(es): {', '.join(missing)}")
    n = len(examples)
    size = n if resample_size is None else int(resample_size)
    samples = np.empty((iterations, len(QUANTITIES)))
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        for _ in range(MAX_REDRAWS + 1):
            idx = rng.integers(0, n, size=size)
            try:
                samples[it] = per_class_auc(scores[idx], labels[idx])
                break
            except UndefinedAUCError:
                continue
        else:
            raise RuntimeError(f"iteration {it}: no valid resample after {MAX_REDRAWS} redraws")
    pct = np.percentile(samples, [50, 2.5, 97.5], axis=0)
    percentiles = {q: (float(pct[0, j]), float(pct[1, j]), float(pct[2, j]))
                   for j, q in enumerate(QUANTITIES)}
    return AucReport(percentiles, iterations, size, seed, samples)


def format_cell(p50: float, p025: float, p975: float) -> str:
    return f"{p50:.3f} ({p025:.3f}, {p975:.3f})"


def render_report(report: AucReport, label: str = "model") -> str:
    """Aligned text table: average first, then normal, CHF, pneumonia."""
    header = ["Model"] + [DISPLAY_NAMES[q] for q in QUANTITIES]
    row = [label] + [format_cell(*report.percentiles[q]) for q in QUANTITIES]
    widths = [max(len(a), len(b)) for a, b in zip(header, row)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join(c.ljust(w) for c, w in zip(row, widths))]
    return "\n".join(line.rstrip() for line in lines) + "\n"


def report_csv(report: AucReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["quantity", "p50", "p2_5", "p97_5", "n_iterations", "resample_size", "seed"])
    for q in QUANTITIES:
        mid, lo, hi = report.percentiles[q]
        writer.writerow([q, f"{mid:.6f}", f"{lo:.6f}", f"{hi:.6f}",
                         report.n_iterations, report.resample_size, report.seed])
    return buf.getvalue()


def overlap_metrics(a, b, threshold: float = 0.5) -> dict[str, float]:
    """Thresholded IoU and Pearson correlation between two equal-extent maps."""
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map extents differ: {a.shape} vs {b.shape}")
    sa, sb = a >= threshold, b >= threshold
    union = np.count_nonzero(sa | sb)
    iou = 1.0 if union == 0 else np.count_nonzero(sa & sb) / union
    return {"iou": float(iou), "ncc": ncc(a, b)}


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(da @ da), np.sqrt(db @ db)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))
