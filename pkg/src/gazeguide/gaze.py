"""Eye-gaze fixations to temporal and static heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .saliency import Heatmap, Source, normalize_array

FIXATION_COLUMNS = ("image_id", "patient_id", "x_norm", "y_norm", "start_ms", "duration_ms")
TRUNCATE_SIGMAS = 4.0


class FixationParseError(ValueError):
    pass


@dataclass(frozen=True)
class FixationRecord:
    image_id: str
    patient_id: str
    x_norm: float
    y_norm: float
    start_ms: float
    duration_ms: float

    def __post_init__(self):
        if not (0 <= self.x_norm <= 1 and 0 <= self.y_norm <= 1):
            raise ValueError(f"fixation coordinates out of [0,1]: ({self.x_norm}, {self.y_norm})")
        if self.start_ms < 0 or self.duration_ms < 0:
            raise ValueError("start_ms and duration_ms must be non-negative")


@dataclass(frozen=True)
class GazeRenderConfig:
    output_size: tuple[int, int] = (128, 128)
    sigma_frac: float = 0.05
    window_ms: float = 1000.0

    def __post_init__(self):
        if self.sigma_frac <= 0:
            raise ValueError("sigma_frac must be positive")
        if self.window_ms <= 0:
            raise ValueError("window_ms must be positive")


def _splat(acc: np.ndarray, x_norm: float, y_norm: float, weight: float, sigma_px: float):
    """Add ``weight * exp(-d^2 / 2σ^2)`` truncated at 4σ, centred on the point.

    Pixel j has its centre at normalized coordinate (j + 0.5) / extent.
    """
    h, w = acc.shape
    cx = x_norm * w - 0.5
    cy = y_norm * h - 0.5
    r = TRUNCATE_SIGMAS * sigma_px
    x0, x1 = max(0, math.ceil(cx - r)), min(w - 1, math.floor(cx + r))
    y0, y1 = max(0, math.ceil(cy - r)), min(h - 1, math.floor(cy + r))
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1) - cx
    ys = np.arange(y0, y1 + 1) - cy
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    g = np.exp(-d2 / (2 * sigma_px * sigma_px))
    g[d2 > r * r] = 0
    acc[y0:y1 + 1, x0:x1 + 1] += weight * g


def accumulate_temporal(records: Sequence[FixationRecord], cfg: GazeRenderConfig) -> list[np.ndarray]:
    """Un-normalized per-window accumulations (duration-weighted Gaussians)."""
    if not records:
        return []
    ids = {r.image_id for r in records}
    if len(ids) > 1:
        raise ValueError(f"records span several images: {sorted(ids)}")
    h, w = cfg.output_size
    sigma_px = cfg.sigma_frac * w
    buckets = [int(r.start_ms // cfg.window_ms) for r in records]
    maps = [np.zeros((h, w), dtype=np.float64) for _ in range(max(buckets) + 1)]
    # fixed order inside a window keeps the float sum reproducible
    order = sorted(range(len(records)), key=lambda i: (buckets[i], records[i].x_norm,
                                                        records[i].y_norm, records[i].start_ms,
                                                        records[i].duration_ms))
    for i in order:
        r = records[i]
        _splat(maps[buckets[i]], r.x_norm, r.y_norm, r.duration_ms, sigma_px)
    return maps


def render_temporal(records: Sequence[FixationRecord], cfg: GazeRenderConfig) -> list[Heatmap]:
    return [Heatmap(normalize_array(m), Source.GAZE) for m in accumulate_temporal(records, cfg)]


def static_accumulation(temporals: Sequence[np.ndarray]) -> np.ndarray:
    shapes = {t.shape for t in temporals}
    if len(shapes) > 1:
        raise ValueError(f"temporal maps have mixed extents: {sorted(shapes)}")
    total = np.zeros(next(iter(shapes)), dtype=np.float64)
    for t in temporals:
        total += t
    return total


def render_static(temporals: Sequence[np.ndarray], output_size: tuple[int, int] | None = None) -> Heatmap:
    """Pixelwise sum of un-normalized temporal maps, max-normalized.

    An empty list yields an all-zero map of ``output_size``.
    """
    if not temporals:
        if output_size is None:
            raise ValueError("output_size is required when there are no temporal maps")
        return Heatmap(np.zeros(output_size), Source.GAZE)
    return Heatmap(normalize_array(static_accumulation(temporals)), Source.GAZE)


def render_image_gaze(records: Sequence[FixationRecord], cfg: GazeRenderConfig):
    """Return ``(static, temporals)`` heatmaps for one image."""
    raw = accumulate_temporal(records, cfg)
    temporals = [Heatmap(normalize_array(m), Source.GAZE) for m in raw]
    return render_static(raw, cfg.output_size), temporals


def _field(row: dict, col: str, lineno: int, numeric: bool):
    value = row.get(col)
    if value is None:
        raise FixationParseError(f"row {lineno}: missing column {col!r}")
    value = value.strip()
    if not numeric:
        return value
    try:
        out = float(value)
    except ValueError:
        raise FixationParseError(f"row {lineno}, column {col!r}: non-numeric value {value!r}") from None
    if not math.isfinite(out):
        raise FixationParseError(f"row {lineno}, column {col!r}: non-finite value {value!r}")
    return out


def parse_fixations(path: str | Path) -> list[FixationRecord]:
    """Read a fixation CSV. Row numbers in errors count the header as row 1."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in FIXATION_COLUMNS if c not in header]
        if missing:
            raise FixationParseError(f"{path}: missing column(s) {', '.join(missing)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            vals = {c: _field(row, c, lineno, c not in ("image_id", "patient_id"))
                    for c in FIXATION_COLUMNS}
            for c in ("x_norm", "y_norm"):
                if not 0 <= vals[c] <= 1:
                    raise FixationParseError(f"row {lineno}, column {c!r}: {vals[c]} outside [0, 1]")
            for c in ("start_ms", "duration_ms"):
                if vals[c] < 0:
                    raise FixationParseError(f"row {lineno}, column {c!r}: negative value {vals[c]}")
            out.append(FixationRecord(**vals))
    return out


def write_fixations(path: str | Path, records: Iterable[FixationRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIXATION_COLUMNS)
        for r in records:
            writer.writerow([r.image_id, r.patient_id, repr(r.x_norm), repr(r.y_norm),
                             repr(r.start_ms), repr(r.duration_ms)])
