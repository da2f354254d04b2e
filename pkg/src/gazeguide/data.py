"""Dataset ingestion, patient-grouped splitting and the synthetic corpus."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .gaze import (FixationRecord, GazeRenderConfig, parse_fixations, render_image_gaze,
                   write_fixations)
from .saliency import Heatmap

LABEL_COLUMNS = ("image_id", "patient_id", "label")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")


class Label(enum.IntEnum):
    NORMAL = 0
    CHF = 1
    PNEUMONIA = 2

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().lower()
        for member in cls:
            if member.name.lower() == key:
                return member
        raise ValueError(f"unknown label {text!r}")

    @property
    def text(self) -> str:
        return self.name.lower()


class DatasetLoadError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("dataset load failed:\n  " + "\n  ".join(self.problems))


@dataclass
class Example:
    image_id: str
    patient_id: str
    image: np.ndarray
    label: Label
    gaze_static: Heatmap
    gaze_temporals: list[Heatmap] = field(default_factory=list)
    fixations: list[FixationRecord] = field(default_factory=list)

    def __post_init__(self):
        self.label = Label(self.label)
        if self.image.shape != self.gaze_static.values.shape:
            raise ValueError(f"{self.image_id}: image {self.image.shape} vs gaze "
                             f"{self.gaze_static.values.shape}")


@dataclass
class SplitPlan:
    train: list[str]
    val: list[str]
    test: list[str]
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def ids(self, name: str) -> list[str]:
        return getattr(self, name)

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test,
                           "fractions": list(self.fractions), "seed": self.seed}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], tuple(d["fractions"]), d["seed"])


# ---------------------------------------------------------------------------
# images


def read_png(path: Path, size: tuple[int, int]) -> np.ndarray:
    """Grayscale PNG (8- or 16-bit) to a float array in [0, 1] of ``size``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    arr = np.clip(arr, 0, 1)
    if arr.shape != tuple(size):
        resized = Image.fromarray(arr.astype(np.float32), mode="F").resize(
            (size[1], size[0]), Image.BILINEAR)
        arr = np.clip(np.asarray(resized, dtype=np.float64), 0, 1)
    return arr.astype(np.float32)


def write_png(path: Path, image: np.ndarray) -> None:
    q = np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def quantize(image: np.ndarray) -> np.ndarray:
    """Values exactly as a 16-bit PNG round trip would return them."""
    q = np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16)
    return (q.astype(np.float64) / 65535.0).astype(np.float32)


# ---------------------------------------------------------------------------
# load / save


def load_dataset(image_dir: str | Path, labels_csv: str | Path, fixations_csv: str | Path,
                 cfg: GazeRenderConfig) -> list[Example]:
    image_dir = Path(image_dir)
    problems: list[str] = []
    rows = []
    with open(labels_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in LABEL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DatasetLoadError([f"{labels_csv}: missing column(s) {', '.join(missing)}"])
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"].strip()
            try:
                label = Label.parse(row["label"])
            except ValueError:
                problems.append(f"row {lineno}: unknown label {row['label']!r} for {image_id}")
                continue
            rows.append((image_id, row["patient_id"].strip(), label))

    labelled = {r[0] for r in rows}
    for image_id in labelled:
        if not (image_dir / f"{image_id}.png").is_file():
            problems.append(f"label without image: {image_id}")
    for png in sorted(image_dir.glob("*.png")):
        if png.stem not in labelled:
            problems.append(f"image without label: {png.stem}")
    if problems:
        raise DatasetLoadError(sorted(problems))

    fixations: dict[str, list[FixationRecord]] = defaultdict(list)
    if fixations_csv is not None and Path(fixations_csv).exists():
        for rec in parse_fixations(fixations_csv):
            fixations[rec.image_id].append(rec)

    def build_one(row):
        image_id, patient_id, label = row
        image = read_png(image_dir / f"{image_id}.png", cfg.output_size)
        recs = fixations.get(image_id, [])
        static, temporals = render_image_gaze(recs, cfg)
        return Example(image_id, patient_id, image, label, static, temporals, list(recs))

    # map() keeps input order, so the result stays sorted by image_id
    with ThreadPoolExecutor() as pool:
        return list(pool.map(build_one, sorted(rows)))


def save_dataset(examples: Sequence[Example], root: str | Path) -> None:
    """Write ``images/<id>.png``, ``labels.csv`` and ``fixations.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_COLUMNS)
        for ex in examples:
            writer.writerow([ex.image_id, ex.patient_id, ex.label.text])
            write_png(root / "images" / f"{ex.image_id}.png", ex.image)
    write_fixations(root / "fixations.csv", [r for ex in examples for r in ex.fixations])


def load_corpus(root: str | Path, cfg: GazeRenderConfig) -> list[Example]:
    root = Path(root)
    return load_dataset(root / "images", root / "labels.csv", root / "fixations.csv", cfg)


def corpus_checksum(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(f"{ex.image_id}|{ex.patient_id}|{int(ex.label)}".encode())
        h.update(np.ascontiguousarray(ex.image).tobytes())
        h.update(np.ascontiguousarray(ex.gaze_static.values).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# splitting


def grouped_split(examples: Sequence[Example], fractions: Sequence[float] = DEFAULT_FRACTIONS,
                  seed: int = 0) -> SplitPlan:
    """Assign whole patients to train/val/test.

    Patients are shuffled by ``seed`` and each goes to the split whose image
    count is furthest below its target. Every split ends within the largest
    patient-group size of its target.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1: {fractions}")
    groups: dict[str, list[str]] = defaultdict(list)
    for ex in examples:
        groups[ex.patient_id].append(ex.image_id)
    if len(groups) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(groups)}")
    patients = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    total = sum(len(v) for v in groups.values())
    targets = [f * total for f in fractions]
    counts = [0, 0, 0]
    assigned: list[list[str]] = [[], [], []]
    for pi in order:
        ids = groups[patients[pi]]
        deficits = [t - c for t, c in zip(targets, counts)]
        k = int(np.argmax(deficits))
        assigned[k].extend(ids)
        counts[k] += len(ids)
    return SplitPlan(*(sorted(a) for a in assigned), fractions=fractions, seed=seed)


def apply_split(examples: Sequence[Example], plan: SplitPlan) -> dict[str, list[Example]]:
    by_id = {ex.image_id: ex for ex in examples}
    return {name: [by_id[i] for i in plan.ids(name)] for name in SPLIT_NAMES}


def to_arrays(examples: Sequence[Example]):
    """Stack into ``(images N×H×W, labels N, gaze N×H×W)``."""
    images = np.stack([ex.image for ex in examples]).astype(np.float32)
    labels = np.array([int(ex.label) for ex in examples], dtype=int)
    gaze = np.stack([ex.gaze_static.values for ex in examples]).astype(np.float32)
    return images, labels, gaze


# ---------------------------------------------------------------------------
# synthetic corpus

SCATTER_FRAC = 0.04
LUNG_FIELDS = ((0.22, 0.40), (0.60, 0.78))


def _gauss2d(size: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    grid = (np.arange(size) + 0.5) / size
    return np.exp(-((grid[None, :] - cx) ** 2 + (grid[:, None] - cy) ** 2) / (2 * sigma ** 2))


def _synthetic_image(rng: np.random.Generator, label: Label, size: int):
    """Return ``(image, anchors)``; anchors are (x, y) points gaze clusters around."""
    img = rng.uniform(0.0, 0.3, size=(size, size))
    if label is Label.NORMAL:
        return img, [(0.5, 0.5)]
    if label is Label.CHF:
        cx, cy = rng.uniform(0.36, 0.46), rng.uniform(0.48, 0.60)
        img = img + 0.55 * _gauss2d(size, cx, cy, rng.uniform(0.09, 0.12))
        return np.clip(img, 0, 1), [(cx, cy)]
    anchors = []
    lungs = rng.permutation(2)[: rng.integers(1, 3)]
    yy, xx = np.mgrid[0:size, 0:size]
    period = 4.0
    for li in lungs:
        x_lo, x_hi = LUNG_FIELDS[li]
        cx, cy = rng.uniform(x_lo, x_hi), rng.uniform(0.28, 0.68)
        radius = rng.uniform(0.06, 0.09)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        texture = 0.5 * (1 + np.sin(2 * np.pi * xx / period + phase[0])
                         * np.sin(2 * np.pi * yy / period + phase[1]))
        envelope = _gauss2d(size, cx, cy, radius / 1.5)
        img = img + 0.6 * envelope * texture
        anchors.append((cx, cy))
    return np.clip(img, 0, 1), anchors


def _synthetic_fixations(rng, image_id, patient_id, anchors):
    n = int(rng.integers(5, 11))
    recs = []
    t = 0.0
    for j in range(n):
        ax, ay = anchors[j % len(anchors)]
        x = float(np.clip(ax + rng.normal(0, SCATTER_FRAC), 0, 1))
        y = float(np.clip(ay + rng.normal(0, SCATTER_FRAC), 0, 1))
        dur = float(rng.uniform(100, 600))
        recs.append(FixationRecord(image_id, patient_id, x, y, t, dur))
        t += dur
    return recs


def generate_synthetic(n_per_class: int, size: int = 128, seed: int = 0,
                       gaze_cfg: GazeRenderConfig | None = None) -> list[Example]:
    """Class-balanced synthetic radiograph analogue with blob-anchored gaze.

    CHF images carry one wide bright blob left of centre, pneumonia images
    one or two small high-frequency textured patches in the lung fields,
    normal images only noise. Two consecutive images share a patient.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    cfg = gaze_cfg or GazeRenderConfig(output_size=(size, size))
    if cfg.output_size != (size, size):
        raise ValueError("gaze render size must match image size")
    rng = np.random.default_rng(seed)
    examples = []
    labels = [Label(k % 3) for k in range(3 * n_per_class)]
    for k, label in enumerate(labels):
        image_id = f"syn{k:05d}"
        patient_id = f"pat{k // 2:05d}"
        image, anchors = _synthetic_image(rng, label, size)
        recs = _synthetic_fixations(rng, image_id, patient_id, anchors)
        static, temporals = render_image_gaze(recs, cfg)
        examples.append(Example(image_id, patient_id, quantize(image), label, static,
                                temporals, recs))
    return examples
