"""Losses for the five training regimes and the minibatch training loop."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .data import Example, to_arrays
from .evaluation import UndefinedAUCError, auc, ncc
from .model import CLASS_NAMES, ForwardRecord, UNetModel, forward
from .saliency import build_saliency_graph, saliency_maps
from .tensor import BackwardRule

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_auc_mean",
                   "val_auc_normal", "val_auc_chf", "val_auc_pneumonia")


class RegimeKind(str, enum.Enum):
    CLS_ONLY = "cls_only"
    MASK_VS_GAZE = "mask_vs_gaze"
    SAL_VS_GAZE = "sal_vs_gaze"
    MASK_VS_SAL = "mask_vs_sal"
    COMBINED = "combined"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, loss: float):
        self.epoch, self.batch_index, self.loss = epoch, batch_index, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}")


@dataclass(frozen=True)
class Regime:
    kind: RegimeKind
    rule: BackwardRule | None = None
    alpha: float | None = None

    def __post_init__(self):
        kind = RegimeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        needs_rule = kind in (RegimeKind.SAL_VS_GAZE, RegimeKind.MASK_VS_SAL, RegimeKind.COMBINED)
        if needs_rule:
            if self.rule is None:
                raise ValueError(f"regime {kind.value} needs a generator rule")
            rule = BackwardRule(self.rule)
            if rule is BackwardRule.BACKPROP:
                raise ValueError("generator rule must be deconvnet or guided")
            object.__setattr__(self, "rule", rule)
        elif self.rule is not None:
            raise ValueError(f"regime {kind.value} takes no generator rule")
        if kind is RegimeKind.COMBINED:
            if self.alpha is None or not 0 <= self.alpha <= 1:
                raise ValueError(f"combined regime needs alpha in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError("alpha only applies to the combined regime")

    @classmethod
    def parse(cls, kind: str, rule: str | None = None, alpha: float | None = None) -> "Regime":
        kind = RegimeKind(kind.replace("-", "_"))
        if kind not in (RegimeKind.SAL_VS_GAZE, RegimeKind.MASK_VS_SAL, RegimeKind.COMBINED):
            rule = None
        if kind is not RegimeKind.COMBINED:
            alpha = None
        return cls(kind, None if rule is None else BackwardRule(rule), alpha)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    lambda_cls: float = 1.0
    lambda_seg: float = 1.0
    alpha: float = 0.5
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.lambda_cls < 0 or self.lambda_seg < 0:
            raise ValueError("rates and loss weights must be non-negative")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# losses


def _bce_values(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logits: ad.Node, targets: np.ndarray) -> ad.Node:
    """Mean binary cross-entropy on logits (stable form); differentiable."""
    z = logits.value
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ValueError("BCE targets must lie in [0, 1]")
    value = _bce_values(z, y).mean()

    def vjp(g):
        return (g * (T.sigmoid_forward(z) - y) / z.size,)

    return ad.Node(np.asarray(value, dtype=z.dtype), (logits,), vjp, "bce")


def bce_value(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(bce_with_logits(ad.leaf(np.asarray(logits, dtype=np.float64)), targets).value)


def _as_gaze(gaze, record: ForwardRecord) -> np.ndarray:
    g = np.asarray(getattr(gaze, "values", gaze))
    return g.reshape(record.batch_size, *record.mask_logits.shape[2:])


def _sal_term(model, record, gaze, target_class, rule, masks=None) -> ad.Node:
    graph = build_saliency_graph(model, record, target_class, rule, masks=masks)
    return bce_with_logits(graph.output, gaze)


def _mask_term(record, gaze) -> ad.Node:
    return bce_with_logits(record.mask_node, gaze[:, None])


def segmentation_loss(regime: Regime, record: ForwardRecord, model: UNetModel, gaze_static,
                      target_class, masks: dict | None = None,
                      sal_target: np.ndarray | None = None) -> ad.Node:
    """Segmentation term for ``regime``; ``gaze_static`` is N×H×W in [0,1].

    ``masks`` freezes the saliency pass-masks and ``sal_target`` the
    mask-vs-saliency target map; finite-difference checks use both to
    re-evaluate the loss at perturbed weights.
    """
    gaze = _as_gaze(gaze_static, record)
    kind = regime.kind
    if kind is RegimeKind.CLS_ONLY:
        raise ValueError("classification-only regime has no segmentation loss")
    if kind is RegimeKind.MASK_VS_GAZE:
        return _mask_term(record, gaze)
    if kind is RegimeKind.SAL_VS_GAZE:
        return _sal_term(model, record, gaze, target_class, regime.rule, masks)
    if kind is RegimeKind.MASK_VS_SAL:
        target = sal_target
        if target is None:
            target = saliency_maps(model, record, target_class, regime.rule)
        return bce_with_logits(record.mask_node, target[:, None])
    sal = _sal_term(model, record, gaze, target_class, regime.rule, masks)
    mask = _mask_term(record, gaze)
    return ad.add(ad.scale(sal, regime.alpha), ad.scale(mask, 1.0 - regime.alpha))


def total_loss(record: ForwardRecord, model: UNetModel, regime: Regime, cfg: TrainConfig,
               label_onehot: np.ndarray, gaze_static, masks: dict | None = None,
               sal_target: np.ndarray | None = None) -> ad.Node:
    onehot = np.asarray(label_onehot)
    if onehot.ndim == 1:
        onehot = onehot[None]
    if not np.all(np.isin(onehot, (0, 1))) or not np.all(onehot.sum(axis=1) == 1):
        raise ValueError("label_onehot must have exactly one 1 per example")
    loss = ad.scale(bce_with_logits(record.class_node, onehot), cfg.lambda_cls)
    if regime.kind is RegimeKind.CLS_ONLY:
        return loss
    target_class = onehot.argmax(axis=1)
    seg = segmentation_loss(regime, record, model, gaze_static, target_class, masks, sal_target)
    return ad.add(loss, ad.scale(seg, cfg.lambda_seg))


def loss_and_grads(model: UNetModel, images: np.ndarray, labels: np.ndarray, gaze: np.ndarray,
                   regime: Regime, cfg: TrainConfig) -> tuple[float, dict[str, np.ndarray]]:
    record = forward(model, images[:, None])
    onehot = np.eye(len(CLASS_NAMES), dtype=model.dtype)[labels]
    loss = total_loss(record, model, regime, cfg, onehot, gaze)
    names = list(model.params)
    grads = ad.backward(loss, [record.param_nodes[n] for n in names])
    return float(loss.value), dict(zip(names, grads))


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for k, g in grads.items():
            params[k] -= (self.lr * g).astype(params[k].dtype)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


# ---------------------------------------------------------------------------
# evaluation helpers used during training


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: tuple[float, float, float, float]
    val_mask_ncc: float = float("nan")

    def row(self) -> list:
        return [self.epoch, f"{self.train_loss:.6f}", f"{self.val_loss:.6f}",
                *(f"{a:.6f}" for a in self.val_auc)]


def evaluate_split(model: UNetModel, images, labels, gaze, regime: Regime, cfg: TrainConfig,
                   batch_size: int = 32) -> dict:
    """Loss, per-class AUC (mean first) and mean mask/gaze NCC on a split."""
    losses, weights, scores, nccs = [], [], [], []
    onehots = np.eye(len(CLASS_NAMES), dtype=model.dtype)
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        record = forward(model, images[sl, None])
        loss = total_loss(record, model, regime, cfg, onehots[labels[sl]], gaze[sl])
        losses.append(float(loss.value))
        weights.append(len(images[sl]))
        scores.append(T.sigmoid_forward(record.class_logits))
        masks = T.sigmoid_forward(record.mask_logits[:, 0])
        nccs.extend(ncc(m, g) for m, g in zip(masks, gaze[sl]))
    scores = np.concatenate(scores).astype(np.float64)
    per_class = []
    for k in range(len(CLASS_NAMES)):
        try:
            per_class.append(auc(scores[:, k], labels == k))
        except UndefinedAUCError:
            per_class.append(float("nan"))
    return {
        "loss": float(np.average(losses, weights=weights)),
        "auc": (float(np.mean(per_class)), *per_class),
        "mask_ncc": float(np.mean(nccs)),
        "scores": scores,
    }


@dataclass
class FitResult:
    model: UNetModel
    final_model: UNetModel
    history: list[EpochMetrics]
    initial: dict = field(default_factory=dict)
    best_epoch: int = 0


def fit(model: UNetModel, train: Sequence[Example], val: Sequence[Example], regime: Regime,
        cfg: TrainConfig, on_epoch: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Minibatch training; returns the best-validation-AUC checkpoint.

    ``model`` is trained in place (its final state is ``final_model``);
    ``FitResult.model`` is a copy taken at the best epoch. Epoch 0 in
    ``initial`` is the untrained model's validation metrics.
    """
    tr_x, tr_y, tr_g = to_arrays(train)
    va_x, va_y, va_g = to_arrays(val)
    dtype = model.dtype
    tr_x, tr_g, va_x, va_g = (a.astype(dtype) for a in (tr_x, tr_g, va_x, va_g))
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)

    init = evaluate_split(model, va_x, va_y, va_g, regime, cfg)
    best_auc, best_epoch, best = -np.inf, 0, model.copy()
    history: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr_x))
        total, count = 0.0, 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            loss, grads = loss_and_grads(model, tr_x[idx], tr_y[idx], tr_g[idx], regime, cfg)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss)
            opt.step(model.params, grads)
            model.touch()
            total += loss * len(idx)
            count += len(idx)
        ev = evaluate_split(model, va_x, va_y, va_g, regime, cfg)
        m = EpochMetrics(epoch, total / max(count, 1), ev["loss"], ev["auc"], ev["mask_ncc"])
        history.append(m)
        log.info("epoch %d train %.4f val %.4f auc %.3f ncc %.3f", epoch, m.train_loss,
                 m.val_loss, m.val_auc[0], m.val_mask_ncc)
        if on_epoch is not None:
            on_epoch(m)
        score = m.val_auc[0] if np.isfinite(m.val_auc[0]) else -np.inf
        if score > best_auc:
            best_auc, best_epoch, best = score, epoch, model.copy()
    return FitResult(best, model, history, init, best_epoch)


def write_metrics(history: Sequence[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for m in history:
            writer.writerow(m.row())
