"""Saliency maps: vanilla gradient, deconvnet, guided back-propagation and
Grad-CAM, plus a differentiable replay of the rule-modified backward pass.

The replay (:func:`build_saliency_graph`) treats every ReLU pass-mask and
max-pool switch as a constant, so a loss on the map yields first-order
gradients for the weights used by the transposed convolutions and the
classification head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .model import ForwardRecord, UNetModel
from .tensor import BackwardRule


class Source(str, enum.Enum):
    BACKPROP = "backprop"
    DECONVNET = "deconvnet"
    GUIDED = "guided"
    GRADCAM = "gradcam"
    GAZE = "gaze"
    DECODER_MASK = "decoder_mask"


class StaleRecordError(ValueError):
    pass


@dataclass
class Heatmap:
    values: np.ndarray
    source: Source

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"heatmap must be H×W, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")


def normalize_array(raw: np.ndarray) -> np.ndarray:
    """Rectify then divide by the max; an all-nonpositive map becomes zeros."""
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise ValueError("cannot normalize a map with non-finite values")
    v = np.maximum(raw, 0)
    peak = v.max() if v.size else 0
    if peak > 0:
        return v / peak
    return np.zeros_like(v)


def normalize(raw: np.ndarray, source: Source = Source.GAZE) -> Heatmap:
    return Heatmap(normalize_array(raw), Source(source))


def _check_record(model: UNetModel, record: ForwardRecord):
    if record.model_token != (id(model), model.version):
        raise StaleRecordError("forward record was produced by a different model state")


def _targets(record: ForwardRecord, target_class) -> np.ndarray:
    n = record.batch_size
    tc = np.broadcast_to(np.asarray(target_class), (n,)).astype(int)
    if tc.min() < 0 or tc.max() >= record.class_logits.shape[1]:
        raise ValueError(f"target class out of range: {target_class}")
    return tc


def _seed(record: ForwardRecord, target_class, scale: float, dtype) -> np.ndarray:
    tc = _targets(record, target_class)
    seed = np.zeros(record.class_logits.shape, dtype=dtype)
    seed[np.arange(len(tc)), tc] = scale
    return seed


def _collapse(raw: np.ndarray) -> np.ndarray:
    idx = np.abs(raw).argmax(axis=1)
    return np.abs(np.take_along_axis(raw, idx[:, None], axis=1)[:, 0])


def _normalize_batch(maps: np.ndarray) -> np.ndarray:
    n = maps.shape[0]
    flat = maps.reshape(n, -1)
    peak = flat.max(axis=1)
    live = peak > 0
    denom = np.where(live, peak, 1).astype(maps.dtype)
    out = flat / denom[:, None]
    out[~live] = 0
    return out.reshape(maps.shape)


def backward_signal(model: UNetModel, record: ForwardRecord, target_class,
                    rule: BackwardRule, seed_scale: float = 1.0) -> np.ndarray:
    """Imperative rule-modified backward pass from a class logit to the input.

    Returns the raw N×1×H×W input signal.
    """
    _check_record(model, record)
    rule = BackwardRule(rule)
    p = model.params
    n_stages = len(model.config.encoder_channels)
    g = _seed(record, target_class, seed_scale, model.dtype)
    g = g @ p["head.w"]
    g = T.gap_backward(g, record.features.shape)
    g = T.relu_backward(g, record.relu_inputs["bottleneck"], rule)
    g = T.conv2d_backward_input(g, p["bottleneck.w"], record.stage_inputs["bottleneck"], 1, 1)
    for i in reversed(range(n_stages)):
        name = f"enc{i}"
        g = T.maxpool2d_backward(g, record.switches[i], 2)
        g = T.relu_backward(g, record.relu_inputs[name], rule)
        g = T.conv2d_backward_input(g, p[f"{name}.w"], record.stage_inputs[name], 1, 1)
    return g


def saliency_maps(model: UNetModel, record: ForwardRecord, target_class,
                  rule: BackwardRule, seed_scale: float = 1.0) -> np.ndarray:
    """Normalized N×H×W maps for a batch record."""
    raw = backward_signal(model, record, target_class, rule, seed_scale)
    return _normalize_batch(_collapse(raw))


def generate(model: UNetModel, record: ForwardRecord, target_class,
             rule: BackwardRule) -> list[Heatmap]:
    """One heatmap per example in ``record``, seeded at ``target_class``."""
    maps = saliency_maps(model, record, target_class, rule)
    return [Heatmap(m, Source(BackwardRule(rule).value)) for m in maps]


def gradcam_coarse(model: UNetModel, record: ForwardRecord, target_class) -> np.ndarray:
    """Rectified gradient-weighted bottleneck maps at bottleneck extent (N×h×w)."""
    _check_record(model, record)
    feats = record.features
    seed = _seed(record, target_class, 1.0, model.dtype)
    grad_feats = T.gap_backward(seed @ model.params["head.w"], feats.shape)
    weights = grad_feats.mean(axis=(2, 3))
    return np.maximum(np.einsum("nk,nkhw->nhw", weights, feats), 0)


def gradcam(model: UNetModel, record: ForwardRecord, target_class) -> list[Heatmap]:
    coarse = gradcam_coarse(model, record, target_class)
    factor = model.config.input_size[0] // coarse.shape[1]
    up = coarse.repeat(factor, axis=1).repeat(factor, axis=2)
    return [Heatmap(m, Source.GRADCAM) for m in _normalize_batch(up)]


@dataclass
class SaliencyGraph:
    """Tape replay of a rule-modified backward pass.

    ``output`` is the N×H×W normalized map node; ``masks`` holds the frozen
    ReLU pass-masks by layer name so the same graph can be rebuilt for a
    perturbed model (finite-difference checks).
    """

    output: ad.Node
    raw: ad.Node
    masks: dict[str, np.ndarray]
    weights: dict[str, ad.Node] = field(repr=False)

    @property
    def value(self) -> np.ndarray:
        return self.output.value


def build_saliency_graph(model: UNetModel, record: ForwardRecord, target_class,
                         rule: BackwardRule, seed_scale: float = 1.0,
                         masks: dict[str, np.ndarray] | None = None,
                         weights: dict[str, ad.Node] | None = None,
                         allow_backprop: bool = False) -> SaliencyGraph:
    """Differentiable replay of :func:`saliency_maps`.

    ``weights`` defaults to the record's parameter nodes so gradients merge
    with the forward-pass tape. Passing ``masks`` freezes the pass-masks
    to given values instead of deriving them from this record.
    """
    rule = BackwardRule(rule)
    if rule is BackwardRule.BACKPROP and not allow_backprop:
        raise ValueError("training-time saliency graphs use the deconvnet or guided rule")
    _check_record(model, record)
    if weights is None:
        weights = record.param_nodes or {k: ad.leaf(v, k) for k, v in model.params.items()}
    frozen = masks or {}
    used: dict[str, np.ndarray] = {}

    def relu_step(g: ad.Node, name: str) -> ad.Node:
        keep = frozen.get(name)
        if keep is None:
            keep = T.relu_mask(g.value, record.relu_inputs[name], rule)
        used[name] = keep
        return ad.mask(g, keep)

    n_stages = len(model.config.encoder_channels)
    g = ad.leaf(_seed(record, target_class, seed_scale, model.dtype), "seed")
    g = ad.affine_transpose(g, weights["head.w"])
    g = ad.gap_transpose(g, record.features.shape[2:])
    g = relu_step(g, "bottleneck")
    g = ad.conv2d_transpose(g, weights["bottleneck.w"], record.stage_inputs["bottleneck"], 1, 1)
    for i in reversed(range(n_stages)):
        name = f"enc{i}"
        g = ad.unpool(g, record.switches[i], 2)
        g = relu_step(g, name)
        g = ad.conv2d_transpose(g, weights[f"{name}.w"], record.stage_inputs[name], 1, 1)
    raw = g
    out = ad.max_normalize(ad.channel_max_abs(raw))
    return SaliencyGraph(out, raw, used, weights)
