"""Multi-head U-Net: conv encoder, bottleneck, 3-logit classification head
and a skip-connected decoder emitting a 1-channel mask logit map."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .tensor import LayerKind, LayerSpec

CLASS_NAMES = ("normal", "chf", "pneumonia")
NUM_CLASSES = 3
CHECKPOINT_MAGIC = b"GGT1"


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class UNetConfig:
    input_size: tuple[int, int] = (128, 128)
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    num_classes: int = NUM_CLASSES
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        h, w = self.input_size
        if h != w:
            raise ConfigError(f"input must be square, got {h}x{w}")
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise ConfigError(f"invalid encoder channels {self.encoder_channels}")
        depth = 2 ** len(self.encoder_channels)
        if h % depth:
            raise ConfigError(f"input size {h} not divisible by 2^{len(self.encoder_channels)}")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def decoder_channels(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_channels))


def layer_specs(config: UNetConfig) -> dict[str, LayerSpec]:
    """Parameterized layers keyed by parameter prefix, in checkpoint order."""
    enc = config.encoder_channels
    specs: dict[str, LayerSpec] = {}
    c_in = 1
    for i, c in enumerate(enc):
        specs[f"enc{i}"] = LayerSpec(LayerKind.CONV2D, c_in, c, kernel=3, padding=1)
        c_in = c
    specs["bottleneck"] = LayerSpec(LayerKind.CONV2D, enc[-1], enc[-1], kernel=3, padding=1)
    specs["head"] = LayerSpec(LayerKind.AFFINE, enc[-1], config.num_classes)
    prev = enc[-1]
    for i in reversed(range(len(enc))):
        specs[f"dec{i}"] = LayerSpec(LayerKind.CONV2D, prev + enc[i], enc[i], kernel=3, padding=1)
        prev = enc[i]
    specs["mask"] = LayerSpec(LayerKind.CONV2D, enc[0], 1, kernel=1)
    return specs


class UNetModel:
    """Parameter set plus architecture. ``version`` bumps on every mutation."""

    def __init__(self, config: UNetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.specs = layer_specs(config)
        self.params = params
        self.version = 0

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def touch(self):
        self.version += 1

    def copy(self) -> "UNetModel":
        m = UNetModel(self.config, {k: v.copy() for k, v in self.params.items()})
        return m

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def build(config: UNetConfig) -> UNetModel:
    """Seeded Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, np.ndarray] = {}
    for name, spec in layer_specs(config).items():
        if spec.kind is LayerKind.CONV2D:
            k2 = spec.kernel * spec.kernel
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            limit = np.sqrt(6.0 / (spec.in_channels * k2 + spec.out_channels * k2))
        else:
            shape = (spec.out_channels, spec.in_channels)
            limit = np.sqrt(6.0 / (spec.in_channels + spec.out_channels))
        params[f"{name}.w"] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        params[f"{name}.b"] = np.zeros(spec.out_channels, dtype=dtype)
    return UNetModel(config, params)


@dataclass
class ForwardRecord:
    """Outputs of one forward pass plus everything backward passes need.

    ``relu_inputs`` maps layer name to the pre-activation fed into its ReLU,
    ``switches`` maps encoder stage to its max-pool argmax indices,
    ``features`` holds the bottleneck activations (the last conv maps).
    The ``*_node`` fields are the tape handles used by training losses.
    """

    class_logits: np.ndarray
    mask_logits: np.ndarray
    relu_inputs: dict[str, np.ndarray]
    switches: dict[int, np.ndarray]
    stage_inputs: dict[str, tuple[int, ...]]
    features: np.ndarray
    model_token: tuple[int, int]
    class_node: ad.Node = field(repr=False, default=None)
    mask_node: ad.Node = field(repr=False, default=None)
    param_nodes: dict[str, ad.Node] = field(repr=False, default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.class_logits.shape[0]


def check_batch(model: UNetModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    h, w = model.config.input_size
    if batch.ndim != 4 or batch.shape[1:] != (1, h, w):
        raise InputError(f"expected batch of shape (N, 1, {h}, {w}), got {batch.shape}")
    if not np.all(np.isfinite(batch)) or batch.min() < 0 or batch.max() > 1:
        raise InputError("pixel values must lie in [0, 1]")
    return batch.astype(model.dtype, copy=False)


def forward(model: UNetModel, batch: np.ndarray) -> ForwardRecord:
    """Run both heads over an N×1×H×W batch, recording the tape."""
    x = ad.leaf(check_batch(model, batch), "input")
    p = {k: ad.leaf(v, k) for k, v in model.params.items()}
    n_stages = len(model.config.encoder_channels)

    relu_inputs: dict[str, np.ndarray] = {}
    switches: dict[int, np.ndarray] = {}
    stage_inputs: dict[str, tuple[int, ...]] = {}
    skips = []
    h = x
    for i in range(n_stages):
        name = f"enc{i}"
        stage_inputs[name] = h.shape
        pre = ad.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], 1, 1)
        relu_inputs[name] = pre.value
        act = ad.relu(pre)
        skips.append(act)
        h, switches[i] = ad.maxpool2d(act, 2)

    stage_inputs["bottleneck"] = h.shape
    pre = ad.conv2d(h, p["bottleneck.w"], p["bottleneck.b"], 1, 1)
    relu_inputs["bottleneck"] = pre.value
    feats = ad.relu(pre)

    logits = ad.affine(ad.gap(feats), p["head.w"], p["head.b"])

    d = feats
    for i in reversed(range(n_stages)):
        name = f"dec{i}"
        d = ad.concat_channels(ad.upsample2d(d, 2), skips[i])
        pre = ad.conv2d(d, p[f"{name}.w"], p[f"{name}.b"], 1, 1)
        relu_inputs[name] = pre.value
        d = ad.relu(pre)
    mask = ad.conv2d(d, p["mask.w"], p["mask.b"], 1, 0)

    return ForwardRecord(
        class_logits=logits.value,
        mask_logits=mask.value,
        relu_inputs=relu_inputs,
        switches=switches,
        stage_inputs=stage_inputs,
        features=feats.value,
        model_token=(id(model), model.version),
        class_node=logits,
        mask_node=mask,
        param_nodes=p,
    )


def classify(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Per-class sigmoid probabilities for one H×W (or 1×H×W) image."""
    h, w = model.config.input_size
    img = np.asarray(image).reshape(1, 1, h, w)
    return T.sigmoid_forward(forward(model, img).class_logits[0])


def predict_proba(model: UNetModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Sigmoid class scores for an N×H×W stack, evaluated in chunks."""
    images = np.asarray(images)
    out = []
    for s in range(0, len(images), batch_size):
        rec = forward(model, images[s:s + batch_size, None])
        out.append(T.sigmoid_forward(rec.class_logits))
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))


# ---------------------------------------------------------------------------
# checkpoints: b"GGT1", u32 manifest length, UTF-8 manifest, f32 LE blobs.
# Manifest lines: "config <key>=<value>;..." then "<name> <dims,comma> <offset>".


def save_checkpoint(model: UNetModel, path: str | Path) -> None:
    cfg = model.config
    lines = [
        "config input_size={};encoder_channels={};num_classes={};seed={};dtype={}".format(
            cfg.input_size[0], ",".join(map(str, cfg.encoder_channels)),
            cfg.num_classes, cfg.seed, cfg.dtype)
    ]
    blobs = []
    offset = 0
    for name, p in model.params.items():
        data = np.ascontiguousarray(p, dtype="<f4").tobytes()
        lines.append(f"{name} {','.join(map(str, p.shape))} {offset}")
        blobs.append(data)
        offset += len(data)
    manifest = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> UNetModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GGT1 checkpoint")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = raw[8:8 + mlen].decode("utf-8").splitlines()
    body = raw[8 + mlen:]
    kv = dict(item.split("=", 1) for item in manifest[0].split(" ", 1)[1].split(";"))
    size = int(kv["input_size"])
    config = UNetConfig(
        input_size=(size, size),
        encoder_channels=tuple(int(c) for c in kv["encoder_channels"].split(",")),
        num_classes=int(kv["num_classes"]),
        seed=int(kv["seed"]),
        dtype=kv["dtype"],
    )
    params = {}
    for line in manifest[1:]:
        name, dims, off = line.split(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        count = int(np.prod(shape))
        off = int(off)
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        params[name] = arr.astype(config.dtype)
    expected = {f"{n}.{s}" for n in layer_specs(config) for s in ("w", "b")}
    if set(params) != expected:
        raise ValueError(f"{path}: parameter set does not match configured architecture")
    return UNetModel(config, params)
