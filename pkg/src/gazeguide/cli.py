"""Command-line pipeline: synth, render-gaze, split, train, eval, explain.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .evaluation import ScoredExample, bootstrap_auc, render_report, report_csv
from .gaze import GazeRenderConfig
from .model import (UNetConfig, build, forward, load_checkpoint, predict_proba, save_checkpoint)
from .saliency import gradcam, saliency_maps
from .tensor import sigmoid_forward
from .train import Regime, TrainConfig, TrainingDiverged, fit, write_metrics

log = logging.getLogger("gazeguide")

COMMANDS = ("synth", "render-gaze", "split", "train", "eval", "explain")
CONFIG_NAME = "run_config.txt"

# Overlay ramp, dark -> bright (black, purple, red-orange, yellow, white).
COLORMAP_STOPS = np.array([
    [0.00, 0.0, 0.0, 0.0],
    [0.25, 0.34, 0.06, 0.43],
    [0.50, 0.80, 0.20, 0.25],
    [0.75, 0.98, 0.60, 0.05],
    [1.00, 1.0, 1.0, 0.75],
])
OVERLAY_ALPHA = 0.4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    split: str = ""
    checkpoint: str = ""
    seed: int = 0
    size: int = 128
    n_per_class: int = 200
    encoder_channels: str = "16,32,64,128"
    sigma_frac: float = 0.05
    window_ms: float = 1000.0
    regime: str = "combined"
    rule: str = "guided"
    alpha: float = 0.5
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    lambda_cls: float = 1.0
    lambda_seg: float = 1.0
    optimizer: str = "adam"
    iterations: int = 30
    images: str = ""
    explain_rule: str = "guided"
    target: str = "predicted"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def update(self, values: dict[str, str]) -> None:
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise UsageError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                value = int(raw) if kind == "int" else float(raw) if kind == "float" else str(raw)
            except ValueError:
                raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
            setattr(self, key, value)

    def dump(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in self.keys())

    # derived configs -------------------------------------------------------

    def gaze_config(self) -> GazeRenderConfig:
        return GazeRenderConfig((self.size, self.size), self.sigma_frac, self.window_ms)

    def unet_config(self) -> UNetConfig:
        chans = tuple(int(c) for c in self.encoder_channels.split(","))
        return UNetConfig((self.size, self.size), chans, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.lambda_cls,
                           self.lambda_seg, self.alpha, self.seed, self.optimizer)

    def regime_obj(self) -> Regime:
        return Regime.parse(self.regime, self.rule, self.alpha)


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gazeguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file; flags override its values")
        for key in RunConfig.keys():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.update(read_config_file(args.config))
    cfg.update({k: v for k, v in vars(args).items() if k in RunConfig.keys() and v is not None})
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.dump(), encoding="utf-8")
    return out


def _need(cfg: RunConfig, *keys: str):
    for k in keys:
        if not getattr(cfg, k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _load_split(cfg: RunConfig):
    examples = D.load_corpus(cfg.data, cfg.gaze_config())
    plan = D.SplitPlan.from_json(Path(cfg.split).read_text(encoding="utf-8"))
    return examples, D.apply_split(examples, plan)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    examples = D.generate_synthetic(cfg.n_per_class, cfg.size, cfg.seed, cfg.gaze_config())
    D.save_dataset(examples, out)
    log.info("wrote %d synthetic examples to %s", len(examples), out)


def _gray_png(path: Path, values: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(values, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_render_gaze(cfg: RunConfig) -> None:
    _need(cfg, "data")
    out = _out_dir(cfg)
    for ex in D.load_corpus(cfg.data, cfg.gaze_config()):
        _gray_png(out / f"{ex.image_id}_static.png", ex.gaze_static.values)
        for t, hm in enumerate(ex.gaze_temporals):
            _gray_png(out / f"{ex.image_id}_t{t:03d}.png", hm.values)


def cmd_split(cfg: RunConfig) -> None:
    _need(cfg, "data")
    out = _out_dir(cfg)
    examples = D.load_corpus(cfg.data, cfg.gaze_config())
    plan = D.grouped_split(examples, D.DEFAULT_FRACTIONS, cfg.seed)
    (out / "split.json").write_text(plan.to_json(), encoding="utf-8")
    log.info("split sizes: train %d, val %d, test %d", len(plan.train), len(plan.val), len(plan.test))


def cmd_train(cfg: RunConfig) -> None:
    _need(cfg, "data", "split")
    try:
        regime, tcfg, ucfg = cfg.regime_obj(), cfg.train_config(), cfg.unet_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(cfg)
    _, splits = _load_split(cfg)
    model = build(ucfg)
    result = fit(model, splits["train"], splits["val"], regime, tcfg)
    save_checkpoint(result.model, out / "model.ggt")
    write_metrics(result.history, out / "metrics.csv")
    log.info("best epoch %d", result.best_epoch)


def score_examples(model, examples) -> list[ScoredExample]:
    images, labels, _ = D.to_arrays(examples)
    probs = predict_proba(model, images)
    return [ScoredExample(ex.image_id, tuple(float(v) for v in p), int(y))
            for ex, p, y in zip(examples, probs, labels)]


def cmd_eval(cfg: RunConfig) -> None:
    _need(cfg, "data", "split", "checkpoint")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg.checkpoint)
    _, splits = _load_split(cfg)
    report = bootstrap_auc(score_examples(model, splits["test"]), cfg.iterations, cfg.seed)
    text = render_report(report, Path(cfg.checkpoint).stem)
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    sys.stdout.write(text)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] values to RGB in [0,1] through the fixed ramp."""
    v = np.clip(values, 0, 1)
    return np.stack([np.interp(v, COLORMAP_STOPS[:, 0], COLORMAP_STOPS[:, c]) for c in (1, 2, 3)], axis=-1)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    gray = np.repeat(np.clip(image, 0, 1)[..., None], 3, axis=-1)
    return (1 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * colorize(heat)


def explain_panels(model, ex: D.Example, rule: str, target: str) -> np.ndarray:
    """H×4W×3 panel strip: input, generator map, static gaze, decoder mask."""
    record = forward(model, ex.image[None, None])
    cls = int(np.argmax(record.class_logits[0])) if target == "predicted" else int(ex.label)
    if rule == "gradcam":
        heat = gradcam(model, record, cls)[0].values
    else:
        heat = saliency_maps(model, record, cls, rule)[0]
    mask = sigmoid_forward(record.mask_logits[0, 0])
    gray = np.repeat(ex.image[..., None], 3, axis=-1)
    panels = [gray, overlay(ex.image, heat), overlay(ex.image, ex.gaze_static.values),
              overlay(ex.image, mask)]
    return np.concatenate(panels, axis=1)


def cmd_explain(cfg: RunConfig) -> None:
    _need(cfg, "data", "checkpoint")
    if cfg.explain_rule not in ("backprop", "deconvnet", "guided", "gradcam"):
        raise UsageError(f"unknown explain rule {cfg.explain_rule!r}")
    if cfg.target not in ("predicted", "true"):
        raise UsageError("--target must be 'predicted' or 'true'")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg.checkpoint)
    examples = {ex.image_id: ex for ex in D.load_corpus(cfg.data, cfg.gaze_config())}
    wanted = [i for i in cfg.images.split(",") if i] or sorted(examples)[:4]
    missing = [i for i in wanted if i not in examples]
    if missing:
        raise UsageError(f"unknown image id(s): {', '.join(missing)}")
    for image_id in wanted:
        strip = explain_panels(model, examples[image_id], cfg.explain_rule, cfg.target)
        Image.fromarray(np.round(strip * 255).astype(np.uint8)).save(
            out / f"{image_id}_{cfg.explain_rule}.png")


HANDLERS = {
    "synth": cmd_synth,
    "render-gaze": cmd_render_gaze,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except TrainingDiverged as exc:
        sys.stderr.write(f"training diverged: {exc}\n")
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
