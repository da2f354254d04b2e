"""The ten acceptance criteria, one test each.

Each test prints a PASS/FAIL line, and the same lines are repeated in the
terminal summary at the end of the run.
"""

import contextlib
import itertools
import time

import numpy as np
import pytest

import conftest
from conftest import random_images, tiny_model
from gazeguide import autodiff as ad
from gazeguide import tensor as T
from gazeguide.data import Example, Label, apply_split, generate_synthetic, grouped_split, to_arrays
from gazeguide.evaluation import (ScoredExample, auc, bootstrap_auc, format_cell, per_class_auc,
                                  render_report)
from gazeguide.gaze import (FixationRecord, GazeRenderConfig, accumulate_temporal, render_static,
                            render_temporal, static_accumulation)
from gazeguide.model import (UNetConfig, build, forward, load_checkpoint, predict_proba,
                             save_checkpoint)
from gazeguide.saliency import Heatmap, Source, build_saliency_graph, saliency_maps
from gazeguide.tensor import BackwardRule
from gazeguide.train import Regime, RegimeKind, TrainConfig, fit, total_loss


@contextlib.contextmanager
def criterion(number, title):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {number:2d} FAIL  {title}  ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})"
        print(line)
        conftest.ACCEPTANCE_LINES.append(line)
        raise
    line = f"criterion {number:2d} PASS  {title}  [{time.perf_counter() - start:.1f}s]"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)


# ---------------------------------------------------------------------------
# 1. gradient fidelity


def _primitive_checks(rng):
    """(name, func, params) triples covering every differentiable op."""
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    fc_w, fc_b = rng.normal(size=(3, 2)), rng.normal(size=3)
    checks = []

    def conv(xx, ww, bb):
        y = T.conv2d_forward(xx, ww, bb, 1, 1)
        r = np.random.default_rng(0).normal(size=y.shape)
        return float((y * r).sum()), T.conv2d_backward(r, xx, ww, 1, 1)
    checks.append(("conv2d", conv, [x.copy(), w.copy(), b.copy()]))

    def conv_strided(xx, ww, bb):
        y = T.conv2d_forward(xx, ww, bb, 2, 0)
        r = np.random.default_rng(1).normal(size=y.shape)
        return float((y * r).sum()), T.conv2d_backward(r, xx, ww, 2, 0)
    checks.append(("conv2d stride 2", conv_strided, [x.copy(), w.copy(), b.copy()]))

    # keep inputs away from the kink / pooling ties so differences are smooth
    xr = rng.uniform(0.1, 1, size=(2, 2, 4, 4)) * rng.choice([-1, 1], size=(2, 2, 4, 4))

    def relu(xx):
        y = T.relu_forward(xx)
        r = np.random.default_rng(2).normal(size=y.shape)
        return float((y * r).sum()), [T.relu_backward(r, xx)]
    checks.append(("relu", relu, [xr.copy()]))

    xp = rng.permutation(np.arange(32.0)).reshape(2, 1, 4, 4) / 8

    def pool(xx):
        y, sw = T.maxpool2d_forward(xx, 2)
        r = np.random.default_rng(3).normal(size=y.shape)
        return float((y * r).sum()), [T.maxpool2d_backward(r, sw, 2)]
    checks.append(("maxpool", pool, [xp.copy()]))

    def up(xx):
        y = T.upsample2d_forward(xx, 2)
        r = np.random.default_rng(4).normal(size=y.shape)
        return float((y * r).sum()), [T.upsample2d_backward(r, 2)]
    checks.append(("upsample", up, [x.copy()]))

    v = rng.normal(size=(4, 2))

    def affine(vv, ww, bb):
        y = T.affine_forward(vv, ww, bb)
        r = np.random.default_rng(5).normal(size=y.shape)
        return float((y * r).sum()), T.affine_backward(r, vv, ww)
    checks.append(("affine", affine, [v.copy(), fc_w.copy(), fc_b.copy()]))

    def gap(xx):
        y = T.gap_forward(xx)
        r = np.random.default_rng(6).normal(size=y.shape)
        return float((y * r).sum()), [T.gap_backward(r, xx.shape)]
    checks.append(("global average pool", gap, [x.copy()]))

    def sig(xx):
        y = T.sigmoid_forward(xx)
        r = np.random.default_rng(7).normal(size=y.shape)
        return float((y * r).sum()), [T.sigmoid_backward(r, xx)]
    checks.append(("sigmoid", sig, [x.copy()]))

    def tape(fn):
        def run(*params):
            leaves = [ad.leaf(p) for p in params]
            out = fn(*leaves)
            r = np.random.default_rng(8).normal(size=out.value.shape)
            loss = float((out.value * r).sum())
            return loss, ad.backward(out, leaves, seed=r)
        return run

    g = rng.normal(size=(2, 3, 4, 4))
    checks.append(("conv2d transpose", tape(lambda gg, ww: ad.conv2d_transpose(gg, ww, x.shape, 1, 1)),
                   [g.copy(), w.copy()]))
    checks.append(("affine transpose", tape(lambda gg, ww: ad.affine_transpose(gg, ww)),
                   [rng.normal(size=(4, 3)), fc_w.copy()]))
    checks.append(("gap transpose", tape(lambda gg: ad.gap_transpose(gg, (3, 3))),
                   [rng.normal(size=(2, 3))]))
    checks.append(("concat", tape(lambda a, c: ad.concat_channels(a, c)), [x.copy(), g.copy()]))
    keep = rng.random((2, 2, 4, 4)) > 0.5
    checks.append(("mask", tape(lambda gg: ad.mask(gg, keep)), [x.copy()]))
    _, sw = T.maxpool2d_forward(xp, 2)
    checks.append(("unpool", tape(lambda gg: ad.unpool(gg, sw, 2)), [rng.normal(size=(2, 1, 2, 2))]))
    xm = rng.uniform(0.1, 1, size=(2, 3, 4, 4)) * rng.choice([-1, 1], size=(2, 3, 4, 4))
    checks.append(("channel max-abs", tape(ad.channel_max_abs), [xm]))
    xn = rng.uniform(0.1, 1, size=(2, 4, 4)) * rng.choice([-1, 1], size=(2, 4, 4))
    xn[:, 0, 0] = 2.0  # unique peak per example
    checks.append(("max normalize", tape(ad.max_normalize), [xn]))
    return checks


def test_criterion_01_gradient_fidelity():
    with criterion(1, "gradient fidelity (primitives + total_loss in every regime, 1e-4, <=2 min)"):
        start = time.perf_counter()
        worst = {}
        for name, func, params in _primitive_checks(np.random.default_rng(0)):
            worst[name] = T.gradient_check(func, params, 1e-6)
        regimes = [Regime(RegimeKind.CLS_ONLY), Regime(RegimeKind.MASK_VS_GAZE)]
        for rule in (BackwardRule.DECONVNET, BackwardRule.GUIDED):
            regimes += [Regime(RegimeKind.SAL_VS_GAZE, rule), Regime(RegimeKind.MASK_VS_SAL, rule),
                        Regime(RegimeKind.COMBINED, rule, 0.5)]
        model = tiny_model(seed=21, size=32, channels=(2, 3))
        rng = np.random.default_rng(22)
        x = random_images(2, 32, seed=23)
        onehot = np.eye(3)[[0, 2]]
        gaze = rng.random((2, 32, 32))
        cfg = TrainConfig()
        names = list(model.params)
        for regime in regimes:
            masks = target = None
            if regime.rule is not None:
                base = forward(model, x)
                masks = build_saliency_graph(model, base, [0, 2], regime.rule).masks
                target = saliency_maps(model, base, [0, 2], regime.rule)

            def func(*params):
                rec = forward(model, x)
                loss = total_loss(rec, model, regime, cfg, onehot, gaze, masks=masks, sal_target=target)
                return float(loss.value), ad.backward(loss, [rec.param_nodes[n] for n in names])

            worst[f"total_loss {regime.kind.value}/{regime.rule}"] = T.gradient_check(
                func, [model.params[n] for n in names], 1e-6)
        elapsed = time.perf_counter() - start
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, bad
        assert elapsed <= 120, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 2. ReLU rule table


def test_criterion_02_relu_rule_table():
    with criterion(2, "ReLU backward rule table on the full sign grid"):
        signs = (-1.0, 0.0, 1.0)
        # (input sign, signal sign) -> signal passes?
        expected = {
            BackwardRule.BACKPROP: lambda i, s: i > 0,
            BackwardRule.DECONVNET: lambda i, s: s > 0,
            BackwardRule.GUIDED: lambda i, s: i > 0 and s > 0,
        }
        for rule, passes in expected.items():
            for i, s in itertools.product(signs, signs):
                got = T.relu_backward(np.array([s * 0.7]), np.array([i * 1.3]), rule)[0]
                want = s * 0.7 if passes(i, s) else 0.0
                assert got == want, (rule, i, s, got)


# ---------------------------------------------------------------------------
# 3. generator coincidence


def test_criterion_03_generator_coincidence():
    with criterion(3, "rules coincide without active ReLUs; graph replay equals generator"):
        for seed in range(3):
            m = tiny_model(seed=seed)
            for k, v in m.params.items():
                v[...] = np.abs(v) + (0.05 if k.endswith(".b") else 0.0)
            rec = forward(m, random_images(2, 16, seed=seed))
            maps = [saliency_maps(m, rec, 1, r) for r in BackwardRule]
            assert max(np.abs(maps[0] - o).max() for o in maps[1:]) <= 1e-9
        rng = np.random.default_rng(31)
        for trial in range(10):
            m = tiny_model(seed=300 + trial, size=32, channels=(3, 4))
            rec = forward(m, random_images(2, 32, seed=400 + trial))
            tc = rng.integers(0, 3, size=2)
            for rule in BackwardRule:
                g = build_saliency_graph(m, rec, tc, rule, allow_backprop=True)
                assert np.abs(g.value - saliency_maps(m, rec, tc, rule)).max() <= 1e-6


# ---------------------------------------------------------------------------
# 4. AUC oracle


def test_criterion_04_auc_oracle():
    with criterion(4, "auc equals pair counting for every configuration with n <= 8 (<=1 min)"):
        start = time.perf_counter()
        checked = 0
        for n in range(2, 9):
            grid = np.array(list(itertools.product((0.0, 0.5, 1.0), repeat=n)))
            for labels in itertools.product((False, True), repeat=n):
                if all(labels) or not any(labels):
                    continue
                lab = np.array(labels)
                pos, neg = grid[:, lab], grid[:, ~lab]
                diff = pos[:, :, None] - neg[:, None, :]
                oracle = ((diff > 0).sum(axis=(1, 2)) + 0.5 * (diff == 0).sum(axis=(1, 2))) \
                    / (lab.sum() * (~lab).sum())
                for row, want in zip(grid.tolist(), oracle.tolist()):
                    assert auc(row, labels) == want
                checked += len(grid)
        elapsed = time.perf_counter() - start
        assert checked == sum((2 ** n - 2) * 3 ** n for n in range(2, 9))
        assert elapsed <= 60, f"took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 5. bootstrap protocol


def test_criterion_05_bootstrap_protocol():
    with criterion(5, "bootstrap report reproducible, ordered, table-formatted"):
        rng = np.random.default_rng(51)
        labels = rng.permutation(np.repeat([0, 1, 2], 20))
        scores = 0.6 * np.eye(3)[labels] + rng.random((60, 3))
        ex = [ScoredExample(f"i{k}", tuple(s), int(y)) for k, (s, y) in enumerate(zip(scores, labels))]
        a = bootstrap_auc(ex, iterations=30, seed=7)
        b = bootstrap_auc(ex, iterations=30, seed=7)
        assert a.samples.tobytes() == b.samples.tobytes() and a.percentiles == b.percentiles
        assert render_report(a, "m") == render_report(b, "m")
        for p50, lo, hi in a.percentiles.values():
            assert lo <= p50 <= hi
        assert format_cell(0.872, 0.840, 0.897) == "0.872 (0.840, 0.897)"


# ---------------------------------------------------------------------------
# 6. gaze construction


def test_criterion_06_gaze_construction():
    with criterion(6, "static map is the exact sum of temporal maps; duration-scale invariant"):
        rng = np.random.default_rng(61)
        cfg = GazeRenderConfig(output_size=(48, 48), sigma_frac=0.05, window_ms=500)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            recs = [FixationRecord("img", "p", float(rng.random()), float(rng.random()),
                                   float(rng.uniform(0, 3000)), float(rng.uniform(50, 700)))
                    for _ in range(n)]
            raw = accumulate_temporal(recs, cfg)
            total = np.zeros_like(raw[0])
            for r in raw:
                total = total + r
            assert static_accumulation(raw).tobytes() == total.tobytes()
            k = float(rng.uniform(0.1, 10))
            scaled = [FixationRecord(r.image_id, r.patient_id, r.x_norm, r.y_norm, r.start_ms,
                                     r.duration_ms * k) for r in recs]
            for p, q in zip(render_temporal(recs, cfg), render_temporal(scaled, cfg)):
                np.testing.assert_allclose(p.values, q.values, atol=1e-12)
            np.testing.assert_allclose(render_static(raw).values,
                                       render_static(accumulate_temporal(scaled, cfg)).values, atol=1e-12)


# ---------------------------------------------------------------------------
# 7. split integrity


def test_criterion_07_split_integrity():
    with criterion(7, "grouped split: no leak, sizes within max group of 80/10/10 (50 seeds)"):
        blank = Heatmap(np.zeros((1, 1)), Source.GAZE)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n_patients = int(rng.integers(12, 41))
            sizes = rng.integers(1, 6, size=n_patients)
            ex = [Example(f"p{p}i{j}", f"p{p}", np.zeros((1, 1)), Label(j % 3), blank)
                  for p, s in enumerate(sizes) for j in range(s)]
            plan = grouped_split(ex, (0.8, 0.1, 0.1), seed)
            owner = {}
            for name in ("train", "val", "test"):
                for i in plan.ids(name):
                    pid = i.split("i")[0]
                    assert owner.setdefault(pid, name) == name, f"seed {seed}: {pid} leaks"
            for name, frac in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
                assert abs(len(plan.ids(name)) - frac * len(ex)) <= sizes.max()


# ---------------------------------------------------------------------------
# 8-10. end-to-end synthetic training (shared fixture)

# Channel widths are a quarter of the default so both runs fit the 10-minute budget.
E2E_CHANNELS = (4, 8, 16, 32)
E2E_TRAIN = dict(epochs=10, batch_size=16, learning_rate=3e-3, alpha=0.5, seed=0)


@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    corpus = generate_synthetic(200, 128, seed=0)
    parts = apply_split(corpus, grouped_split(corpus, (0.8, 0.1, 0.1), seed=0))
    runs = {}
    for name, regime in (("combined", Regime(RegimeKind.COMBINED, BackwardRule.GUIDED, 0.5)),
                         ("cls_only", Regime(RegimeKind.CLS_ONLY))):
        model = build(UNetConfig((128, 128), E2E_CHANNELS, seed=0))
        runs[name] = fit(model, parts["train"], parts["val"], regime, TrainConfig(**E2E_TRAIN))
    return {"parts": parts, "runs": runs, "seconds": time.perf_counter() - start}


def _test_auc(model, examples):
    images, labels, _ = to_arrays(examples)
    scores = predict_proba(model, images)
    return float(per_class_auc(scores, labels)[0]), scores, labels


@pytest.mark.slow
def test_criterion_08_end_to_end_training(e2e):
    with criterion(8, "Combined/guided reaches test mean AUC >= 0.90 in <= 20 epochs; ClsOnly reported (<=10 min)"):
        test = e2e["parts"]["test"]
        lines = []
        for name, result in e2e["runs"].items():
            mean_auc, scores, labels = _test_auc(result.model, test)
            ex = [ScoredExample(e.image_id, tuple(s), int(y)) for e, s, y in zip(test, scores, labels)]
            table = render_report(bootstrap_auc(ex, 30, seed=0), name).splitlines()
            lines = lines or table[:1]
            lines.append(table[-1])
            e2e[f"{name}_auc"] = mean_auc
        print(f"\ntraining both runs took {e2e['seconds']:.0f}s")
        print("\n".join(lines))
        assert E2E_TRAIN["epochs"] <= 20
        assert e2e["combined_auc"] >= 0.90, e2e["combined_auc"]
        assert 0.0 <= e2e["cls_only_auc"] <= 1.0
        assert e2e["seconds"] <= 600, f"took {e2e['seconds']:.0f}s"


@pytest.mark.slow
def test_criterion_09_mask_gaze_alignment(e2e):
    with criterion(9, "final-epoch val mask/gaze NCC > epoch 0 and >= 0.5 (Combined run)"):
        result = e2e["runs"]["combined"]
        initial = result.initial["mask_ncc"]
        final = result.history[-1].val_mask_ncc
        print(f"\nval mask/gaze ncc: epoch 0 {initial:.3f}, final {final:.3f}")
        assert final > initial and final >= 0.5, (initial, final)


@pytest.mark.slow
def test_criterion_10_checkpoint_round_trip(e2e, tmp_path):
    with criterion(10, "checkpoint save/load bitwise; reloaded model reproduces eval bitwise"):
        model = e2e["runs"]["combined"].model
        path = tmp_path / "combined.ggt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert back.config == model.config
        assert all(back.params[k].tobytes() == v.tobytes() for k, v in model.params.items())
        save_checkpoint(back, tmp_path / "again.ggt")
        assert (tmp_path / "again.ggt").read_bytes() == path.read_bytes()
        test = e2e["parts"]["test"]
        a_auc, a_scores, labels = _test_auc(model, test)
        b_auc, b_scores, _ = _test_auc(back, test)
        assert a_scores.tobytes() == b_scores.tobytes() and a_auc == b_auc
        ex_a = [ScoredExample(e.image_id, tuple(s), int(y)) for e, s, y in zip(test, a_scores, labels)]
        ex_b = [ScoredExample(e.image_id, tuple(s), int(y)) for e, s, y in zip(test, b_scores, labels)]
        assert bootstrap_auc(ex_a, 30, 0).samples.tobytes() == bootstrap_auc(ex_b, 30, 0).samples.tobytes()
