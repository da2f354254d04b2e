import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazeguide.data import (DatasetLoadError, Example, Label, SplitPlan, apply_split,
                            corpus_checksum, generate_synthetic, grouped_split, load_corpus,
                            load_dataset, save_dataset, write_png)
from gazeguide.evaluation import auc
from gazeguide.gaze import GazeRenderConfig, write_fixations
from gazeguide.saliency import Heatmap, Source

CFG16 = GazeRenderConfig(output_size=(16, 16))


def fake(patient_sizes):
    """Examples with the given image count per patient (empty images)."""
    out = []
    blank = Heatmap(np.zeros((2, 2)), Source.GAZE)
    for p, n in enumerate(patient_sizes):
        for j in range(n):
            out.append(Example(f"p{p:02d}i{j}", f"p{p:02d}", np.zeros((2, 2)), Label.NORMAL, blank))
    return out


def check_split(examples, plan):
    patient = {ex.image_id: ex.patient_id for ex in examples}
    seen = {}
    for name in ("train", "val", "test"):
        for i in plan.ids(name):
            assert seen.setdefault(patient[i], name) == name
    assert sorted(plan.train + plan.val + plan.test) == sorted(patient)
    sizes = {}
    for ex in examples:
        sizes[ex.patient_id] = sizes.get(ex.patient_id, 0) + 1
    biggest = max(sizes.values())
    for name, frac in zip(("train", "val", "test"), plan.fractions):
        assert abs(len(plan.ids(name)) - frac * len(examples)) <= biggest + 1e-9


class TestLabel:
    def test_parse(self):
        assert Label.parse("pneumonia ") is Label.PNEUMONIA
        assert Label.parse(" CHF") is Label.CHF
        with pytest.raises(ValueError):
            Label.parse("flu")


class TestSplit:
    def test_exact_sizes(self):
        plan = grouped_split(fake([1] * 10), seed=0)
        assert (len(plan.train), len(plan.val), len(plan.test)) == (8, 1, 1)

    def test_group_kept_together(self):
        ex = fake([5, 1, 1, 1, 1, 1, 1, 1])
        plan = grouped_split(ex, seed=3)
        big = {f"p00i{j}" for j in range(5)}
        assert any(big <= set(plan.ids(n)) for n in ("train", "val", "test"))
        check_split(ex, plan)

    def test_too_few_patients(self):
        with pytest.raises(ValueError):
            grouped_split(fake([3, 3]))

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            grouped_split(fake([1] * 5), (0.5, 0.5, 0.5))

    def test_bound_by_enumeration(self):
        # every size profile in {1,2,3}^n for 3..6 patients, several shuffles each
        for n in range(3, 7):
            for sizes in itertools.product((1, 2, 3), repeat=n):
                ex = fake(sizes)
                for seed in range(3):
                    check_split(ex, grouped_split(ex, seed=seed))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=3, max_size=40), st.integers(0, 2**31))
    def test_no_patient_leak(self, sizes, seed):
        ex = fake(sizes)
        check_split(ex, grouped_split(ex, seed=seed))

    def test_deterministic_and_json(self):
        ex = fake([1, 2, 3, 1, 2, 3, 1])
        a = grouped_split(ex, seed=4)
        assert a == grouped_split(ex, seed=4)
        assert SplitPlan.from_json(a.to_json()) == a
        parts = apply_split(ex, a)
        assert [e.image_id for e in parts["train"]] == a.train


class TestSynthetic:
    def test_counts_and_patients(self):
        ex = generate_synthetic(200, 16, seed=0, gaze_cfg=CFG16)
        assert len(ex) == 600
        assert [sum(e.label == k for e in ex) for k in Label] == [200, 200, 200]
        patients = {}
        for e in ex:
            patients.setdefault(e.patient_id, []).append(e)
        assert all(len(v) == 2 for v in patients.values())

    def test_checksum_deterministic(self):
        a = generate_synthetic(3, 32, seed=5, gaze_cfg=GazeRenderConfig((32, 32)))
        b = generate_synthetic(3, 32, seed=5, gaze_cfg=GazeRenderConfig((32, 32)))
        c = generate_synthetic(3, 32, seed=6, gaze_cfg=GazeRenderConfig((32, 32)))
        assert corpus_checksum(a) == corpus_checksum(b) != corpus_checksum(c)

    def test_value_ranges(self):
        ex = generate_synthetic(5, 64, seed=1, gaze_cfg=GazeRenderConfig((64, 64)))
        for e in ex:
            assert 0 <= e.image.min() and e.image.max() <= 1
            assert 5 <= len(e.fixations) <= 10
            assert all(100 <= f.duration_ms <= 600 for f in e.fixations)
            if e.label is Label.NORMAL:
                assert e.image.max() <= 0.3 + 1e-4

    def test_chf_gaze_near_blob(self):
        # blob centres are not stored; recover them from the smoothed image
        size = 64
        ex = [e for e in generate_synthetic(20, size, seed=2, gaze_cfg=GazeRenderConfig((size, size)))
              if e.label is Label.CHF]
        for e in ex:
            k = np.ones(9) / 9
            smooth = np.apply_along_axis(np.convolve, 0, e.image, k, "same")
            smooth = np.apply_along_axis(np.convolve, 1, smooth, k, "same")
            by, bx = np.unravel_index(smooth.argmax(), smooth.shape)
            gy, gx = np.unravel_index(e.gaze_static.values.argmax(), (size, size))
            # scatter sigma is 0.04 of the extent; allow 3 sigma plus blob-location error
            assert np.hypot(gx - bx, gy - by) <= 3 * 0.04 * size + 3

    def test_mean_intensity_not_enough_for_pneumonia(self):
        ex = generate_synthetic(200, 128, seed=0)
        means = [float(e.image.mean()) for e in ex]
        assert auc(means, [e.label is Label.PNEUMONIA for e in ex]) < 0.8

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            generate_synthetic(0)


class TestLoad:
    def test_round_trip(self, tmp_path):
        ex = generate_synthetic(2, 16, seed=3, gaze_cfg=CFG16)
        save_dataset(ex, tmp_path)
        back = load_corpus(tmp_path, CFG16)
        assert corpus_checksum(back) == corpus_checksum(ex)
        assert [b.fixations for b in back] == [e.fixations for e in ex]
        save_dataset(back, tmp_path / "again")
        assert corpus_checksum(load_corpus(tmp_path / "again", CFG16)) == corpus_checksum(ex)

    def _toy(self, root, labels="a,p1,normal\nb,p2,pneumonia \nc,p3,CHF\n"):
        (root / "images").mkdir(parents=True)
        for i in "abc":
            write_png(root / "images" / f"{i}.png", np.full((8, 8), 0.5))
        (root / "labels.csv").write_text("image_id,patient_id,label\n" + labels)
        write_fixations(root / "fixations.csv", [])

    def test_toy_corpus(self, tmp_path):
        self._toy(tmp_path)
        ex = load_corpus(tmp_path, CFG16)
        assert [e.image_id for e in ex] == ["a", "b", "c"]
        assert [e.label for e in ex] == [Label.NORMAL, Label.PNEUMONIA, Label.CHF]
        for e in ex:
            assert e.image.shape == e.gaze_static.values.shape == (16, 16)
            assert not e.gaze_static.values.any() and e.gaze_temporals == []

    def test_itemized_errors(self, tmp_path):
        self._toy(tmp_path, "a,p1,normal\nb,p2,flu\nz,p3,chf\n")
        with pytest.raises(DatasetLoadError) as info:
            load_corpus(tmp_path, CFG16)
        text = "\n".join(info.value.problems)
        assert "flu" in text and "label without image: z" in text and "image without label: c" in text

    def test_eight_bit_png(self, tmp_path):
        from PIL import Image
        (tmp_path / "images").mkdir()
        Image.fromarray(np.full((16, 16), 255, dtype=np.uint8)).save(tmp_path / "images" / "a.png")
        (tmp_path / "labels.csv").write_text("image_id,patient_id,label\na,p,normal\n")
        ex = load_dataset(tmp_path / "images", tmp_path / "labels.csv", tmp_path / "none.csv", CFG16)
        assert ex[0].image.max() == 1.0
