"""Metrics: DR against a brute-force oracle, PSNR/similarity semantics,
classifier oracle accuracy, attention dumps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efadiff.attention import AttentionTrace
from efadiff.bias import BiasSpec, product
from efadiff.errors import DomainError, ShapeError, ValidationError
from efadiff.metrics import (
    PSNR_CAP_DB,
    classify_attribute,
    deviation_ratio,
    dump_attention_maps,
    estimate_subject_mask,
    feature_similarity,
    masked_psnr,
)
from efadiff.diffusion import GenerationRecord
from efadiff.scenes import build_corpus, render, draw_scene_params
from efadiff.tensor import Tensor, softmax_lastdim

COLOR = BiasSpec("color", ("red", "blue"), "{} subject")
TONE = BiasSpec("tone", ("bright", "dark"), "{} subject")


def brute_force_dr(counts: dict, n_attributes: int) -> float:
    # independent re-derivation straight from the formula string
    n = sum(counts.values())
    best = 0.0
    freqs = list(counts.values()) + [0] * (n_attributes - len(counts))
    for c in freqs:
        dev = abs(c / n - 1.0 / n_attributes)
        if dev > best:
            best = dev
    return best / (1.0 - 1.0 / n_attributes)


class TestDeviationRatio:
    def test_uniform_is_zero(self):
        assert deviation_ratio({"a": 5, "b": 5}, 2) == 0.0

    def test_degenerate_is_one(self):
        assert deviation_ratio({"a": 10, "b": 0}, 2) == 1.0
        assert deviation_ratio({"a": 10}, 2) == 1.0

    def test_hand_values(self):
        assert deviation_ratio({"a": 7, "b": 3}, 2) == pytest.approx(0.4)
        assert deviation_ratio({"a": 12, "b": 4, "c": 2, "d": 2}, 4) == pytest.approx(0.35 / 0.75)

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            n_attr = int(rng.choice([2, 3, 4, 8]))
            counts = {f"a{i}": int(rng.integers(0, 50)) for i in range(n_attr)}
            if sum(counts.values()) == 0:
                counts["a0"] = 1
            assert abs(deviation_ratio(counts, n_attr) - brute_force_dr(counts, n_attr)) < 1e-12

    @given(st.lists(st.integers(0, 1000), min_size=2, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariant(self, values):
        if sum(values) == 0:
            values[0] = 1
        n = len(values)
        a = deviation_ratio({f"k{i}": v for i, v in enumerate(values)}, n)
        perm = list(reversed(values))
        b = deviation_ratio({f"k{i}": v for i, v in enumerate(perm)}, n)
        assert a == pytest.approx(b, abs=1e-15)
        assert 0.0 <= a <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            deviation_ratio({"a": 0, "b": 0}, 2)
        with pytest.raises(DomainError):
            deviation_ratio({"a": 1}, 1)


class TestMaskedPsnr:
    def test_identical_hits_cap(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 8, 8))
        assert masked_psnr(img, img, np.zeros((8, 8))) == PSNR_CAP_DB

    def test_uniform_residual_20db(self):
        ref = np.zeros((3, 8, 8))
        cand = np.full((3, 8, 8), 0.1)
        assert masked_psnr(ref, cand, np.zeros((8, 8))) == pytest.approx(20.0)

    def test_invariant_to_in_mask_edits(self):
        rng = np.random.default_rng(2)
        ref = rng.random((3, 8, 8))
        cand = rng.random((3, 8, 8))
        m = (rng.random((8, 8)) < 0.5).astype(float)
        m[0, 0] = 0.0  # keep at least one pixel outside
        base = masked_psnr(ref, cand, m)
        for _ in range(100):
            edited = cand + rng.standard_normal((3, 8, 8)) * m
            assert masked_psnr(ref, edited, m) == base

    def test_strictly_decreasing_in_outside_mse(self):
        ref = np.zeros((3, 8, 8))
        vals = [masked_psnr(ref, np.full((3, 8, 8), r), np.zeros((8, 8))) for r in (0.05, 0.1, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    def test_full_mask_rejected(self):
        with pytest.raises(DomainError):
            masked_psnr(np.zeros((3, 4, 4)), np.ones((3, 4, 4)), np.ones((4, 4)))


class TestFeatureSimilarity:
    def test_identical_images(self):
        rng = np.random.default_rng(3)
        img = rng.random((3, 32, 32))
        assert feature_similarity(img, img) == pytest.approx(1.0)

    def test_negated_image(self):
        rng = np.random.default_rng(4)
        img = rng.random((3, 32, 32))
        assert feature_similarity(img, -img) == pytest.approx(-1.0)
        assert feature_similarity(img, 1.0 - img) == pytest.approx(-1.0)

    def test_independent_images_mostly_uncorrelated(self):
        rng = np.random.default_rng(5)
        hits = 0
        for _ in range(100):
            a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
            if abs(feature_similarity(a, b)) < 0.2:
                hits += 1
        assert hits >= 95

    def test_zero_variance_warns_and_returns_zero(self):
        with pytest.warns(UserWarning):
            assert feature_similarity(np.full((3, 32, 32), 0.5), np.random.default_rng(0).random((3, 32, 32))) == 0.0


class TestClassifier:
    def test_rendered_sample_classifies_exactly(self):
        for attr in COLOR.attributes:
            s = render(draw_scene_params(attr, np.random.default_rng(0), seed=0))
            assert classify_attribute(s.image, s.mask, COLOR) == attr

    def test_oracle_accuracy_on_heldout_corpus(self):
        corpus = build_corpus(COLOR, per_attribute=500, seed=123)
        correct = sum(
            classify_attribute(s.image, s.mask, COLOR) == s.attribute for s in corpus.samples
        )
        assert correct == len(corpus)

    def test_product_bias_oracle_accuracy(self):
        p = product(COLOR, TONE)
        corpus = build_corpus(p, per_attribute=100, seed=7)
        correct = sum(
            classify_attribute(s.image, s.mask, p) == s.attribute for s in corpus.samples
        )
        assert correct == len(corpus)

    def test_estimated_mask_matches_rendered_mask(self):
        s = render(draw_scene_params("red", np.random.default_rng(1), seed=1))
        est = estimate_subject_mask(s.image, COLOR)
        assert (est == s.mask).mean() > 0.99
        assert classify_attribute(s.image, None, COLOR) == "red"

    def test_abstains_without_subject(self):
        gray = np.full((3, 32, 32), 0.5)
        assert classify_attribute(gray, None, COLOR) is None

    def test_tie_breaks_by_declaration_order(self):
        img = np.zeros((3, 4, 4))
        img[:] = 0.5  # equidistant from red and blue prototypes
        mask = np.ones((4, 4))
        bias = BiasSpec("color", ("red", "blue"), "{} subject")
        assert classify_attribute(img, mask, bias) == "red"

    def test_empty_given_mask_rejected(self):
        with pytest.raises(ValidationError):
            classify_attribute(np.zeros((3, 4, 4)), np.zeros((4, 4)), COLOR)


class TestAttentionDump:
    def _record(self, t_a=2, heads=2, s=16, offset=0.0, suppress=False):
        rng = np.random.default_rng(6)
        traces = []
        for _ in range(3):
            logits = rng.standard_normal((heads, s, 4 + t_a))
            if suppress:
                logits[..., 4:] = -30.0
            x = Tensor(logits)
            traces.append(AttentionTrace(x, softmax_lastdim(x), range(4, 4 + t_a)))
        return GenerationRecord(
            image=np.zeros((3, 8, 8)), seed=0, prompt="p", traces=traces, traced_steps=[150, 80, 10]
        )

    def test_file_count(self, tmp_path):
        dump = dump_attention_maps(self._record(), tmp_path)
        assert len(dump.files) == 3 * 2 * 2  # steps x heads x tokens
        for f in dump.files:
            assert f.exists()

    def test_pixel_range(self, tmp_path):
        from efadiff.imageio import read_pgm

        dump = dump_attention_maps(self._record(), tmp_path)
        for f in dump.files:
            img = read_pgm(f)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_suppressed_maps_flagged_flat(self, tmp_path):
        dump = dump_attention_maps(self._record(suppress=True), tmp_path)
        assert dump.all_flat

    def test_active_maps_not_flat(self, tmp_path):
        dump = dump_attention_maps(self._record(), tmp_path)
        assert not any(dump.flat_flags)

    def test_missing_traces_rejected(self, tmp_path):
        rec = GenerationRecord(image=np.zeros((3, 8, 8)), seed=0, prompt="p", traces=None)
        with pytest.raises(DomainError):
            dump_attention_maps(rec, tmp_path)
