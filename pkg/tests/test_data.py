import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topk_attack.data import (
    Dataset,
    ImbalanceSpec,
    TransformSpec,
    apply_transform,
    base_patterns,
    blob_centers,
    gen_blobs,
    gen_patterns,
    load_jsonl,
    make_imbalanced,
    save_jsonl,
    split,
)


class TestDataset:
    def test_rejects_out_of_range_values(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.5]]), np.array([0]), 1)

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3)), np.array([0, 3]), 3)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)

    def test_grid_must_match(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 10)), np.array([0]), 1, grid=(3, 3))


class TestBlobs:
    def test_deterministic(self):
        assert gen_blobs(3, 3, 100, 0.1, seed=4) == gen_blobs(3, 3, 100, 0.1, seed=4)

    def test_zero_spread_hits_centers(self):
        d = gen_blobs(4, 3, 5, 0.0, seed=1)
        centers = blob_centers(4, 3, seed=1)
        np.testing.assert_array_equal(d.inputs, centers[d.labels])

    def test_nearest_centroid_accuracy(self):
        d = gen_blobs(10, 16, 50, 0.05, seed=0)
        centers = blob_centers(10, 16, seed=0)
        dist = ((d.inputs[:, None, :] - centers[None]) ** 2).sum(-1)
        assert (dist.argmin(1) == d.labels).mean() >= 0.99

    def test_linear_classifier_separates(self):
        d = gen_blobs(5, 4, 80, 0.1, seed=2)
        # least-squares one-vs-rest linear classifier as the oracle
        X = np.hstack([d.inputs, np.ones((len(d), 1))])
        Y = np.eye(5)[d.labels]
        W, *_ = np.linalg.lstsq(X, Y, rcond=None)
        assert ((X @ W).argmax(1) == d.labels).mean() >= 0.95

    def test_values_in_range(self):
        d = gen_blobs(6, 2, 200, 0.5, seed=0)
        assert d.inputs.min() >= 0 and d.inputs.max() <= 1

    def test_rejects_small_problems(self):
        with pytest.raises(ValueError):
            gen_blobs(1, 3, 10, 0.1)


class TestPatterns:
    def test_noise_free_samples_identical(self):
        d = gen_patterns(4, 6, 5, 0.0, seed=0)
        for c in range(4):
            rows = d.inputs[d.labels == c]
            assert np.all(rows == rows[0])

    def test_template_matching(self):
        d = gen_patterns(5, 8, 100, 0.1, seed=0)
        templates = base_patterns(5, 8, seed=0)
        t = templates - templates.mean(1, keepdims=True)
        pred = ((d.inputs - d.inputs.mean(1, keepdims=True)) @ t.T).argmax(1)
        assert (pred == d.labels).mean() >= 0.99

    def test_deterministic_and_gridded(self):
        a = gen_patterns(3, 4, 10, 0.2, seed=5)
        assert a == gen_patterns(3, 4, 10, 0.2, seed=5)
        assert a.grid == (4, 4)

    def test_patterns_are_distinct(self):
        p = base_patterns(10, 8, seed=0)
        assert len({tuple(r) for r in p}) == 10

    def test_custom_levels(self):
        p = base_patterns(3, 4, seed=0, low=0.4, high=0.6)
        assert set(np.unique(p)) <= {0.4, 0.6}

    def test_too_many_classes(self):
        with pytest.raises(ValueError):
            gen_patterns(17, 4, 1, 0.0)

    def test_side_too_small(self):
        with pytest.raises(ValueError):
            gen_patterns(2, 3, 1, 0.0)


class TestImbalance:
    def test_linear_counts(self):
        counts = ImbalanceSpec("linear", max_n=5000, min_n=500).counts(10)
        assert counts.tolist() == list(range(5000, 499, -500))

    def test_factor_one_keeps_counts(self):
        d = gen_blobs(4, 2, 30, 0.05, seed=0)
        out = make_imbalanced(d, ImbalanceSpec("exponential", factor=1.0))
        assert out.class_counts().tolist() == [30] * 4

    def test_exponential_tail(self):
        counts = ImbalanceSpec("exponential", max_n=1000, factor=100).counts(10)
        assert counts[0] == 1000 and counts[-1] == 10

    def test_subset_of_original(self):
        d = gen_patterns(5, 4, 40, 0.1, seed=1)
        out = make_imbalanced(d, ImbalanceSpec("exponential", factor=10, seed=3))
        original = {tuple(x) for x in d.inputs}
        assert all(tuple(x) in original for x in out.inputs)
        assert out.class_counts().tolist() == ImbalanceSpec("exponential", factor=10).counts(5, 40).tolist()

    def test_infeasible(self):
        d = gen_blobs(3, 2, 10, 0.05, seed=0)
        with pytest.raises(ValueError):
            make_imbalanced(d, ImbalanceSpec("linear", max_n=20, min_n=5))

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            ImbalanceSpec("linear", max_n=5, min_n=10)
        with pytest.raises(ValueError):
            ImbalanceSpec("exponential", factor=0.5)
        with pytest.raises(ValueError):
            ImbalanceSpec("zipf")


class TestSplit:
    def test_partition(self):
        d = gen_blobs(3, 2, 50, 0.05, seed=0)
        tr, ho = split(d, 0.2, seed=1)
        assert len(tr) == 120 and len(ho) == 30
        both = np.vstack([tr.inputs, ho.inputs])
        assert sorted(map(tuple, both)) == sorted(map(tuple, d.inputs))

    def test_seeded(self):
        d = gen_blobs(3, 2, 50, 0.05, seed=0)
        assert split(d, 0.2, seed=1) == split(d, 0.2, seed=1)


class TestTransforms:
    def test_brightness_identity(self):
        x = np.random.default_rng(0).random(16)
        np.testing.assert_array_equal(apply_transform(x, TransformSpec("brightness", 1.0)), x)

    def test_contrast_worked_example(self):
        np.testing.assert_allclose(apply_transform(np.array([0.25, 0.75]), TransformSpec("contrast", 2.0)), [0.0, 1.0])

    def test_zero_noise_identity(self):
        x = np.random.default_rng(0).random(16)
        np.testing.assert_array_equal(apply_transform(x, TransformSpec("gaussian_noise", std=0.0)), x)

    def test_brightness_clamps(self):
        out = apply_transform(np.array([0.2, 0.6]), TransformSpec("brightness", 2.0))
        np.testing.assert_allclose(out, [0.4, 1.0])

    def test_noise_seeded(self):
        x = np.full(64, 0.5)
        t = TransformSpec("gaussian_noise", std=0.1, seed=3)
        np.testing.assert_array_equal(apply_transform(x, t), apply_transform(x, t))

    def test_labels(self):
        assert TransformSpec("brightness", 2.0).label == "brightness(2)"
        assert TransformSpec("gaussian_noise", std=0.1).label == "gaussian_noise(0.1)"

    @settings(max_examples=100, deadline=None)
    @given(
        st.sampled_from(["none", "brightness", "contrast", "gaussian_noise"]),
        st.floats(0.1, 5.0),
        st.floats(0.0, 1.0),
        st.integers(0, 2**16),
    )
    def test_output_in_unit_range(self, kind, factor, std, seed):
        x = np.random.default_rng(seed).random((3, 16))
        out = apply_transform(x, TransformSpec(kind, factor=factor, std=std, seed=seed))
        assert out.shape == x.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestJsonl:
    def test_round_trip(self, tmp_path):
        d = gen_patterns(3, 4, 5, 0.1, seed=0)
        assert load_jsonl(save_jsonl(d, tmp_path / "d.jsonl"), num_classes=3) == d
