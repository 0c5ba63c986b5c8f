import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featdensity.data import (
    DOMAIN,
    LabeledDataset,
    SplitSpec,
    blob_means,
    gen_blobs,
    gen_ood,
    load_csv,
    save_csv,
    split,
)
from featdensity.errors import ParseError


class TestGenBlobs:
    def test_shape_and_label_order(self):
        ds = gen_blobs(2, 2, 3, 1.0, 7)
        assert ds.inputs.shape == (4, 3)
        assert ds.labels.tolist() == [0, 0, 1, 1]
        assert ds.class_count == 2
        assert ds.bounds == DOMAIN

    def test_deterministic(self):
        a = gen_blobs(3, 50, 4, 0.7, 11)
        b = gen_blobs(3, 50, 4, 0.7, 11)
        assert a.equals(b)
        assert not a.equals(gen_blobs(3, 50, 4, 0.7, 12))

    def test_class_means_recovered(self):
        ds = gen_blobs(3, 200, 2, 0.3, 1)
        means = blob_means(3, 2, 4 * 0.3, 1)
        for c in range(3):
            emitted = ds.inputs[ds.labels == c].mean(axis=0)
            assert np.max(np.abs(emitted - means[c])) < 0.1

    @pytest.mark.parametrize("c,d", [(2, 1), (3, 2), (5, 10), (4, 3)])
    def test_simplex_means_equidistant(self, c, d):
        means = blob_means(c, d, 2.5, 3)
        dist = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
        off = dist[~np.eye(c, dtype=bool)]
        np.testing.assert_allclose(off, 2.5, rtol=1e-12)
        np.testing.assert_allclose(means.mean(axis=0), 0.0, atol=1e-12)

    def test_low_dim_means_min_distance(self):
        means = blob_means(6, 2, 3.0, 0)
        dist = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
        assert dist[~np.eye(6, dtype=bool)].min() == pytest.approx(3.0)

    def test_clamped_to_domain(self):
        ds = gen_blobs(2, 500, 2, 8.0, 0)
        assert ds.inputs.min() >= -10 and ds.inputs.max() <= 10
        assert np.any(np.abs(ds.inputs) == 10.0)

    @pytest.mark.parametrize("args", [(1, 2, 2, 1.0), (2, 0, 2, 1.0), (2, 2, 2, 0.0), (2, 2, 2, -1.0)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            gen_blobs(*args, seed=0)


class TestGenOod:
    def test_gaussian_shape(self):
        assert gen_ood("gaussian_noise", 5, 4, 1.0, 3).inputs.shape == (5, 4)

    def test_uniform_range(self):
        x = gen_ood("uniform_noise", 1000, 2, 2.0, 9).inputs
        assert x.min() >= -2 and x.max() <= 2

    def test_shifted_blobs_mean(self):
        ood = gen_ood("shifted_blobs", 100, 2, 10.0, 1)
        means = blob_means(2, 2, 4.0, 1)
        original = means[np.arange(100) % 2].mean(axis=0)
        assert np.max(np.abs(ood.inputs.mean(axis=0) - (original + 10.0))) < 0.5
        assert ood.bounds == (0.0, 20.0)

    def test_shifted_blobs_reuse_blob_params(self):
        ood = gen_ood("shifted_blobs", 3000, 3, 5.0, 4, class_count=3, spread=0.2, blob_seed=8)
        means = blob_means(3, 3, 0.8, 8)
        for c in range(3):
            got = ood.inputs[np.arange(3000) % 3 == c].mean(axis=0) - 5.0
            assert np.max(np.abs(got - means[c])) < 0.05

    def test_deterministic(self):
        for kind in ("gaussian_noise", "uniform_noise", "shifted_blobs"):
            a = gen_ood(kind, 20, 3, 1.5, 5).inputs
            assert a.tobytes() == gen_ood(kind, 20, 3, 1.5, 5).inputs.tobytes()

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_ood("pink_noise", 5, 2, 1.0, 0)
        with pytest.raises(ValueError):
            gen_ood("gaussian_noise", 0, 2, 1.0, 0)
        with pytest.raises(ValueError):
            gen_ood("gaussian_noise", 5, 2, 0.0, 0)


def _rows(ds):
    return Counter(tuple(r) + (int(y),) for r, y in zip(ds.inputs.tolist(), ds.labels))


class TestSplit:
    def _ds(self, n):
        rng = np.random.default_rng(0)
        return LabeledDataset(rng.uniform(-1, 1, size=(n, 2)), np.arange(n) % 3, (-1, 1), 3)

    def test_sizes(self):
        parts = split(self._ds(10), SplitSpec(0.6, 0.2, 0.2, 0))
        assert [len(p) for p in parts] == [6, 2, 2]

    def test_remainder_goes_to_train(self):
        parts = split(self._ds(11), SplitSpec(0.5, 0.25, 0.25, 0))
        assert [len(p) for p in parts] == [7, 2, 2]

    def test_deterministic(self):
        a = split(self._ds(30), SplitSpec(0.5, 0.25, 0.25, 4))
        b = split(self._ds(30), SplitSpec(0.5, 0.25, 0.25, 4))
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_multiset_union(self):
        ds = self._ds(10)
        parts = split(ds, SplitSpec(0.5, 0.25, 0.25, 1))
        assert sum((_rows(p) for p in parts), Counter()) == _rows(ds)

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(3, 200),
           fr=st.tuples(st.floats(0.05, 0.9), st.floats(0.05, 0.9), st.floats(0.05, 0.9)),
           seed=st.integers(0, 2**32 - 1))
    def test_partition_property(self, n, fr, seed):
        total = sum(fr)
        val, test = fr[1] / total, fr[2] / total
        spec = SplitSpec(1.0 - val - test, val, test, seed)
        ds = self._ds(n)
        n_val, n_test = math.floor(n * val + 1e-9), math.floor(n * test + 1e-9)
        if min(n_val, n_test, n - n_val - n_test) < 1:
            with pytest.raises(ValueError):
                split(ds, spec)
            return
        parts = split(ds, spec)
        assert [len(p) for p in parts] == [n - n_val - n_test, n_val, n_test]
        assert sum((_rows(p) for p in parts), Counter()) == _rows(ds)

    def test_empty_part_rejected(self):
        with pytest.raises(ValueError):
            split(self._ds(4), SplitSpec(0.8, 0.1, 0.1, 0))

    def test_fraction_validation(self):
        with pytest.raises(ValueError):
            SplitSpec(0.5, 0.5, 0.1)
        with pytest.raises(ValueError):
            SplitSpec(1.0, 0.0, 0.0)


class TestCsv:
    def test_direct_transcription(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0,2.0,0\n3.0,4.0,1\n")
        ds = load_csv(p)
        np.testing.assert_array_equal(ds.inputs, [[1.0, 2.0], [3.0, 4.0]])
        assert ds.labels.tolist() == [0, 1]
        assert ds.class_count == 2
        assert ds.bounds == (1.0, 4.0)

    def test_parse_error_cites_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0,x,0\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p)
        assert exc.value.row == 1
        assert "row 1" in str(exc.value)

    def test_bad_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0,2.0,0\n1.0,2.0,0.5\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p)
        assert exc.value.row == 2

    def test_inconsistent_columns(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.0,2.0,0\n1.0,0\n")
        with pytest.raises(ValueError, match="columns"):
            load_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_csv(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path):
        ds = gen_blobs(3, 20, 4, 1.3, 2)
        save_csv(ds, tmp_path / "b.csv")
        back = load_csv(tmp_path / "b.csv")
        # 17 significant digits round-trip doubles exactly
        np.testing.assert_array_equal(back.inputs, ds.inputs)
        np.testing.assert_array_equal(back.labels, ds.labels)


class TestInvariants:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1)), [0, 2], (-1, 1), 2)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.full((1, 1), 2.0), [0], (-1, 1), 1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 1)), [0], (-1, 1), 1)

    def test_immutable(self):
        ds = gen_blobs(2, 3, 2, 1.0, 0)
        with pytest.raises(ValueError):
            ds.inputs[0, 0] = 1.0
