"""Dataset tests: determinism, the exact noise count, the analytic noise
ceiling, CSV round trips, and split set algebra."""

import numpy as np
import pytest

from socalib.datasets import (
    BadConfigError,
    Dataset,
    LabelError,
    ParseError,
    TooFewPerClassError,
    dataset_content_key,
    gen_gaussian_blobs,
    load_csv_dataset,
    save_csv,
    split,
)


def _nearest_mean_accuracy(ds, means):
    """Bayes-rule accuracy for far-separated symmetric blobs: assign to the
    closest class mean. The reference that the noise ceiling is checked
    against."""
    d2 = ((ds.features[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == ds.labels).mean())


class TestGenerator:
    def test_shapes_and_balance(self):
        ds = gen_gaussian_blobs(c=4, d=2, n_per_class=50, separation=3.0,
                                label_noise=0.0, seed=9)
        assert len(ds) == 200 and ds.class_count == 4
        assert ds.features.shape == (200, 2)
        np.testing.assert_array_equal(np.bincount(ds.labels), [50] * 4)
        np.testing.assert_array_equal(ds.sample_ids, np.arange(200))

    def test_determinism(self):
        a = gen_gaussian_blobs(3, 2, 40, 2.5, 0.1, seed=7)
        b = gen_gaussian_blobs(3, 2, 40, 2.5, 0.1, seed=7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        c = gen_gaussian_blobs(3, 2, 40, 2.5, 0.1, seed=8)
        assert not np.array_equal(a.features, c.features)

    def test_exact_noise_count(self):
        for noise, n_per, c in [(0.15, 100, 4), (0.2, 33, 3), (0.0, 50, 2)]:
            clean = gen_gaussian_blobs(c, 2, n_per, 3.0, 0.0, seed=5)
            noisy = gen_gaussian_blobs(c, 2, n_per, 3.0, noise, seed=5)
            changed = int((clean.labels != noisy.labels).sum())
            assert changed == int(np.floor(noise * c * n_per))

    def test_separation_between_adjacent_means(self):
        ds = gen_gaussian_blobs(5, 2, 2000, 50.0, 0.0, seed=1)
        means = np.stack(
            [ds.features[ds.labels == k].mean(axis=0) for k in range(5)]
        )
        gaps = np.linalg.norm(means - np.roll(means, -1, axis=0), axis=1)
        np.testing.assert_allclose(gaps, 50.0, atol=0.5)

    def test_high_dim_orthogonal_means_pairwise_equidistant(self):
        ds = gen_gaussian_blobs(4, 8, 3000, 6.0, 0.0, seed=2)
        means = np.stack(
            [ds.features[ds.labels == k].mean(axis=0) for k in range(4)]
        )
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(means[i] - means[j]) == pytest.approx(
                    6.0, abs=0.5
                )

    def test_clean_far_blobs_are_separable(self):
        ds = gen_gaussian_blobs(3, 2, 300, 50.0, 0.0, seed=3)
        means = np.stack(
            [ds.features[ds.labels == k].mean(axis=0) for k in range(3)]
        )
        assert _nearest_mean_accuracy(ds, means) == 1.0

    def test_noise_ceiling_matches_closed_form(self):
        # flip-among-others noise on exactly floor(noise*n) samples means
        # the best possible accuracy is 1 - noise (every flipped label is
        # wrong for the Bayes rule); overlap at separation 50 is nil
        noise = 0.2
        ds = gen_gaussian_blobs(2, 2, 2500, 50.0, noise, seed=4)
        clean = gen_gaussian_blobs(2, 2, 2500, 50.0, 0.0, seed=4)
        means = np.stack(
            [clean.features[clean.labels == k].mean(axis=0) for k in range(2)]
        )
        acc = _nearest_mean_accuracy(ds, means)
        ceiling = 1.0 - noise
        assert acc == pytest.approx(ceiling, abs=1e-3)
        assert acc <= ceiling + 1e-12

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(c=1, d=2, n_per_class=5, separation=1.0, label_noise=0.0),
            dict(c=3, d=1, n_per_class=5, separation=1.0, label_noise=0.0),
            dict(c=3, d=2, n_per_class=0, separation=1.0, label_noise=0.0),
            dict(c=3, d=2, n_per_class=5, separation=0.0, label_noise=0.0),
            dict(c=3, d=2, n_per_class=5, separation=1.0, label_noise=1.0),
            dict(c=3, d=2, n_per_class=5, separation=1.0, label_noise=-0.1),
            dict(c=5, d=4, n_per_class=5, separation=1.0, label_noise=0.0),
        ],
    )
    def test_bad_config_rejected(self, kwargs):
        with pytest.raises(BadConfigError):
            gen_gaussian_blobs(seed=0, **kwargs)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = gen_gaussian_blobs(4, 2, 25, 3.0, 0.15, seed=11)
        path = tmp_path / "blobs.csv"
        save_csv(ds, path)
        back = load_csv_dataset(path)
        np.testing.assert_allclose(back.features, ds.features, atol=1e-9)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.class_count == ds.class_count

    def test_label_densification(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x,y,label\n1.0,2.0,5\n3.0,4.0,7\n5.0,6.0,5\n")
        ds = load_csv_dataset(path)
        assert ds.class_count == 2
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(ParseError):
            load_csv_dataset(path)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("x,y,label\n1.0,2.0,0\n1.0,0\n")
        with pytest.raises(ParseError) as err:
            load_csv_dataset(path)
        assert err.value.line == 3

    def test_non_numeric_feature(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,label\n1.0,apple,0\n")
        with pytest.raises(ParseError) as err:
            load_csv_dataset(path)
        assert (err.value.line, err.value.col) == (2, 2)

    def test_non_integer_label(self, tmp_path):
        path = tmp_path / "badlabel.csv"
        path.write_text("x,y,label\n1.0,2.0,0.5\n")
        with pytest.raises(LabelError):
            load_csv_dataset(path)


class TestSplit:
    def _hundred(self):
        return gen_gaussian_blobs(4, 2, 25, 3.0, 0.0, seed=20)

    def test_stratified_proportions(self):
        tr, va, te = split(self._hundred(), (0.8, 0.1, 0.1), seed=1)
        assert (len(tr), len(va), len(te)) == (80, 10, 10)
        for part, expect in ((tr, 20), (va, 2.5), (te, 2.5)):
            counts = np.bincount(part.labels, minlength=4)
            assert np.all(np.abs(counts - expect) <= 1)

    def test_deterministic(self):
        ds = self._hundred()
        a = split(ds, (0.6, 0.2, 0.2), seed=5)
        b = split(ds, (0.6, 0.2, 0.2), seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.sample_ids, y.sample_ids)
        c = split(ds, (0.6, 0.2, 0.2), seed=6)
        assert not np.array_equal(a[0].sample_ids, c[0].sample_ids)

    def test_disjoint_and_exhaustive(self):
        ds = gen_gaussian_blobs(3, 2, 41, 3.0, 0.1, seed=21)  # ragged counts
        parts = split(ds, (0.57, 0.29, 0.14), seed=2)
        ids = [set(p.sample_ids.tolist()) for p in parts]
        assert ids[0] | ids[1] | ids[2] == set(ds.sample_ids.tolist())
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(map(len, parts)) == len(ds)

    def test_sample_ids_track_rows(self):
        ds = self._hundred()
        tr, _, _ = split(ds, (0.6, 0.2, 0.2), seed=3)
        # features/labels of each split row match the parent row of the id
        for i in range(0, len(tr), 17):
            sid = tr.sample_ids[i]
            np.testing.assert_array_equal(tr.features[i], ds.features[sid])
            assert tr.labels[i] == ds.labels[sid]

    def test_fraction_validation(self):
        ds = self._hundred()
        with pytest.raises(BadConfigError):
            split(ds, (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(BadConfigError):
            split(ds, (0.8, 0.3, -0.1), seed=0)

    def test_too_few_per_class(self):
        tiny = Dataset(
            features=np.zeros((4, 2)),
            labels=np.array([0, 0, 0, 1]),
            sample_ids=np.arange(4),
            class_count=2,
        )
        with pytest.raises(TooFewPerClassError):
            split(tiny, (0.34, 0.33, 0.33), seed=0)

    def test_zero_fraction_split_allowed(self):
        tr, va, te = split(self._hundred(), (0.8, 0.2, 0.0), seed=1)
        assert len(te) == 0 and len(tr) + len(va) == 100


class TestContentKey:
    def test_stable_and_distinct(self):
        a = dataset_content_key(c=4, d=2, n=500, sep=3.0, noise=0.15, seed=1)
        b = dataset_content_key(seed=1, noise=0.15, sep=3.0, n=500, d=2, c=4)
        assert a == b and len(a) == 16
        assert a != dataset_content_key(c=4, d=2, n=500, sep=3.0, noise=0.15, seed=2)
