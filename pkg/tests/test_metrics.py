"""Metric tests: hand-computed worked examples, a straightforward
double-loop reference implementation that the vectorized code must match,
and the Pareto selection rules."""

import numpy as np
import pytest

from socalib.losses import softmax_stable
from socalib.metrics import (
    BinStats,
    EmptyLogError,
    ParetoPoint,
    PredictionLog,
    TooFewSamplesError,
    accuracy,
    ada_ece,
    bin_equal_width,
    cw_ece,
    ece,
    error_rate,
    mce,
    pareto_front,
    pareto_select,
    unknown_top1_freq,
)


# --- brute-force references: plain Python, loops over bins explicitly ---

def _bin_members(confs, m, n_bins):
    lo = (m - 1) / n_bins
    hi = m / n_bins
    if m == 1:
        return [i for i, c in enumerate(confs) if c <= hi]
    return [i for i, c in enumerate(confs) if lo < c <= hi]


def brute_ece(confs, correct, n_bins):
    n = len(confs)
    total = 0.0
    for m in range(1, n_bins + 1):
        mem = _bin_members(confs, m, n_bins)
        if mem:
            acc = sum(correct[i] for i in mem) / len(mem)
            conf = sum(confs[i] for i in mem) / len(mem)
            total += (len(mem) / n) * abs(acc - conf)
    return total


def brute_mce(confs, correct, n_bins):
    gaps = []
    for m in range(1, n_bins + 1):
        mem = _bin_members(confs, m, n_bins)
        if mem:
            acc = sum(correct[i] for i in mem) / len(mem)
            conf = sum(confs[i] for i in mem) / len(mem)
            gaps.append(abs(acc - conf))
    return max(gaps)


def brute_ada_ece(confs, correct, n_bins):
    n = len(confs)
    order = sorted(range(n), key=lambda i: confs[i])  # stable: ties by index
    q, r = divmod(n, n_bins)
    total = 0.0
    start = 0
    for m in range(n_bins):
        size = q + 1 if m < r else q
        mem = order[start : start + size]
        acc = sum(correct[i] for i in mem) / size
        conf = sum(confs[i] for i in mem) / size
        total += (size / n) * abs(acc - conf)
        start += size
    return total


def brute_cw_ece(probs, labels, n_real, n_bins):
    n = len(labels)
    total = 0.0
    for k in range(n_real):
        confs = [probs[i][k] for i in range(n)]
        hits = [1.0 if labels[i] == k else 0.0 for i in range(n)]
        for m in range(1, n_bins + 1):
            mem = _bin_members(confs, m, n_bins)
            if mem:
                acc = sum(hits[i] for i in mem) / len(mem)
                conf = sum(confs[i] for i in mem) / len(mem)
                total += (len(mem) / n) * abs(acc - conf)
    return total / n_real


def _random_log(rng):
    n = int(rng.integers(1, 201))
    k = int(rng.integers(2, 7))
    has_unknown = k >= 3 and rng.random() < 0.5
    c = k - 1 if has_unknown else k
    probs = softmax_stable(rng.normal(size=(n, k)) * rng.uniform(0.5, 4.0))
    labels = rng.integers(0, c, size=n)
    return PredictionLog(probs, labels, c)


class TestWorkedExamples:
    def _three_sample_log(self):
        # confidences 0.9 (correct), 0.8 (wrong), 0.3 (correct); four
        # classes so a winning probability of 0.3 is attainable
        probs = np.array(
            [
                [0.90, 0.05, 0.03, 0.02],
                [0.80, 0.10, 0.06, 0.04],
                [0.30, 0.25, 0.25, 0.20],
            ]
        )
        labels = np.array([0, 1, 0])
        return PredictionLog(probs, labels, 4)

    def test_bins_three_samples(self):
        bins = bin_equal_width(self._three_sample_log(), 2)
        low, high = bins
        assert (low.count, high.count) == (1, 2)
        assert low.acc == 1.0 and low.conf == pytest.approx(0.3)
        assert high.acc == 0.5 and high.conf == pytest.approx(0.85)

    def test_ece_three_samples(self):
        got = ece(self._three_sample_log(), 2)
        assert got == pytest.approx((2 / 3) * abs(0.5 - 0.85) + (1 / 3) * abs(1 - 0.3))
        assert got == pytest.approx(0.4667, abs=1e-4)

    def test_mce_three_samples(self):
        assert mce(self._three_sample_log(), 2) == pytest.approx(0.7)

    def test_ada_ece_four_samples(self):
        # confidences 0.2/0.4/0.6/0.8 with correctness T/F/T/T; six classes
        # so a top probability of 0.2 is attainable
        probs = np.array(
            [
                [0.20, 0.16, 0.16, 0.16, 0.16, 0.16],
                [0.12, 0.40, 0.12, 0.12, 0.12, 0.12],
                [0.60, 0.08, 0.08, 0.08, 0.08, 0.08],
                [0.80, 0.04, 0.04, 0.04, 0.04, 0.04],
            ]
        )
        labels = np.array([0, 0, 0, 0])
        log = PredictionLog(probs, labels, 6)
        np.testing.assert_allclose(log.confidences, [0.2, 0.4, 0.6, 0.8])
        np.testing.assert_array_equal(log.correct, [True, False, True, True])
        assert ada_ece(log, 2) == pytest.approx(0.25)

    def test_cw_ece_two_samples(self):
        log = PredictionLog(
            np.array([[0.8, 0.2], [0.4, 0.6]]), np.array([0, 1]), 2
        )
        assert cw_ece(log, 1) == pytest.approx(0.1)

    def test_all_confident_and_correct(self):
        probs = np.zeros((5, 3))
        probs[:, 1] = 1.0
        log = PredictionLog(probs, np.ones(5, int), 3)
        bins = bin_equal_width(log, 15)
        assert bins[-1].count == 5 and bins[-1].acc == 1.0 and bins[-1].conf == 1.0
        assert sum(b.count for b in bins[:-1]) == 0
        assert ece(log, 15) == 0.0

    def test_all_confident_all_wrong(self):
        probs = np.zeros((4, 2))
        probs[:, 0] = 1.0
        log = PredictionLog(probs, np.ones(4, int), 2)
        assert ece(log, 15) == pytest.approx(1.0)
        assert mce(log, 15) == pytest.approx(1.0)

    def test_edge_confidence_goes_to_lower_bin(self):
        log = PredictionLog(np.array([[0.5, 0.5]]), np.array([0]), 2)
        bins = bin_equal_width(log, 2)
        assert bins[0].count == 1 and bins[1].count == 0

    def test_ada_ece_single_bin_is_acc_conf_gap(self):
        log = _random_log(np.random.default_rng(0))
        expected = abs(accuracy(log) - log.confidences.mean())
        assert ada_ece(log, 1) == pytest.approx(expected, abs=1e-12)


class TestBruteForceEquivalence:
    def test_matches_double_loop_reference(self):
        rng = np.random.default_rng(1234)
        for _ in range(150):
            log = _random_log(rng)
            m = int(rng.integers(1, 16))
            confs = list(log.confidences)
            correct = [float(x) for x in log.correct]
            assert abs(ece(log, m) - brute_ece(confs, correct, m)) <= 1e-12
            assert abs(mce(log, m) - brute_mce(confs, correct, m)) <= 1e-12
            if len(log) >= m:
                assert abs(ada_ece(log, m) - brute_ada_ece(confs, correct, m)) <= 1e-12
            assert (
                abs(
                    cw_ece(log, m)
                    - brute_cw_ece(log.probs, list(log.labels), log.n_real_classes, m)
                )
                <= 1e-12
            )

    def test_metrics_stay_in_unit_interval(self):
        rng = np.random.default_rng(77)
        for _ in range(50):
            log = _random_log(rng)
            for m in (1, 7, 15):
                assert 0.0 <= ece(log, m) <= 1.0
                assert 0.0 <= mce(log, m) <= 1.0
                assert 0.0 <= cw_ece(log, m) <= 1.0
                assert mce(log, m) >= ece(log, m) - 1e-15
                if len(log) >= m:
                    assert 0.0 <= ada_ece(log, m) <= 1.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        log = _random_log(rng)
        # force distinct confidences so equal-mass grouping is order-free
        while len(np.unique(log.confidences)) != len(log):
            log = _random_log(rng)
        perm = rng.permutation(len(log))
        shuffled = PredictionLog(
            log.probs[perm], log.labels[perm], log.n_real_classes
        )
        for m in (1, 5, 15):
            assert ece(shuffled, m) == pytest.approx(ece(log, m), abs=1e-12)
            assert mce(shuffled, m) == pytest.approx(mce(log, m), abs=1e-12)
            assert cw_ece(shuffled, m) == pytest.approx(cw_ece(log, m), abs=1e-12)
            if len(log) >= m:
                assert ada_ece(shuffled, m) == pytest.approx(
                    ada_ece(log, m), abs=1e-12
                )

    def test_equal_mass_sizes_differ_by_at_most_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(16, 200))
            m = int(rng.integers(2, 16))
            q, r = divmod(n, m)
            sizes = [q + 1 if i < r else q for i in range(m)]
            assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n


class TestUnknownClassHandling:
    def test_accuracy_ignores_unknown_column(self):
        # unknown column dominates, but prediction is over real classes only
        probs = np.array([[0.1, 0.3, 0.6], [0.2, 0.1, 0.7]])
        log = PredictionLog(probs, np.array([1, 0]), 2)
        np.testing.assert_array_equal(log.predicted, [1, 0])
        assert accuracy(log) == 1.0
        np.testing.assert_allclose(log.confidences, [0.3, 0.2])
        assert unknown_top1_freq(log) == 1.0

    def test_unknown_freq_zero_without_unknown_column(self):
        log = PredictionLog(np.array([[0.6, 0.4]]), np.array([0]), 2)
        assert unknown_top1_freq(log) == 0.0

    def test_label_cannot_point_at_unknown(self):
        with pytest.raises(ValueError):
            PredictionLog(np.array([[0.2, 0.3, 0.5]]), np.array([2]), 2)


class TestErrors:
    def test_empty_log(self):
        log = PredictionLog(np.empty((0, 3)), np.empty(0, int), 3)
        for fn in (lambda: bin_equal_width(log, 5), lambda: accuracy(log),
                   lambda: ece(log), lambda: mce(log), lambda: cw_ece(log)):
            with pytest.raises(EmptyLogError):
                fn()

    def test_too_few_for_equal_mass(self):
        log = PredictionLog(np.array([[0.6, 0.4]]), np.array([0]), 2)
        with pytest.raises(TooFewSamplesError):
            ada_ece(log, 2)


class TestPareto:
    def test_worked_selection(self):
        pts = [
            ParetoPoint("model1", 0.3, 0.05, 0.0),
            ParetoPoint("model2", 0.2, 0.10, 0.0),
            ParetoPoint("model3", 0.25, 0.20, 0.0),
        ]
        assert pareto_front(pts) == [True, True, False]
        assert pareto_select(pts) == "model2"

    def test_single_point(self):
        assert pareto_select([ParetoPoint("only", 0.5, 0.5, 0.9)]) == "only"

    def test_exact_tie_breaks_on_cw_ece(self):
        pts = [
            ParetoPoint("a", 0.2, 0.1, 0.3),
            ParetoPoint("b", 0.2, 0.1, 0.2),
        ]
        assert pareto_select(pts) == "b"

    def test_full_tie_breaks_on_model_id(self):
        pts = [
            ParetoPoint("z", 0.2, 0.1, 0.2),
            ParetoPoint("a", 0.2, 0.1, 0.2),
        ]
        assert pareto_select(pts) == "a"

    def test_selected_is_never_dominated(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            pts = [
                ParetoPoint(f"m{i}", float(rng.random()), float(rng.random()),
                            float(rng.random()))
                for i in range(int(rng.integers(1, 12)))
            ]
            chosen = next(p for p in pts if p.model_id == pareto_select(pts))
            for q in pts:
                assert not (
                    q.error_rate <= chosen.error_rate
                    and q.ece <= chosen.ece
                    and (q.error_rate < chosen.error_rate or q.ece < chosen.ece)
                )

    def test_empty_points(self):
        with pytest.raises(EmptyLogError):
            pareto_select([])

    def test_bin_stats_dataclass_fields(self):
        b = BinStats(lo=0.0, hi=0.5, count=2, acc=1.0, conf=0.4)
        assert (b.lo, b.hi, b.count, b.acc, b.conf) == (0.0, 0.5, 2, 1.0, 0.4)
