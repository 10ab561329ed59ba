import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popcal.metrics import (
    alignment,
    average_ranks,
    bin_by_popularity,
    consistency_score,
    correlation_report,
    mean_token_confidence,
    nmi,
    spearman,
)


def oracle_midranks(v):
    """Brute-force average ranks: count comparisons, no sorting tricks."""
    return [sum(1 for y in v if y < x) + (sum(1 for y in v if y == x) + 1) / 2.0 for x in v]


def oracle_pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def oracle_spearman(xs, ys):
    return oracle_pearson(oracle_midranks(xs), oracle_midranks(ys))


class TestMeanTokenConfidence:
    def test_single_token(self):
        assert mean_token_confidence([1.0]) == 1.0

    def test_two_tokens(self):
        assert mean_token_confidence([0.5, 1.0]) == 0.75

    def test_three_tokens(self):
        assert mean_token_confidence([0.9, 0.8, 0.7]) == pytest.approx(0.8)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mean_token_confidence([])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            mean_token_confidence([0.5, 1.2])


class TestAlignment:
    def test_confident_correct(self):
        assert alignment(1, 1.0) == 1.0

    def test_wrong_but_hesitant(self):
        assert alignment(0, 0.6) == pytest.approx(0.4)

    def test_correct_mid_confidence(self):
        assert alignment(1, 0.72) == pytest.approx(0.72)

    def test_out_of_range_confidence(self):
        with pytest.raises(ValueError):
            alignment(1, 1.5)

    @given(st.integers(0, 1), st.floats(0.0, 1.0))
    def test_alignment_plus_gap_is_one(self, c, conf):
        assert alignment(c, conf) + abs(c - conf) == pytest.approx(1.0, abs=1e-15)


class TestSpearman:
    def test_monotone(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)

    def test_anti_monotone(self):
        assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_ties_match_frozen_oracle_value(self):
        # oracle_spearman([1,2,2,3], [1,3,2,4]) with average ranks
        assert spearman([1, 2, 2, 3], [1, 3, 2, 4]) == pytest.approx(
            0.9486832980505138, abs=1e-12
        )

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])

    def test_constant_input(self):
        with pytest.raises(ValueError):
            spearman([1, 1, 1], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(ValueError):
            spearman([1], [2])

    def test_random_vectors_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            xs = rng.integers(0, 8, size=n).astype(float)
            ys = rng.integers(0, 8, size=n).astype(float)
            if len(set(xs)) < 2 or len(set(ys)) < 2:
                continue
            assert spearman(xs, ys) == pytest.approx(oracle_spearman(list(xs), list(ys)), abs=1e-12)

    @given(
        st.lists(
            st.tuples(st.integers(-50, 50), st.integers(-50, 50)),
            min_size=2,
            max_size=40,
        )
    )
    def test_symmetry(self, pairs):
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            return
        assert spearman(xs, ys) == pytest.approx(spearman(ys, xs), abs=1e-12)

    @given(
        st.lists(
            st.tuples(st.integers(-50, 50), st.integers(-50, 50)),
            min_size=2,
            max_size=40,
        )
    )
    def test_rank_invariance_under_increasing_transform(self, pairs):
        xs = [float(p[0]) for p in pairs]
        ys = [float(p[1]) for p in pairs]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            return
        fx = [math.exp(x / 25.0) + 3.0 * x for x in xs]  # strictly increasing
        assert spearman(fx, ys) == pytest.approx(spearman(xs, ys), abs=1e-12)

    def test_average_ranks_against_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.integers(0, 5, size=int(rng.integers(1, 30))).astype(float)
            assert list(average_ranks(v)) == pytest.approx(oracle_midranks(list(v)))


class TestNmi:
    def test_deterministic_coupling(self):
        # two pairs, each present in exactly half the corpus and always together
        value = nmi([(0.5, 0.5, 0.5), (0.5, 0.5, 0.5)])
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_independence(self):
        pairs = [(0.5, 0.4, 0.2), (0.3, 0.6, 0.18)]
        assert nmi(pairs) == pytest.approx(0.0, abs=1e-12)

    def test_three_pair_fixture_frozen_value(self):
        # direct evaluation of the four sums over this fixture
        pairs = [(0.5, 0.4, 0.3), (0.2, 0.3, 0.1), (0.4, 0.2, 0.15)]
        assert nmi(pairs) == pytest.approx(0.25618669724768933, abs=1e-12)

    def test_zero_joint_contributes_nothing(self):
        base = [(0.5, 0.5, 0.5)]
        with_zero = base + [(0.25, 0.25, 0.0)]
        # extra marginal mass changes entropies but the zero joint adds no information
        assert nmi(with_zero) < nmi(base)

    def test_degenerate_entropy(self):
        with pytest.raises(ValueError):
            nmi([(1.0, 0.5, 0.5)])

    def test_all_zero_joints_rejected(self):
        with pytest.raises(ValueError):
            nmi([(0.5, 0.5, 0.0)])

    def test_random_associated_fixtures_in_unit_interval(self):
        # pairs at least as associated as independence stay inside [0, 1]
        rng = np.random.default_rng(11)
        for _ in range(300):
            k = int(rng.integers(1, 8))
            pairs = []
            for _ in range(k):
                ps = float(rng.uniform(0.05, 0.95))
                po = float(rng.uniform(0.05, 0.95))
                lo = ps * po
                hi = min(ps, po)
                pso = float(rng.uniform(lo, hi))
                pairs.append((ps, po, pso))
            value = nmi(pairs)
            assert -1e-12 <= value <= 1.0 + 1e-12


class TestConsistencyScore:
    def test_all_identical(self):
        judge = lambda a, b: int(a == b)
        assert consistency_score("x", ["x", "x", "x"], judge) == 1.0

    def test_none_equivalent(self):
        judge = lambda a, b: 0
        assert consistency_score("x", ["y", "z"], judge) == 0.0

    def test_two_of_three(self):
        judge = lambda a, b: int(b in ("x", "X"))
        assert consistency_score("x", ["x", "X", "nope"], judge) == pytest.approx(2 / 3)

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            consistency_score("x", [], lambda a, b: 1)


class TestBinByPopularity:
    def test_monotone_accuracy_orders_bins(self):
        pops = list(range(10))
        accs = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
        confs = [0.5] * 10
        curve = bin_by_popularity(pops, accs, confs, n_bins=2)
        assert curve.n_bins == 2
        assert curve.bins[0].mean_accuracy < curve.bins[1].mean_accuracy

    def test_all_equal_popularity_single_bin(self):
        curve = bin_by_popularity([3] * 8, [1] * 8, [0.9] * 8, n_bins=4)
        assert curve.n_bins == 1
        assert curve.bins[0].count == 8

    def test_counts_partition_records(self):
        rng = np.random.default_rng(0)
        pops = rng.uniform(0, 100, size=137)
        accs = rng.integers(0, 2, size=137)
        confs = rng.uniform(0, 1, size=137)
        curve = bin_by_popularity(pops, accs, confs, n_bins=10)
        assert sum(b.count for b in curve.bins) == 137

    def test_ranges_disjoint_and_ordered(self):
        rng = np.random.default_rng(1)
        pops = rng.integers(0, 12, size=200).astype(float)
        curve = bin_by_popularity(pops, [0] * 200, [0.1] * 200, n_bins=5)
        for a, b in zip(curve.bins[:-1], curve.bins[1:]):
            assert a.hi < b.lo or (a.hi <= b.lo and a.hi < b.hi)

    def test_too_few_records(self):
        with pytest.raises(ValueError):
            bin_by_popularity([1, 2], [0, 1], [0.5, 0.5], n_bins=3)

    def test_bad_n_bins(self):
        with pytest.raises(ValueError):
            bin_by_popularity([1, 2, 3], [0, 1, 0], [0.5] * 3, n_bins=1)


class TestCorrelationReport:
    def test_monotone_signal_gives_unit_rho(self):
        n = 40
        rpop = list(range(n))
        accs = [0] * (n // 2) + [1] * (n // 2)  # monotone in rpop
        confs = list(np.linspace(0.2, 0.9, n))  # strictly monotone in rpop
        report = correlation_report(accs, confs, {"RPop_GT": rpop})
        # continuous outcome, strictly monotone by construction -> exactly 1
        assert report.rho["RPop_GT"]["confidence"] == pytest.approx(1.0)
        # binary outcome is tied within each class; the ceiling is the oracle value
        assert report.rho["RPop_GT"]["accuracy"] == pytest.approx(
            oracle_spearman(rpop, accs), abs=1e-12
        )
        assert report.rho["RPop_GT"]["accuracy"] > 0.8

    def test_missing_signal_marked_absent(self):
        report = correlation_report([0, 1, 0], [0.2, 0.9, 0.4], {"Pop_Q": [1, 2, 3]})
        assert report.rho["Pop_Q"]["accuracy"] is not None
        assert report.rho["Pop_Ge"]["accuracy"] is None

    def test_shuffled_labels_stay_in_null_band(self):
        rng = np.random.default_rng(42)
        n = 500
        pops = rng.lognormal(3, 1, size=n)
        accs = rng.integers(0, 2, size=n)  # labels carry no signal
        confs = rng.uniform(0, 1, size=n)
        report = correlation_report(list(accs), list(confs), {"Pop_Q": list(pops)})
        assert abs(report.rho["Pop_Q"]["accuracy"]) < 0.2

    def test_means_are_percentages(self):
        report = correlation_report([1, 0], [1.0, 0.0], {})
        assert report.mean_accuracy == 50.0
        assert report.mean_confidence == 50.0
        assert report.mean_alignment == 100.0
