import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moeheat.routing import (
    NonFiniteScoresError,
    RoutingCapacityError,
    assignment_score,
    balanced_assign,
    brute_force_assign,
    capacities,
    greedy_assign,
    load_histogram,
)


def naive_oracle(scores):
    """Independent enumeration over all E**T maps, filtered by capacity."""
    scores = np.asarray(scores, dtype=float)
    T, E = scores.shape
    caps = list(capacities(T, E))
    best, best_total = None, -np.inf
    for combo in itertools.product(range(E), repeat=T):
        if [combo.count(j) for j in range(E)] != caps:
            continue
        total = sum(scores[t, j] for t, j in enumerate(combo))
        if total > best_total + 1e-9:
            best, best_total = combo, total
    return list(best), best_total


DYADIC = st.integers(-(2**20), 2**20).map(lambda x: x / 2**20)


def matrices(max_t=8, max_e=4, elements=st.floats(-1, 1)):
    shape = st.tuples(st.integers(1, max_t), st.integers(1, max_e))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=elements))


class TestBalanced:
    def test_diagonal(self):
        a = balanced_assign([[1, 0], [0, 1]])
        assert a.expert_of.tolist() == [0, 1] and a.total([[1, 0], [0, 1]]) == 2

    def test_two_by_two(self):
        s = [[5, 1], [4, 3]]
        a = balanced_assign(s)
        assert a.expert_of.tolist() == [0, 1] and a.total(s) == 8

    def test_four_tokens_two_experts(self):
        s = [[9, 0], [8, 0], [7, 0], [6, 0]]
        a = balanced_assign(s)
        assert a.expert_of.tolist() == [0, 0, 1, 1] and a.total(s) == 17
        assert naive_oracle(s)[1] == 17

    def test_remainder_goes_to_low_experts(self):
        assert capacities(7, 3).tolist() == [3, 2, 2]
        a = balanced_assign(np.zeros((7, 3)))
        assert a.loads.tolist() == [3, 2, 2]

    def test_all_ties_give_lexicographic_minimum(self):
        assert balanced_assign(np.zeros((5, 2))).expert_of.tolist() == [0, 0, 0, 1, 1]

    def test_single_expert(self):
        assert balanced_assign([[0.3], [-2.0]]).expert_of.tolist() == [0, 0]

    def test_non_finite(self):
        with pytest.raises(NonFiniteScoresError):
            balanced_assign([[np.nan, 0]])
        with pytest.raises(ValueError):
            balanced_assign([[np.inf, 0]])

    def test_larger_batch_is_balanced(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(1000, 16))
        a = balanced_assign(s)
        assert a.loads.max() - a.loads.min() <= 1
        assert np.array_equal(a.loads, capacities(1000, 16))

    @settings(max_examples=300, deadline=None)
    @given(matrices())
    def test_matches_brute_force(self, s):
        a, b = balanced_assign(s), brute_force_assign(s)
        assert a.total(s) == b.total(s)
        assert np.array_equal(a.expert_of, b.expert_of)
        assert np.array_equal(a.loads, capacities(*s.shape))

    @settings(max_examples=200, deadline=None)
    @given(matrices(elements=st.integers(-2, 2).map(float)))
    def test_tie_breaking_matches_brute_force_on_integer_scores(self, s):
        assert np.array_equal(balanced_assign(s).expert_of, brute_force_assign(s).expert_of)

    @settings(max_examples=100, deadline=None)
    @given(matrices(max_t=6, max_e=3))
    def test_brute_force_matches_naive_enumeration(self, s):
        _, total = naive_oracle(s)
        assert brute_force_assign(s).total(s) == pytest.approx(total, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(matrices(elements=DYADIC), st.data())
    def test_column_shift_invariance(self, s, data):
        shift = data.draw(arrays(np.float64, s.shape[1], elements=DYADIC.map(lambda x: 3 * x)))
        a = balanced_assign(s)
        b = balanced_assign(s + shift[None, :])
        # Every balanced map picks each column a fixed number of times, so the optimum set is unchanged.
        assert np.array_equal(a.expert_of, b.expert_of)
        caps = capacities(*s.shape)
        assert b.total(s + shift[None, :]) == pytest.approx(a.total(s) + float(caps @ shift), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(matrices(elements=DYADIC), st.data())
    def test_row_shift_keeps_optimum(self, s, data):
        t = data.draw(st.integers(0, s.shape[0] - 1))
        c = data.draw(DYADIC.map(lambda x: 3 * x))
        s2 = s.copy()
        s2[t] += c
        assert np.argsort(s2[t], kind="stable").tolist() == np.argsort(s[t], kind="stable").tolist()
        a, b = balanced_assign(s), balanced_assign(s2)
        assert np.array_equal(a.expert_of, b.expert_of)

    @settings(max_examples=200, deadline=None)
    @given(matrices(max_t=30, max_e=6))
    def test_greedy_total_dominates(self, s):
        assert greedy_assign(s).total(s) >= balanced_assign(s).total(s) - 1e-12


class TestGreedy:
    def test_rowwise_argmax(self):
        a = greedy_assign([[5, 1], [4, 3]])
        assert a.expert_of.tolist() == [0, 0] and a.loads.tolist() == [2, 0]

    def test_tie_to_lowest(self):
        assert greedy_assign([[1, 1]]).expert_of.tolist() == [0]

    def test_three_tokens(self):
        assert greedy_assign([[0, 2], [3, 1], [0, 9]]).expert_of.tolist() == [1, 0, 1]

    def test_non_finite(self):
        with pytest.raises(ValueError):
            greedy_assign([[0, np.nan]])


class TestBruteForce:
    def test_small_cases(self):
        assert brute_force_assign([[1, 0], [0, 1]]).total([[1, 0], [0, 1]]) == 2
        assert brute_force_assign([[5, 1], [4, 3]]).total([[5, 1], [4, 3]]) == 8
        assert brute_force_assign([[0.7]]).expert_of.tolist() == [0]

    def test_guard(self):
        with pytest.raises(RoutingCapacityError):
            brute_force_assign(np.zeros((11, 2)))


class TestLoadHistogram:
    @pytest.mark.parametrize("expert_of,E,expected", [([0, 1], 2, [1, 1]), ([0, 0], 2, [2, 0]), ([], 3, [0, 0, 0])])
    def test_counts(self, expert_of, E, expected):
        assert load_histogram(expert_of, E).tolist() == expected

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            load_histogram([0, 2], 2)

    def test_score_is_exact_sum(self):
        s = np.array([[0.1, 0.2], [0.3, 0.4]])
        assert assignment_score(s, [1, 0]) == 0.5
