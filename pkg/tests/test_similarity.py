import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import enumerate_partitions, grouping_oracle, hsic1_loops
from mtsl.errors import ContractError, ParseError, ShapeError
from mtsl.similarity import (
    FeatureMatrix,
    SimilarityMatrix,
    best_grouping,
    cka_biased,
    cka_unbiased,
    fusion_decision,
    hsic1,
    load_feature_csv,
    pairwise_cka,
    save_feature_csv,
    set_partitions,
    spatial_pool,
)


def _hsic_biased_oracle(x, y):
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    return np.trace(x @ x.T @ h @ y @ y.T @ h) / (n - 1) ** 2


def _cka_oracle(x, y):
    return _hsic_biased_oracle(x, y) / np.sqrt(_hsic_biased_oracle(x, x) * _hsic_biased_oracle(y, y))


def _random_orthogonal(rng, c):
    q, r = np.linalg.qr(rng.standard_normal((c, c)))
    return q * np.sign(np.diag(r))


def _random_sim(rng, k):
    a = rng.uniform(0, 1, (k, k))
    s = (a + a.T) / 2
    np.fill_diagonal(s, 1.0)
    return s


class TestSpatialPool:
    def test_unit_spatial_is_reshape(self):
        x = np.random.default_rng(0).standard_normal((5, 3, 1, 1))
        assert np.array_equal(spatial_pool(x).values, x.reshape(5, 3))

    def test_constant_plane(self):
        assert np.all(spatial_pool(np.full((2, 1, 4, 4), 2.5)).values == 2.5)

    def test_matches_loop(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 2, 2))
        out = spatial_pool(x).values
        for n, c in itertools.product(range(2), range(3)):
            total = 0.0
            for h, w in itertools.product(range(2), range(2)):
                total += x[n, c, h, w]
            assert abs(out[n, c] - total / 4) < 1e-15

    def test_rejects_non_4d(self):
        with pytest.raises(ShapeError):
            spatial_pool(np.ones((3, 4)))


class TestCKABiased:
    @pytest.mark.parametrize("seed", range(5))
    def test_self_similarity(self, seed):
        x = np.random.default_rng(seed).standard_normal((30, 6))
        assert abs(cka_biased(x, x) - 1.0) < 1e-9

    @pytest.mark.parametrize("c", [-3.0, 0.2, 7.0])
    def test_scale_and_shift(self, c):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((25, 4))
        b = rng.standard_normal(4)
        assert abs(cka_biased(x, c * x + b) - 1.0) < 1e-9

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(3)
        z, w = rng.standard_normal((64, 3)), rng.standard_normal((64, 3))
        x = np.tanh(z @ rng.standard_normal((3, 5)))
        y = np.sin(w @ rng.standard_normal((3, 4)))
        assert abs(cka_biased(x, y) - _cka_oracle(x, y)) < 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_orthogonal_and_isotropic_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((40, 6)), rng.standard_normal((40, 5))
        x = x + 0.5 * y[:, :1]
        base = cka_biased(x, y)
        q = _random_orthogonal(rng, 6)
        assert abs(cka_biased(x @ q, y) - base) < 1e-7
        assert abs(cka_biased(3.7 * x, y) - base) < 1e-7

    def test_sample_count_mismatch(self):
        with pytest.raises(ShapeError):
            cka_biased(np.ones((4, 2)), np.ones((5, 2)))


class TestCKAUnbiased:
    def test_self_similarity(self):
        x = np.random.default_rng(4).standard_normal((50, 6))
        assert abs(cka_unbiased(x, x) - 1.0) < 1e-9

    def test_independent_features_near_zero(self):
        scores = []
        for seed in range(20):
            rng = np.random.default_rng(seed)
            scores.append(cka_unbiased(rng.standard_normal((200, 8)), rng.standard_normal((200, 8))))
        assert abs(np.median(scores)) < 0.1

    @pytest.mark.parametrize("seed", range(5))
    def test_hsic1_matches_nested_loops(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        k, l = x @ x.T, y @ y.T
        assert abs(hsic1(k, l) - hsic1_loops(k, l)) < 1e-10

    def test_hsic1_loops_at_n6(self):
        rng = np.random.default_rng(9)
        x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        k, l = x @ x.T, y @ y.T
        assert abs(hsic1(k, l) - hsic1_loops(k, l)) < 1e-10

    def test_too_few_samples(self):
        with pytest.raises(ContractError):
            cka_unbiased(np.ones((3, 2)), np.ones((3, 2)))

    def test_degenerate_features_score_zero(self):
        x = np.ones((10, 3))
        assert cka_unbiased(x, np.random.default_rng(0).standard_normal((10, 3))) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounded_and_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((12, 3)), rng.standard_normal((12, 4))
        v = cka_unbiased(x, y)
        assert -1.0 <= v <= 1.0
        assert abs(v - cka_unbiased(y, x)) < 1e-12


class TestPairwise:
    def test_shared_features_all_ones(self):
        f = np.random.default_rng(0).standard_normal((20, 4))
        s = pairwise_cka({"a": f, "b": f, "c": f}).S
        assert np.allclose(s, 1.0, atol=1e-9)

    def test_two_tasks_definition(self):
        rng = np.random.default_rng(1)
        f1, f2 = rng.standard_normal((20, 4)), rng.standard_normal((20, 3))
        sim = pairwise_cka({"a": FeatureMatrix(f1), "b": FeatureMatrix(f2)})
        assert sim[("a", "b")] == cka_unbiased(f1, f2)
        assert sim.S[0, 0] == 1.0

    def test_symmetric_under_reversed_order(self):
        rng = np.random.default_rng(2)
        feats = {t: rng.standard_normal((30, 4)) for t in "abc"}
        fwd = pairwise_cka(feats)
        rev = pairwise_cka(dict(reversed(list(feats.items()))))
        assert np.max(np.abs(fwd.S - fwd.S.T)) < 1e-12
        assert np.max(np.abs(fwd.S - rev.S[::-1, ::-1])) < 1e-12

    def test_sample_count_mismatch(self):
        with pytest.raises(ShapeError):
            pairwise_cka({"a": np.ones((5, 2)), "b": np.ones((6, 2))})


class TestPartitions:
    @pytest.mark.parametrize("n,bell", [(1, 1), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203)])
    def test_bell_numbers(self, n, bell):
        assert sum(1 for _ in set_partitions(n)) == bell

    @pytest.mark.parametrize("n", range(1, 7))
    def test_matches_second_enumerator(self, n):
        canon = lambda p: tuple(sorted(tuple(sorted(b)) for b in p))  # noqa: E731
        ours = {canon(p) for p in set_partitions(n)}
        theirs = {canon(p) for p in enumerate_partitions(range(n))}
        assert ours == theirs and len(ours) == sum(1 for _ in set_partitions(n))


class TestGrouping:
    def test_single_task(self):
        g = best_grouping(SimilarityMatrix(("a",), np.eye(1)), gamma=0.6)
        assert g.groups == (("a",),) and g.value == 0.6

    def test_worked_example(self):
        sim = SimilarityMatrix.from_pairs((1, 2, 3), {(1, 2): 0.9, (1, 3): 0.2, (2, 3): 0.3})
        g = best_grouping(sim, gamma=0.75)
        assert g.groups == ((1, 2), (3,))
        assert abs(g.value_of((1, 2)) - 0.9) < 1e-12
        assert g.value_of((3,)) == 0.75
        assert abs(g.value - 0.825) < 1e-12
        assert fusion_decision(g, 0.75) == [(1, 2)]

    def test_worked_example_enumeration(self):
        # Hand values of all five partitions; the {1,2},{3} split is the unique maximum.
        s = np.array([[1, 0.9, 0.2], [0.9, 1, 0.3], [0.2, 0.3, 1]])
        values = {
            "1|2|3": 0.75,
            "12|3": (0.9 + 0.75) / 2,
            "13|2": (0.2 + 0.75) / 2,
            "23|1": (0.3 + 0.75) / 2,
            "123": np.mean([(0.9 + 0.2) / 2, (0.9 + 0.3) / 2, (0.2 + 0.3) / 2]),
        }
        assert max(values, key=values.get) == "12|3"
        assert abs(best_grouping(SimilarityMatrix((1, 2, 3), s)).value - values["12|3"]) < 1e-12

    def test_all_high_merges_everything(self):
        s = np.full((4, 4), 0.95)
        np.fill_diagonal(s, 1.0)
        g = best_grouping(SimilarityMatrix(tuple("abcd"), s), gamma=0.75)
        assert g.groups == (tuple("abcd"),)
        assert abs(g.value - 0.95) < 1e-12

    def test_all_low_fuses_nothing(self):
        s = np.full((3, 3), 0.1)
        np.fill_diagonal(s, 1.0)
        g = best_grouping(SimilarityMatrix(tuple("abc"), s), gamma=0.75)
        assert fusion_decision(g, 0.75) == []

    def test_gamma_zero_fuses_every_nonsingleton(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = best_grouping(SimilarityMatrix(tuple("abcd"), _random_sim(rng, 4)), gamma=0.0)
            assert fusion_decision(g, 0.0) == [x for x in g.groups if len(x) >= 2]

    def test_tie_prefers_fewer_groups(self):
        # Every partition of two tasks with S = gamma scores gamma.
        s = np.array([[1.0, 0.75], [0.75, 1.0]])
        assert best_grouping(SimilarityMatrix(("a", "b"), s), 0.75).groups == (("a", "b"),)

    @pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
    def test_matches_oracle(self, k):
        rng = np.random.default_rng(100 + k)
        tasks = tuple(f"t{i}" for i in range(k))
        for _ in range(200):
            s = _random_sim(rng, k)
            gamma = float(rng.uniform(0.3, 0.9))
            g = best_grouping(SimilarityMatrix(tasks, s), gamma)
            v, groups = grouping_oracle(list(tasks), s, gamma)
            assert g.groups == tuple(groups)
            assert abs(g.value - v) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.permutations(range(5)))
    def test_permutation_equivariant(self, seed, perm):
        rng = np.random.default_rng(seed)
        s = _random_sim(rng, 5)
        tasks = tuple("abcde")
        g = best_grouping(SimilarityMatrix(tasks, s), 0.75)
        p = list(perm)
        h = best_grouping(SimilarityMatrix(tuple(tasks[i] for i in p), s[np.ix_(p, p)]), 0.75)
        as_sets = lambda gr: {frozenset(x) for x in gr.groups}  # noqa: E731
        assert as_sets(g) == as_sets(h)
        assert abs(g.value - h.value) < 1e-12

    def test_limits(self):
        with pytest.raises(ContractError):
            best_grouping(SimilarityMatrix((), np.zeros((0, 0))))
        with pytest.raises(ContractError):
            best_grouping(SimilarityMatrix(tuple(range(11)), np.eye(11)))
        with pytest.raises(ContractError):
            fusion_decision(best_grouping(SimilarityMatrix(("a",), np.eye(1))), 1.5)


class TestFeatureCSV:
    def test_round_trip(self, tmp_path):
        f = np.random.default_rng(0).standard_normal((7, 3))
        save_feature_csv(f, tmp_path / "f.csv")
        assert np.array_equal(load_feature_csv(tmp_path / "f.csv").values, f)

    def test_header_is_channel_indices(self, tmp_path):
        save_feature_csv(np.ones((2, 3)), tmp_path / "f.csv")
        assert (tmp_path / "f.csv").read_text().splitlines()[0] == "0,1,2"

    def test_bad_row_reports_line(self, tmp_path):
        (tmp_path / "f.csv").write_text("0,1\n1.0,2.0\n3.0\n")
        with pytest.raises(ParseError, match="line 3"):
            load_feature_csv(tmp_path / "f.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "f.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ParseError):
            load_feature_csv(tmp_path / "f.csv")
