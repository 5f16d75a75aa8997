import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import chebyshev as npcheb

from bamgraph.errors import DegenerateColumnError, InvalidParameterError
from bamgraph.graphs import DagSpec, SKELETON, sample_er_dag
from bamgraph.semgen import (
    CLAMP,
    DEPENDENCIES,
    NoiseDraws,
    RandomMlp,
    TestDependency as Dependency,
    bivariate_term,
    chebyshev_t,
    generate_test_data,
    generate_training_pair,
    read_data_csv,
    sample_sem_spec,
    simulate_sem,
    write_data_csv,
)


def distance_correlation(x, y):
    a = np.abs(x[:, None] - x[None])
    b = np.abs(y[:, None] - y[None])
    A = a - a.mean(0) - a.mean(1)[:, None] + a.mean()
    B = b - b.mean(0) - b.mean(1)[:, None] + b.mean()
    return math.sqrt((A * B).mean() / math.sqrt((A * A).mean() * (B * B).mean()))


COLLIDER = DagSpec(4, frozenset({(0, 2), (1, 2), (2, 3)}))


class TestChebyshev:
    grid = np.linspace(-1, 1, 2001)

    @pytest.mark.parametrize("n", range(0, 8))
    def test_matches_numpy(self, n):
        ref = npcheb.chebval(self.grid, [0] * n + [1])
        np.testing.assert_allclose(chebyshev_t(n, self.grid), ref, atol=1e-12)

    def test_recurrence(self):
        for n in range(1, 7):
            lhs = chebyshev_t(n + 1, self.grid)
            rhs = 2 * self.grid * chebyshev_t(n, self.grid) - chebyshev_t(n - 1, self.grid)
            assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_bounded_on_interval(self):
        for n in range(6):
            assert np.max(np.abs(chebyshev_t(n, self.grid))) <= 1 + 1e-12


class TestBivariateTerm:
    def test_zero_at_shift(self):
        y = np.linspace(-1, 1, 11)
        assert np.all(bivariate_term(0.3, y, 0.3, -0.7) == 0)

    def test_grid_bound(self):
        g = np.linspace(-1, 1, 201)
        x, y = np.meshgrid(g, g)
        for mu_x in np.linspace(-1, 1, 9):
            for mu_y in np.linspace(-1, 1, 9):
                assert np.max(np.abs(bivariate_term(x, y, mu_x, mu_y))) <= 1 + 1e-12


class TestSemSpec:
    def test_normalization_and_ranges(self):
        rng = np.random.default_rng(0)
        n_beta = 0
        while n_beta < 10_000:
            g = sample_er_dag(12, 3, rng)
            for v, p in enumerate(sample_sem_spec(g, rng).nodes):
                assert math.isclose(np.abs(p.alpha).sum() + abs(p.alpha_m), 1.0, rel_tol=1e-12)
                pa = g.parents(v)
                for b in p.beta.values():
                    assert 0.7 / len(pa) <= b <= 1.3 / len(pa)
                    n_beta += 1
                if len(pa) >= 2:
                    assert math.isclose(sum(abs(t[0]) for t in p.pair_terms.values()), 1.0, rel_tol=1e-12)
                assert set(p.noise_terms) == set(pa)
                w = p.mixture.weights
                assert 1 <= len(w) <= 5 and np.all(w > 0) and math.isclose(w.sum(), 1.0)

    def test_single_parent_has_no_pair_terms(self):
        g = DagSpec(2, frozenset({(0, 1)}))
        p = sample_sem_spec(g, np.random.default_rng(1)).nodes[1]
        assert p.pair_terms == {} and set(p.noise_terms) == {0}

    def test_factorial_decay(self):
        # |alpha_5| / |alpha_1| = |g5| / (120 |g1|) for iid uniforms, whose ratio has median 1
        rng = np.random.default_rng(2)
        g = DagSpec(2, frozenset())
        ratios = [120 * abs(p.alpha[4]) / abs(p.alpha[0]) for _ in range(5000) for p in sample_sem_spec(g, rng).nodes]
        assert abs(np.median(ratios) - 1.0) < 0.05


class TestSimulation:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 12), st.integers(2, 300))
    def test_clamped(self, seed, d, m):
        rng = np.random.default_rng(seed)
        g = sample_er_dag(d, min(2, d - 1), rng)
        x = simulate_sem(sample_sem_spec(g, rng), m, rng)
        assert x.shape == (m, d)
        assert np.max(np.abs(x)) <= CLAMP

    def test_source_columns_standardized(self):
        rng = np.random.default_rng(3)
        g = DagSpec(5, frozenset())
        x = simulate_sem(sample_sem_spec(g, rng), 500, rng)
        for col in x.T:
            if np.max(np.abs(col)) < CLAMP:
                assert abs(col.mean()) < 1e-8 and abs(col.std() - 1) < 1e-6

    def test_permutation_commutes(self):
        rng = np.random.default_rng(4)
        g = sample_er_dag(8, 3, rng)
        spec = sample_sem_spec(g, rng)
        noise = NoiseDraws.sample(200, 8, rng)
        perm = rng.permutation(8)
        x = simulate_sem(spec, 200, rng, noise)
        xp = simulate_sem(spec.permute(perm), 200, rng, noise.permute(perm))
        np.testing.assert_allclose(xp[:, perm], x, atol=1e-12)

    def test_degenerate_supplied_noise_raises(self):
        g = DagSpec(2, frozenset())
        spec = sample_sem_spec(g, np.random.default_rng(5))
        noise = NoiseDraws(np.full((10, 2), 0.5), np.zeros((10, 2)), np.zeros((10, 2)))
        with pytest.raises(DegenerateColumnError):
            simulate_sem(spec, 10, np.random.default_rng(0), noise)

    def test_rejects_tiny_m(self):
        with pytest.raises(InvalidParameterError):
            simulate_sem(sample_sem_spec(COLLIDER, np.random.default_rng(0)), 1, np.random.default_rng(0))


class TestTrainingPairs:
    def test_deterministic(self):
        a = generate_training_pair(np.random.default_rng(6))
        b = generate_training_pair(np.random.default_rng(6))
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_ranges_and_skeleton_fraction(self):
        rng = np.random.default_rng(7)
        fracs = []
        for _ in range(100):
            x, labels = generate_training_pair(rng)
            m, d = x.shape
            assert 50 <= m <= 1000 and 10 <= d <= 100 and labels.d == d
            fracs.append(len(labels.pairs_of(SKELETON)) / (d * (d - 1) / 2))
        # E[q / (d - 1)] with d ~ U{10..100}, q ~ U{1..min(d // 3, 5)}
        expected = np.mean([np.mean(np.arange(1, min(d // 3, 5) + 1)) / (d - 1) for d in range(10, 101)])
        se = np.std(fracs) / np.sqrt(len(fracs))
        assert abs(np.mean(fracs) - expected) < 3 * se


class TestTestDependencies:
    @pytest.mark.parametrize("kind", DEPENDENCIES)
    def test_every_kind_runs(self, kind):
        x = generate_test_data(COLLIDER, Dependency(kind), 100, np.random.default_rng(8))
        assert x.shape == (100, 4) and np.max(np.abs(x)) <= CLAMP

    def test_unknown_kind(self):
        with pytest.raises(InvalidParameterError):
            Dependency("quartic")

    def test_linear_chain_correlated(self):
        g = DagSpec(3, frozenset({(0, 1), (1, 2)}))
        x = generate_test_data(g, Dependency("linear"), 5000, np.random.default_rng(9))
        r = np.corrcoef(x[:, 0], x[:, 1])[0, 1]
        # far beyond the 1 / sqrt(M) null scale
        assert abs(r) > 10 / math.sqrt(5000)

    def test_cosine_is_non_monotone(self):
        g = DagSpec(2, frozenset({(0, 1)}))
        pearson, dcor = [], []
        for seed in range(5):
            x = generate_test_data(g, Dependency("cosine"), 10_000, np.random.default_rng(seed))
            pearson.append(abs(np.corrcoef(x.T)[0, 1]))
            dcor.append(distance_correlation(x[:2000, 0], x[:2000, 1]))
        assert np.mean(pearson) < 0.15
        assert min(dcor) > 0.1

    def test_mlp_tanh_bounded(self):
        rng = np.random.default_rng(10)
        net = RandomMlp(3, rng, layers=1, activation="tanh")
        out = net(rng.uniform(-1, 1, (1000, 3)))
        assert np.all(np.abs(out) < 1)

    def test_mlp_samples_architecture(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            net = RandomMlp(2, rng)
            assert 1 <= net.n_layers <= 5 and 4 <= net.width <= 64 and net.activation in ("relu", "tanh")


def test_csv_round_trip(tmp_path):
    x = generate_test_data(COLLIDER, Dependency("sine"), 20, np.random.default_rng(12))
    write_data_csv(x, tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().splitlines()[0] == "v1,v2,v3,v4"
    np.testing.assert_array_equal(read_data_csv(tmp_path / "x.csv"), x)
