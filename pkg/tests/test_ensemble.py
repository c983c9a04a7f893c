import math

import numpy as np
import pytest

from kpzlab import ensemble as es
from kpzlab import field as kf
from kpzlab.gaussian_env import GridSpec

from .conftest import quiet_grid

T0_GRID = quiet_grid(0.1, 0.005, 12, 0)
SMALL = GridSpec.for_time(0.1, 0.005, 0.2)
PROBES = (0, 1, -1, 2, -2, 5, -5, 10, -10)


def run(grid, sigma=1.0, n=2000, seed=0, start=0, **kw):
    return es.run_ensemble(es.EnsembleConfig(grid, sigma, seed, **kw), n, start=start)


@pytest.fixture(scope="module")
def t0_acc():
    return run(T0_GRID, n=100_000, seed=1)


@pytest.fixture(scope="module")
def small_acc():
    return run(SMALL, n=4000, seed=2)


class TestDeltaMethod:
    def test_mean_se(self, rng):
        x = rng.normal(size=10_000)
        e = es.mean_of(x).estimate()
        assert e.std_error == pytest.approx(x.std(ddof=1) / 100)

    def test_variance_se_gaussian(self, rng):
        n = 40_000
        e = es.var_of(rng.normal(0, 2, size=n)).estimate()
        # Var of the sample variance of N(0, s^2) is 2 s^4 / n
        assert e.std_error == pytest.approx(4 * math.sqrt(2 / n), rel=0.05)
        assert e.within(target=4.0)

    def test_ratio_se(self, rng):
        a = rng.normal(2, 1, size=50_000)
        b = rng.normal(4, 1, size=50_000)
        e = es.ratio(es.mean_of(a), es.mean_of(b)).estimate()
        # independent means: Var(A/B) ~ (sa^2 + r^2 sb^2) / (n mb^2)
        expected = math.sqrt((1 + 0.25) / (50_000 * 16))
        assert e.std_error == pytest.approx(expected, rel=0.05)

    def test_single_replica_has_no_error(self):
        e = es.mean_of(np.array([3.0])).estimate()
        assert not e.has_error and not e.within()


class TestRunEnsemble:
    def test_single_replica(self):
        acc = run(SMALL, n=1)
        assert acc.n_replicas == 1
        assert not es.endpoint_cdf(acc, 0).has_error

    def test_merge_equals_single_pass(self):
        whole = run(SMALL, n=60)
        a, b = run(SMALL, n=25), run(SMALL, n=35, start=25)
        for merged in (a.merge(b), b.merge(a)):
            assert np.array_equal(merged.replica_ids, whole.replica_ids)
            for k in ("h_t", "w", "eta", "probs0"):
                assert np.array_equal(getattr(merged, k), getattr(whole, k))

    def test_merge_associative(self):
        a, b, c = run(SMALL, n=10), run(SMALL, n=10, start=10), run(SMALL, n=10, start=20)
        left, right = a.merge(b).merge(c), a.merge(b.merge(c))
        assert np.array_equal(left.h_t, right.h_t)
        assert np.array_equal(left.probs0, right.probs0)

    def test_merge_rejects_overlap_and_mismatch(self):
        a = run(SMALL, n=10)
        with pytest.raises(ValueError, match="share"):
            a.merge(run(SMALL, n=10, start=5))
        with pytest.raises(ValueError, match="different"):
            a.merge(run(SMALL, n=10, start=10, seed=9))

    def test_workers_do_not_change_results(self):
        cfg = es.EnsembleConfig(SMALL, 1.0, 4)
        one = es.run_ensemble(cfg, 40, workers=1)
        two = es.run_ensemble(cfg, 40, workers=2)
        assert np.array_equal(one.h_t, two.h_t) and np.array_equal(one.probs0, two.probs0)

    def test_se_scaling(self):
        se1 = es.mean_of(run(SMALL, n=2500, seed=6).h_t[:, SMALL.index(0)]).estimate()
        big = run(SMALL, n=10_000, seed=6)
        se4 = es.mean_of(big.h_t[:, SMALL.index(0)]).estimate()
        assert math.isfinite(se4.value)
        assert 0.45 <= se4.std_error / se1.std_error <= 0.55

    def test_mass_loss_reported(self, small_acc):
        assert small_acc.mass_loss() <= 1e-6
        assert not small_acc.flagged()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            es.EnsembleConfig(SMALL, -1.0, 0)
        with pytest.raises(ValueError):
            es.EnsembleConfig(SMALL, 1.0, 0, scheme="implicit")


class TestTimeZero:
    def test_variance_is_brownian(self, t0_acc):
        for xd in (-1.0, 0.5, 1.0):
            x = round(xd / T0_GRID.dx)
            assert es.variance_function(t0_acc, x).within(target=abs(xd))

    def test_cdf_is_unit_step(self, t0_acc):
        for y in T0_GRID.sites:
            assert es.endpoint_cdf(t0_acc, int(y)).value == (1.0 if y >= 0 else 0.0)

    def test_slope_cdf_residual(self, t0_acc):
        for y in (-5, -1, 0, 1, 5):
            assert es.slope_cdf_residual(t0_acc, y).within()

    def test_slope_cdf_exact_without_randomness(self):
        acc = run(T0_GRID, sigma=0.0, n=50)
        for y in (-3, 0, 3):
            assert es.slope_cdf_residual(acc, y).value == 0.0

    def test_decomposition(self, t0_acc):
        assert es.g_function_decomposition(t0_acc, 0).value == 0.0
        for x in (-10, 5, 10):
            assert es.g_function_decomposition(t0_acc, x).within()

    def test_two_point(self, t0_acc):
        phi1, phi2 = kf.triangle(T0_GRID, 0.0, 0.6), kf.triangle(T0_GRID, 0.1, 0.6)
        lhs, rhs, diff = es.two_point(t0_acc, phi1, phi2)
        assert rhs.value == pytest.approx(kf.cross_correlate(phi2, phi1).at(0))
        assert diff.within()
        lhs0, rhs0, _ = es.two_point(t0_acc, phi1, kf.zero(T0_GRID))
        assert lhs0.value == 0.0 and rhs0.value == 0.0

    def test_increment_variance(self, t0_acc):
        st = es.stationary_checks(t0_acc)
        for e in st["increment_variance_ratio"].values():
            assert e.within(target=1.0)

    def test_second_derivative_mass_at_origin(self, t0_acc):
        hw = 2
        total = sum(es.second_derivative(t0_acc, y, hw).value for y in range(-hw - 2, hw + 3)) * T0_GRID.dx
        assert total == pytest.approx(2.0, abs=0.05)
        far = es.second_derivative(t0_acc, 8, hw)
        assert far.within()


class TestSmallTime:
    def test_cdf_whole_lattice_and_monotone(self, small_acc):
        assert es.endpoint_cdf(small_acc, SMALL.half_width).value == pytest.approx(1.0, abs=1e-12)
        values = [es.endpoint_cdf(small_acc, int(y)).value for y in SMALL.sites]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_symmetry(self, small_acc):
        assert all(es.cdf_symmetry_residual(small_acc, y).within() for y in PROBES)

    def test_slope_bounded(self, small_acc):
        for y in PROBES:
            dg = (es.variance_function(small_acc, y + 1).value - es.variance_function(small_acc, y).value) / SMALL.dx
            se = es.slope_cdf_residual(small_acc, y).std_error
            assert abs(dg) <= 1.0 + 3 * se

    def test_sigma_zero_variance_nonnegative(self):
        acc = run(SMALL, sigma=0.0, n=200)
        assert all(es.variance_function(acc, y).value >= 0 for y in PROBES)

    def test_convexity_and_total_mass(self, small_acc):
        hw = 2
        for y in PROBES:
            e = es.second_derivative(small_acc, y, hw)
            assert e.value >= -3 * e.std_error
        assert es.second_derivative_mass(small_acc, hw).within(target=2.0)

    def test_deterministic(self):
        a = es.variance_function(run(SMALL, n=50, seed=11), 0)
        b = es.variance_function(run(SMALL, n=50, seed=11), 0)
        assert a == b

    def test_stationary_refuses_other_sigma(self):
        with pytest.raises(ValueError):
            es.stationary_checks(run(SMALL, sigma=0.5, n=10))

    def test_probe_range_checked(self, small_acc):
        with pytest.raises(ValueError):
            es.slope_cdf_residual(small_acc, SMALL.half_width)


def test_residual_coverage_across_seeds():
    """Two-SE coverage of slope-CDF and two-point residuals over 20 seeds."""
    hits = total = 0
    phi1, phi2 = kf.triangle(SMALL, 0.0, 1.0), kf.triangle(SMALL, 0.3, 1.0)
    for seed in range(20):
        acc = run(SMALL, n=400, seed=100 + seed)
        checks = [es.slope_cdf_residual(acc, y) for y in (0, 1, -1, 2, -2, 5, -5)]
        checks.append(es.two_point(acc, phi1, phi2)[2])
        hits += sum(e.within(2.0) for e in checks)
        total += len(checks)
    assert hits / total >= 0.85


class TestFlatLimit:
    @pytest.fixture(scope="class")
    @staticmethod
    def runs():
        flat = run(SMALL, sigma=0.0, n=3000, seed=5)
        return flat, {s: run(SMALL, sigma=s, n=3000, seed=5) for s in (0.5, 0.25)}

    def test_flat_density_mass(self, runs):
        flat, _ = runs
        assert np.allclose(np.sum(flat.probs0, axis=1), 1.0, atol=1e-12)
        mass = sum(es.annealed_density(flat, int(y)).value for y in SMALL.sites) * SMALL.dx
        assert mass == pytest.approx(1.0, abs=1e-12)

    def test_report(self, runs):
        flat, r = runs
        rep = es.flat_limit_check(r, flat, (0, 2, -2, 5), smoothing_halfwidth=2, tolerance=0.5)
        assert [row["sigma"] for row in rep["rows"]] == [0.5, 0.25]
        assert rep["monotone_within_se"]
        assert rep["flat_mass_error"] <= 1e-12

    def test_requires_common_randomness(self, runs):
        flat, r = runs
        other = run(SMALL, sigma=0.5, n=3000, seed=6)
        with pytest.raises(ValueError, match="seed"):
            es.flat_limit_check({0.5: other}, flat, (0,))
