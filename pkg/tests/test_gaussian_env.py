import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpzlab.gaussian_env import (GENERATOR_FAMILY_ID, GridError, GridSpec, InitialCondition,
                                 TruncationWarning, make_manifest, make_stream, manifest_hash,
                                 sample_environment, sample_initial_walk, sample_replica,
                                 walk_from_increments)

from .conftest import quiet_grid


def _first_normals(seed, rid, n_rep, k):
    """Draw ``k`` leading normals from each of ``n_rep`` replica streams."""
    return np.stack([make_stream(seed, rid0).normals(k)[0] for rid0 in range(rid, rid + n_rep)])


class TestGridSpec:
    def test_stability_enforced(self):
        with pytest.raises(GridError, match="dt"):
            GridSpec(0.1, 0.02, 10, 5)

    def test_dt_equal_dx2_allowed(self):
        g = GridSpec(1.0, 1.0, 3, 1)
        assert g.p_center == 0.0
        assert g.p_side == 0.5

    def test_narrow_lattice_warns(self):
        with pytest.warns(TruncationWarning):
            GridSpec(0.1, 0.004, 5, 250)

    @pytest.mark.parametrize("bad", [dict(dx=0), dict(dt=-1), dict(half_width=-1), dict(n_steps=1.5)])
    def test_rejects_bad_fields(self, bad):
        kw = dict(dx=0.1, dt=0.005, half_width=30, n_steps=4)
        kw.update(bad)
        with pytest.raises(GridError):
            GridSpec(**kw)

    def test_for_time(self):
        g = GridSpec.for_time(0.1, 0.004, 1.0)
        assert g.n_steps == 250
        assert g.half_width == 60
        with pytest.raises(GridError, match="multiple"):
            GridSpec.for_time(0.1, 0.004, 0.25)

    def test_dict_round_trip(self, small_grid):
        assert GridSpec.from_dict(json.loads(json.dumps(small_grid.to_dict()))) == small_grid

    def test_indexing(self, small_grid):
        L = small_grid.half_width
        assert small_grid.index(-L) == 0
        assert small_grid.index(L) == 2 * L
        assert small_grid.cell_index(-L + 1) == 0
        assert small_grid.cell_index(L) == 2 * L - 1
        with pytest.raises(IndexError):
            small_grid.index(L + 1)
        with pytest.raises(IndexError):
            small_grid.cell_index(-L)


class TestStreams:
    def test_same_stream_twice_identical(self):
        a, _ = make_stream(7, 0).normals(1000)
        b, _ = make_stream(7, 0).normals(1000)
        assert np.array_equal(a, b)

    def test_replicas_uncorrelated(self):
        a, _ = make_stream(7, 0).normals(100_000)
        b, _ = make_stream(7, 1).normals(100_000)
        assert abs(np.corrcoef(a, b)[0, 1]) <= 3 / math.sqrt(1e5)

    def test_seeds_distinct(self):
        a, _ = make_stream(7, 0).normals(100)
        b, _ = make_stream(8, 0).normals(100)
        assert not np.array_equal(a, b)

    @given(st.integers(0, 40), st.integers(1, 30))
    @settings(max_examples=40, deadline=None)
    def test_counter_addressable(self, skip, n):
        """Reading in pieces equals reading at once, wherever the split falls."""
        whole, _ = make_stream(3, 9).normals(skip + n)
        head, s = make_stream(3, 9).normals(skip)
        tail, s2 = s.normals(n)
        assert np.array_equal(np.concatenate([head, tail]), whole)
        assert s2.counter == skip + n
        assert np.array_equal(make_stream(3, 9).at(skip).normals(n)[0], whole[skip:])

    def test_uniforms_open_interval(self):
        u, _ = make_stream(0, 0).uniforms(100_000)
        assert u.min() > 0 and u.max() < 1

    def test_normal_moments(self):
        g, _ = make_stream(1, 2).normals(200_000)
        assert abs(g.mean()) <= 3 / math.sqrt(g.size)
        assert abs(g.var() - 1) <= 3 * math.sqrt(2 / g.size)


class TestEnvironment:
    def test_shape_and_counter(self):
        g = quiet_grid(1.0, 0.5, 1, 2)
        env, s = sample_environment(make_stream(0, 0), g)
        assert env.xi.shape == (2, 3)
        assert s.counter == 6

    def test_same_stream_twice(self):
        g = quiet_grid(1.0, 0.5, 1, 2)
        a, _ = sample_environment(make_stream(4, 4), g)
        b, _ = sample_environment(make_stream(4, 4), g)
        assert np.array_equal(a.xi, b.xi)

    def test_entry_mean_and_variance(self):
        g = quiet_grid(1.0, 0.5, 1, 2)
        n = 100_000
        xi = _first_normals(11, 0, n, g.n_environment_draws()).reshape(n, 2, 3)
        assert abs(xi[:, 0, 0].mean()) <= 3 / math.sqrt(n)
        assert abs(xi[:, 1, 1].var(ddof=1) - 1) <= 3 * math.sqrt(2 / n)


class TestInitialWalk:
    def test_anchored_and_reconstructs(self, small_grid):
        init, _ = sample_initial_walk(make_stream(5, 5), small_grid, 1.0)
        L = small_grid.half_width
        assert init.w[L] == 0.0
        steps = np.diff(init.w)
        assert np.allclose(steps, math.sqrt(small_grid.dx) * init.eta, rtol=0, atol=1e-13)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=40).filter(lambda v: len(v) % 2 == 0))
    def test_reconstruction_identity(self, eta):
        dx = 0.04
        w = walk_from_increments(np.array(eta), dx)
        assert w[len(eta) // 2] == 0.0
        assert np.allclose(np.diff(w), math.sqrt(dx) * np.array(eta), atol=1e-12)

    def test_walk_variance(self):
        grid = quiet_grid(0.1, 0.01, 10, 0)
        n = 100_000
        eta = _first_normals(21, 0, n, grid.n_cells)
        w = walk_from_increments(eta, grid.dx)
        L = grid.half_width
        for j in (-L, -L // 2, L // 2, L):
            v = w[:, grid.index(j)].var(ddof=1)
            assert abs(v - abs(j) * grid.dx) <= 3 * abs(j) * grid.dx * math.sqrt(2 / n)

    def test_sigma_negative_rejected(self, small_grid):
        with pytest.raises(ValueError):
            sample_initial_walk(make_stream(0, 0), small_grid, -1.0)

    def test_flat(self, small_grid):
        init = InitialCondition.flat(small_grid)
        assert np.all(init.h0 == 0)


def test_environment_and_walk_use_disjoint_counters():
    grid = quiet_grid(1.0, 0.5, 1, 1)
    n = 100_000
    draws = _first_normals(31, 0, n, grid.n_environment_draws() + grid.n_cells)
    xi0, eta0 = draws[:, 0], draws[:, grid.n_environment_draws()]
    assert abs(np.corrcoef(xi0, eta0)[0, 1]) <= 3 / math.sqrt(n)
    env, init = sample_replica(31, 0, grid, 1.0)
    assert env.xi.ravel()[0] == xi0[0]
    assert init.eta[0] == eta0[0]


def test_manifest_hash_stable(small_grid):
    m = make_manifest(3, small_grid, 1.0, scheme="exponential")
    assert m["generator_family_id"] == GENERATOR_FAMILY_ID
    assert manifest_hash(m) == manifest_hash(json.loads(json.dumps(m)))
    assert manifest_hash(m) != manifest_hash(make_manifest(4, small_grid, 1.0, scheme="exponential"))


def test_no_warning_at_default_width():
    with warnings.catch_warnings():
        warnings.simplefilter("error", TruncationWarning)
        GridSpec.for_time(0.05, 0.00125, 1.0)
