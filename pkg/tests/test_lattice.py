import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import bessel_i, central_gradient, plaquettes_loop, torus_plaquette_quadrature_2x2

from u1flow import lattice
from u1flow.lattice import Coupling, LatticeDomainError, LatticeGeometry

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


class TestGeometry:
    def test_counts(self):
        g = LatticeGeometry(4, 6)
        assert g.shape == (2, 4, 6)
        assert g.n_links == 48
        assert g.n_plaquettes == 24

    @pytest.mark.parametrize("lx,ly", [(1, 4), (4, 1), (0, 0)])
    def test_too_small(self, lx, ly):
        with pytest.raises(LatticeDomainError):
            LatticeGeometry(lx, ly)

    @pytest.mark.parametrize("beta", [0.0, -1.0, math.inf, math.nan])
    def test_coupling_positive(self, beta):
        with pytest.raises(LatticeDomainError):
            Coupling(beta)


class TestWrapAngle:
    def test_examples(self):
        assert lattice.wrap_angle(0.0) == 0.0
        assert lattice.wrap_angle(4.0) == pytest.approx(4.0 - 2 * math.pi, abs=1e-15)
        assert lattice.wrap_angle(-math.pi) == math.pi
        assert lattice.wrap_angle(math.pi) == math.pi

    def test_non_finite(self):
        with pytest.raises(LatticeDomainError):
            lattice.wrap_angle(math.nan)
        with pytest.raises(LatticeDomainError):
            lattice.wrap_angle(np.array([0.0, math.inf]))

    @given(finite)
    def test_range_and_idempotent(self, x):
        w = lattice.wrap_angle(x)
        assert -math.pi < w <= math.pi
        assert lattice.wrap_angle(w) == w
        assert abs(math.remainder(w - x, 2 * math.pi)) < 1e-9 * max(1.0, abs(x))

    @given(st.floats(min_value=-50, max_value=50))
    def test_periodic(self, x):
        assert math.isclose(math.cos(lattice.wrap_angle(x + 2 * math.pi)), math.cos(lattice.wrap_angle(x)),
                            abs_tol=1e-12)


class TestPlaquette:
    def test_cold(self):
        assert np.all(lattice.plaquette_field(np.zeros((2, 3, 5))) == 0)

    def test_single_link(self, example_2x2):
        xp = lattice.plaquette_field(example_2x2)
        np.testing.assert_array_equal(xp, [[0.3, -0.3], [0.0, 0.0]])

    def test_matches_loop(self, rng):
        cfg = rng.uniform(-10, 10, size=(2, 5, 3))
        np.testing.assert_allclose(lattice.plaquette_field(cfg), plaquettes_loop(cfg), atol=1e-13)

    def test_batched(self, rng):
        cfg = rng.uniform(-4, 4, size=(3, 2, 4, 4))
        xp = lattice.plaquette_field(cfg)
        for b in range(3):
            np.testing.assert_array_equal(xp[b], lattice.plaquette_field(cfg[b]))

    def test_sum_telescopes(self, rng):
        cfg = rng.integers(-1000, 1000, size=(2, 6, 4)).astype(float) / 64.0
        assert np.sum(lattice.plaquette_field(cfg)) == 0.0


class TestAction:
    def test_cold(self):
        assert lattice.wilson_action(np.zeros((2, 2, 2)), 3.0) == 0.0

    def test_single_link(self, example_2x2):
        # 2 (1 - cos 0.3) = 0.0893270217...
        assert lattice.wilson_action(example_2x2, Coupling(1.0)) == pytest.approx(0.0893270217, rel=1e-9)
        assert lattice.average_plaquette(example_2x2) == pytest.approx((2 + 2 * math.cos(0.3)) / 4, abs=1e-15)
        assert lattice.average_plaquette(example_2x2) == pytest.approx(0.9776682, abs=1e-7)

    def test_two_pi_shift(self, rng):
        cfg = rng.uniform(-np.pi, np.pi, size=(2, 4, 4))
        shifted = cfg.copy()
        shifted[1, 2, 3] += 2 * np.pi
        assert lattice.wilson_action(shifted, 2.0) == pytest.approx(lattice.wilson_action(cfg, 2.0), abs=1e-12)

    def test_gradient_example(self, example_2x2):
        g = lattice.action_gradient(example_2x2, 1.0)
        assert g[0, 0, 0] == pytest.approx(2 * math.sin(0.3), abs=1e-15)
        assert g[0, 0, 0] == pytest.approx(0.5910404, abs=1e-7)

    def test_gradient_cold(self):
        assert np.all(lattice.action_gradient(np.zeros((2, 4, 4)), 5.0) == 0)

    def test_gradient_finite_differences(self, rng):
        cfg = lattice.random_config(LatticeGeometry(4, 4), rng)
        g = lattice.action_gradient(cfg, 2.5)
        fd = central_gradient(lambda c: lattice.wilson_action(c, 2.5), cfg, h=1e-5)
        assert np.max(np.abs(g - fd)) < 1e-8
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1e-3)) < 1e-6


class TestGaugeInvariance:
    def test_observables_invariant(self, rng):
        cfg = lattice.random_config(LatticeGeometry(6, 4), rng)
        gt = lattice.gauge_transform(cfg, rng.uniform(-np.pi, np.pi, size=(6, 4)))
        assert not np.allclose(gt, cfg)
        assert lattice.wilson_action(gt, 1.7) == pytest.approx(lattice.wilson_action(cfg, 1.7), abs=1e-12)
        assert lattice.average_plaquette(gt) == pytest.approx(lattice.average_plaquette(cfg), abs=1e-12)
        assert lattice.topological_charge(gt) == lattice.topological_charge(cfg)
        np.testing.assert_allclose(lattice.wrap_angle(lattice.plaquette_field(gt)),
                                   lattice.wrap_angle(lattice.plaquette_field(cfg)), atol=1e-12)

    def test_single_site(self):
        cfg = np.zeros((2, 3, 3))
        phases = np.zeros((3, 3))
        phases[1, 1] = 0.7
        gt = lattice.gauge_transform(cfg, phases)
        # the four links touching the site move, nothing else
        assert np.count_nonzero(gt) == 4
        assert lattice.wilson_action(gt, 1.0) == pytest.approx(0.0, abs=1e-15)


class TestTopologicalCharge:
    def test_cold(self):
        assert lattice.topological_charge(np.zeros((2, 8, 8))) == 0

    def test_single_link(self, example_2x2):
        assert lattice.topological_charge(example_2x2) == 0

    @pytest.mark.parametrize("q", [-2, -1, 0, 1, 2])
    def test_instantons(self, q):
        cfg = lattice.instanton_config(LatticeGeometry(8, 8), q)
        assert lattice.topological_charge(cfg) == q

    def test_instanton_uniform_flux(self):
        cfg = lattice.instanton_config(LatticeGeometry(8, 8), 1)
        wrapped = lattice.wrap_angle(lattice.plaquette_field(cfg))
        np.testing.assert_allclose(wrapped, 2 * np.pi / 64, atol=1e-13)
        assert lattice.average_plaquette(cfg) == pytest.approx(math.cos(2 * math.pi / 64), abs=1e-13)
        assert lattice.average_plaquette(cfg) == pytest.approx(0.9951847, abs=1e-7)

    def test_instanton_zero_is_cold(self):
        assert np.all(lattice.instanton_config(LatticeGeometry(4, 6), 0) == 0)

    def test_instanton_too_large(self):
        with pytest.raises(LatticeDomainError):
            lattice.instanton_config(LatticeGeometry(2, 2), 2)

    def test_integer_on_random(self, rng):
        g = LatticeGeometry(5, 7)
        for _ in range(200):
            q = lattice.topological_charge(lattice.random_config(g, rng) * 7.3)
            assert isinstance(q, int)

    def test_inconsistent_sum_raises(self):
        # a negative tolerance makes every winding sum "inconsistent"
        with pytest.raises(lattice.TopologicalChargeError):
            lattice.topological_charge(np.zeros((2, 2, 2)), tol=-1.0)
        with pytest.raises(LatticeDomainError):
            lattice.topological_charge(np.full((2, 2, 2), np.nan))


class TestConfigs:
    def test_random_deterministic(self):
        g = LatticeGeometry(8, 8)
        np.testing.assert_array_equal(lattice.random_config(g, 1), lattice.random_config(g, 1))

    def test_random_range_and_mean(self):
        cfg = lattice.random_config(LatticeGeometry(100, 50), 3)
        assert np.all(cfg > -np.pi) and np.all(cfg <= np.pi)
        sigma = math.pi / math.sqrt(3) / math.sqrt(cfg.size)
        assert abs(cfg.mean()) < 3 * sigma

    def test_cold_action(self):
        assert lattice.wilson_action(lattice.cold_config(LatticeGeometry(2, 2)), 1.0) == 0.0

    def test_check_config(self):
        with pytest.raises(LatticeDomainError):
            lattice.check_config(np.zeros((3, 4, 4)))
        with pytest.raises(LatticeDomainError):
            lattice.check_config(np.full((2, 4, 4), np.inf))
        with pytest.raises(LatticeDomainError):
            lattice.check_config(np.zeros((2, 4, 4)), LatticeGeometry(4, 6))

    def test_canonicalize(self, rng):
        cfg = rng.uniform(-20, 20, size=(2, 3, 3))
        c = lattice.canonicalize(cfg)
        assert np.all(c > -np.pi) and np.all(c <= np.pi)
        assert lattice.wilson_action(c, 1.0) == pytest.approx(lattice.wilson_action(cfg, 1.0), abs=1e-11)


class TestExactPlaquette:
    def _series_oracle(self, beta, vol):
        # character expansion evaluated with an independent power-series I_n
        ns = range(-40, 41)
        ins = {n: bessel_i(n, beta) for n in range(-41, 42)}
        z = sum(ins[n] ** vol for n in ns)
        num = sum(ins[n] ** (vol - 1) * 0.5 * (ins[n - 1] + ins[n + 1]) for n in ns)
        return num / z

    @pytest.mark.parametrize("beta,lx,ly", [(2.0, 8, 8), (6.0, 8, 8), (1.0, 2, 2), (4.0, 4, 6), (0.5, 3, 3)])
    def test_against_power_series(self, beta, lx, ly):
        got = lattice.exact_average_plaquette(beta, LatticeGeometry(lx, ly))
        assert got == pytest.approx(self._series_oracle(beta, lx * ly), abs=1e-13)

    @pytest.mark.parametrize("beta", [0.5, 1.0, 2.0, 4.0])
    def test_against_quadrature_2x2(self, beta):
        got = lattice.exact_average_plaquette(beta, LatticeGeometry(2, 2))
        assert got == pytest.approx(torus_plaquette_quadrature_2x2(beta), abs=1e-12)

    def test_large_volume_limit(self):
        got = lattice.exact_average_plaquette(2.0, LatticeGeometry(64, 64))
        assert got == pytest.approx(bessel_i(1, 2.0) / bessel_i(0, 2.0), abs=1e-12)
        assert got == pytest.approx(0.69777, abs=5e-6)

    def test_small_beta(self):
        assert lattice.exact_average_plaquette(1e-8, LatticeGeometry(4, 4)) == pytest.approx(0.0, abs=1e-8)

    def test_beta6_8x8_finite_volume(self):
        # at this volume the n = +-1 sectors still contribute ~1e-4
        got = lattice.exact_average_plaquette(6.0, LatticeGeometry(8, 8))
        ratio = bessel_i(1, 6.0) / bessel_i(0, 6.0)
        assert got == pytest.approx(0.9124549149, abs=1e-9)
        assert 5e-5 < got - ratio < 2e-4

    def test_not_converged(self):
        with pytest.raises(ArithmeticError):
            lattice.exact_average_plaquette(6.0, LatticeGeometry(2, 2), max_terms=2)
