import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix

from qslab.estimators import SurvivalCurve, fit_decay
from qslab.measures import Marginal, ProductMeasure
from qslab.model import (JumpKernel, Lattice, Model, RateFunction, TargetSet)
from qslab.spectral import (FixedTotal, KilledGenerator, MaxTotal, SiteCap,
                            SolverError, StateSpaceError, TasepCircleOracle,
                            absorbing_core, build_killed_generator,
                            canonical_vector, enumerate_states, exact_survival,
                            hitting_sandwich_check, normalize_density,
                            occupation_vectors, principal_decay,
                            product_vector, qsd_fixed_point_check,
                            rayleigh_quotient, restrict_to_core,
                            survival_monotone_in_time, tasep_line_decay_rate,
                            tasep_line_survival)

G_LINEAR = RateFunction.zero_range(lambda k: float(k))


def single_site_chain(rate: float) -> KilledGenerator:
    """1x1 killed generator with pure exit `rate`."""
    lattice = Lattice((2,), "blocked")
    space = enumerate_states(lattice, FixedTotal(1), site_cap=1)
    model = Model(lattice, JumpKernel(np.array([[1]]), np.array([1.0])),
                  RateFunction.exclusion())
    target = TargetSet(np.array([1]), 0)
    kg = build_killed_generator(space, model, target)
    kg.matrix = csr_matrix(np.array([[-rate]]))
    kg.killing = np.array([rate])
    return kg


class TestEnumeration:
    def test_exclusion_counts(self):
        lat = Lattice((4,), "torus")
        assert enumerate_states(lat, FixedTotal(2), site_cap=1).size == 6
        lat6 = Lattice((6,), "torus")
        assert enumerate_states(lat6, FixedTotal(3), site_cap=1).size == 20

    def test_capped_grand_canonical_count(self):
        lat = Lattice((2,), "torus")
        assert enumerate_states(lat, SiteCap(2)).size == 9

    def test_refusal_reports_count(self):
        lat = Lattice((8,), "torus")
        with pytest.raises(StateSpaceError, match="6561"):
            enumerate_states(lat, SiteCap(2), limit=1000)

    def test_index_round_trip(self):
        lat = Lattice((3,), "torus")
        space = enumerate_states(lat, MaxTotal(4))
        for i in (0, 5, space.size - 1):
            assert space.index_of(space.occupancies[i]) == i

    def test_duplicate_free_lexicographic_sectors(self):
        lat = Lattice((3,), "torus")
        space = enumerate_states(lat, MaxTotal(3))
        totals = space.occupancies.sum(axis=1)
        assert (np.diff(totals) >= 0).all()  # sector-major ordering


class TestKilledGenerator:
    def test_row_sums_equal_negative_killing(self, toy_spectral):
        kg = toy_spectral["kg"]
        rows = np.asarray(kg.matrix.sum(axis=1)).ravel()
        assert np.allclose(rows, -kg.killing, atol=1e-12)
        assert ((kg.killing > 0) == (rows < -1e-12)).all()
        off = kg.matrix - csr_matrix(
            (kg.matrix.diagonal(), (range(kg.dim), range(kg.dim))),
            shape=kg.matrix.shape)
        assert (off.data >= 0).all()

    def test_hand_built_two_site_chain(self):
        """Capped two-site chain cross-checked against a hand enumeration."""
        lat = Lattice((2,), "torus")
        model = Model(lat, JumpKernel(np.array([[1]]), np.array([1.0])),
                      G_LINEAR)
        target = TargetSet(np.array([0]), 1)
        space = enumerate_states(lat, SiteCap(2))
        kg = build_killed_generator(space, model, target)
        # survivors: eta(0) <= 1, states ordered (0,0),(0,1),(0,2),(1,0),(1,1),(1,2)
        # jumps 0->1 and 1->0 both exist on the 2-torus via the +1 offset
        states = [tuple(s) for s in space.occupancies[kg.ac_indices]]
        idx = {s: i for i, s in enumerate(states)}
        dense = np.zeros((6, 6))

        def add(a, b, r):
            dense[idx[a], idx[b]] += r
            dense[idx[a], idx[a]] -= r

        add((0, 1), (1, 0), 1.0)
        add((0, 2), (1, 1), 2.0)
        add((1, 0), (0, 1), 1.0)
        add((1, 1), (0, 2), 1.0)
        # (1,1): jump 1<-... the move 1->0 would make eta(0)=2: killed
        dense[idx[(1, 1)], idx[(1, 1)]] -= 1.0
        # (1,2): 0->1 suppressed by the cap; 1->0 kills
        dense[idx[(1, 2)], idx[(1, 2)]] -= 2.0
        assert np.allclose(kg.matrix.toarray(), dense, atol=1e-14)
        assert kg.suppressed_rate > 0

    def test_sector_spaces_have_no_suppression(self, toy_spectral):
        assert toy_spectral["kg"].suppressed_rate == 0.0

    def test_stationary_vector_invariant_on_sector(self, toy):
        """Unkilled sector generator kills the canonical stationary vector."""
        model, _, _ = toy
        space = enumerate_states(model.lattice, FixedTotal(3))
        trivial = TargetSet(np.array([0]), 10**6)  # unreachable: no killing
        kg = build_killed_generator(space, model, trivial)
        nu = canonical_vector(space, model.rates.g)
        assert np.abs(nu @ kg.matrix.toarray()).max() <= 1e-14


class TestPrincipalDecay:
    def test_single_state(self):
        kg = single_site_chain(2.5)
        res = principal_decay(kg)
        assert res.decay_rate == pytest.approx(2.5)
        assert res.qsd.tolist() == [1.0]

    def test_toy_residuals(self, toy_spectral):
        res = toy_spectral["principal"]
        kg = toy_spectral["core"]
        assert not res.defective
        assert res.right_residual <= 1e-10
        assert res.left_residual <= 1e-10
        assert (res.qsd >= 0).all()
        # self-residual of the left pair under the assembled matrix
        resid = res.qsd @ kg.matrix.toarray() + res.decay_rate * res.qsd
        assert np.abs(resid).max() <= 1e-9

    def test_defective_ring_fits_unit_rate(self):
        lat = Lattice((6,), "torus")
        model = Model(lat, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        space = enumerate_states(lat, FixedTotal(3), site_cap=1)
        kg = build_killed_generator(space, model, TargetSet(np.array([0]), 0))
        res = principal_decay(kg)
        assert res.defective
        assert res.decay_rate == pytest.approx(1.0, abs=0.02)


class TestExactSurvival:
    def test_time_zero_is_initial_mass(self, toy_spectral):
        kg = toy_spectral["core"]
        nu = toy_spectral["nu_core"]
        assert exact_survival(kg, nu, 0.0) == pytest.approx(nu.sum())

    def test_single_state_exponential(self):
        kg = single_site_chain(1.7)
        assert exact_survival(kg, np.ones(1), 1.0) == \
            pytest.approx(math.exp(-1.7), abs=1e-12)

    def test_monotone_in_time(self, toy_spectral):
        assert survival_monotone_in_time(
            toy_spectral["core"], toy_spectral["nu_core"],
            np.linspace(0, 8, 17))

    def test_log_mode_matches_direct(self, toy_spectral):
        kg = toy_spectral["core"]
        nu = toy_spectral["nu_core"]
        ts = [0.5, 2.0, 7.0]
        direct = exact_survival(kg, nu, ts)
        logs = exact_survival(kg, nu, ts, return_log=True)
        assert np.exp(logs) == pytest.approx(direct, rel=1e-10)

    def test_circle_two_method_agreement(self):
        lat = Lattice((6,), "torus")
        model = Model(lat, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        space = enumerate_states(lat, FixedTotal(3), site_cap=1)
        kg = build_killed_generator(space, model, TargetSet(np.array([0]), 0))
        oracle = TasepCircleOracle(6, 3)
        nu = canonical_vector(space, model.rates.g)[kg.ac_indices]
        ts = np.array([0.5, 1.0, 2.0, 4.0, 10.0])
        assert np.abs(exact_survival(kg, nu, ts)
                      - oracle.mixture_survival(ts)).max() <= 1e-10


class TestQsdFixedPoint:
    def test_eigenvector_is_fixed(self, toy_spectral):
        res = toy_spectral["principal"]
        chk = qsd_fixed_point_check(toy_spectral["core"], res.qsd)
        assert chk["l1_distance"] <= 1e-10
        assert max(chk["generator_residuals"].values()) <= 1e-9
        assert chk["expected_tau"] == pytest.approx(1.0 / res.decay_rate,
                                                    rel=1e-9)

    def test_stationary_restriction_is_not_fixed(self, toy_spectral):
        nu = toy_spectral["nu_core"] / toy_spectral["nu_core"].sum()
        chk = qsd_fixed_point_check(toy_spectral["core"], nu)
        assert chk["l1_distance"] > 1e-3

    def test_single_state_fixed(self):
        kg = single_site_chain(3.0)
        chk = qsd_fixed_point_check(kg, np.ones(1))
        assert chk["l1_distance"] == pytest.approx(0.0)

    def test_dead_sector_solve_reported(self, toy_spectral):
        with pytest.raises(SolverError):
            occupation_vectors(toy_spectral["kg"],
                               np.ones(toy_spectral["kg"].dim), 1)


class TestSandwich:
    def test_single_state_equality(self):
        kg = single_site_chain(1.0)
        nu = np.array([0.25])  # survivor mass under the ambient law
        rep = hitting_sandwich_check(kg, nu, np.array([4.0]), np.array([4.0]),
                                     1.0, [0.5, 1.0, 2.0])
        # fg is constant on a point mass: relative entropy log(fg/Z) = 0;
        # survival sits at nu(A^c) e^{-t}, below the unit upper bound
        assert rep.entropy == pytest.approx(math.log(4.0))
        assert rep.holds()

    def test_toy_exact_sandwich(self, toy_qsd_sector, toy):
        model, target, measure = toy
        space, kg, res = toy_qsd_sector
        nu_full = canonical_vector(space, model.rates.g)
        nu = nu_full[kg.ac_indices]
        f = normalize_density(res.qsd / nu, nu)
        g = normalize_density(res.right_vector, nu)
        rep = hitting_sandwich_check(kg, nu, f, g, res.decay_rate,
                                     [0.5, 1, 2, 4, 8])
        assert rep.fg_mass >= 1.0 - 1e-12
        assert rep.holds(tol=1e-10)
        assert (rep.survival <= np.exp(-res.decay_rate * rep.t_grid)
                + 1e-12).all()


class TestRayleigh:
    def test_trial_indicator_gives_exit_rate(self, toy_qsd_sector, toy):
        model, target, _ = toy
        space, kg, _ = toy_qsd_sector
        nu_full = canonical_vector(space, model.rates.g)
        trial = np.zeros(kg.dim)
        trial[0] = 1.0
        rep = rayleigh_quotient(model, target, space, nu_full, [trial])
        sym_model = Model(model.lattice, model.kernel.symmetrized_half(),
                          model.rates)
        kg_sym = build_killed_generator(space, sym_model, target)
        assert rep.trial_quotients[0] == pytest.approx(
            kg_sym.exit_rates()[0])
        assert rep.eigen_residual <= 1e-10

    def test_classical_bound_on_asymmetric_ring(self, excl_ring):
        model, target, measure, space, kg = excl_ring
        core = restrict_to_core(kg)
        res = principal_decay(core)
        nu_full = product_vector(space, measure.marginal)
        rep = rayleigh_quotient(model, target, space, nu_full,
                                lambda_asymmetric=res.decay_rate)
        assert rep.classical_bound_margin is not None
        assert rep.classical_bound_margin >= -1e-12

    def test_quotient_minimum_attained(self, excl_ring):
        model, target, measure, space, kg = excl_ring
        nu_full = product_vector(space, measure.marginal)
        rep = rayleigh_quotient(model, target, space, nu_full)
        rng = np.random.default_rng(0)
        for _ in range(5):
            trial = rng.random(kg.dim)
            r2 = rayleigh_quotient(model, target, space, nu_full, [trial])
            assert r2.trial_quotients[0] >= rep.lambda_s - 1e-12


class TestAbsorbingCore:
    def test_dead_sectors_masked(self, toy_spectral):
        kg = toy_spectral["kg"]
        core = absorbing_core(kg)
        occ = kg.space.occupancies[kg.ac_indices]
        totals = occ.sum(axis=1)
        # window {0} with threshold 1 needs at least two particles
        assert (core == (totals >= 2)).all()


class TestLineOracle:
    def test_values(self):
        assert tasep_line_survival(0.5, 0.0) == pytest.approx(0.5)
        assert tasep_line_survival(0.5, 2.0) == \
            pytest.approx(0.5 * math.exp(-1.0))
        assert tasep_line_survival(0.5, 200.0) < 1e-40
        assert tasep_line_decay_rate(0.3) == 0.3


class TestCircleOracle:
    def test_gap_one_survival(self):
        oracle = TasepCircleOracle(6, 3)
        occ = np.array([0, 1, 0, 1, 0, 1])
        assert oracle.chi(occ) == 1
        for t in (0.3, 1.0, 4.0):
            assert oracle.survival(occ, t) == pytest.approx(math.exp(-t))

    def test_origin_occupied_never_survives(self):
        oracle = TasepCircleOracle(6, 3)
        occ = np.array([1, 1, 0, 1, 0, 0])
        assert oracle.survival(occ, 0.0) == 0.0

    def test_chi_distribution_normalized(self):
        oracle = TasepCircleOracle(6, 3)
        dist = oracle.chi_distribution()
        assert dist.sum() == pytest.approx(1.0, abs=1e-14)
        assert dist[0] == pytest.approx(0.5)

    def test_ring_rate_fit_is_one_not_density(self):
        oracle = TasepCircleOracle(6, 3)
        ts = np.linspace(1e7, 2e7, 9)
        fit = fit_decay(SurvivalCurve.from_log(
            ts, oracle.log_mixture_survival(ts)))
        assert abs(fit.lambda_hat - 1.0) <= 1e-6
        assert abs(fit.lambda_hat - 0.5) > 0.1

    def test_reversed_conditioning_concentrates_on_packed_block(self):
        """Long-time conditioned likelihood under the transposed kernel
        matches the binomial-weighted packed configuration."""
        N, m = 6, 3
        oracle = TasepCircleOracle(N, m)
        lat = Lattice((N,), "torus")
        fwd = Model(lat, JumpKernel(np.array([[1]]), np.array([1.0])),
                    RateFunction.exclusion())
        rev = fwd.reversed()
        space = enumerate_states(lat, FixedTotal(m), site_cap=1)
        kg = build_killed_generator(space, rev, TargetSet(np.array([0]), 0))
        nu = canonical_vector(space, rev.rates.g)[kg.ac_indices]
        occs = space.occupancies[kg.ac_indices]

        def ratios(t):
            mix = exact_survival(kg, nu, t)
            out = np.empty(kg.dim)
            for row in range(kg.dim):
                e = np.zeros(kg.dim)
                e[row] = 1.0
                out[row] = exact_survival(kg, e, t) / mix
            return out

        r100, r200 = ratios(100.0), ratios(200.0)
        packed = np.array([oracle.yaglom_ratio(occ) for occ in occs])
        assert (packed > 0).sum() == 1  # a single surviving profile
        hot = packed > 0
        # the packed block approaches binom(N, m) from below (1/t corrections)
        assert r200[hot] == pytest.approx(packed[hot], rel=0.05)
        assert abs(r200[hot] - packed[hot]) < abs(r100[hot] - packed[hot])
        # every other configuration drains toward zero
        assert (r200[~hot] < r100[~hot]).all()
        assert r200[~hot].max() < 0.3
