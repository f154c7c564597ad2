import math

import numpy as np
import pytest

from qslab import rng as rngmod
from qslab.dynamics import (CENSORED, HIT, SimContext, measure_provider,
                            run_batch, rw_hitting, rw_hitting_free,
                            rw_hitting_mc, second_class_escape, sigma_exit,
                            simulate_killed, stationarity_check,
                            supermultiplicativity_check, survival_curve)
from qslab.measures import ProductMeasure
from qslab.model import (Configuration, JumpKernel, Lattice, Model,
                         RateFunction, TargetSet, jump_rate)
from qslab.spectral import tasep_line_survival

G_LINEAR = RateFunction.zero_range(lambda k: float(k))


def gamma_tail(k, t):
    """P(Gamma(k, 1) > t) = P(Poisson(t) < k): independent hitting oracle."""
    return sum(math.exp(-t) * t**j / math.factorial(j) for j in range(k))


class TestSimulateKilled:
    def test_initial_inside_target_is_instant(self, toy):
        model, target, _ = toy
        res = simulate_killed(Configuration([2, 0, 0]), model, target, 10.0,
                              rngmod.stream(0, rngmod.TRAJECTORY, 0),
                              record_trajectory=True)
        assert res.hit and res.tau == 0.0
        assert res.trajectory.n_events == 0

    def test_empty_configuration_freezes(self, toy):
        model, target, _ = toy
        res = simulate_killed(Configuration([0, 0, 0]), model, target, 5.0,
                              rngmod.stream(0, rngmod.TRAJECTORY, 1))
        assert res.status == CENSORED and res.frozen
        assert res.tau == 5.0

    def test_single_particle_gamma_hitting(self):
        # one particle three unobstructed hops from the trap: tau is a sum
        # of three unit exponentials
        lattice = Lattice((5,), "blocked")
        model = Model(lattice, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        target = TargetSet(np.array([4]), 0)
        initials = np.tile([0, 1, 0, 0, 0], (20_000, 1))
        batch = run_batch(model, target, 20_000, 50.0, seed=77,
                          initials=initials)
        assert batch.hit.all()
        taus = batch.taus
        assert abs(taus.mean() - 3.0) <= 3 * taus.std(ddof=1) / math.sqrt(taus.size)
        for t in (1.0, 3.0, 6.0):
            p = (taus > t).mean()
            oracle = gamma_tail(3, t)
            assert abs(p - oracle) <= 3 * math.sqrt(oracle * (1 - oracle) / taus.size)

    def test_replay_determinism(self, toy):
        model, target, measure = toy
        runs = []
        for _ in range(2):
            gen = rngmod.stream(123, rngmod.TRAJECTORY, 9)
            occ = measure.sample_occupancies(model.lattice, gen, 1)[0]
            runs.append(simulate_killed(Configuration(occ), model, target,
                                        40.0, gen, record_trajectory=True))
        a, b = runs
        assert a.tau == b.tau
        assert (a.trajectory.times == b.trajectory.times).all()
        assert (a.trajectory.sources == b.trajectory.sources).all()
        assert (a.trajectory.destinations == b.trajectory.destinations).all()

    def test_trajectory_replay_is_valid(self, toy):
        """Replay invariants: strictly increasing times, every event a
        positive-rate jump from the replayed state, no early target entry."""
        model, target, measure = toy
        batch = run_batch(model, target, 64, 40.0, seed=3,
                          provider=measure_provider(measure, model.lattice),
                          record_events=True)
        for i in range(batch.n):
            traj = batch.trajectory(i)
            assert (np.diff(traj.times) > 0).all()
            occ = Configuration(traj.initial)
            for k in range(traj.n_events):
                assert not target.contains(occ.occupancy)
                rate = jump_rate(occ, int(traj.sources[k]),
                                 int(traj.destinations[k]), model.lattice,
                                 model.kernel, model.rates)
                assert rate > 0
                occ.occupancy[traj.sources[k]] -= 1
                occ.occupancy[traj.destinations[k]] += 1
            if traj.terminal_status == HIT:
                assert target.contains(occ.occupancy)
            assert occ.occupancy.sum() == traj.initial.sum()

    def test_reverse_uses_transposed_kernel(self):
        # a single particle left of a right-edge trap never hits under the
        # reversed (leftward) kernel
        lattice = Lattice((5,), "blocked")
        model = Model(lattice, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        target = TargetSet(np.array([4]), 0)
        res = simulate_killed(Configuration([0, 0, 1, 0, 0]), model, target,
                              10.0, rngmod.stream(5, rngmod.TRAJECTORY, 0),
                              reverse=True)
        assert res.status == CENSORED


class TestBatches:
    def test_worker_count_invariance(self, toy):
        model, target, measure = toy
        prov = measure_provider(measure, model.lattice)
        one = run_batch(model, target, 200, 20.0, seed=9, provider=prov,
                        workers=1)
        two = run_batch(model, target, 200, 20.0, seed=9, provider=prov,
                        workers=2)
        assert (one.taus == two.taus).all()
        assert (one.hit == two.hit).all()

    def test_conservation_on_torus(self, toy):
        model, target, measure = toy
        batch = run_batch(model, target, 128, 20.0, seed=11,
                          provider=measure_provider(measure, model.lattice),
                          record_events=True)
        for i in range(batch.n):
            traj = batch.trajectory(i)
            assert traj.final_state().sum() == traj.initial.sum()


class TestSurvivalCurve:
    def test_nonincreasing_nested_evaluation(self, toy):
        model, target, measure = toy
        curve = survival_curve(model, target, np.linspace(0.0, 6.0, 13),
                               2000, 13, measure=measure)
        assert (np.diff(curve.estimate) <= 0).all()

    def test_at_zero_matches_survivor_mass(self, toy):
        model, target, measure = toy
        curve = survival_curve(model, target, [0.0, 1.0], 20_000, 15,
                               measure=measure)
        probs = measure.marginal.probabilities
        mass = probs[:2].sum()  # window {0}, threshold 1
        assert abs(curve.estimate[0] - mass) <= \
            3 * math.sqrt(mass * (1 - mass) / 20_000)

    def test_line_oracle_pointwise(self, tasep_line):
        model, target, measure = tasep_line
        grid = np.arange(0.5, 8.01, 0.5)
        curve = survival_curve(model, target, grid, 20_000, seed=21,
                               measure=measure)
        oracle = tasep_line_survival(0.5, grid)
        # includes the quoted value at t = 1: 0.5 exp(-0.5) = 0.30327
        assert oracle[1] == pytest.approx(0.5 * math.exp(-0.5))
        se = np.sqrt(oracle * (1 - oracle) / 20_000)
        assert (np.abs(curve.estimate - oracle) <= 3 * se + 1e-12).all()


class TestSupermultiplicativity:
    def test_monte_carlo_on_torus(self, toy):
        model, target, measure = toy
        rep = supermultiplicativity_check(model, target, measure, 1.0, 2.0,
                                          20_000, seed=31)
        assert rep.passed()

    def test_zero_time_trivial(self, toy):
        model, target, measure = toy
        rep = supermultiplicativity_check(model, target, measure, 0.0, 2.0,
                                          5_000, seed=33)
        # P(tau > t) >= P(tau > t) P(tau > 0) holds with slack
        assert rep.slack >= -1e-12


class TestStationarity:
    def test_occupancy_law_preserved_at_time_five(self):
        lattice = Lattice((12,), "torus")
        model = Model(lattice, JumpKernel(np.array([[1], [-1]]),
                                          np.array([0.7, 0.3])), G_LINEAR)
        measure = ProductMeasure.at_density(0.6, G_LINEAR)
        rep = stationarity_check(model, measure, 5.0, 4000, seed=41)
        assert rep.passed, (rep.chi2, rep.threshold)


class TestWalkHitting:
    def test_directed_walk_left_of_trap(self):
        lattice = Lattice((8,), "blocked")
        kernel = JumpKernel(np.array([[1]]), np.array([1.0]))
        assert rw_hitting(lattice, kernel, 5, [6]) == pytest.approx(1.0)

    def test_directed_walk_right_of_trap(self):
        lattice = Lattice((8,), "blocked")
        kernel = JumpKernel(np.array([[1]]), np.array([1.0]))
        assert rw_hitting(lattice, kernel, 7, [6]) == pytest.approx(0.0)

    def test_three_dimensional_two_method_agreement(self):
        kernel = JumpKernel(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
                            np.array([0.5, 0.25, 0.25]))
        solve = rw_hitting_free(kernel, [-2, 0, 0], [[0, 0, 0]])
        mc, se = rw_hitting_mc(kernel, [-2, 0, 0], [[0, 0, 0]],
                               1_000_000, seed=55)
        # only the double +x step reaches the trap: exactly 1/4
        assert solve == pytest.approx(0.25, abs=1e-10)
        assert abs(mc - solve) <= 3 * se

    def test_horizon_mode_matches_poisson_path(self):
        # one forced direction: the hitting law is a unit-rate Poisson
        # counting process reaching distance 2
        lattice = Lattice((8,), "blocked")
        kernel = JumpKernel(np.array([[1]]), np.array([1.0]))
        p = rw_hitting(lattice, kernel, 3, [5], horizon=1.5, delta=1.0)
        assert p == pytest.approx(1.0 - gamma_tail(2, 1.5), abs=1e-10)


class TestSecondClass:
    def test_unreachable_window_gives_zero_gap(self):
        lattice = Lattice((12,), "blocked")
        model = Model(lattice, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        target = TargetSet(np.array([8]), 0)
        eta0 = Configuration([1, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0])
        rep = second_class_escape(model, target, eta0, 10, [1.0, 2.0],
                                  1000, seed=61)
        assert rep.walk_hit_probability == pytest.approx(0.0)
        assert rep.epsilon_bound == pytest.approx(1.0)
        assert (rep.gap == 0).all()
        assert rep.order_violations == 0

    def test_gap_bounded_by_walk_hitting(self, toy):
        model, target, _ = toy
        rep = second_class_escape(model, target, Configuration([1, 1, 0]), 1,
                                  [0.5, 1.0, 2.0], 3000, seed=63)
        assert rep.order_violations == 0
        assert rep.bound_ok()

    def test_exact_gap_from_sector_pair(self, toy):
        """Coupling estimate against two exact semigroup computations."""
        from qslab.spectral import (FixedTotal, build_killed_generator,
                                    enumerate_states, exact_survival)
        model, target, _ = toy
        rep = second_class_escape(model, target, Configuration([1, 1, 0]), 1,
                                  [0.5, 1.0, 2.0], 6000, seed=65)
        gaps = []
        for m, occ0 in ((2, [1, 1, 0]), (3, [1, 2, 0])):
            space = enumerate_states(model.lattice, FixedTotal(m))
            kg = build_killed_generator(space, model, target)
            e = np.zeros(kg.dim)
            e[list(kg.ac_indices).index(space.index_of(occ0))] = 1.0
            gaps.append(exact_survival(kg, e, [0.5, 1.0, 2.0]))
        exact_gap = gaps[0] - gaps[1]
        assert (np.abs(rep.gap - exact_gap) <= 3 * rep.gap_stderr + 1e-9).all()


class TestSigmaExit:
    def test_short_horizon_probability_one(self, toy):
        model, target, measure = toy
        rep = sigma_exit(model, target, measure, 1e-9, 400, seed=71)
        assert rep.estimate == pytest.approx(1.0)
        assert rep.lower_bound == pytest.approx(1.0, abs=1e-6)

    def test_vacuum_never_enters(self, toy):
        model, target, _ = toy
        vacuum = ProductMeasure.at_density(0.0, model.rates)
        rep = sigma_exit(model, target, vacuum, 1.0, 200, seed=73)
        assert rep.estimate == 1.0

    def test_bound_holds_on_ring(self):
        lattice = Lattice((32,), "torus")
        model = Model(lattice, JumpKernel(np.array([[1]]), np.array([1.0])),
                      RateFunction.exclusion())
        target = TargetSet(np.array([0]), 0)
        measure = ProductMeasure.at_density(0.5, model.rates)
        rep = sigma_exit(model, target, measure, 0.5, 1500, seed=75)
        assert 0 < rep.lower_bound < 1
        assert rep.passed()
