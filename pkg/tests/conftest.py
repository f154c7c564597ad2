"""Shared fixtures: the small models every oracle-backed test runs against."""

import numpy as np
import pytest

from qslab.measures import ProductMeasure
from qslab.model import (Configuration, JumpKernel, Lattice, Model,
                         RateFunction, TargetSet)
from qslab.spectral import (FixedTotal, MaxTotal, absorbing_core,
                            build_killed_generator, enumerate_states,
                            principal_decay, product_vector, restrict_to_core)


def g_linear(k: int) -> float:
    return float(k)


def g_flat(k: int) -> float:
    return 1.0 if k >= 1 else 0.0


@pytest.fixture(scope="session")
def toy():
    """Asymmetric zero-range ring: 3 sites, g(k) = k, drift 0.4, window {0}
    with threshold 1.  Small enough for exact sector enumeration."""
    lattice = Lattice((3,), "torus")
    kernel = JumpKernel(np.array([[1], [-1]]), np.array([0.7, 0.3]))
    rates = RateFunction.zero_range(g_linear, label="g(k)=k")
    model = Model(lattice, kernel, rates)
    target = TargetSet(np.array([0]), 1)
    measure = ProductMeasure.at_density(0.5, rates)
    return model, target, measure


@pytest.fixture(scope="session")
def toy_spectral(toy):
    """Exact machinery for the toy: sector-union space to 20 particles, the
    killed generator, its almost-surely-absorbed core, the stationary vector
    and the principal pair (non-defective, residuals at solver precision)."""
    model, target, measure = toy
    space = enumerate_states(model.lattice, MaxTotal(20))
    kg = build_killed_generator(space, model, target)
    core = restrict_to_core(kg)
    nu_full = product_vector(space, measure.marginal)
    nu_core = nu_full[core.ac_indices]
    principal = principal_decay(core)
    return {
        "space": space,
        "kg": kg,
        "core": core,
        "nu_full": nu_full,
        "nu_core": nu_core,
        "principal": principal,
        "occ_core": space.occupancies[core.ac_indices],
    }


@pytest.fixture(scope="session")
def toy_qsd_sector(toy):
    """The slowest live sector (two particles) carrying the toy's QSD."""
    model, target, _ = toy
    space = enumerate_states(model.lattice, FixedTotal(2))
    kg = build_killed_generator(space, model, target)
    res = principal_decay(kg)
    return space, kg, res


@pytest.fixture(scope="session")
def tasep_line():
    """Blocked 65-site line feeding the trap at the right edge."""
    lattice = Lattice((65,), "blocked")
    kernel = JumpKernel(np.array([[1]]), np.array([1.0]))
    rates = RateFunction.exclusion()
    model = Model(lattice, kernel, rates)
    target = TargetSet(np.array([64]), 0)
    measure = ProductMeasure.at_density(0.5, rates)
    return model, target, measure


@pytest.fixture(scope="session")
def excl_ring():
    """Asymmetric exclusion on an 8-ring; exact Bernoulli stationarity."""
    lattice = Lattice((8,), "torus")
    kernel = JumpKernel(np.array([[1], [-1]]), np.array([0.7, 0.3]))
    rates = RateFunction.exclusion()
    model = Model(lattice, kernel, rates)
    target = TargetSet(np.array([0, 1]), 1)
    measure = ProductMeasure.at_density(0.5, rates)
    space = enumerate_states(lattice, MaxTotal(8), site_cap=1)
    kg = build_killed_generator(space, model, target)
    return model, target, measure, space, kg


def ratio_site_means(batch, n_sites, weight_fn=None):
    """Independent ratio-estimator oracle for occupation-map marginals.

    Groups sojourn mass per trajectory (i.i.d. units) so the standard error
    is honest; `weight_fn(starts, ends)` defaults to plain durations."""
    num = []
    den = []
    for i in np.flatnonzero(batch.hit):
        traj = batch.trajectory(i)
        if traj.n_events == 0:
            continue
        ends = traj.times
        starts = np.concatenate([[0.0], ends[:-1]])
        w = (ends - starts) if weight_fn is None else weight_fn(starts, ends)
        occ = traj.initial.copy()
        acc = np.zeros(n_sites)
        for k in range(traj.n_events):
            acc += w[k] * occ
            occ[traj.sources[k]] -= 1
            occ[traj.destinations[k]] += 1
        num.append(acc)
        den.append(w.sum())
    num = np.array(num)
    den = np.array(den)
    est = num.sum(axis=0) / den.sum()
    resid = num - den[:, None] * est
    se = np.sqrt((resid**2).sum(axis=0)) / den.sum()
    return est, se
