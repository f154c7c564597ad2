"""Lattices, jump kernels, rate families, configurations and the target event.

A model is the triple (lattice, kernel, rates); together with a TargetSet it
fully determines the killed dynamics.  Structural hypotheses on the kernel
and on the rate function are checked by `validate_model`, which returns a
report rather than raising: a model that fails a hypothesis can still be
simulated, it just loses the guarantees attached to that hypothesis.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

TORUS = "torus"
BLOCKED = "blocked"

ZERO_RANGE = "zero_range"
EXCLUSION = "exclusion"
MISANTHROPE = "misanthrope"

HYPOTHESIS_TOL = 1e-12


class ModelError(ValueError):
    """Invalid model specification."""


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Finite box in Z^d, either periodic (torus) or with blocked boundary.

    Sites are indexed row-major: site = ravel(coords, extent).  On the torus
    displacements wrap modulo the extent; in blocked mode a displacement that
    leaves the box has no destination (jump rate zero).
    """

    extent: tuple[int, ...]
    boundary: str = TORUS

    def __post_init__(self):
        if self.boundary not in (TORUS, BLOCKED):
            raise ModelError(f"unknown boundary mode {self.boundary!r}")
        if len(self.extent) == 0 or any(int(e) <= 0 for e in self.extent):
            raise ModelError(f"extent must be positive per axis, got {self.extent}")
        object.__setattr__(self, "extent", tuple(int(e) for e in self.extent))

    @property
    def dimension(self) -> int:
        return len(self.extent)

    @property
    def num_sites(self) -> int:
        return int(np.prod(self.extent))

    def coords(self, site: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(site, self.extent))

    def site(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(c) for c in coords), self.extent))

    def shift(self, site: int, offset: Sequence[int]) -> int:
        """Destination of `site + offset`, or -1 if blocked off the box."""
        c = np.unravel_index(site, self.extent)
        moved = [int(x) + int(o) for x, o in zip(c, offset)]
        if self.boundary == TORUS:
            moved = [m % e for m, e in zip(moved, self.extent)]
        else:
            for m, e in zip(moved, self.extent):
                if m < 0 or m >= e:
                    return -1
        return int(np.ravel_multi_index(tuple(moved), self.extent))

    def neighbor_table(self, offsets: np.ndarray) -> np.ndarray:
        """int64[num_sites, n_offsets]; entry -1 where the jump is blocked."""
        n = self.num_sites
        offsets = np.atleast_2d(np.asarray(offsets, dtype=np.int64))
        coords = np.stack(np.unravel_index(np.arange(n), self.extent), axis=1)
        table = np.empty((n, len(offsets)), dtype=np.int64)
        extent = np.asarray(self.extent, dtype=np.int64)
        for k, off in enumerate(offsets):
            moved = coords + off
            if self.boundary == TORUS:
                moved %= extent
                table[:, k] = np.ravel_multi_index(moved.T, self.extent)
            else:
                ok = ((moved >= 0) & (moved < extent)).all(axis=1)
                col = np.full(n, -1, dtype=np.int64)
                if ok.any():
                    col[ok] = np.ravel_multi_index(moved[ok].T, self.extent)
                table[:, k] = col
        return table

    def graph_distance(self, sources: Sequence[int], offsets: np.ndarray) -> np.ndarray:
        """Minimal number of kernel jumps needed to reach each site FROM the
        source set, following the given offsets (boundary-aware).  -1 where
        unreachable."""
        # BFS from the sources along reversed offsets gives, at each site x,
        # the minimal jump count of a path x -> sources along the offsets.
        dist = np.full(self.num_sites, -1, dtype=np.int64)
        queue = deque()
        for s in sources:
            dist[s] = 0
            queue.append(int(s))
        rev = -np.asarray(offsets)
        while queue:
            x = queue.popleft()
            for off in rev:
                y = self.shift(x, off)
                if y >= 0 and dist[y] < 0:
                    dist[y] = dist[x] + 1
                    queue.append(y)
        return dist


# ---------------------------------------------------------------------------
# jump kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JumpKernel:
    """Translation-invariant finite-range single-particle kernel.

    Stored as displacement vectors with one weight each; translation
    invariance and finite range therefore hold by construction.
    """

    offsets: np.ndarray  # int64[n_offsets, d]
    weights: np.ndarray  # float64[n_offsets]

    def __post_init__(self):
        off = np.atleast_2d(np.asarray(self.offsets, dtype=np.int64))
        w = np.asarray(self.weights, dtype=np.float64)
        if off.shape[0] != w.shape[0]:
            raise ModelError("offsets and weights length mismatch")
        if off.shape[0] == 0:
            raise ModelError("kernel needs at least one offset")
        if len({tuple(o) for o in off}) != off.shape[0]:
            raise ModelError("duplicate offsets")
        if any(not o.any() for o in off):
            raise ModelError("null offset not allowed")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "weights", w)

    @property
    def dimension(self) -> int:
        return self.offsets.shape[1]

    @property
    def range(self) -> int:
        """Kernel range R: max Chebyshev norm over supported displacements."""
        return int(np.abs(self.offsets).max())

    @property
    def drift(self) -> np.ndarray:
        return self.weights @ self.offsets

    def reversed(self) -> "JumpKernel":
        """Adjoint kernel p*(i, j) = p(j, i): negated displacements."""
        return JumpKernel(-self.offsets, self.weights.copy())

    def symmetrized_half(self) -> "JumpKernel":
        """Kernel with weights (p(o) + p(-o)) / 2, i.e. (p + p*) / 2."""
        acc: dict[tuple, float] = {}
        for o, w in zip(self.offsets, self.weights):
            acc[tuple(o)] = acc.get(tuple(o), 0.0) + w / 2.0
            acc[tuple(-o)] = acc.get(tuple(-o), 0.0) + w / 2.0
        offs = np.array(sorted(acc), dtype=np.int64)
        return JumpKernel(offs, np.array([acc[tuple(o)] for o in offs]))

    def weight_of(self, displacement: Sequence[int]) -> float:
        d = np.asarray(displacement, dtype=np.int64)
        hit = np.all(self.offsets == d, axis=1)
        return float(self.weights[hit].sum())

    def symmetrization_irreducible(self, lattice: Lattice) -> bool:
        """BFS over offsets and negated offsets reaches every torus residue."""
        probe = Lattice(lattice.extent, TORUS)
        both = np.vstack([self.offsets, -self.offsets])
        dist = probe.graph_distance([0], -both)  # reach FROM site 0
        return bool((dist >= 0).all())


# ---------------------------------------------------------------------------
# rate functions g and b
# ---------------------------------------------------------------------------

def g_identity(k: int) -> float:
    return float(k)


def g_constant(k: int) -> float:
    return 1.0 if k >= 1 else 0.0


def g_capped(cap: int) -> Callable[[int], float]:
    def g(k: int) -> float:
        return float(min(k, cap))
    return g


def g_from_table(values: Sequence[float]) -> Callable[[int], float]:
    vals = [float(v) for v in values]
    if not vals or vals[0] != 0.0:
        raise ModelError("g table must start with g(0)=0")
    def g(k: int) -> float:
        return vals[k] if k < len(vals) else vals[-1]
    return g


@dataclass(frozen=True)
class RateFunction:
    """Misanthrope rate b(n, m) with the associated one-site weight g.

    `family` picks the interpretation: zero_range uses b(n, m) = g(n),
    exclusion restricts occupancies to {0, 1}, misanthrope takes an explicit
    b.  `g_sup` is sup_k g(k) when finite (fugacity domain boundary), None
    when g is unbounded.
    """

    family: str
    g: Callable[[int], float]
    b: Callable[[int, int], float]
    g_sup: float | None = None
    occupancy_cap: int = 64
    label: str = ""

    @staticmethod
    def zero_range(g: Callable[[int], float], g_sup: float | None = None,
                   occupancy_cap: int = 64, label: str = "") -> "RateFunction":
        def b(n: int, m: int) -> float:
            return g(n)
        return RateFunction(ZERO_RANGE, g, b, g_sup, occupancy_cap, label)

    @staticmethod
    def exclusion(occupancy_cap: int = 64) -> "RateFunction":
        def b(n: int, m: int) -> float:
            return 1.0 if n >= 1 and m == 0 else 0.0
        return RateFunction(EXCLUSION, g_constant, b, None, occupancy_cap, "exclusion")

    @staticmethod
    def misanthrope(b: Callable[[int, int], float], g: Callable[[int], float],
                    g_sup: float | None = None, occupancy_cap: int = 64,
                    label: str = "") -> "RateFunction":
        return RateFunction(MISANTHROPE, g, b, g_sup, occupancy_cap, label)

    @property
    def target_dependent(self) -> bool:
        """Whether b(n, m) depends on the destination occupancy m."""
        return self.family != ZERO_RANGE

    @property
    def max_site_occupancy(self) -> int | None:
        """Hard per-site bound implied by the family (1 for exclusion)."""
        return 1 if self.family == EXCLUSION else None

    def delta(self, cap: int | None = None) -> float:
        """Lipschitz bound sup_n (b(n+1, 0) - b(n, 0)), scanned up to cap."""
        cap = self.occupancy_cap if cap is None else cap
        if self.family == EXCLUSION:
            cap = 1
        return max(self.b(n + 1, 0) - self.b(n, 0) for n in range(cap))

    def b_table(self, cap: int) -> np.ndarray:
        """Dense table b(n, m) for 0 <= n, m <= cap used by the event loop."""
        tab = np.empty((cap + 1, cap + 1), dtype=np.float64)
        for n in range(cap + 1):
            for m in range(cap + 1):
                tab[n, m] = self.b(n, m)
        if (tab < 0).any():
            raise ModelError("negative jump rate in b table")
        return tab


# ---------------------------------------------------------------------------
# configuration and target set
# ---------------------------------------------------------------------------

class Configuration:
    """Occupancy vector with a cached particle count.  Single-owner mutable."""

    __slots__ = ("occupancy", "_total")

    def __init__(self, occupancy):
        self.occupancy = np.asarray(occupancy, dtype=np.int64).copy()
        if (self.occupancy < 0).any():
            raise ModelError("negative occupancy")
        self._total = int(self.occupancy.sum())

    @property
    def total_particles(self) -> int:
        return self._total

    def copy(self) -> "Configuration":
        return Configuration(self.occupancy)

    def __eq__(self, other) -> bool:
        return isinstance(other, Configuration) and np.array_equal(
            self.occupancy, other.occupancy)

    def __repr__(self) -> str:
        return f"Configuration({self.occupancy.tolist()})"


@dataclass(frozen=True)
class TargetSet:
    """Density-fluctuation event: sum of occupancies over `sites` exceeds k."""

    sites: np.ndarray
    threshold: int

    def __post_init__(self):
        sites = np.unique(np.asarray(self.sites, dtype=np.int64))
        if sites.size == 0:
            raise ModelError("target window must be nonempty")
        if int(self.threshold) < 0:
            raise ModelError("threshold must be nonnegative")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "threshold", int(self.threshold))

    def validate_on(self, lattice: Lattice) -> None:
        if self.sites.min() < 0 or self.sites.max() >= lattice.num_sites:
            raise ModelError("target window outside the lattice")

    def window_sum(self, occupancy: np.ndarray) -> int:
        return int(np.asarray(occupancy)[self.sites].sum())

    def contains(self, occupancy: np.ndarray) -> bool:
        return self.window_sum(occupancy) > self.threshold


@dataclass(frozen=True)
class Model:
    """Lattice + kernel + rate function; immutable and shareable."""

    lattice: Lattice
    kernel: JumpKernel
    rates: RateFunction

    def __post_init__(self):
        if self.kernel.dimension != self.lattice.dimension:
            raise ModelError("kernel dimension does not match lattice")

    def reversed(self) -> "Model":
        return Model(self.lattice, self.kernel.reversed(), self.rates)


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def in_target(config: Configuration, target: TargetSet) -> bool:
    return target.contains(config.occupancy)


def apply_jump(config: Configuration, i: int, j: int,
               rates: RateFunction | None = None) -> Configuration:
    """Move one particle i -> j; total particle count is preserved."""
    occ = config.occupancy
    assert occ[i] >= 1, "no particle to move at the source site"
    if rates is not None and rates.family == EXCLUSION:
        assert occ[j] == 0, "exclusion forbids jumps onto occupied sites"
    out = config.copy()
    out.occupancy[i] -= 1
    out.occupancy[j] += 1
    return out


def jump_rate(config: Configuration, i: int, j: int, lattice: Lattice,
              kernel: JumpKernel, rates: RateFunction) -> float:
    """p(i, j) * b(eta(i), eta(j)); zero when j is not a kernel neighbor."""
    p = 0.0
    for off, w in zip(kernel.offsets, kernel.weights):
        if lattice.shift(i, off) == j:
            p += w
    if p == 0.0:
        return 0.0
    occ = config.occupancy
    return p * rates.b(int(occ[i]), int(occ[j]))


# ---------------------------------------------------------------------------
# hypothesis validation
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    witness: str = ""


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)
    delta: float = float("nan")
    drift: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "delta": self.delta,
            "drift": None if self.drift is None else list(map(float, self.drift)),
            "warnings": list(self.warnings),
            "checks": [
                {"name": c.name, "passed": c.passed, "witness": c.witness}
                for c in self.checks
            ],
        }


def _check_pairs(report, name, ranges, predicate):
    """Scan predicate over the cartesian product of ranges; witness on fail."""
    for args in np.ndindex(*[len(r) for r in ranges]):
        vals = tuple(r[a] for r, a in zip(ranges, args))
        if not predicate(*vals):
            report.checks.append(Check(
                name, False, "violated at " + str(vals)))
            return
    report.checks.append(Check(name, True))


def validate_model(lattice: Lattice, kernel: JumpKernel, rates: RateFunction,
                   occupancy_cap: int | None = None) -> ValidationReport:
    """Check every structural hypothesis and report pass/fail with witnesses.

    b and g are quantified over all of N in the definitions; they are scanned
    here on [0, occupancy_cap] (1 for the exclusion family).
    """
    rep = ValidationReport()
    cap = rates.occupancy_cap if occupancy_cap is None else occupancy_cap
    if rates.family == EXCLUSION:
        cap = 1
    b, g = rates.b, rates.g

    w = kernel.weights
    rep.checks.append(Check(
        "kernel_weights_nonnegative", bool((w >= 0).all()),
        "" if (w >= 0).all() else f"min weight {w.min()}"))
    norm = float(w.sum())
    rep.checks.append(Check(
        "kernel_normalized", abs(norm - 1.0) <= HYPOTHESIS_TOL,
        "" if abs(norm - 1.0) <= HYPOTHESIS_TOL else f"sum = {norm}"))
    rep.checks.append(Check("kernel_finite_range", True,
                            f"R = {kernel.range}"))
    irr = kernel.symmetrization_irreducible(lattice)
    rep.checks.append(Check("symmetrization_irreducible", irr))
    rep.drift = kernel.drift
    if not rep.drift.any():
        rep.warnings.append(
            "kernel drift is zero; the drift hypothesis is not satisfied "
            "(symmetric runs are still useful for spectral cross-checks)")

    occ = range(cap + 1)
    pos = range(1, cap + 1)
    _check_pairs(rep, "b_vanishes_from_empty", (occ,),
                 lambda m: b(0, m) == 0.0)
    if cap >= 1:
        _check_pairs(rep, "b_nondecreasing_in_source", (range(cap), occ),
                     lambda n, m: b(n + 1, m) >= b(n, m) - HYPOTHESIS_TOL)
        _check_pairs(rep, "b_nonincreasing_in_destination", (occ, range(cap)),
                     lambda n, m: b(n, m + 1) <= b(n, m) + HYPOTHESIS_TOL)
        _check_pairs(
            rep, "b_antisymmetric_part_state_free", (pos, pos),
            lambda n, m: abs((b(n, m) - b(m, n))
                             - (b(n, 0) - b(m, 0))) <= HYPOTHESIS_TOL)
        _check_pairs(
            rep, "b_g_compatible", (pos, pos),
            lambda n, m: abs(b(n, m - 1) * g(m)
                             - b(m, n - 1) * g(n)) <= HYPOTHESIS_TOL)

    rep.delta = rates.delta(cap)
    rep.checks.append(Check("delta_finite", math.isfinite(rep.delta),
                            f"delta = {rep.delta}"))

    gv = [g(k) for k in range(cap + 1)]
    rep.checks.append(Check("g_zero_at_zero", gv[0] == 0.0))
    if cap >= 1:
        rep.checks.append(Check(
            "g_one_at_one", abs(gv[1] - 1.0) <= HYPOTHESIS_TOL,
            f"g(1) = {gv[1]}"))
        mono = all(gv[k + 1] >= gv[k] - HYPOTHESIS_TOL for k in range(cap))
        rep.checks.append(Check("g_nondecreasing", mono))
    return rep
