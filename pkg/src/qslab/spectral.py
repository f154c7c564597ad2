"""Exact finite-state computations: enumerated state spaces, killed
generators, principal decay rates and quasi-stationary vectors, survival by
uniformization, the hitting-time sandwich, Dirichlet quotients, and the
closed-form totally-asymmetric exclusion oracles.

State spaces on the torus split into conserved particle-number sectors.
Fixed-total (canonical) sectors and their unions are exactly closed under
the dynamics and keep the truncated stationary vectors exactly invariant;
per-site-cap (grand-canonical) boxes suppress over-cap jumps and carry a
reported truncation artifact instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse import identity as sparse_identity
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.special import gammaln, logsumexp
from scipy.stats import poisson

from .estimators import SurvivalCurve, fit_decay
from .measures import Marginal
from .model import Configuration, Lattice, Model, TargetSet

DEFAULT_STATE_LIMIT = 100_000
EIGEN_TOL = 1e-12


class StateSpaceError(ValueError):
    """Enumeration refused or constraint invalid."""


class SolverError(RuntimeError):
    """Linear or eigen solve failed structurally (reducible/absorbing)."""


# ---------------------------------------------------------------------------
# constraints and enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiteCap:
    """Grand-canonical box: every site occupancy at most cap."""
    cap: int


@dataclass(frozen=True)
class FixedTotal:
    """Canonical sector: exactly `total` particles (closed on the torus)."""
    total: int


@dataclass(frozen=True)
class MaxTotal:
    """Union of canonical sectors with at most `total` particles."""
    total: int


def _count_fixed(n_sites: int, total: int, cap: int) -> int:
    # bounded compositions via one-dimensional DP
    dp = np.zeros(total + 1, dtype=object)
    dp[0] = 1
    for _ in range(n_sites):
        new = np.zeros(total + 1, dtype=object)
        for s in range(total + 1):
            if dp[s]:
                for x in range(min(cap, total - s) + 1):
                    new[s + x] += dp[s]
        dp = new
    return int(dp[total])


def count_states(n_sites: int, constraint, site_cap: int | None) -> int:
    if isinstance(constraint, SiteCap):
        cap = constraint.cap if site_cap is None else min(constraint.cap, site_cap)
        return (cap + 1) ** n_sites
    if isinstance(constraint, FixedTotal):
        cap = constraint.total if site_cap is None else site_cap
        return _count_fixed(n_sites, constraint.total, cap)
    if isinstance(constraint, MaxTotal):
        cap = constraint.total if site_cap is None else site_cap
        return sum(_count_fixed(n_sites, m, min(cap, m) if site_cap is None
                                else cap)
                   for m in range(constraint.total + 1))
    raise StateSpaceError(f"unknown constraint {constraint!r}")


def _enumerate_fixed(n_sites: int, total: int, cap: int) -> np.ndarray:
    out = []
    occ = np.zeros(n_sites, dtype=np.int64)

    def rec(pos: int, remaining: int):
        if pos == n_sites - 1:
            if remaining <= cap:
                occ[pos] = remaining
                out.append(occ.copy())
            return
        for x in range(min(cap, remaining) + 1):
            occ[pos] = x
            rec(pos + 1, remaining - x)
        occ[pos] = 0

    rec(0, total)
    return np.array(out, dtype=np.int64) if out else \
        np.empty((0, n_sites), dtype=np.int64)


class StateSpace:
    """Exhaustive, duplicate-free enumeration with a bijective index map."""

    def __init__(self, lattice: Lattice, occupancies: np.ndarray, constraint):
        self.lattice = lattice
        self.occupancies = occupancies
        self.constraint = constraint
        self._index = {tuple(row): i for i, row in enumerate(occupancies)}
        if len(self._index) != occupancies.shape[0]:
            raise StateSpaceError("duplicate states in enumeration")

    @property
    def size(self) -> int:
        return self.occupancies.shape[0]

    @property
    def n_sites(self) -> int:
        return self.occupancies.shape[1]

    def index_of(self, occupancy) -> int:
        key = tuple(int(x) for x in np.asarray(occupancy).ravel())
        got = self._index.get(key)
        if got is None:
            raise StateSpaceError(f"state {key} not in the space")
        return got

    def __contains__(self, occupancy) -> bool:
        key = tuple(int(x) for x in np.asarray(occupancy).ravel())
        return key in self._index

    def configuration(self, i: int) -> Configuration:
        return Configuration(self.occupancies[i])

    def site_means(self, weights: np.ndarray) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        return w @ self.occupancies / w.sum()


def enumerate_states(lattice: Lattice, constraint, *,
                     site_cap: int | None = None,
                     limit: int = DEFAULT_STATE_LIMIT) -> StateSpace:
    """Enumerate configurations lexicographically under the constraint.

    The predicted count is computed first; enumeration is refused when it
    exceeds the limit.  `site_cap` adds a per-site bound on top of the
    constraint (1 for the exclusion family)."""
    n_sites = lattice.num_sites
    predicted = count_states(n_sites, constraint, site_cap)
    if predicted > limit:
        raise StateSpaceError(
            f"state space would hold {predicted} states (limit {limit})")
    if isinstance(constraint, SiteCap):
        cap = constraint.cap if site_cap is None else min(constraint.cap, site_cap)
        grids = np.meshgrid(*[np.arange(cap + 1)] * n_sites, indexing="ij")
        occ = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    elif isinstance(constraint, FixedTotal):
        cap = constraint.total if site_cap is None else site_cap
        occ = _enumerate_fixed(n_sites, constraint.total, cap)
    elif isinstance(constraint, MaxTotal):
        cap = constraint.total if site_cap is None else site_cap
        parts = [_enumerate_fixed(n_sites, m, min(cap, m))
                 for m in range(constraint.total + 1)]
        occ = np.vstack([p for p in parts if p.size])
    else:
        raise StateSpaceError(f"unknown constraint {constraint!r}")
    return StateSpace(lattice, occ, constraint)


# ---------------------------------------------------------------------------
# measure vectors on a state space
# ---------------------------------------------------------------------------

def product_vector(space: StateSpace, marginal: Marginal) -> np.ndarray:
    """Product-measure weights Prod theta(eta_i) per state (mass missing from
    the space is simply absent; renormalize only when appropriate)."""
    probs = marginal.probabilities
    occ = space.occupancies
    out = np.zeros(space.size)
    inside = (occ < probs.size).all(axis=1)
    out[inside] = probs[occ[inside]].prod(axis=1)
    return out


def canonical_vector(space: StateSpace, g: Callable[[int], float]) -> np.ndarray:
    """Canonical stationary weights prop. to Prod_i 1/(g(1)...g(eta_i)),
    normalized over the space (uniform for exclusion)."""
    maxocc = int(space.occupancies.max(initial=0))
    logg = np.zeros(maxocc + 1)
    for k in range(1, maxocc + 1):
        gk = g(k)
        if gk <= 0:
            raise StateSpaceError("canonical weights need g(k) > 0 for k >= 1")
        logg[k] = logg[k - 1] + math.log(gk)
    logw = -logg[space.occupancies].sum(axis=1)
    w = np.exp(logw - logw.max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# killed generator
# ---------------------------------------------------------------------------

@dataclass
class KilledGenerator:
    """Generator restricted to the complement of the target with killing.

    `matrix` rows/cols index A^c states (`ac_indices` maps into the space);
    `killing` holds the total rate into the target per state; row sums equal
    minus the killing rate (strictly negative exactly where a jump into the
    target is possible).  `suppressed_rate` reports the total rate removed by
    per-site caps (zero on canonical sectors): the cap-sensitivity handle."""

    space: StateSpace
    target: TargetSet
    matrix: csr_matrix
    killing: np.ndarray
    ac_indices: np.ndarray
    suppressed_rate: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def restrict(self, full_vector: np.ndarray) -> np.ndarray:
        return np.asarray(full_vector)[self.ac_indices]

    def exit_rates(self) -> np.ndarray:
        return -np.asarray(self.matrix.diagonal())


def build_killed_generator(space: StateSpace, model: Model,
                           target: TargetSet) -> KilledGenerator:
    """Assemble the sparse killed generator over the A^c states."""
    target.validate_on(space.lattice)
    occ_all = space.occupancies
    in_a = occ_all[:, target.sites].sum(axis=1) > target.threshold
    ac_indices = np.flatnonzero(~in_a)
    pos = -np.ones(space.size, dtype=np.int64)
    pos[ac_indices] = np.arange(ac_indices.size)
    nbr = space.lattice.neighbor_table(model.kernel.offsets)
    weights = model.kernel.weights
    b = model.rates.b
    hard_cap = model.rates.max_site_occupancy
    if isinstance(space.constraint, SiteCap):
        site_cap = space.constraint.cap
    else:
        site_cap = None
    if hard_cap is not None:
        site_cap = hard_cap if site_cap is None else min(site_cap, hard_cap)

    rows, cols, vals = [], [], []
    diag = np.zeros(ac_indices.size)
    killing = np.zeros(ac_indices.size)
    suppressed = 0.0
    for row, si in enumerate(ac_indices):
        occ = occ_all[si]
        for i in np.flatnonzero(occ):
            ni = int(occ[i])
            for o, w in enumerate(weights):
                j = nbr[i, o]
                if j < 0:
                    continue
                rate = w * b(ni, int(occ[j]))
                if rate <= 0.0:
                    continue
                if site_cap is not None and occ[j] + 1 > site_cap \
                        and hard_cap is None:
                    # grand-canonical truncation: the capped chain drops this
                    # jump entirely; account it for sensitivity reporting
                    suppressed += rate
                    continue
                new = occ.copy()
                new[i] -= 1
                new[j] += 1
                if new[target.sites].sum() > target.threshold:
                    killing[row] += rate
                    diag[row] -= rate
                    continue
                tgt = space.index_of(new)
                rows.append(row)
                cols.append(int(pos[tgt]))
                vals.append(rate)
                diag[row] -= rate
    rows.extend(range(ac_indices.size))
    cols.extend(range(ac_indices.size))
    vals.extend(diag)
    mat = csr_matrix((vals, (rows, cols)),
                     shape=(ac_indices.size, ac_indices.size))
    return KilledGenerator(space, target, mat, killing, ac_indices,
                           suppressed)


# ---------------------------------------------------------------------------
# principal decay
# ---------------------------------------------------------------------------

@dataclass
class SpectralResult:
    decay_rate: float
    right_vector: np.ndarray | None
    qsd: np.ndarray | None                  # left vector, normalized to mass 1
    right_residual: float
    left_residual: float
    defective: bool
    strongly_connected_components: int
    fit_window: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "decay_rate": self.decay_rate,
            "right_residual": self.right_residual,
            "left_residual": self.left_residual,
            "defective": self.defective,
            "strongly_connected_components": self.strongly_connected_components,
            "fit_window": list(self.fit_window) if self.fit_window else None,
        }


def _inverse_iteration(op_solve, mat, n, max_iter, tol):
    x = np.full(n, 1.0 / math.sqrt(n))
    prev_res = np.inf
    stall = 0
    nu = 0.0
    res = np.inf
    for _ in range(max_iter):
        x = op_solve(x)
        x /= np.linalg.norm(x)
        mx = mat @ x
        nu = float(x @ mx)
        res = float(np.linalg.norm(mx - nu * x, np.inf))
        if res <= tol:
            return x, nu, res
        # defective spectra decay like 1/k, geometric convergence does not:
        # long runs of near-flat residuals are the stagnation signature
        if res > 0.98 * prev_res:
            stall += 1
            if stall > 200:
                break
        else:
            stall = 0
        prev_res = res
    return x, nu, res


def principal_decay(kg: KilledGenerator, tol: float = EIGEN_TOL,
                    max_iter: int = 5000,
                    fit_times: Sequence[float] | None = None) -> SpectralResult:
    """Smallest decay rate of the killed generator with both Perron vectors.

    Inverse power iteration on (sigma I - L) with sigma above the largest
    row magnitude; stagnating residuals signal a defective spectrum (the
    canonical ring is the canonical example) and the rate is then fitted on
    the exact survival curve instead of forced out of the iteration."""
    L = kg.matrix.tocsc()
    n = kg.dim
    if n == 0:
        raise SolverError("empty surviving state space")
    n_scc = connected_components(kg.matrix, directed=True,
                                 connection="strong", return_labels=False)
    if n == 1:
        lam = -float(L[0, 0])
        one = np.ones(1)
        return SpectralResult(lam, one, one.copy(), 0.0, 0.0, False, 1)
    # shift zero (plain inverse iteration on -L) converges at the spectral-gap
    # ratio; it fails to factor exactly when never-absorbed mass makes L
    # singular, where the conservative diagonal shift still applies
    lu = lut = None
    try:
        lu = splu((-L).tocsc())
        lut = splu((-L).T.tocsc())
        if not (np.isfinite(lu.solve(np.ones(n))).all()
                and np.isfinite(lut.solve(np.ones(n))).all()):
            lu = lut = None
    except RuntimeError:
        lu = lut = None
    if lu is None:
        sigma = 1.0 + float(np.abs(L.diagonal()).max()) * 2.0
        shifted = (sigma * sparse_identity(n, format="csc")) - L
        lu = splu(shifted)
        lut = splu(shifted.T.tocsc())
    right, nu_r, res_r = _inverse_iteration(lu.solve, L, n, max_iter, tol)
    left, nu_l, res_l = _inverse_iteration(lut.solve, L.T, n, max_iter, tol)
    ok = res_r <= 1e-10 and res_l <= 1e-10 and abs(nu_r - nu_l) <= 1e-8
    if ok:
        lam = -0.5 * (nu_r + nu_l)
        if right.sum() < 0:
            right = -right
        if left.sum() < 0:
            left = -left
        if (right < -1e-9).any() or (left < -1e-9).any():
            ok = False  # mixed signs: not a Perron pair (reducible structure)
    if ok:
        left = np.clip(left, 0.0, None)
        left /= left.sum()
        return SpectralResult(lam, right, left, res_r, res_l, False, int(n_scc))
    # defective or reducible: fit the decay of the exact survival curve; the
    # window sits far out because polynomial prefactors bias the local slope
    # by O(log t / t)
    if fit_times is None:
        unif = 1.0 / max(1.0, float(-L.diagonal().min()))
        fit_times = np.linspace(500.0, 1000.0, 9) * unif
    init = np.ones(n) / n
    logs = exact_survival(kg, init, fit_times, return_log=True)
    curve = SurvivalCurve.from_log(np.asarray(fit_times), logs)
    fit = fit_decay(curve, n_alive_floor=0, min_points=min(5, len(fit_times)))
    return SpectralResult(fit.lambda_hat, None, None, res_r, res_l, True,
                          int(n_scc), fit_window=fit.window)


# ---------------------------------------------------------------------------
# survival by uniformization
# ---------------------------------------------------------------------------

def exact_survival(kg: KilledGenerator, initial: np.ndarray,
                   ts: Sequence[float] | float, tol: float = 1e-12,
                   return_log: bool = False):
    """Mass of the killed semigroup: initial^T exp(t L) 1.

    Direct uniformization (Poisson-weighted powers of the uniformized
    matrix) for plain probabilities; for log-survival the propagation is cut
    into segments with renormalization so the value stays representable far
    beyond double underflow."""
    scalar = np.isscalar(ts)
    times = np.atleast_1d(np.asarray(ts, dtype=np.float64))
    init = np.asarray(initial, dtype=np.float64)
    if init.shape != (kg.dim,):
        raise ValueError("initial vector dimension mismatch")
    L = kg.matrix
    lam_u = float(-L.diagonal().min())
    if lam_u <= 0:  # no exit rate anywhere: nothing ever dies
        out = np.zeros(times.size) if return_log else np.ones(times.size) * init.sum()
        return (out[0] if scalar else out)
    Q = (L / lam_u) + sparse_identity(kg.dim, format="csr")

    if not return_log:
        out = np.empty(times.size)
        kmaxes = [int(poisson.ppf(1.0 - tol, lam_u * t)) + 1 if t > 0 else 0
                  for t in times]
        kmax = max(kmaxes)
        v = np.ones(kg.dim)
        inner = np.empty(kmax + 1)
        inner[0] = float(init @ v)
        for k in range(1, kmax + 1):
            v = Q.dot(v)
            inner[k] = float(init @ v)
        for j, t in enumerate(times):
            if t == 0.0:
                out[j] = inner[0]
                continue
            ks = np.arange(kmaxes[j] + 1)
            pmf = poisson.pmf(ks, lam_u * t)
            out[j] = float(pmf @ inner[:kmaxes[j] + 1])
        return out[0] if scalar else out

    # log mode: propagate mu^T exp(segment L) with renormalization
    order = np.argsort(times)
    out = np.empty(times.size)
    seg_budget = 64.0  # Poisson mean per segment
    mu = init.copy()
    log_norm = 0.0
    t_done = 0.0
    QT = Q.T.tocsr()
    for j in order:
        t = times[j]
        while t_done < t:
            step = min(t - t_done, seg_budget / lam_u)
            lam = lam_u * step
            kmax = int(poisson.ppf(1.0 - tol, lam)) + 1
            pmf = poisson.pmf(np.arange(kmax + 1), lam)
            acc = pmf[0] * mu
            v = mu
            for k in range(1, kmax + 1):
                v = QT.dot(v)
                acc = acc + pmf[k] * v
            mu = acc
            t_done += step
            norm = mu.sum()
            if norm <= 0:
                raise SolverError("survival mass vanished during propagation")
            log_norm += math.log(norm)
            mu /= norm
        out[j] = log_norm + math.log(max(mu.sum(), 1e-300))
    return out[0] if scalar else out


def survival_monotone_in_time(kg: KilledGenerator, initial: np.ndarray,
                              ts: Sequence[float]) -> bool:
    vals = exact_survival(kg, initial, sorted(ts))
    return bool(np.all(np.diff(vals) <= 1e-12))


# ---------------------------------------------------------------------------
# fixed point, sandwich, Rayleigh
# ---------------------------------------------------------------------------

def absorbing_core(kg: KilledGenerator) -> np.ndarray:
    """Mask of survivor states from which killing happens almost surely.

    On a finite lattice the conserved particle number splits the survivor
    set; sectors with too few particles to ever raise the window above the
    threshold never die (infinite hitting time, the trivial fixed point).
    The core keeps exactly the states that can reach killing and cannot leak
    into a class that cannot."""
    adj = kg.matrix.copy()
    adj.setdiag(0.0)
    adj.eliminate_zeros()
    adj = adj.tocsc()  # column access = reversed-edge adjacency
    n = kg.dim
    can_kill = kg.killing > 0
    frontier = list(np.flatnonzero(can_kill))
    while frontier:
        x = frontier.pop()
        col = adj.getcol(x)
        for y in col.nonzero()[0]:
            if not can_kill[y]:
                can_kill[y] = True
                frontier.append(int(y))
    reaches_dead = ~can_kill
    frontier = list(np.flatnonzero(reaches_dead))
    while frontier:
        x = frontier.pop()
        col = adj.getcol(x)
        for y in col.nonzero()[0]:
            if not reaches_dead[y]:
                reaches_dead[y] = True
                frontier.append(int(y))
    return can_kill & ~reaches_dead


def restrict_to_core(kg: KilledGenerator,
                     core: np.ndarray | None = None) -> KilledGenerator:
    """Killed generator restricted to the almost-surely-absorbed core (the
    core is closed under the dynamics, so rows are preserved verbatim)."""
    core = absorbing_core(kg) if core is None else np.asarray(core, bool)
    idx = np.flatnonzero(core)
    sub = kg.matrix[idx][:, idx].tocsr()
    return KilledGenerator(kg.space, kg.target, sub, kg.killing[idx],
                           kg.ac_indices[idx], kg.suppressed_rate)


def occupation_vectors(kg: KilledGenerator, initial: np.ndarray,
                       n: int) -> list[np.ndarray]:
    """Unnormalized row vectors initial (-L)^{-k} for k = 1..n (transpose
    solves); their sums are E[tau^k]/k! restricted to killed mass."""
    A = (-kg.matrix).T.tocsc()
    try:
        lu = splu(A)
    except RuntimeError as exc:
        raise SolverError(f"(-L) is singular: {exc}") from exc
    out = []
    x = np.asarray(initial, dtype=np.float64)
    for _ in range(n):
        x = lu.solve(x)
        if not np.isfinite(x).all():
            raise SolverError("(-L) solve produced non-finite values "
                              "(absorbing substructure in the survivor set)")
        out.append(x.copy())
    return out


def qsd_fixed_point_check(kg: KilledGenerator, mu: np.ndarray) -> dict:
    """L1 distance between mu and its occupation-map image, plus the
    stationarity-of-conditioning residuals over coordinate functions."""
    mu = np.asarray(mu, dtype=np.float64)
    occ_map = occupation_vectors(kg, mu, 1)[0]
    phi_mu = occ_map / occ_map.sum()
    l1 = float(np.abs(phi_mu - mu).sum())
    kill_mean = float(mu @ kg.killing)
    residuals = {}
    occs = kg.space.occupancies[kg.ac_indices]
    for site in range(kg.space.n_sites):
        phi = occs[:, site].astype(np.float64)
        lhs = float(mu @ (kg.matrix @ phi))
        residuals[site] = abs(lhs + kill_mean * float(mu @ phi))
    return {"l1_distance": l1,
            "generator_residuals": residuals,
            "expected_tau": float(occ_map.sum())}


@dataclass
class SandwichReport:
    t_grid: np.ndarray
    survival: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    entropy: float
    fg_mass: float

    def holds(self, tol: float = 1e-10) -> bool:
        return bool(np.all(self.survival <= self.upper + tol)
                    and np.all(self.survival >= self.lower - tol)
                    and self.fg_mass >= 1.0 - 1e-12)


def hitting_sandwich_check(kg: KilledGenerator, nu_ac: np.ndarray,
                           f: np.ndarray, g: np.ndarray, lam: float,
                           t_grid: Sequence[float]) -> SandwichReport:
    """Exact check of exp(-H) exp(-lam t) <= P(tau > t) <= exp(-lam t).

    nu_ac is the stationary measure restricted (unnormalized) to the
    survivor states; f and g are the left/right eigenvector densities with
    unit nu-integral.  H is the relative entropy of fg nu w.r.t. nu."""
    nu_ac = np.asarray(nu_ac, dtype=np.float64)
    fg = np.asarray(f) * np.asarray(g)
    z = float(nu_ac @ fg)
    tilted = nu_ac * fg / z
    support = tilted > 0
    entropy = float(np.sum(tilted[support] * np.log(fg[support] / z)))
    t_grid = np.asarray(sorted(t_grid), dtype=np.float64)
    surv = exact_survival(kg, nu_ac, t_grid)
    upper = np.exp(-lam * t_grid)
    lower = math.exp(-entropy) * upper
    return SandwichReport(t_grid, surv, upper, lower, entropy, z)


def normalize_density(vector: np.ndarray, nu_ac: np.ndarray) -> np.ndarray:
    """Scale a nonnegative vector on survivor states so its nu-integral is 1;
    returns the density values (constant zero mass raises)."""
    v = np.clip(np.asarray(vector, dtype=np.float64), 0.0, None)
    mass = float(nu_ac @ v)
    if mass <= 0:
        raise SolverError("vector carries no nu mass")
    return v / mass


@dataclass
class RayleighReport:
    lambda_s: float
    eigen_residual: float
    trial_quotients: list[float]
    lambda_asymmetric: float | None = None

    @property
    def classical_bound_margin(self) -> float | None:
        if self.lambda_asymmetric is None:
            return None
        return self.lambda_asymmetric - self.lambda_s


def rayleigh_quotient(model: Model, target: TargetSet, space: StateSpace,
                      nu_full: np.ndarray,
                      trial_vectors: Sequence[np.ndarray] = (),
                      lambda_asymmetric: float | None = None) -> RayleighReport:
    """Dirichlet quotients -<f, L f>_nu / <f, f>_nu for the symmetrized-half
    kernel, with the exact minimum from the symmetric eigenproblem; trial
    vectors live on the survivor states (implicitly zero on the target)."""
    sym_model = Model(model.lattice, model.kernel.symmetrized_half(),
                      model.rates)
    kgs = build_killed_generator(space, sym_model, target)
    nu = np.asarray(nu_full, dtype=np.float64)[kgs.ac_indices]
    if (nu <= 0).any():
        raise SolverError("symmetrized quotient needs positive nu on A^c")
    L = kgs.matrix.toarray()
    d = np.sqrt(nu)
    S = (d[:, None] * (-L)) / d[None, :]
    asym = float(np.abs(S - S.T).max())
    if asym > 1e-8:
        raise SolverError(
            "symmetrized-kernel chain is not reversible under the supplied "
            f"measure (asymmetry {asym:.2e}); the quotient is ill-posed")
    S = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(S)
    lam_s = float(evals[0])
    v = evecs[:, 0]
    resid = float(np.linalg.norm(S @ v - lam_s * v, np.inf))
    quotients = []
    for trial in trial_vectors:
        fvec = np.asarray(trial, dtype=np.float64)
        num = -float((nu * fvec) @ (L @ fvec))
        den = float(nu @ fvec**2)
        quotients.append(num / den)
    return RayleighReport(lam_s, resid, quotients, lambda_asymmetric)


# ---------------------------------------------------------------------------
# totally asymmetric exclusion oracles
# ---------------------------------------------------------------------------

def tasep_line_survival(rho: float, t) -> np.ndarray | float:
    """Closed-form survival (1 - rho) exp(-rho t) for the half-line gas with
    the origin as the trap."""
    if not 0.0 < rho < 1.0:
        raise ValueError("density must lie in (0, 1)")
    return (1.0 - rho) * np.exp(-rho * np.asarray(t, dtype=np.float64))


def tasep_line_decay_rate(rho: float) -> float:
    return float(rho)


def tasep_line_yaglom() -> dict:
    """Descriptor of the conditioned long-time law: an independent-site
    profile, density rho strictly left of the origin and zero elsewhere."""
    return {"left_of_origin": "bernoulli(rho)", "origin_and_right": "empty"}


@dataclass(frozen=True)
class TasepCircleOracle:
    """Closed forms for the ring of N sites with a fixed particle number, a
    single trap site at the origin, and clockwise unit jumps."""

    n_sites: int
    n_particles: int

    def __post_init__(self):
        if not 1 <= self.n_particles < self.n_sites:
            raise ValueError("particle count must lie in [1, N-1]")

    def chi(self, occupancy: np.ndarray) -> int:
        """Empty gap behind the origin: least k >= 0 with eta(-k) = 1."""
        occ = np.asarray(occupancy)
        for k in range(self.n_sites):
            if occ[(-k) % self.n_sites] == 1:
                return k
        raise ValueError("no particle on the ring")

    def survival_given_chi(self, chi: int, t) -> np.ndarray | float:
        """P(N_t < chi): Poisson tail, summed from k = 0 so that survival at
        t = 0 is one whenever the origin starts empty."""
        t = np.asarray(t, dtype=np.float64)
        ks = np.arange(max(chi, 1))
        if chi == 0:
            return np.zeros_like(t) if t.ndim else 0.0
        terms = (-t[..., None] + ks * np.log(np.clip(t[..., None], 1e-300, None))
                 - gammaln(ks + 1))
        out = np.exp(logsumexp(terms, axis=-1))
        out = np.where(t == 0.0, 1.0, out)
        return out if out.ndim else float(out)

    def survival(self, occupancy: np.ndarray, t):
        return self.survival_given_chi(self.chi(occupancy), t)

    def chi_distribution(self) -> np.ndarray:
        """Law of the gap under the uniform fixed-count measure."""
        N, m = self.n_sites, self.n_particles
        probs = np.zeros(N - m + 1)
        probs[0] = m / N
        total = math.comb(N, m)
        for c in range(1, N - m + 1):
            probs[c] = math.comb(N - c - 1, m - 1) / total
        return probs

    def mixture_survival(self, t):
        dist = self.chi_distribution()
        t = np.asarray(t, dtype=np.float64)
        acc = np.zeros_like(t, dtype=np.float64)
        for c, p in enumerate(dist):
            if p > 0 and c > 0:
                acc = acc + p * self.survival_given_chi(c, t)
        return acc if acc.ndim else float(acc)

    def log_mixture_survival(self, t) -> np.ndarray | float:
        """log P(tau > t) under the uniform mixture, stable at huge t where
        the probability underflows (survival ~ e^{-t} poly(t))."""
        dist = self.chi_distribution()
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        chunks = []
        for c, p in enumerate(dist):
            if p <= 0 or c == 0:
                continue
            ks = np.arange(c)
            chunks.append(math.log(p) - t[:, None]
                          + ks * np.log(np.clip(t[:, None], 1e-300, None))
                          - gammaln(ks + 1))
        stacked = np.concatenate(chunks, axis=1)
        out = logsumexp(stacked, axis=1)
        return out if out.size > 1 else float(out[0])

    @property
    def decay_rate(self) -> float:
        """The ring decay rate is 1 whatever the density: the finite ring
        approximation misses the half-line rates below 1."""
        return 1.0

    def yaglom_ratio(self, occupancy: np.ndarray) -> float:
        """Long-time conditioned likelihood ratio under the reversed ring
        dynamics: binom(N, m) on the fully packed block behind the origin,
        zero elsewhere."""
        N, m = self.n_sites, self.n_particles
        occ = np.asarray(occupancy)
        prod = 1.0
        for i in range(1, m + 1):
            prod *= occ[(-i) % N]
        return math.comb(N, m) * float(prod)
