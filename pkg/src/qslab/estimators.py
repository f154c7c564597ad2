"""Statistical reduction: decay-rate fits, exponentiality diagnostics,
ensemble distances.  Pure functions over immutable sample arrays."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2 as chi2_dist
from scipy.stats import kstest

from . import rng as rngmod

REPORT_SCHEMA_VERSION = 1


class FitError(ValueError):
    """Survival curve unusable for a decay fit."""


# ---------------------------------------------------------------------------
# survival curves
# ---------------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    """P(tau > t) on a grid.  Monte Carlo curves carry counts and the raw
    hitting times; synthetic/oracle curves may carry log-survival directly
    (needed far in the tail where the probability underflows)."""

    t: np.ndarray
    estimate: np.ndarray | None = None
    n_alive: np.ndarray | None = None
    n_total: int | None = None
    censored_fraction: float = 0.0
    taus: np.ndarray | None = None
    hit: np.ndarray | None = None
    log_estimate: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.estimate is None and self.log_estimate is None:
            raise ValueError("curve needs estimate or log_estimate")
        if self.estimate is not None:
            self.estimate = np.asarray(self.estimate, dtype=np.float64)
        if self.log_estimate is None:
            with np.errstate(divide="ignore"):
                self.log_estimate = np.log(self.estimate)
        else:
            self.log_estimate = np.asarray(self.log_estimate, dtype=np.float64)
            if self.estimate is None:
                self.estimate = np.exp(self.log_estimate)

    @staticmethod
    def from_log(t: Sequence[float], log_p: Sequence[float]) -> "SurvivalCurve":
        return SurvivalCurve(t=np.asarray(t), log_estimate=np.asarray(log_p))

    def stderr(self) -> np.ndarray:
        """Binomial standard error per grid point (zero for exact curves)."""
        if self.n_total is None:
            return np.zeros_like(self.t)
        p = self.estimate
        return np.sqrt(np.clip(p * (1 - p), 0.0, None) / self.n_total)

    def ci(self, n_sigma: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
        se = self.stderr()
        return (np.clip(self.estimate - n_sigma * se, 0.0, 1.0),
                np.clip(self.estimate + n_sigma * se, 0.0, 1.0))

    def is_nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.log_estimate) <= 1e-12))


def synthetic_exponential_curve(c: float, lam: float,
                                t: Sequence[float]) -> SurvivalCurve:
    t = np.asarray(t, dtype=np.float64)
    return SurvivalCurve.from_log(t, math.log(c) - lam * t)


# ---------------------------------------------------------------------------
# decay-rate fit
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    lambda_hat: float
    stderr: float
    window: tuple[float, float]
    r_squared: float
    n_alive_at_hi: int | None
    intercept: float

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "lambda_hat": self.lambda_hat,
            "stderr": self.stderr,
            "window": list(self.window),
            "r_squared": self.r_squared,
            "n_alive_at_hi": self.n_alive_at_hi,
            "intercept": self.intercept,
        }


def _wls_slope(t, y, w):
    W = w.sum()
    tbar = (w * t).sum() / W
    ybar = (w * y).sum() / W
    stt = (w * (t - tbar) ** 2).sum()
    slope = (w * (t - tbar) * (y - ybar)).sum() / stt
    inter = ybar - slope * tbar
    resid = y - (inter + slope * t)
    ss_res = (w * resid**2).sum()
    ss_tot = (w * (y - ybar) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, inter, r2, ss_res / max(1, t.size - 2)


def fit_decay(curve: SurvivalCurve, n_alive_floor: int = 100,
              min_points: int = 5, window_start: float | None = None,
              n_boot: int = 200, seed: int = 0) -> DecayFit:
    """Weighted least squares of log P(tau > t) against t.

    Usable points need positive survival and (for Monte Carlo curves) an
    alive count above the floor.  The window drops early points one at a
    time and keeps the suffix with the smallest residual mean square, which
    discards early-time polynomial corrections; `window_start` overrides the
    automatic choice.  The standard error comes from bootstrap resampling of
    the hitting times when they are available, else from the WLS covariance.
    """
    log_p = curve.log_estimate
    usable = np.isfinite(log_p)
    if curve.n_alive is not None:
        usable &= curve.n_alive >= n_alive_floor
    if window_start is not None:
        usable &= curve.t >= window_start
    idx = np.flatnonzero(usable)
    if idx.size < min_points:
        raise FitError(
            f"only {idx.size} usable grid points (need {min_points}); "
            "extend the grid, add trajectories, or lower the floor")
    t = curve.t[idx]
    y = log_p[idx]
    if curve.n_total is not None and curve.n_alive is not None:
        p = curve.estimate[idx]
        w = curve.n_total * p / np.clip(1 - p, 1e-12, None)  # 1/var(log p̂)
    else:
        w = np.ones_like(t)

    best = None
    last_start = idx.size - min_points if window_start is None else 0
    for start in range(0, last_start + 1):
        slope, inter, r2, rms = _wls_slope(t[start:], y[start:], w[start:])
        if best is None or rms < best[0]:
            best = (rms, start, slope, inter, r2)
    _, start, slope, inter, r2 = best
    tw, yw, ww = t[start:], y[start:], w[start:]

    if curve.taus is not None and curve.n_total:
        boot = rngmod.stream(seed, rngmod.BOOTSTRAP, 1)
        taus = curve.taus
        hit = curve.hit if curve.hit is not None else np.ones_like(taus, bool)
        n = taus.size
        slopes = []
        for _ in range(n_boot):
            pick = boot.integers(0, n, n)
            ts, hs = taus[pick], hit[pick]
            alive = (ts[None, :] > tw[:, None]) | (~hs)[None, :]
            pb = alive.mean(axis=1)
            if (pb <= 0).any():
                continue
            sb, *_ = _wls_slope(tw, np.log(pb),
                                n * pb / np.clip(1 - pb, 1e-12, None))
            slopes.append(sb)
        se = float(np.std(slopes, ddof=1)) if len(slopes) > 1 else float("nan")
    else:
        _, _, _, rms = _wls_slope(tw, yw, ww)
        W = ww.sum()
        tbar = (ww * tw).sum() / W
        stt = (ww * (tw - tbar) ** 2).sum()
        se = float(np.sqrt(rms / stt)) if tw.size > 2 else 0.0

    n_hi = int(curve.n_alive[idx][-1]) if curve.n_alive is not None else None
    return DecayFit(lambda_hat=float(-slope), stderr=se,
                    window=(float(tw[0]), float(tw[-1])),
                    r_squared=float(r2), n_alive_at_hi=n_hi,
                    intercept=float(inter))


# ---------------------------------------------------------------------------
# exponentiality diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MomentRow:
    k: int
    empirical: float
    theoretical: float     # k! / lambda^k
    ratio: float
    ratio_ci: tuple[float, float]


@dataclass
class ExponentialityReport:
    lambda_hat: float
    moments: list[MomentRow]
    ks_statistic: float
    ks_threshold: float
    atom_at_zero: float
    n_samples: int

    @property
    def exponential_ok(self) -> bool:
        return self.ks_statistic <= self.ks_threshold

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "lambda_hat": self.lambda_hat,
            "ks_statistic": self.ks_statistic,
            "ks_threshold": self.ks_threshold,
            "exponential_ok": self.exponential_ok,
            "atom_at_zero": self.atom_at_zero,
            "n_samples": self.n_samples,
            "moments": [
                {"k": m.k, "empirical": m.empirical,
                 "theoretical": m.theoretical, "ratio": m.ratio,
                 "ratio_ci": list(m.ratio_ci)} for m in self.moments
            ],
        }


def exponentiality_report(taus: np.ndarray, lambda_hat: float,
                          k_max: int = 4, alpha: float = 0.05,
                          n_boot: int = 200, seed: int = 0) -> ExponentialityReport:
    """Compare hitting-time samples against the exponential law of the fitted
    rate: moment ratios E[tau^k] / (k! / lambda^k) with bootstrap CIs and the
    Kolmogorov-Smirnov distance at a calibrated threshold (simple hypothesis:
    lambda_hat is treated as given)."""
    taus = np.asarray(taus, dtype=np.float64)
    n = taus.size
    boot = rngmod.stream(seed, rngmod.BOOTSTRAP, 2)
    moments = []
    logt = np.log(np.clip(taus, 1e-300, None))
    for k in range(1, k_max + 1):
        log_mk = float(logsumexp(k * logt) - math.log(n))
        theo = math.lgamma(k + 1) - k * math.log(lambda_hat)
        ratio = math.exp(log_mk - theo)
        ratios = np.empty(n_boot)
        for b in range(n_boot):
            pick = boot.integers(0, n, n)
            ratios[b] = math.exp(
                float(logsumexp(k * logt[pick]) - math.log(n)) - theo)
        lo, hi = np.quantile(ratios, [0.0015, 0.9985])  # ~3 sigma band
        moments.append(MomentRow(k, math.exp(log_mk), math.exp(theo),
                                 ratio, (float(lo), float(hi))))
    ks = kstest(taus, "expon", args=(0.0, 1.0 / lambda_hat)).statistic
    # asymptotic one-sample KS critical value at level alpha
    threshold = math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(n)
    return ExponentialityReport(
        lambda_hat=lambda_hat, moments=moments, ks_statistic=float(ks),
        ks_threshold=float(threshold),
        atom_at_zero=float(np.mean(taus == 0.0)), n_samples=n)


# ---------------------------------------------------------------------------
# ensemble comparison
# ---------------------------------------------------------------------------

@dataclass
class EnsembleDistance:
    site_chi2: dict[int, float]
    site_chi2_threshold: dict[int, float]
    window_gap: float
    window_gap_stderr: float
    ks_tau: float | None = None

    def within_null(self) -> bool:
        return all(self.site_chi2[s] <= self.site_chi2_threshold[s]
                   for s in self.site_chi2) \
            and abs(self.window_gap) <= 3.0 * max(self.window_gap_stderr, 1e-300)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "site_chi2": {str(k): v for k, v in self.site_chi2.items()},
            "site_chi2_threshold": {str(k): v for k, v in
                                    self.site_chi2_threshold.items()},
            "window_gap": self.window_gap,
            "window_gap_stderr": self.window_gap_stderr,
            "ks_tau": self.ks_tau,
        }


def ensemble_compare(ens_a, ens_b, sites: Sequence[int],
                     n_max: int = 16, alpha: float = 1e-3) -> EnsembleDistance:
    """Per-site occupancy histograms compared by chi-square with pooled bins,
    plus the gap of the window-sum means with a joint standard error."""
    site_chi2 = {}
    site_thr = {}
    na, nb = ens_a.effective_sample_size(), ens_b.effective_sample_size()
    for s in sites:
        ha = ens_a.site_histogram(s, n_max)
        hb = ens_b.site_histogram(s, n_max)
        pooled = (na * ha + nb * hb) / (na + nb)
        keep = pooled * min(na, nb) >= 5.0
        if keep.sum() < 2:
            site_chi2[int(s)] = 0.0
            site_thr[int(s)] = float("inf")
            continue
        rest_a = ha[~keep].sum()
        rest_b = hb[~keep].sum()
        pa = np.append(ha[keep], rest_a)
        pb = np.append(hb[keep], rest_b)
        pool = np.append(pooled[keep], (na * rest_a + nb * rest_b) / (na + nb))
        nz = pool > 0
        stat = float((((pa - pb) ** 2)[nz] / pool[nz]).sum()
                     * (na * nb) / (na + nb))
        dof = int(nz.sum()) - 1
        site_chi2[int(s)] = stat
        site_thr[int(s)] = float(chi2_dist.ppf(1 - alpha, max(dof, 1)))
    sites_arr = np.asarray(sites, dtype=np.int64)
    wa, sa = ens_a.expect_with_se(lambda x: x[:, sites_arr].sum(axis=1))
    wb, sb = ens_b.expect_with_se(lambda x: x[:, sites_arr].sum(axis=1))
    return EnsembleDistance(site_chi2, site_thr, wa - wb,
                            math.hypot(sa, sb))
