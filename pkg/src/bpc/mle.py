"""Maximum-likelihood fitting of the BPC distribution.

The score equations rearrange into three fixed-point updates,

    lambda1 <- t1 * J / (n * J(l1, l2*l3, l3))
    lambda2 <- t2 * J / (n * J(l1*l3, l2, l3))
    lambda3 <- t3 * J / (n * l1 * l2 * J(l1*l3, l2*l3, l3))

which are applied cyclically, each with the freshest values, until no
coordinate moves by more than ``epsilon``.  Standard errors come from the
inverse of the observed information matrix; a parametric bootstrap is the
fallback when that inverse has a non-positive diagonal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy.special import gammaln
from scipy.stats import norm

from bpc.sampling import CountPairSample, SampleConfig, make_rng, sample_exact
from bpc.series import (
    DEFAULT_CONTROL,
    LambdaParams,
    SeriesControl,
    SeriesError,
    _log_j,
    log_j_derivatives_raw,
    log_j_raw,
)


class DegenerateDataError(ValueError):
    """The sufficient statistics put the MLE on the edge of the parameter space."""


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class SufficientStats:
    n: int
    t1: int
    t2: int
    t3: int
    # sum of log x_i! + log y_i!; parameter-free, zero when unknown
    log_factorial: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if min(self.t1, self.t2, self.t3) < 0:
            raise ValueError("sufficient statistics must be non-negative")


@dataclass(frozen=True)
class MleControl:
    init: Optional[LambdaParams] = None
    epsilon: float = 1e-6
    max_iter: int = 10_000
    safeguard: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class FitReport:
    estimate: LambdaParams
    covariance: Optional[np.ndarray]
    wald_intervals: Optional[np.ndarray]
    wald_clipped: Optional[np.ndarray]
    iterations: int
    converged: bool
    log_likelihood: float
    negative_variance_flag: bool
    boundary_active: bool
    tau: float = 0.05
    notes: list = field(default_factory=list)

    @property
    def standard_errors(self) -> Optional[np.ndarray]:
        if self.covariance is None or self.negative_variance_flag:
            return None
        return np.sqrt(np.diag(self.covariance))


@dataclass
class BootstrapResult:
    intervals: np.ndarray
    variances: np.ndarray
    estimates: np.ndarray
    n_dropped: int


def sufficient_stats(sample: CountPairSample) -> SufficientStats:
    if len(sample) == 0:
        raise ValueError("sample is empty")
    x, y = sample.x, sample.y
    return SufficientStats(
        n=len(sample),
        t1=int(x.sum()),
        t2=int(y.sum()),
        t3=int((x * y).sum()),
        log_factorial=float(gammaln(x + 1.0).sum() + gammaln(y + 1.0).sum()),
    )


def log_likelihood(params: LambdaParams, stats: SufficientStats,
                   factorial_term: Optional[float] = None,
                   ctrl: Optional[SeriesControl] = None) -> float:
    if factorial_term is None:
        factorial_term = stats.log_factorial
    a, b, c = params.lambda1, params.lambda2, params.lambda3
    out = -stats.n * log_j_raw(a, b, c, ctrl) + stats.t1 * math.log(a) + stats.t2 * math.log(b)
    if stats.t3:
        out += stats.t3 * math.log(c)
    return out - factorial_term


def default_init(stats: SufficientStats) -> LambdaParams:
    xbar = stats.t1 / stats.n
    ybar = stats.t2 / stats.n
    l3 = min(1.0, max(0.05, stats.t3 / (stats.n * xbar * ybar)))
    return LambdaParams(xbar, ybar, l3)


@njit(cache=True)
def _loglik(a, b, c, lj, n, t1, t2, t3):
    return -n * lj + t1 * math.log(a) + t2 * math.log(b) + t3 * math.log(c)


@njit(cache=True)
def _sweep(a, b, c, n, t1, t2, t3, rel_tol, max_terms, safeguard):
    lam = np.array([a, b, c])
    lj = _log_j(a, b, c, rel_tol, max_terms)
    for k in range(3):
        a, b, c = lam[0], lam[1], lam[2]
        if k == 0:
            target = t1 / n * math.exp(lj - _log_j(a, b * c, c, rel_tol, max_terms))
        elif k == 1:
            target = t2 / n * math.exp(lj - _log_j(a * c, b, c, rel_tol, max_terms))
        else:
            target = min(1.0, t3 / (n * a * b)
                         * math.exp(lj - _log_j(a * c, b * c, c, rel_tol, max_terms)))
        if not safeguard:
            lam[k] = target
            lj = _log_j(lam[0], lam[1], lam[2], rel_tol, max_terms)
            continue
        # halve the log-scale step until the likelihood does not drop
        ll_old = _loglik(a, b, c, lj, n, t1, t2, t3)
        step = math.log(target / lam[k])
        current = lam[k]
        for _ in range(60):
            lam[k] = current * math.exp(step)
            new_lj = _log_j(lam[0], lam[1], lam[2], rel_tol, max_terms)
            if _loglik(lam[0], lam[1], lam[2], new_lj, n, t1, t2, t3) >= ll_old:
                lj = new_lj
                break
            step *= 0.5
        else:
            lam[k] = current
    return lam[0], lam[1], lam[2]


@njit(cache=True)
def _iterate(a, b, c, n, t1, t2, t3, eps, max_iter, rel_tol, max_terms, safeguard):
    for it in range(1, max_iter + 1):
        na, nb, nc = _sweep(a, b, c, n, t1, t2, t3, rel_tol, max_terms, safeguard)
        if not (math.isfinite(na) and math.isfinite(nb) and math.isfinite(nc)):
            return a, b, c, it, -1
        step = max(abs(na - a), abs(nb - b), abs(nc - c))
        a, b, c = na, nb, nc
        if step < eps:
            return a, b, c, it, 1
    return a, b, c, max_iter, 0


def fixed_point_sweep(params: LambdaParams, stats: SufficientStats,
                      ctrl: Optional[SeriesControl] = None,
                      safeguard: bool = True) -> LambdaParams:
    """One cyclic pass of the three updates, each using the freshest values.

    The undamped updates can overshoot and settle into a 2-cycle.  With
    ``safeguard`` on, a coordinate update that would lower the
    log-likelihood has its log-scale step halved until it does not; the
    log-likelihood is concave in log(lambda), so this always succeeds.
    """
    ctrl = ctrl or DEFAULT_CONTROL
    out = _sweep(params.lambda1, params.lambda2, params.lambda3, float(stats.n),
                 float(stats.t1), float(stats.t2), float(stats.t3),
                 ctrl.rel_tol, ctrl.max_terms, safeguard)
    return LambdaParams(*out)


def _check_degenerate(stats: SufficientStats):
    if stats.t1 == 0 or stats.t2 == 0:
        raise DegenerateDataError("t1 and t2 must both be positive (all-zero margin)")
    if stats.t3 == 0:
        raise DegenerateDataError("t3 = 0: the likelihood increases as lambda3 -> 0")


def mle_fixed_point(stats: SufficientStats, control: Optional[MleControl] = None,
                    ctrl: Optional[SeriesControl] = None, tau: float = 0.05) -> FitReport:
    control = control or MleControl()
    ctrl = ctrl or DEFAULT_CONTROL
    _check_degenerate(stats)
    init = control.init or default_init(stats)
    a, b, c, iters, status = _iterate(
        init.lambda1, init.lambda2, init.lambda3, float(stats.n),
        float(stats.t1), float(stats.t2), float(stats.t3),
        control.epsilon, control.max_iter, ctrl.rel_tol, ctrl.max_terms, control.safeguard)
    if status < 0:
        raise SeriesError("fixed-point update produced a non-finite value")
    estimate = LambdaParams(a, b, c)
    report = FitReport(
        estimate=estimate,
        covariance=None,
        wald_intervals=None,
        wald_clipped=None,
        iterations=int(iters),
        converged=bool(status == 1),
        log_likelihood=log_likelihood(estimate, stats, ctrl=ctrl),
        negative_variance_flag=False,
        boundary_active=(c >= 1.0),
        tau=tau,
    )
    if report.boundary_active:
        report.notes.append("lambda3 clamp at 1 active at exit")
    if not report.converged:
        report.notes.append(f"no convergence within {control.max_iter} sweeps")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryWarning)
        fim = observed_fim(estimate, stats, ctrl)
    try:
        cov = np.linalg.inv(fim)
    except np.linalg.LinAlgError:
        cov = None
    report.covariance = cov
    if cov is None or np.any(np.diag(cov) <= 0):
        report.negative_variance_flag = True
        report.notes.append("non-positive asymptotic variance; use bootstrap_ci")
    else:
        report.wald_intervals, report.wald_clipped = wald_intervals(report, tau)
    return report


class BoundaryWarning(UserWarning):
    pass


def observed_fim(params: LambdaParams, stats: SufficientStats,
                 ctrl: Optional[SeriesControl] = None, check: bool = False) -> np.ndarray:
    """Negative Hessian of the log-likelihood at ``params``.

    With ``check=True`` the analytic matrix is compared against central
    finite differences of ``log_likelihood`` and a warning is raised when
    they disagree by more than 1e-5 relative.
    """
    a, b, c = params.lambda1, params.lambda2, params.lambda3
    if c >= 1.0:
        warnings.warn("lambda3 = 1 is a boundary point; Wald theory does not apply",
                      BoundaryWarning, stacklevel=2)
    _, _, hess = log_j_derivatives_raw(a, b, c, ctrl)
    lam = np.array([a, b, c])
    t = np.array([stats.t1, stats.t2, stats.t3], dtype=float)
    fim = stats.n * hess + np.diag(t / lam ** 2)
    fim = 0.5 * (fim + fim.T)
    if check:
        fd = -finite_difference_hessian(lambda v: log_likelihood(LambdaParams(*v), stats, 0.0, ctrl), lam)
        scale = np.abs(fim).max()
        if np.abs(fd - fim).max() > 1e-5 * scale:
            warnings.warn("analytic observed information disagrees with finite differences")
    return fim


def finite_difference_hessian(f, x, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel_step * np.maximum(np.abs(x), 1e-3)
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def normal_multiplier(tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return float(norm.ppf(1.0 - tau / 2.0))


def _clip(intervals: np.ndarray) -> np.ndarray:
    out = intervals.copy()
    out[:2, 0] = np.maximum(out[:2, 0], 0.0)
    out[2] = np.clip(out[2], np.nextafter(0.0, 1.0), 1.0)
    return out


def wald_intervals(fit: FitReport, tau: float = 0.05):
    """Raw and clipped ``estimate +- z * se`` intervals, each of shape (3, 2)."""
    if fit.covariance is None:
        raise ValueError("fit has no covariance matrix")
    var = np.diag(fit.covariance)
    if np.any(var <= 0):
        raise ValueError("covariance has a non-positive diagonal; intervals undefined")
    half = normal_multiplier(tau) * np.sqrt(var)
    est = fit.estimate.as_array()
    raw = np.column_stack([est - half, est + half])
    return raw, _clip(raw)


def bootstrap_ci(estimate: LambdaParams, n: int, B: int = 200, tau: float = 0.05,
                 seed: int = 0, ctrl: Optional[SeriesControl] = None,
                 control: Optional[MleControl] = None,
                 rng: Optional[np.random.Generator] = None) -> BootstrapResult:
    """Parametric bootstrap intervals ``estimate +- z * bootstrap sd``."""
    if B < 50:
        raise ValueError("B must be at least 50")
    control = control or MleControl()
    rng = make_rng(seed) if rng is None else rng
    refit = MleControl(init=estimate, epsilon=control.epsilon, max_iter=control.max_iter,
                       safeguard=control.safeguard)
    cfg = SampleConfig(n=n)
    fits = []
    dropped = 0
    for _ in range(B):
        stats = sufficient_stats(sample_exact(estimate, cfg, ctrl, rng=rng))
        try:
            _check_degenerate(stats)
            a, b, c, _, status = _iterate(
                estimate.lambda1, estimate.lambda2, estimate.lambda3, float(stats.n),
                float(stats.t1), float(stats.t2), float(stats.t3),
                refit.epsilon, refit.max_iter, (ctrl or DEFAULT_CONTROL).rel_tol,
                (ctrl or DEFAULT_CONTROL).max_terms, refit.safeguard)
        except DegenerateDataError:
            dropped += 1
            continue
        if status != 1:
            dropped += 1
            continue
        fits.append((a, b, c))
    if dropped > 0.2 * B:
        raise BootstrapError(f"{dropped} of {B} bootstrap refits failed")
    est = np.array(fits)
    variances = est.var(axis=0, ddof=1)
    half = normal_multiplier(tau) * np.sqrt(variances)
    centre = estimate.as_array()
    return BootstrapResult(np.column_stack([centre - half, centre + half]), variances, est, dropped)
