"""Bayesian inference for the BPC distribution on the log scale.

With ``delta = log(lambda)`` the pmf is a three-parameter exponential
family with sufficient statistics (x, y, xy), so the conjugate prior
``K(delta)**eta0 * exp(eta . delta)`` updates to
``K(delta)**(eta0 + n) * exp((eta + t) . delta)``.  An all-zero prior is the
locally uniform prior (flat in delta1, delta2 and in delta3 <= 0), under
which the posterior mode is the MLE.

The log posterior is concave in delta: its gradient is ``T - N * E[S]`` and
its Hessian is ``-N * Cov(S)``, with N = eta0 + n, T = eta + t and
S = (X, Y, XY) under the current parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from bpc.mle import SufficientStats
from bpc.sampling import make_rng
from bpc.series import (
    DEFAULT_CONTROL,
    DeltaParams,
    LambdaParams,
    SeriesControl,
    SeriesError,
    _log_j,
    log_j_array,
    log_j_derivatives_raw,
    log_j_raw,
)


class QuadratureError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorHyper:
    eta0: float = 0.0
    eta1: float = 0.0
    eta2: float = 0.0
    eta3: float = 0.0

    def __post_init__(self):
        for name in ("eta0", "eta1", "eta2", "eta3"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")
            object.__setattr__(self, name, v)

    @property
    def is_flat(self) -> bool:
        return self.eta0 == self.eta1 == self.eta2 == self.eta3 == 0.0

    def as_tuple(self):
        return (self.eta0, self.eta1, self.eta2, self.eta3)


FLAT_PRIOR = PriorHyper()


@dataclass(frozen=True)
class Elicitation:
    """Expert confidence ``n_star`` and typical values of X, Y and XY."""

    n_star: float
    v1: float
    v2: float
    v3: float

    def __post_init__(self):
        for name in ("n_star", "v1", "v2", "v3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class QuadratureControl:
    nodes_per_dim: int = 41
    radius_sd: float = 8.0
    mcmc_steps: int = 60_000
    burn_in: int = 5_000
    step_sd: float = 1.4
    seed: int = 0

    def __post_init__(self):
        if self.nodes_per_dim < 11:
            raise ValueError("nodes_per_dim must be at least 11")
        if self.radius_sd < 4:
            raise ValueError("radius_sd must be at least 4")
        if self.mcmc_steps < 1 or self.burn_in < 0 or self.step_sd <= 0:
            raise ValueError("invalid MCMC settings")


@dataclass
class ModeResult:
    delta: DeltaParams
    iterations: int
    grad_norm: float
    boundary_active: bool
    gradient_fallback: bool = False

    @property
    def lam(self) -> LambdaParams:
        d = self.delta
        return LambdaParams(math.exp(d.delta1), math.exp(d.delta2), min(1.0, math.exp(d.delta3)))


@dataclass
class LaplaceResult:
    sd: Optional[np.ndarray]
    covariance: Optional[np.ndarray]
    boundary: bool
    positive_definite: bool


@dataclass
class QuadratureResult:
    means: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    widened: bool


@dataclass
class McmcResult:
    chain: np.ndarray  # post burn-in delta states, shape (m, 3)
    acceptance_rate: float
    means: np.ndarray  # posterior means of lambda
    mc_se: np.ndarray  # batch-means standard errors of ``means``


@dataclass
class PosteriorSummary:
    hyper: PriorHyper
    mode: LambdaParams
    mode_delta: DeltaParams
    boundary_active: bool
    laplace_sd: Optional[np.ndarray]
    means: np.ndarray
    hpd: np.ndarray
    level: float
    mcmc_means: Optional[np.ndarray] = None
    mcmc_se: Optional[np.ndarray] = None
    acceptance_rate: Optional[float] = None
    method_tags: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def agreement_z(self) -> Optional[np.ndarray]:
        if self.mcmc_means is None:
            return None
        return (self.means - self.mcmc_means) / self.mcmc_se


def elicit(e: Elicitation) -> PriorHyper:
    """Hyperparameters of an imaginary sample: (n*, n* v1, n* v2, n* v3)."""
    return PriorHyper(e.n_star, e.n_star * e.v1, e.n_star * e.v2, e.n_star * e.v3)


def _posterior_weights(hyper: PriorHyper, stats: SufficientStats):
    N = hyper.eta0 + stats.n
    T = np.array([hyper.eta1 + stats.t1, hyper.eta2 + stats.t2, hyper.eta3 + stats.t3], dtype=float)
    return N, T


def log_posterior(delta, hyper: PriorHyper, stats: SufficientStats,
                  ctrl: Optional[SeriesControl] = None) -> float:
    """Unnormalized log posterior density of delta; -inf for delta3 > 0."""
    d = delta.as_array() if isinstance(delta, DeltaParams) else np.asarray(delta, dtype=float)
    if d[2] > 0:
        return -math.inf
    N, T = _posterior_weights(hyper, stats)
    lj = log_j_raw(math.exp(d[0]), math.exp(d[1]), math.exp(d[2]), ctrl)
    return float(-N * lj + T @ d)


def log_posterior_grid(d1, d2, d3, hyper: PriorHyper, stats: SufficientStats,
                       ctrl: Optional[SeriesControl] = None) -> np.ndarray:
    N, T = _posterior_weights(hyper, stats)
    d1, d2, d3 = np.broadcast_arrays(d1, d2, d3)
    lj = log_j_array(np.exp(d1), np.exp(d2), np.exp(np.minimum(d3, 0.0)), ctrl)
    out = -N * lj + T[0] * d1 + T[1] * d2 + T[2] * d3
    return np.where(d3 > 0, -np.inf, out)


def gradient_hessian(delta, hyper: PriorHyper, stats: SufficientStats,
                     ctrl: Optional[SeriesControl] = None):
    """Value, gradient and Hessian of the log posterior in delta."""
    d = np.asarray(delta.as_array() if isinstance(delta, DeltaParams) else delta, dtype=float)
    N, T = _posterior_weights(hyper, stats)
    lam = np.exp(d)
    lj, g, h = log_j_derivatives_raw(lam[0], lam[1], min(lam[2], 1.0), ctrl)
    mean_s = lam * g
    cov_s = np.outer(lam, lam) * h + np.diag(mean_s)
    value = -N * lj + T @ d
    return value, T - N * mean_s, -N * 0.5 * (cov_s + cov_s.T)


def posterior_mode(hyper: PriorHyper, stats: SufficientStats, init: Optional[DeltaParams] = None,
                   ctrl: Optional[SeriesControl] = None, max_iter: int = 200,
                   grad_tol: float = 1e-8, step_tol: float = 1e-10) -> ModeResult:
    """Damped Newton-Raphson for the posterior mode with delta3 <= 0 enforced.

    When delta3 sits on 0 and the gradient pushes outward, the boundary is
    held and Newton runs on (delta1, delta2) only.
    """
    N, T = _posterior_weights(hyper, stats)
    if init is None:
        n_eff = max(N, 1e-12)
        m1 = max(T[0], 0.5) / n_eff
        m2 = max(T[1], 0.5) / n_eff
        init = DeltaParams(math.log(m1), math.log(m2),
                           min(0.0, math.log(max(0.05, T[2] / (n_eff * m1 * m2)))))
    d = init.as_array()
    fallback = False
    value, grad, hess = gradient_hessian(d, hyper, stats, ctrl)
    for it in range(1, max_iter + 1):
        on_boundary = d[2] >= 0.0 and grad[2] >= 0.0
        free = [0, 1] if on_boundary else [0, 1, 2]
        g = grad[free]
        H = hess[np.ix_(free, free)]
        try:
            step_free = -np.linalg.solve(H, g)
            if g @ step_free < 0:
                raise np.linalg.LinAlgError("Newton direction is not an ascent direction")
        except np.linalg.LinAlgError:
            step_free = g / max(np.abs(np.diag(H)).max(), 1.0)
            fallback = True
        step = np.zeros(3)
        step[free] = step_free
        truncated = d[2] + step[2] >= 0.0 and step[2] > 0.0
        if truncated:
            # stop at the boundary delta3 = 0
            step *= -d[2] / step[2]
        for halving in range(30):
            cand = d + step
            cand[2] = 0.0 if truncated and halving == 0 else min(cand[2], 0.0)
            c_value, c_grad, c_hess = gradient_hessian(cand, hyper, stats, ctrl)
            if c_value >= value - 1e-12 * abs(value):
                break
            step *= 0.5
        else:
            raise ConvergenceError("step halving failed to increase the log posterior")
        d, value, grad, hess = cand, c_value, c_grad, c_hess
        on_boundary = d[2] >= 0.0 and grad[2] >= 0.0
        proj = grad.copy()
        if on_boundary:
            proj[2] = 0.0
        gnorm = float(np.linalg.norm(proj))
        if gnorm < grad_tol and np.linalg.norm(step) < step_tol:
            return ModeResult(DeltaParams.from_array(d), it, gnorm, bool(on_boundary), fallback)
        if gnorm < grad_tol * 1e-3:
            return ModeResult(DeltaParams.from_array(d), it, gnorm, bool(on_boundary), fallback)
    raise ConvergenceError(f"posterior mode not found in {max_iter} Newton steps")


def laplace_sd(mode: DeltaParams, hyper: PriorHyper, stats: SufficientStats,
               ctrl: Optional[SeriesControl] = None) -> LaplaceResult:
    """Standard deviations from the inverse negative Hessian at the mode."""
    _, _, hess = gradient_hessian(mode, hyper, stats, ctrl)
    boundary = mode.delta3 >= 0.0
    try:
        np.linalg.cholesky(-hess)
    except np.linalg.LinAlgError:
        return LaplaceResult(None, None, boundary, False)
    cov = np.linalg.inv(-hess)
    return LaplaceResult(np.sqrt(np.diag(cov)), cov, boundary, True)


def _box(mode: DeltaParams, sd: np.ndarray, radius: float):
    centre = mode.as_array()
    lower = centre - radius * sd
    upper = centre + radius * sd
    upper[2] = min(upper[2], 0.0)
    return lower, upper


def _gauss_nodes(lo: float, hi: float, k: int):
    x, w = np.polynomial.legendre.leggauss(k)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def _tensor_log_integrand(hyper, stats, lower, upper, k, ctrl, ref):
    nodes, weights = zip(*(_gauss_nodes(lower[i], upper[i], k) for i in range(3)))
    D1, D2, D3 = np.meshgrid(*nodes, indexing="ij")
    lp = log_posterior_grid(D1, D2, D3, hyper, stats, ctrl) - ref
    W = weights[0][:, None, None] * weights[1][None, :, None] * weights[2][None, None, :]
    return nodes, np.exp(lp), W


def _face_excess(f: np.ndarray, upper3_is_boundary: bool) -> float:
    peak = f.max()
    faces = [f[0], f[-1], f[:, 0], f[:, -1], f[:, :, 0]]
    if not upper3_is_boundary:
        faces.append(f[:, :, -1])
    return max(face.max() for face in faces) / peak


def _mode_and_laplace(hyper, stats, ctrl, mode=None, laplace=None):
    mode = mode or posterior_mode(hyper, stats, ctrl=ctrl)
    laplace = laplace or laplace_sd(mode.delta, hyper, stats, ctrl)
    if not laplace.positive_definite:
        raise QuadratureError("Hessian at the mode is not negative definite")
    return mode, laplace


def posterior_mean_quadrature(hyper: PriorHyper, stats: SufficientStats,
                              qctrl: Optional[QuadratureControl] = None,
                              ctrl: Optional[SeriesControl] = None,
                              mode: Optional[ModeResult] = None,
                              laplace: Optional[LaplaceResult] = None) -> QuadratureResult:
    """E[lambda_i | data] by tensor Gauss-Legendre over a Laplace-scaled box."""
    qctrl = qctrl or QuadratureControl()
    mode, laplace = _mode_and_laplace(hyper, stats, ctrl, mode, laplace)
    ref = log_posterior(mode.delta, hyper, stats, ctrl)
    radius = qctrl.radius_sd
    widened = False
    for attempt in range(2):
        lower, upper = _box(mode.delta, laplace.sd, radius)
        nodes, f, W = _tensor_log_integrand(hyper, stats, lower, upper, qctrl.nodes_per_dim, ctrl, ref)
        excess = _face_excess(f, upper[2] == 0.0)
        if excess <= 1e-10:
            break
        if attempt == 0:
            warnings.warn(f"integrand at box face is {excess:.1e} of peak; widening box")
            radius *= 1.5
            widened = True
    else:
        raise QuadratureError(f"integrand at box face still {excess:.1e} of peak after widening")
    mass = f * W
    total = mass.sum()
    means = np.array([
        (mass * np.exp(nodes[0])[:, None, None]).sum(),
        (mass * np.exp(nodes[1])[None, :, None]).sum(),
        (mass * np.exp(nodes[2])[None, None, :]).sum(),
    ]) / total
    return QuadratureResult(means, lower, upper, widened)


def marginal_posterior(hyper: PriorHyper, stats: SufficientStats, axis: int,
                       grid: Sequence[float], qctrl: Optional[QuadratureControl] = None,
                       ctrl: Optional[SeriesControl] = None,
                       mode: Optional[ModeResult] = None,
                       laplace: Optional[LaplaceResult] = None) -> np.ndarray:
    """Density of delta_axis (axis in 1..3) on ``grid``, normalized by trapezoid."""
    if axis not in (1, 2, 3):
        raise ValueError("axis must be 1, 2 or 3")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be a sorted 1-d array of at least two points")
    qctrl = qctrl or QuadratureControl()
    mode, laplace = _mode_and_laplace(hyper, stats, ctrl, mode, laplace)
    lower, upper = _box(mode.delta, laplace.sd, qctrl.radius_sd)
    i = axis - 1
    others = [j for j in range(3) if j != i]
    (n1, w1), (n2, w2) = (_gauss_nodes(lower[j], upper[j], qctrl.nodes_per_dim) for j in others)
    ref = log_posterior(mode.delta, hyper, stats, ctrl)
    coords = [None, None, None]
    coords[i] = grid[:, None, None]
    coords[others[0]] = n1[None, :, None]
    coords[others[1]] = n2[None, None, :]
    lp = log_posterior_grid(*coords, hyper, stats, ctrl) - ref
    dens = (np.exp(lp) * w1[None, :, None] * w2[None, None, :]).sum(axis=(1, 2))
    area = np.trapezoid(dens, grid)
    if not area > 0:
        raise QuadratureError("marginal density has no mass on the grid")
    return dens / area


@njit(cache=True)
def _rw_metropolis(start, chol, normals, uniforms, N, T, rel_tol, max_terms):
    m = normals.shape[0]
    out = np.empty((m, 3))
    cur = start.copy()
    cur_lp = -N * _log_j(math.exp(cur[0]), math.exp(cur[1]), math.exp(cur[2]),
                         rel_tol, max_terms) + T[0] * cur[0] + T[1] * cur[1] + T[2] * cur[2]
    accepted = 0
    for s in range(m):
        prop = cur + chol @ normals[s]
        if prop[2] <= 0.0:
            lp = -N * _log_j(math.exp(prop[0]), math.exp(prop[1]), math.exp(prop[2]),
                             rel_tol, max_terms) + T[0] * prop[0] + T[1] * prop[1] + T[2] * prop[2]
            if math.log(uniforms[s]) < lp - cur_lp:
                cur = prop
                cur_lp = lp
                accepted += 1
        out[s] = cur
    return out, accepted


def batch_means_se(values: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Standard error of the mean of a correlated chain by batch means."""
    values = np.asarray(values, dtype=float)
    m = values.shape[0] // n_batches * n_batches
    batches = values[-m:].reshape(n_batches, -1, *values.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / math.sqrt(n_batches)


def posterior_mcmc(hyper: PriorHyper, stats: SufficientStats,
                   qctrl: Optional[QuadratureControl] = None,
                   ctrl: Optional[SeriesControl] = None,
                   mode: Optional[ModeResult] = None,
                   laplace: Optional[LaplaceResult] = None) -> McmcResult:
    """Random-walk Metropolis in delta with Laplace-shaped Gaussian proposals.

    The proposal covariance is ``step_sd**2`` times the Laplace covariance,
    so each coordinate moves with sd ``step_sd`` times its Laplace sd.
    Proposals with delta3 > 0 are rejected.
    """
    qctrl = qctrl or QuadratureControl()
    ctrl = ctrl or DEFAULT_CONTROL
    mode, laplace = _mode_and_laplace(hyper, stats, ctrl, mode, laplace)
    N, T = _posterior_weights(hyper, stats)
    rng = make_rng(qctrl.seed)
    total = qctrl.burn_in + qctrl.mcmc_steps
    normals = rng.standard_normal((total, 3))
    uniforms = rng.random(total)
    chol = qctrl.step_sd * np.linalg.cholesky(laplace.covariance)
    chain, accepted = _rw_metropolis(mode.delta.as_array(), chol, normals, uniforms,
                                     float(N), T, ctrl.rel_tol, ctrl.max_terms)
    if not np.isfinite(chain).all():
        raise SeriesError("non-finite state in MCMC chain")
    rate = accepted / total
    if not 0.1 < rate < 0.6:
        hint = "decrease" if rate < 0.1 else "increase"
        warnings.warn(f"MCMC acceptance rate {rate:.2f} outside (0.1, 0.6); {hint} step_sd")
    chain = chain[qctrl.burn_in:]
    lam = np.exp(chain)
    return McmcResult(chain, rate, lam.mean(axis=0), batch_means_se(lam))


def _trapezoid_cells(grid: np.ndarray) -> np.ndarray:
    d = np.diff(grid)
    cells = np.zeros_like(grid)
    cells[:-1] += 0.5 * d
    cells[1:] += 0.5 * d
    return cells


def hpd_from_density(grid, density, level: float = 0.95):
    """Highest-density interval of a gridded density by water-level search.

    If the region above the water level splits into several pieces, a
    warning reports their total length and the shortest single interval
    holding ``level`` of the mass is returned instead.
    """
    grid = np.asarray(grid, dtype=float)
    density = np.asarray(density, dtype=float)
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mass = density * _trapezoid_cells(grid)
    mass = mass / mass.sum()
    order = np.argsort(density)[::-1]
    cum = np.cumsum(mass[order])
    k = int(np.searchsorted(cum, level)) + 1
    inside = np.zeros(grid.size, dtype=bool)
    inside[order[:k]] = True
    starts = np.flatnonzero(inside & ~np.r_[False, inside[:-1]])
    ends = np.flatnonzero(inside & ~np.r_[inside[1:], False])
    if starts.size == 1:
        return float(grid[starts[0]]), float(grid[ends[0]])
    union = float(sum(grid[e] - grid[s] for s, e in zip(starts, ends)))
    warnings.warn(f"multimodal density: HPD region has {starts.size} pieces "
                  f"of total length {union:.4g}")
    cdf = np.cumsum(mass)
    best = (grid[0], grid[-1])
    j = 0
    for i in range(grid.size):
        base = cdf[i - 1] if i else 0.0
        while j < grid.size and cdf[j] - base < level:
            j += 1
        if j == grid.size:
            break
        if grid[j] - grid[i] < best[1] - best[0]:
            best = (grid[i], grid[j])
    return float(best[0]), float(best[1])


def hpd_from_sample(sample, level: float = 0.95):
    """Shortest interval holding ceil(level * m) order statistics."""
    s = np.sort(np.asarray(sample, dtype=float))
    m = s.size
    if m < 1000:
        raise ValueError("sample-based HPD needs at least 1000 draws")
    k = int(math.ceil(level * m))
    widths = s[k - 1:] - s[: m - k + 1]
    i = int(np.argmin(widths))
    return float(s[i]), float(s[i + k - 1])


def hpd_interval(density=None, grid=None, sample=None, level: float = 0.95):
    if sample is not None:
        return hpd_from_sample(sample, level)
    if density is None or grid is None:
        raise ValueError("pass either a sample or a density with its grid")
    return hpd_from_density(grid, density, level)


def lambda_hpd(hyper: PriorHyper, stats: SufficientStats, axis: int, level: float = 0.95,
               qctrl: Optional[QuadratureControl] = None, ctrl: Optional[SeriesControl] = None,
               mode: Optional[ModeResult] = None, laplace: Optional[LaplaceResult] = None,
               points: int = 401):
    """HPD interval for lambda_axis from the quadrature marginal of delta_axis."""
    qctrl = qctrl or QuadratureControl()
    mode, laplace = _mode_and_laplace(hyper, stats, ctrl, mode, laplace)
    lower, upper = _box(mode.delta, laplace.sd, qctrl.radius_sd)
    grid = np.linspace(lower[axis - 1], upper[axis - 1], points)
    dens = marginal_posterior(hyper, stats, axis, grid, qctrl, ctrl, mode, laplace)
    lam = np.exp(grid)
    return hpd_from_density(lam, dens / lam, level)


def summarize_posterior(hyper: PriorHyper, stats: SufficientStats, level: float = 0.95,
                        qctrl: Optional[QuadratureControl] = None,
                        ctrl: Optional[SeriesControl] = None,
                        run_mcmc: bool = True) -> PosteriorSummary:
    qctrl = qctrl or QuadratureControl()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mode = posterior_mode(hyper, stats, ctrl=ctrl)
        laplace = laplace_sd(mode.delta, hyper, stats, ctrl)
        quad = posterior_mean_quadrature(hyper, stats, qctrl, ctrl, mode, laplace)
        hpd = np.array([lambda_hpd(hyper, stats, i, level, qctrl, ctrl, mode, laplace)
                        for i in (1, 2, 3)])
        summary = PosteriorSummary(
            hyper=hyper,
            mode=mode.lam,
            mode_delta=mode.delta,
            boundary_active=mode.boundary_active,
            laplace_sd=laplace.sd,
            means=quad.means,
            hpd=hpd,
            level=level,
            method_tags={
                "mode": "newton-raphson",
                "laplace_sd": "inverse negative hessian (delta scale)",
                "means": "gauss-legendre tensor quadrature",
                "hpd": "quadrature marginal, water-level",
            },
        )
        if run_mcmc:
            chain = posterior_mcmc(hyper, stats, qctrl, ctrl, mode, laplace)
            summary.mcmc_means = chain.means
            summary.mcmc_se = chain.mc_se
            summary.acceptance_rate = chain.acceptance_rate
            summary.method_tags["mcmc_means"] = "random-walk metropolis"
    summary.warnings = [str(w.message) for w in caught]
    return summary
