"""Normalizing function, pmf, marginals and moments of the bivariate
Poisson-conditionals (BPC) distribution.

The joint pmf is

    P(X=x, Y=y) = lambda1**x * lambda2**y * lambda3**(x*y) / (J * x! * y!)

with the normalizing series

    J(l1, l2, l3) = sum_y l2**y / y! * exp(l1 * l3**y)
                  = sum_x l1**x / x! * exp(l2 * l3**x).

Every quantity is accumulated on the log scale.  Derivatives of J are
obtained from the scaled-argument identities

    dJ/dl1 = J(l1, l2*l3, l3)
    dJ/dl2 = J(l1*l3, l2, l3)
    dJ/dl3 = l1*l2 * J(l1*l3, l2*l3, l3)

so a 3x3 table of log J(l1*l3**q, l2*l3**p, l3) values supplies the
gradient and Hessian of log J.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numba import njit
from scipy.special import gammaln


class SeriesError(ArithmeticError):
    """The truncated series did not meet its tail bound within ``max_terms``."""


@dataclass(frozen=True)
class LambdaParams:
    lambda1: float
    lambda2: float
    lambda3: float

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("lambda1 and lambda2 must be positive")
        if not 0.0 < self.lambda3 <= 1.0:
            raise ValueError(f"lambda3 must lie in (0, 1], got {self.lambda3}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2, self.lambda3])

    @classmethod
    def from_array(cls, values) -> "LambdaParams":
        a, b, c = (float(v) for v in values)
        return cls(a, b, c)


@dataclass(frozen=True)
class DeltaParams:
    """Log-scale parameters ``delta_i = log(lambda_i)``; ``delta3 <= 0``."""

    delta1: float
    delta2: float
    delta3: float

    def __post_init__(self):
        for name in ("delta1", "delta2", "delta3"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.delta3 > 0:
            raise ValueError(f"delta3 must be <= 0, got {self.delta3}")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta1, self.delta2, self.delta3])

    @classmethod
    def from_array(cls, values) -> "DeltaParams":
        a, b, c = (float(v) for v in values)
        return cls(a, b, c)


@dataclass(frozen=True)
class SeriesControl:
    rel_tol: float = 1e-13
    max_terms: int = 10_000

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_terms < 10:
            raise ValueError("max_terms must be at least 10")


DEFAULT_CONTROL = SeriesControl()


class Moments(NamedTuple):
    mean_x: float
    mean_y: float
    mean_xy: float
    covariance: float
    correlation: float


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _log_series(a, b, c, rel_tol, max_terms):
    """log of sum_k b**k / k! * exp(a * c**k), or NaN if not converged.

    Stops once the geometric bound on the discarded tail,
    exp(a*c**(k+1)) * b**(k+1)/(k+1)! / (1 - b/(k+2)), drops below
    rel_tol times the partial sum.
    """
    log_b = math.log(b)
    log_tol = math.log(rel_tol)
    m = -math.inf
    s = 0.0
    ck = 1.0
    for k in range(max_terms):
        lt = k * log_b - math.lgamma(k + 1.0) + a * ck
        if lt > m:
            s = s * math.exp(m - lt) + 1.0
            m = lt
        else:
            s += math.exp(lt - m)
        ck *= c
        if k + 2.0 > b:
            bound = ((k + 1.0) * log_b - math.lgamma(k + 2.0)
                     - math.log1p(-b / (k + 2.0)) + a * ck)
            if bound <= log_tol + m + math.log(s):
                return m + math.log(s)
    return math.nan


@njit(cache=True)
def _log_j(l1, l2, l3, rel_tol, max_terms):
    # sum over the index with the smaller outer rate
    if l1 < l2:
        return _log_series(l2, l1, l3, rel_tol, max_terms)
    return _log_series(l1, l2, l3, rel_tol, max_terms)


@njit(cache=True)
def _log_j_many(l1, l2, l3, rel_tol, max_terms):
    out = np.empty(l1.shape[0])
    for i in range(l1.shape[0]):
        out[i] = _log_j(l1[i], l2[i], l3[i], rel_tol, max_terms)
    return out


@njit(cache=True)
def _shifted_table(l1, l2, l3, rel_tol, max_terms):
    """table[q, p] = log J(l1 * l3**q, l2 * l3**p, l3) for q, p in 0..2."""
    out = np.empty((3, 3))
    for q in range(3):
        for p in range(3):
            out[q, p] = _log_j(l1 * l3 ** q, l2 * l3 ** p, l3, rel_tol, max_terms)
    return out


# ---------------------------------------------------------------------------
# public evaluation


def _ctrl(ctrl: Optional[SeriesControl]) -> SeriesControl:
    return DEFAULT_CONTROL if ctrl is None else ctrl


def _checked(value: float, what: str, ctrl: SeriesControl) -> float:
    if math.isnan(value):
        raise SeriesError(f"{what}: series did not converge within {ctrl.max_terms} terms")
    if math.isinf(value):
        raise OverflowError(f"{what}: log J is not finite")
    return value


def log_j_raw(l1: float, l2: float, l3: float, ctrl: Optional[SeriesControl] = None) -> float:
    """log J at plain floats, skipping dataclass validation (hot paths)."""
    ctrl = _ctrl(ctrl)
    return _checked(_log_j(l1, l2, l3, ctrl.rel_tol, ctrl.max_terms), "log J", ctrl)


def log_j_value(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> float:
    return log_j_raw(params.lambda1, params.lambda2, params.lambda3, ctrl)


def j_value(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> float:
    """The normalizing function J = 1/K."""
    lj = log_j_value(params, ctrl)
    if lj > 709.0:
        raise OverflowError("J exceeds the double range; use log_j_value")
    return math.exp(lj)


def log_j_array(l1, l2, l3, ctrl: Optional[SeriesControl] = None) -> np.ndarray:
    """Vectorized log J over broadcastable arrays of parameters."""
    ctrl = _ctrl(ctrl)
    a, b, c = np.broadcast_arrays(np.asarray(l1, float), np.asarray(l2, float),
                                  np.asarray(l3, float))
    shape = a.shape
    out = _log_j_many(np.ascontiguousarray(a).ravel(), np.ascontiguousarray(b).ravel(),
                      np.ascontiguousarray(c).ravel(), ctrl.rel_tol, ctrl.max_terms)
    if np.isnan(out).any():
        raise SeriesError(f"series did not converge within {ctrl.max_terms} terms")
    return out.reshape(shape)


def j_dual_check(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> tuple[float, float]:
    """J summed over y and J summed over x, evaluated independently."""
    ctrl = _ctrl(ctrl)
    a, b, c = params.lambda1, params.lambda2, params.lambda3
    over_y = _checked(_log_series(a, b, c, ctrl.rel_tol, ctrl.max_terms), "J over y", ctrl)
    over_x = _checked(_log_series(b, a, c, ctrl.rel_tol, ctrl.max_terms), "J over x", ctrl)
    return math.exp(over_y), math.exp(over_x)


def shifted_log_j(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> np.ndarray:
    """3x3 table of log J(lambda1*lambda3**q, lambda2*lambda3**p, lambda3)."""
    return shifted_log_j_raw(params.lambda1, params.lambda2, params.lambda3, ctrl)


def shifted_log_j_raw(l1, l2, l3, ctrl: Optional[SeriesControl] = None) -> np.ndarray:
    ctrl = _ctrl(ctrl)
    table = _shifted_table(l1, l2, l3, ctrl.rel_tol, ctrl.max_terms)
    if not np.isfinite(table).all():
        raise SeriesError("shifted J table did not converge")
    return table


def log_j_derivatives_raw(l1: float, l2: float, l3: float,
                          ctrl: Optional[SeriesControl] = None):
    """Return ``(log J, grad, hess)`` of log J with respect to (l1, l2, l3)."""
    table = shifted_log_j_raw(l1, l2, l3, ctrl)
    r = np.exp(table - table[0, 0])
    a, b, c = l1, l2, l3
    grad = np.array([r[0, 1], r[1, 0], a * b * r[1, 1]])
    # second derivatives of J divided by J
    d2 = np.empty((3, 3))
    d2[0, 0] = r[0, 2]
    d2[1, 1] = r[2, 0]
    d2[0, 1] = c * r[1, 1]
    d2[0, 2] = b * r[1, 1] + a * b * c * r[1, 2]
    d2[1, 2] = a * r[1, 1] + a * b * c * r[2, 1]
    d2[2, 2] = a * b * (a * r[1, 2] + b * r[2, 1] + a * b * c * c * r[2, 2])
    d2[1, 0], d2[2, 0], d2[2, 1] = d2[0, 1], d2[0, 2], d2[1, 2]
    hess = d2 - np.outer(grad, grad)
    return table[0, 0], grad, hess


def log_j_derivatives(params: LambdaParams, ctrl: Optional[SeriesControl] = None):
    return log_j_derivatives_raw(params.lambda1, params.lambda2, params.lambda3, ctrl)


def log_pmf(params: LambdaParams, x, y, ctrl: Optional[SeriesControl] = None):
    """Log joint pmf at (x, y); accepts integer scalars or arrays."""
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("x and y must be non-negative integers")
    lj = log_j_value(params, ctrl)
    out = (x * math.log(params.lambda1) + y * math.log(params.lambda2)
           + x * y * math.log(params.lambda3) - gammaln(x + 1.0) - gammaln(y + 1.0) - lj)
    return float(out) if out.ndim == 0 else out


def pmf(params: LambdaParams, x, y, ctrl: Optional[SeriesControl] = None):
    return np.exp(log_pmf(params, x, y, ctrl))


def conditional_rates(params: LambdaParams, given_y: Optional[int] = None,
                      given_x: Optional[int] = None) -> float:
    """Poisson rate of X given Y=y, or of Y given X=x."""
    if (given_y is None) == (given_x is None):
        raise ValueError("supply exactly one of given_y, given_x")
    if given_y is not None:
        if given_y < 0:
            raise ValueError("given_y must be non-negative")
        return params.lambda1 * params.lambda3 ** given_y
    if given_x < 0:
        raise ValueError("given_x must be non-negative")
    return params.lambda2 * params.lambda3 ** given_x


def marginal_log_pmf_y(params: LambdaParams, y, ctrl: Optional[SeriesControl] = None):
    y = np.asarray(y)
    if np.any(y < 0):
        raise ValueError("y must be non-negative")
    lj = log_j_value(params, ctrl)
    out = (y * math.log(params.lambda2) - gammaln(y + 1.0)
           + params.lambda1 * params.lambda3 ** y - lj)
    return float(out) if out.ndim == 0 else out


def marginal_pmf_y(params: LambdaParams, y, ctrl: Optional[SeriesControl] = None):
    """P(Y = y) = K * lambda2**y / y! * exp(lambda1 * lambda3**y)."""
    return np.exp(marginal_log_pmf_y(params, y, ctrl))


def moments(params: LambdaParams, ctrl: Optional[SeriesControl] = None) -> Moments:
    a, b, c = params.lambda1, params.lambda2, params.lambda3
    _, grad, hess = log_j_derivatives(params, ctrl)
    mean_x = a * grad[0]
    mean_y = b * grad[1]
    mean_xy = c * grad[2]
    # d^2 log J / d(log l)^2 is the covariance of (X, Y, XY)
    var_x = a * a * hess[0, 0] + mean_x
    var_y = b * b * hess[1, 1] + mean_y
    cov = a * b * hess[0, 1]
    corr = cov / math.sqrt(var_x * var_y) if var_x > 0 and var_y > 0 else 0.0
    return Moments(mean_x, mean_y, mean_xy, cov, corr)


def to_delta(params: LambdaParams) -> DeltaParams:
    return DeltaParams(math.log(params.lambda1), math.log(params.lambda2),
                       min(math.log(params.lambda3), 0.0))


def from_delta(d: DeltaParams) -> LambdaParams:
    return LambdaParams(math.exp(d.delta1), math.exp(d.delta2), min(math.exp(d.delta3), 1.0))
