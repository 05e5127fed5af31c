"""Hybrid graded-response / beta item response model.

A scaled test score ``y`` in [0, 1] falls into one of three categories:
an atom at 0, an atom at 1, or the open interval between them. Category
membership follows a two-threshold graded response model,

    P(z <= c | theta) = expit(gamma_c - alpha * theta),   c = 1, 2,

and interior scores are Beta(a, b) with

    a = exp((beta + alpha*theta + omega) / 2)
    b = exp((omega - (beta + alpha*theta)) / 2)

so that ``E[y | interior] = expit(beta + alpha*theta)``.

Each public function comes in a scalar form taking ``ItemParams``/``Theta``
and is backed by an array kernel (``*_array``) that broadcasts over numpy
inputs; calibration and scoring use the kernels directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special as sp

from .errors import MissingTimingError, UnknownTestError, ValidationError
from .special import trigamma

# Exponent clamp for the beta shapes. Realistic theta never gets near it.
LINEAR_PREDICTOR_CLAMP = 350.0


class BoundaryCategory(enum.IntEnum):
    LOWER = 1
    INTERIOR = 2
    UPPER = 3


@dataclass(frozen=True)
class ItemParams:
    """Parameters of one test.

    ``alpha`` is the discrimination, ``beta`` the easiness, ``omega`` the
    log-precision of the interior beta part and ``gamma1 < gamma2`` the
    boundary thresholds. ``alpha == 0`` is allowed and describes a test that
    carries no information about theta. ``median_minutes`` may be ``None``
    when timing is unknown; per-minute quantities then raise.
    """

    id: str
    alpha: float
    beta: float
    omega: float
    gamma1: float
    gamma2: float
    median_minutes: float | None = None

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.omega, self.gamma1, self.gamma2)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValidationError(f"item {self.id!r}: non-finite parameter")
        if self.alpha < 0:
            raise ValidationError(f"item {self.id!r}: alpha must be >= 0")
        if not self.gamma1 < self.gamma2:
            raise ValidationError(f"item {self.id!r}: requires gamma1 < gamma2")
        if self.median_minutes is not None and not (
            math.isfinite(self.median_minutes) and self.median_minutes > 0
        ):
            raise ValidationError(f"item {self.id!r}: median_minutes must be > 0")


@dataclass(frozen=True)
class Theta:
    value: float
    se: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValidationError("theta must be finite")
        if self.se is not None and not self.se >= 0:
            raise ValidationError("theta standard error must be nonnegative")

    def __float__(self):
        return float(self.value)


class BetaShapes(NamedTuple):
    a: float
    b: float


def _theta_value(theta) -> float:
    value = float(theta.value) if isinstance(theta, Theta) else float(theta)
    if not math.isfinite(value):
        raise ValidationError("theta must be finite")
    return value


# ---------------------------------------------------------------------------
# array kernels


def inv_logit(x):
    """Numerically stable ``1 / (1 + exp(-x))``; scalar in, scalar out."""
    out = sp.expit(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def shape_params_array(alpha, beta, omega, theta):
    eta = beta + alpha * theta
    lo, hi = -LINEAR_PREDICTOR_CLAMP, LINEAR_PREDICTOR_CLAMP
    a = np.exp(0.5 * np.clip(eta + omega, lo, hi))
    b = np.exp(0.5 * np.clip(omega - eta, lo, hi))
    return a, b


def log_category_probs_array(alpha, gamma1, gamma2, theta):
    """Log probabilities of (lower, interior, upper).

    The interior mass ``expit(u2) - expit(u1)`` is evaluated as
    ``expit(u2) * expit(-u1) * (1 - exp(gamma1 - gamma2))`` which is exact and
    free of cancellation at extreme theta.
    """
    u1 = gamma1 - alpha * theta
    u2 = gamma2 - alpha * theta
    log_lower = sp.log_expit(u1)
    log_upper = sp.log_expit(-u2)
    log_interior = sp.log_expit(u2) + sp.log_expit(-u1) + np.log(-np.expm1(gamma1 - gamma2))
    return log_lower, log_interior, log_upper


def beta_logpdf_logs(log_y, log_1my, a, b):
    """Log Beta(a, b) density written in terms of log(y) and log(1 - y)."""
    return (a - 1.0) * log_y + (b - 1.0) * log_1my - sp.betaln(a, b)


def beta_logpdf_array(y, a, b):
    """Log Beta(a, b) density for y strictly inside (0, 1)."""
    return beta_logpdf_logs(np.log(y), np.log1p(-y), a, b)


def log_density_array(alpha, beta, omega, gamma1, gamma2, theta, y):
    """Log density of scaled scores; NaN ``y`` (missing) contributes 0."""
    alpha, beta, omega, gamma1, gamma2, theta, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, beta, omega, gamma1, gamma2, theta, y))
    )
    log_lower, log_interior, log_upper = log_category_probs_array(alpha, gamma1, gamma2, theta)
    a, b = shape_params_array(alpha, beta, omega, theta)
    inside = (y > 0.0) & (y < 1.0)
    y_in = np.where(inside, y, 0.5)
    interior = log_interior + beta_logpdf_array(y_in, a, b)
    out = np.where(y == 0.0, log_lower, np.where(y == 1.0, log_upper, interior))
    return np.where(np.isnan(y), 0.0, out)


def loglik_parts(alpha, beta, omega, gamma1, gamma2, theta, y):
    """Log density plus its partial derivatives in the model's linear pieces.

    Returns ``(logp, d_eta, d_omega, d_u1, d_u2, d_gap)`` where
    ``eta = beta + alpha*theta``, ``u_c = gamma_c - alpha*theta`` and
    ``gap = gamma2 - gamma1`` (the last only enters the interior mass through
    ``log(1 - exp(-gap))``). Chain rule:

        d/dtheta  = alpha * (d_eta - d_u1 - d_u2)
        d/dalpha  = theta * (d_eta - d_u1 - d_u2)
        d/dbeta   = d_eta
        d/domega  = d_omega
        d/dgamma1 = d_u1 - d_gap
        d/dgamma2 = d_u2 + d_gap

    Missing (NaN) entries give zeros everywhere.
    """
    alpha, beta, omega, gamma1, gamma2, theta, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, beta, omega, gamma1, gamma2, theta, y))
    )
    u1 = gamma1 - alpha * theta
    u2 = gamma2 - alpha * theta
    lower = y == 0.0
    upper = y == 1.0
    inside = (y > 0.0) & (y < 1.0)
    y_in = np.where(inside, y, 0.5)

    log_lower, log_interior, log_upper = log_category_probs_array(alpha, gamma1, gamma2, theta)
    a, b = shape_params_array(alpha, beta, omega, theta)
    logp = np.where(
        lower, log_lower, np.where(upper, log_upper, log_interior + beta_logpdf_array(y_in, a, b))
    )
    logp = np.where(lower | upper | inside, logp, 0.0)

    psi_ab = sp.digamma(a + b)
    g_a = np.log(y_in) - sp.digamma(a) + psi_ab
    g_b = np.log1p(-y_in) - sp.digamma(b) + psi_ab
    d_eta = np.where(inside, 0.5 * (a * g_a - b * g_b), 0.0)
    d_omega = np.where(inside, 0.5 * (a * g_a + b * g_b), 0.0)

    # lower: log expit(u1); upper: log expit(-u2); interior: log expit(u2) + log expit(-u1) + ...
    d_u1 = np.where(lower, sp.expit(-u1), np.where(inside, -sp.expit(u1), 0.0))
    d_u2 = np.where(upper, -sp.expit(u2), np.where(inside, sp.expit(-u2), 0.0))
    gap = gamma2 - gamma1
    d_gap = np.where(inside, 1.0 / np.expm1(gap), 0.0)
    return logp, d_eta, d_omega, d_u1, d_u2, d_gap


def theta_score_array(alpha, beta, omega, gamma1, gamma2, theta, y):
    """First and second derivative of the log density in theta."""
    alpha, beta, omega, gamma1, gamma2, theta, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, beta, omega, gamma1, gamma2, theta, y))
    )
    _, d_eta, _, d_u1, d_u2, _ = loglik_parts(alpha, beta, omega, gamma1, gamma2, theta, y)
    first = alpha * (d_eta - d_u1 - d_u2)

    p0 = sp.expit(gamma1 - alpha * theta)
    p1 = sp.expit(gamma2 - alpha * theta)
    v0 = p0 * (1.0 - p0)
    v1 = p1 * (1.0 - p1)
    inside = (y > 0.0) & (y < 1.0)
    y_in = np.where(inside, y, 0.5)
    a, b = shape_params_array(alpha, beta, omega, theta)
    psi_ab = sp.digamma(a + b)
    g_a = np.log(y_in) - sp.digamma(a) + psi_ab
    g_b = np.log1p(-y_in) - sp.digamma(b) + psi_ab
    beta_curv = 0.25 * (
        a * g_a + b * g_b - a * a * trigamma(a) - b * b * trigamma(b)
        + (a - b) ** 2 * trigamma(a + b)
    )
    curv = np.where(
        y == 0.0, -v0, np.where(y == 1.0, -v1, np.where(inside, beta_curv - v0 - v1, 0.0))
    )
    return first, alpha * alpha * curv


def item_information_array(alpha, beta, omega, gamma1, gamma2, theta):
    """Fisher information about theta carried by one score.

    With P0 = expit(gamma1 - alpha*theta), P1 = expit(gamma2 - alpha*theta),
    Q = 1 - P and Omega the trigamma function,

        I = alpha^2 * ( Q0^2 P0 + P1^2 Q1 + (P1 - P0) (1 - P0 - P1)^2
                        + (P1 - P0) [ Omega(a) (a/2)^2 + Omega(b) (b/2)^2
                                      - Omega(a+b) ((a-b)/2)^2 ] ).

    The interior graded-response term enters with a plus sign and
    ``(P1 Q1 - P0 Q0)^2 / (P1 - P0)`` has been reduced to
    ``(P1 - P0)(1 - P0 - P1)^2``, so there is nothing to divide by as the
    interior mass vanishes. Verified against quadrature of E[(dl/dtheta)^2];
    see docs/information.md.
    """
    alpha, beta, omega, gamma1, gamma2, theta = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (alpha, beta, omega, gamma1, gamma2, theta))
    )
    u1 = gamma1 - alpha * theta
    u2 = gamma2 - alpha * theta
    p0, q0 = sp.expit(u1), sp.expit(-u1)
    p1, q1 = sp.expit(u2), sp.expit(-u2)
    p_mid = np.exp(log_category_probs_array(alpha, gamma1, gamma2, theta)[1])
    graded = q0 * q0 * p0 + p1 * p1 * q1 + p_mid * (q1 - p0) ** 2
    a, b = shape_params_array(alpha, beta, omega, theta)
    beta_part = (
        trigamma(a) * (0.5 * a) ** 2
        + trigamma(b) * (0.5 * b) ** 2
        - trigamma(a + b) * (0.5 * (a - b)) ** 2
    )
    out = alpha * alpha * (graded + p_mid * beta_part)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# scalar API


def categorize(y: float) -> BoundaryCategory:
    y = float(y)
    if not 0.0 <= y <= 1.0:
        raise ValidationError(f"scaled score {y!r} outside [0, 1]")
    if y == 0.0:
        return BoundaryCategory.LOWER
    if y == 1.0:
        return BoundaryCategory.UPPER
    return BoundaryCategory.INTERIOR


def category_probs(item: ItemParams, theta) -> tuple[float, float, float]:
    """(P(y = 0), P(0 < y < 1), P(y = 1)) at ``theta``."""
    t = _theta_value(theta)
    logs = log_category_probs_array(item.alpha, item.gamma1, item.gamma2, t)
    return tuple(float(np.exp(v)) for v in logs)


def beta_shapes(item: ItemParams, theta) -> BetaShapes:
    a, b = shape_params_array(item.alpha, item.beta, item.omega, _theta_value(theta))
    return BetaShapes(float(a), float(b))


def mean_variance(item: ItemParams, theta) -> tuple[float, float]:
    """Mean and variance of the interior beta part."""
    eta = item.beta + item.alpha * _theta_value(theta)
    eta = min(max(eta, -LINEAR_PREDICTOR_CLAMP), LINEAR_PREDICTOR_CLAMP)
    mu = float(sp.expit(eta))
    # mu(1-mu) / (1 + 2 e^{omega/2} cosh(eta/2)); the denominator is 1 + a + b
    a, b = beta_shapes(item, theta)
    var = mu * (1.0 - mu) / (1.0 + a + b)
    return mu, var


def log_density(item: ItemParams, theta, y: float) -> float:
    categorize(y)
    return float(
        log_density_array(
            item.alpha, item.beta, item.omega, item.gamma1, item.gamma2, _theta_value(theta), y
        )
    )


def _log_expit(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def interior_log_density(item: ItemParams, theta, log_y: float, log_1my: float) -> float:
    """Interior branch of ``log_density`` parameterized by log(y) and log(1 - y).

    Useful where the score sits closer to a boundary than a float can
    represent (tiny shape parameters). Scalar ``math`` only, so it is cheap
    enough to sit inside a quadrature loop.
    """
    t = _theta_value(theta)
    u1 = item.gamma1 - item.alpha * t
    u2 = item.gamma2 - item.alpha * t
    log_mid = _log_expit(u2) + _log_expit(-u1) + math.log(-math.expm1(item.gamma1 - item.gamma2))
    eta = item.beta + item.alpha * t
    clamp = LINEAR_PREDICTOR_CLAMP
    a = math.exp(0.5 * min(max(eta + item.omega, -clamp), clamp))
    b = math.exp(0.5 * min(max(item.omega - eta, -clamp), clamp))
    log_beta_fn = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    return log_mid + (a - 1.0) * log_y + (b - 1.0) * log_1my - log_beta_fn


def item_information(item: ItemParams, theta) -> float:
    return float(
        item_information_array(
            item.alpha, item.beta, item.omega, item.gamma1, item.gamma2, _theta_value(theta)
        )
    )


def info_per_minute(item: ItemParams, theta) -> float:
    if item.median_minutes is None:
        raise MissingTimingError(f"item {item.id!r} has no median_minutes")
    return item_information(item, theta) / item.median_minutes


# ---------------------------------------------------------------------------
# collections of items


@dataclass(frozen=True)
class ItemBank:
    """An ordered, immutable set of calibrated items with vectorized accessors."""

    items: tuple[ItemParams, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        index = {}
        for k, it in enumerate(items):
            if it.id in index:
                raise ValidationError(f"duplicate item id {it.id!r}")
            index[it.id] = k
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, item_id):
        return item_id in self._index

    def __getitem__(self, item_id: str) -> ItemParams:
        try:
            return self.items[self._index[item_id]]
        except KeyError:
            raise UnknownTestError(f"unknown test {item_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def position(self, item_id: str) -> int:
        if item_id not in self._index:
            raise UnknownTestError(f"unknown test {item_id!r}")
        return self._index[item_id]

    def arrays(self, ids: Sequence[str] | None = None):
        """(alpha, beta, omega, gamma1, gamma2) as float arrays."""
        items = self.items if ids is None else [self[i] for i in ids]
        cols = np.array(
            [(it.alpha, it.beta, it.omega, it.gamma1, it.gamma2) for it in items], dtype=float
        ).reshape(-1, 5)
        return tuple(cols[:, k] for k in range(5))

    def minutes(self, ids: Sequence[str] | None = None) -> np.ndarray:
        items = self.items if ids is None else [self[i] for i in ids]
        missing = [it.id for it in items if it.median_minutes is None]
        if missing:
            raise MissingTimingError(f"no median_minutes for {missing}")
        return np.array([it.median_minutes for it in items], dtype=float)

    def information(self, theta, ids: Sequence[str] | None = None) -> np.ndarray:
        alpha, beta, omega, g1, g2 = self.arrays(ids)
        return np.atleast_1d(item_information_array(alpha, beta, omega, g1, g2, float(theta)))

    def subset(self, ids: Sequence[str]) -> "ItemBank":
        return ItemBank(tuple(self[i] for i in ids))
