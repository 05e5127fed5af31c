"""Synthetic batteries, data generation and brute-force oracles.

The oracles here deliberately avoid the closed forms in :mod:`betacat.model`:
densities are rebuilt from scalar ``math`` / ``scipy.special`` and derivatives are taken by
finite differences, so agreement between the two routes is meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .data import BoundSource, ScoreMatrix, TestMeta
from .errors import NumericalError, ValidationError
from .model import (
    ItemBank,
    ItemParams,
    Theta,
    beta_shapes,
    category_probs,
    interior_log_density,
    log_density,
)

THETA_LOW, THETA_HIGH = -6.0, 6.0

_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class TruthSpec:
    bank: ItemBank
    n_respondents: int
    theta_mean: float = 0.0
    theta_sd: float = 1.0
    seed: int = 0
    missing_rate: float = 0.0

    def __post_init__(self):
        if self.n_respondents < 1:
            raise ValidationError("n_respondents must be >= 1")
        if not self.theta_sd > 0:
            raise ValidationError("theta_sd must be > 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValidationError("missing_rate must be in [0, 1)")


def default_battery(seed: int = 2024, n_items: int = 18) -> ItemBank:
    """Random battery resembling a cognitive-test set.

    alpha ~ logN(0, 0.5), beta ~ N(0, 1), omega ~ N(1, 1), thresholds fixed at
    -2.5 / 2.5 and median times drawn from the integers 2..11 minutes.
    """
    rng = np.random.default_rng(seed)
    alpha = np.exp(rng.normal(0.0, 0.5, n_items))
    beta = rng.normal(0.0, 1.0, n_items)
    omega = rng.normal(1.0, 1.0, n_items)
    minutes = rng.integers(2, 12, n_items)
    width = len(str(n_items))
    return ItemBank(
        tuple(
            ItemParams(
                id=f"T{j + 1:0{width}d}",
                alpha=float(alpha[j]),
                beta=float(beta[j]),
                omega=float(omega[j]),
                gamma1=-2.5,
                gamma2=2.5,
                median_minutes=float(minutes[j]),
            )
            for j in range(n_items)
        )
    )


def sample_scores(bank: ItemBank, thetas, rng: np.random.Generator) -> np.ndarray:
    """One draw of scaled scores (len(thetas) x len(bank)) from the model."""
    thetas = np.asarray(thetas, dtype=float).reshape(-1, 1)
    alpha, beta, omega, g1, g2 = bank.arrays()
    p_low = special.expit(g1 - alpha * thetas)
    p_not_high = special.expit(g2 - alpha * thetas)
    u = rng.random(p_low.shape)
    eta = beta + alpha * thetas
    a = np.exp(0.5 * (eta + omega))
    b = np.exp(0.5 * (omega - eta))
    y = np.clip(rng.beta(a, b), _TINY, _ALMOST_ONE)
    return np.where(u < p_low, 0.0, np.where(u < p_not_high, y, 1.0))


def generate_dataset(spec: TruthSpec) -> tuple[ScoreMatrix, np.ndarray]:
    """Draw a dataset and return it with the true thetas.

    One child stream per respondent is spawned from the root seed, so a
    respondent's scores do not depend on how many others are generated.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_respondents)
    n_tests = len(spec.bank)
    thetas = np.empty(spec.n_respondents)
    values = np.empty((spec.n_respondents, n_tests))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        thetas[i] = rng.normal(spec.theta_mean, spec.theta_sd)
        values[i] = sample_scores(spec.bank, thetas[i : i + 1], rng)[0]
        if spec.missing_rate > 0:
            values[i, rng.random(n_tests) < spec.missing_rate] = np.nan
    width = len(str(spec.n_respondents))
    ids = tuple(f"R{i + 1:0{width}d}" for i in range(spec.n_respondents))
    return ScoreMatrix(ids, tuple(spec.bank.ids), values), thetas


def unit_meta(bank: ItemBank) -> dict[str, TestMeta]:
    """Bounds (0, 1) for every item, so raw scores equal scaled scores."""
    return {
        it.id: TestMeta(it.id, 0.0, 1.0, BoundSource.THEORETICAL, it.median_minutes)
        for it in bank
    }


def random_items(rng: np.random.Generator, n: int, prefix: str = "I") -> list[ItemParams]:
    """Valid items spread over a realistic parameter range (used by property checks)."""
    out = []
    for k in range(n):
        g1 = rng.normal(-2.0, 1.0)
        out.append(
            ItemParams(
                id=f"{prefix}{k}",
                alpha=float(np.exp(rng.normal(0.0, 0.5))),
                beta=float(rng.normal(0.0, 1.0)),
                omega=float(rng.normal(1.0, 1.0)),
                gamma1=float(g1),
                gamma2=float(g1 + np.exp(rng.normal(1.3, 0.3))),
                median_minutes=float(rng.integers(2, 12)),
            )
        )
    return out


# ---------------------------------------------------------------------------
# oracles


def _expit(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _beta_logpdf(y: float, a: float, b: float) -> float:
    return (
        (a - 1.0) * math.log(y) + (b - 1.0) * math.log1p(-y)
        - math.lgamma(a) - math.lgamma(b) + math.lgamma(a + b)
    )


def oracle_log_density(item: ItemParams, theta: float, y: float) -> float:
    """Log density written out directly in scalar math, independent of model.py."""
    p_low = _expit(item.gamma1 - item.alpha * theta)
    p_high_cdf = _expit(item.gamma2 - item.alpha * theta)
    if y == 0.0:
        return math.log(p_low)
    if y == 1.0:
        return math.log1p(-p_high_cdf)
    eta = item.beta + item.alpha * theta
    a = math.exp((eta + item.omega) / 2)
    b = math.exp((item.omega - eta) / 2)
    return math.log(p_high_cdf - p_low) + _beta_logpdf(y, a, b)


def _oracle_log_density_grid(item: ItemParams, grid: np.ndarray, y: float) -> np.ndarray:
    if y == 0.0:
        return special.log_expit(item.gamma1 - item.alpha * grid)
    if y == 1.0:
        return special.log_expit(item.alpha * grid - item.gamma2)
    p_low = special.expit(item.gamma1 - item.alpha * grid)
    p_high_cdf = special.expit(item.gamma2 - item.alpha * grid)
    eta = item.beta + item.alpha * grid
    a = np.exp((eta + item.omega) / 2)
    b = np.exp((item.omega - eta) / 2)
    log_beta = (
        (a - 1.0) * math.log(y) + (b - 1.0) * math.log1p(-y)
        - special.gammaln(a) - special.gammaln(b) + special.gammaln(a + b)
    )
    return np.log(p_high_cdf - p_low) + log_beta


def _oracle_interior_log(item: ItemParams, theta: float, log_y: float, log_1my: float) -> float:
    """Interior log density from log(y) and log(1 - y), avoiding y itself."""
    p_low = _expit(item.gamma1 - item.alpha * theta)
    p_high_cdf = _expit(item.gamma2 - item.alpha * theta)
    eta = item.beta + item.alpha * theta
    a = math.exp((eta + item.omega) / 2)
    b = math.exp((item.omega - eta) / 2)
    return (
        math.log(p_high_cdf - p_low)
        + (a - 1.0) * log_y + (b - 1.0) * log_1my
        - math.lgamma(a) - math.lgamma(b) + math.lgamma(a + b)
    )


def _interior_integral(log_f, a: float, b: float, tol: float = 1e-10) -> tuple[float, float]:
    """Integral over (0, 1) of ``exp(log_f(log y, log(1 - y)))``.

    [0, 1/2] is mapped by y = v^(1/a) / 2 and [1/2, 1] by 1 - y = w^(1/b) / 2,
    where (a, b) are the beta shapes of the integrand. The substitutions
    absorb the endpoint powers exactly, and because only logarithms of y and
    1 - y are formed, mass packed closer to a boundary than double precision
    can resolve is still integrated.
    """
    log_half = -math.log(2.0)

    def left(v):
        log_y = log_half + math.log(v) / a
        log_1my = math.log1p(-math.exp(log_y))
        return math.exp(log_f(log_y, log_1my) + log_y - math.log(a) - math.log(v))

    def right(w):
        log_1my = log_half + math.log(w) / b
        log_y = math.log1p(-math.exp(log_1my))
        return math.exp(log_f(log_y, log_1my) + log_1my - math.log(b) - math.log(w))

    v1, e1, *_ = integrate.quad(left, 0.0, 1.0, epsabs=tol, epsrel=1e-10, limit=200, full_output=1)
    v2, e2, *_ = integrate.quad(right, 0.0, 1.0, epsabs=tol, epsrel=1e-10, limit=200, full_output=1)
    return v1 + v2, e1 + e2


def _beta_expectation(g, a: float, b: float, tol: float = 1e-10) -> tuple[float, float]:
    """E[g(log Y, log(1 - Y))] for Y ~ Beta(a, b), g >= 0."""
    log_norm = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)

    def log_f(log_y, log_1my):
        val = g(log_y, log_1my)
        if val <= 0.0:
            return -math.inf
        return math.log(val) + (a - 1.0) * log_y + (b - 1.0) * log_1my - log_norm

    return _interior_integral(log_f, a, b, tol)


def numeric_fisher_info(item: ItemParams, theta, h: float = 1e-5, tol: float = 1e-10) -> float:
    """E[(d log p / d theta)^2] by quadrature, score by central differences.

    The interior expectation is an adaptive quadrature over the beta
    density (see ``_beta_expectation``); the two boundary atoms are added
    exactly.
    """
    t = float(theta.value) if isinstance(theta, Theta) else float(theta)

    total = 0.0
    for y in (0.0, 1.0):
        s = (oracle_log_density(item, t + h, y) - oracle_log_density(item, t - h, y)) / (2 * h)
        total += math.exp(oracle_log_density(item, t, y)) * s * s

    def score_sq(log_y, log_1my):
        s = (
            _oracle_interior_log(item, t + h, log_y, log_1my)
            - _oracle_interior_log(item, t - h, log_y, log_1my)
        ) / (2 * h)
        return s * s

    eta = item.beta + item.alpha * t
    a = math.exp((eta + item.omega) / 2)
    b = math.exp((item.omega - eta) / 2)
    p_mid = _expit(item.gamma2 - item.alpha * t) - _expit(item.gamma1 - item.alpha * t)
    value, err = _beta_expectation(score_sq, a, b, tol)
    value *= p_mid
    err *= p_mid
    if not np.isfinite(value) or err > 1e-4 * abs(value) + 1e-9:
        raise NumericalError(f"quadrature did not converge (estimate {value}, error {err})")
    return total + value


def density_mass(item: ItemParams, theta) -> float:
    """Total probability of the model's density: two atoms plus the interior integral.

    The interior integral runs over the model's own interior log density (in
    its log(y), log(1 - y) form), so this checks the normalizing constants,
    interior mass and kernel exponents of :mod:`betacat.model` together.
    """
    t = float(theta.value) if isinstance(theta, Theta) else float(theta)
    a, b = beta_shapes(item, t)
    interior, _ = _interior_integral(
        lambda ly, l1y: interior_log_density(item, t, ly, l1y), a, b, tol=1e-14
    )
    return math.exp(log_density(item, t, 0.0)) + math.exp(log_density(item, t, 1.0)) + interior


def grid_loglik(
    bank: ItemBank, responses: Sequence[tuple[str, float]], step: float = 1e-4
) -> tuple[np.ndarray, np.ndarray]:
    """Log-likelihood of ``responses`` on the grid -6, -6 + step, ..., 6."""
    n = int(round((THETA_HIGH - THETA_LOW) / step))
    grid = np.linspace(THETA_LOW, THETA_HIGH, n + 1)
    loglik = np.zeros_like(grid)
    for test_id, y in responses:
        loglik += _oracle_log_density_grid(bank[test_id], grid, float(y))
    return grid, loglik


def grid_argmax(grid: np.ndarray, loglik: np.ndarray, mode: str = "map") -> Theta:
    mode = mode.lower()
    if mode == "map":
        loglik = loglik - 0.5 * grid**2
    elif mode != "mle":
        raise ValidationError(f"unknown mode {mode!r}")
    return Theta(float(grid[int(np.argmax(loglik))]))


def grid_mle(
    bank: ItemBank,
    responses: Sequence[tuple[str, float]],
    mode: str = "map",
    step: float = 1e-4,
) -> Theta:
    """Exhaustive grid search for the scoring optimum on [-6, 6]."""
    return grid_argmax(*grid_loglik(bank, responses, step), mode)


def expected_category_counts(bank: ItemBank, thetas) -> np.ndarray:
    """Expected (lower, interior, upper) counts per test, summed over ``thetas``."""
    out = np.zeros((len(bank), 3))
    for j, item in enumerate(bank):
        for t in np.asarray(thetas, dtype=float):
            out[j] += category_probs(item, float(t))
    return out
