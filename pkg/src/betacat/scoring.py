"""Proficiency estimation with frozen item parameters.

Every respondent is scored on the full bank width (unadministered tests are
NaN and contribute nothing), so results do not depend on response order or
on which other respondents share a batch.

The optimizer scans a 0.05-spaced grid on [-6, 6], takes the best grid point
and refines the root of the analytic score in the surrounding bracket with
safeguarded Newton steps (bisection whenever Newton leaves the bracket).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .data import ScoreMatrix, write_csv
from .errors import BetacatError, InsufficientDataError, UnboundedEstimateError, ValidationError
from .model import ItemBank, Theta, log_density_array, theta_score_array

logger = logging.getLogger(__name__)

THETA_LOW, THETA_HIGH = -6.0, 6.0
_GRID = np.linspace(THETA_LOW, THETA_HIGH, 241)
_CHUNK = 128


class ScoringMode(str, enum.Enum):
    MLE = "mle"
    MAP = "map"


def as_mode(mode) -> ScoringMode:
    try:
        return ScoringMode(str(getattr(mode, "value", mode)).lower())
    except ValueError:
        raise ValidationError(f"unknown scoring mode {mode!r}; use 'mle' or 'map'") from None


def as_bank(model) -> ItemBank:
    """Accept an ItemBank or anything carrying one as ``.bank``."""
    if isinstance(model, ItemBank):
        return model
    bank = getattr(model, "bank", None)
    if isinstance(bank, ItemBank):
        return bank
    raise ValidationError("model must be an ItemBank or carry one as .bank")


@dataclass(frozen=True)
class ResponseSet:
    """Scaled scores for one respondent, keyed by test id."""

    responses: tuple[tuple[str, float], ...]

    def __post_init__(self):
        seen = set()
        clean = []
        for test_id, y in self.responses:
            test_id = str(test_id)
            if test_id in seen:
                raise ValidationError(f"test {test_id!r} appears twice", code="DUPLICATE_TEST")
            seen.add(test_id)
            y = float(y)
            if not (0.0 <= y <= 1.0):
                raise ValidationError(f"score {y!r} for {test_id!r} is outside [0, 1]", code="INVALID_SCORE")
            clean.append((test_id, y))
        object.__setattr__(self, "responses", tuple(clean))

    @classmethod
    def of(cls, responses: Mapping[str, float] | Iterable[tuple[str, float]]) -> "ResponseSet":
        if isinstance(responses, ResponseSet):
            return responses
        items = responses.items() if isinstance(responses, Mapping) else responses
        return cls(tuple(items))

    def __len__(self):
        return len(self.responses)

    def __iter__(self):
        return iter(self.responses)


# ---------------------------------------------------------------------------
# core


def _row(bank: ItemBank, responses: ResponseSet) -> np.ndarray:
    y = np.full(len(bank), np.nan)
    for test_id, value in responses:
        y[bank.position(test_id)] = value
    return y


def grid_loglik_rows(params, Y: np.ndarray) -> np.ndarray:
    """Per-row log-likelihood on the coarse scoring grid, shape ``(n, 241)``."""
    alpha, beta, omega, g1, g2 = (np.asarray(p, dtype=float)[None, :, None] for p in params)
    n = Y.shape[0]
    obj = np.empty((n, _GRID.size))
    for s in range(0, n, _CHUNK):
        obj[s : s + _CHUNK] = log_density_array(
            alpha, beta, omega, g1, g2, _GRID[None, None, :], Y[s : s + _CHUNK, :, None]
        ).sum(axis=1)
    return obj


def _solve(params, Y: np.ndarray, mode: ScoringMode, grid_obj: np.ndarray | None = None):
    """Maximize each row's objective. Returns (theta, se, status).

    ``status`` is 0 for an interior optimum, -1/+1 when the MLE runs off the
    lower/upper end of the bracket, 2 for an empty MLE row. ``grid_obj`` is
    an optional precomputed :func:`grid_loglik_rows` (it only picks the
    bracket; the refined root always uses ``Y`` directly).
    """
    alpha, beta, omega, g1, g2 = (np.asarray(p, dtype=float)[None, :] for p in params)
    n = Y.shape[0]
    prior = mode is ScoringMode.MAP
    status = np.zeros(n, dtype=int)
    empty = np.all(np.isnan(Y), axis=1)

    obj = grid_loglik_rows(params, Y) if grid_obj is None else np.array(grid_obj, dtype=float)
    if prior:
        obj -= 0.5 * _GRID**2
    k = np.argmax(obj, axis=1)

    def score(theta):
        d1, d2 = theta_score_array(alpha, beta, omega, g1, g2, theta[:, None], Y)
        s, c = d1.sum(axis=1), d2.sum(axis=1)
        if prior:
            s, c = s - theta, c - 1.0
        return s, c

    lo = _GRID[np.maximum(k - 1, 0)]
    hi = _GRID[np.minimum(k + 1, _GRID.size - 1)]
    theta = _GRID[k].copy()
    s_lo, _ = score(lo)
    s_hi, _ = score(hi)

    at_edge_low = (k == 0) & (s_lo <= 0)
    at_edge_high = (k == _GRID.size - 1) & (s_hi >= 0)
    bracketed = (s_lo > 0) & (s_hi < 0)
    active = bracketed.copy()
    for _ in range(200):
        if not active.any():
            break
        s, c = score(theta)
        lo = np.where(active & (s > 0), theta, lo)
        hi = np.where(active & (s < 0), theta, hi)
        done = (s == 0) | (np.abs(s) <= 1e-10) | (hi - lo <= 1e-13)
        active &= ~done
        with np.errstate(divide="ignore", invalid="ignore"):
            step = theta - s / c
        bad = ~((c < 0) & (step > lo) & (step < hi))
        theta = np.where(active, np.where(bad, 0.5 * (lo + hi), step), theta)

    # rows the grid did not bracket cleanly fall back to bounded Brent
    for i in np.flatnonzero(~bracketed & ~at_edge_low & ~at_edge_high):
        a = _GRID[max(k[i] - 1, 0)]
        b = _GRID[min(k[i] + 1, _GRID.size - 1)]
        f = lambda t, i=i: -_row_objective(params, Y[i], t, prior)
        theta[i] = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                            options={"xatol": 1e-12}).x

    theta = np.where(at_edge_low, THETA_LOW, np.where(at_edge_high, THETA_HIGH, theta))
    _, c = score(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(c < 0, 1.0 / np.sqrt(-c), np.inf)
    if prior:
        theta = np.where(empty, 0.0, theta)
        se = np.where(empty, 1.0, se)
    else:
        status = np.where(at_edge_low, -1, np.where(at_edge_high, 1, status))
        status = np.where(empty, 2, status)
    return theta, se, status


def _row_objective(params, y, t, prior):
    alpha, beta, omega, g1, g2 = params
    v = float(log_density_array(alpha, beta, omega, g1, g2, t, y).sum())
    return v - 0.5 * t * t if prior else v


def _error_for(status: int, respondent: str | None = None) -> BetacatError:
    who = f"respondent {respondent!r}: " if respondent is not None else ""
    if status == 2:
        return InsufficientDataError(
            f"{who}MLE needs at least one response; use MAP mode", code="EMPTY_RESPONSES"
        )
    side = "upper" if status > 0 else "lower"
    return UnboundedEstimateError(
        f"{who}likelihood keeps increasing toward the {side} end of [-6, 6] "
        "(e.g. all-boundary scores); use MAP mode"
    )


def score_respondent(model, responses, mode="map") -> Theta:
    """Estimate one respondent's theta with items held fixed.

    ``responses`` may be a :class:`ResponseSet`, a mapping or an iterable of
    ``(test_id, scaled_score)``. MAP adds a N(0, 1) prior and always
    succeeds; MLE raises ``UnboundedEstimateError`` when the likelihood has
    no maximum inside [-6, 6].
    """
    bank = as_bank(model)
    mode = as_mode(mode)
    resp = ResponseSet.of(responses)
    Y = _row(bank, resp)[None, :]
    theta, se, status = _solve(bank.arrays(), Y, mode)
    if status[0]:
        raise _error_for(int(status[0]))
    return Theta(float(theta[0]), float(se[0]))


@dataclass
class BatchScores:
    respondent_ids: tuple[str, ...]
    thetas: np.ndarray
    se: np.ndarray
    mode: ScoringMode
    errors: dict[str, BetacatError] = field(default_factory=dict)

    def __len__(self):
        return len(self.respondent_ids)

    def estimates(self) -> list[Theta | None]:
        return [
            None if rid in self.errors else Theta(float(t), float(s))
            for rid, t, s in zip(self.respondent_ids, self.thetas, self.se)
        ]

    def rows(self):
        for rid, t, s in zip(self.respondent_ids, self.thetas, self.se):
            if rid in self.errors:
                yield (rid, None, None, self.mode.value)
            else:
                yield (rid, float(t), float(s), self.mode.value)


def batch_score(model, table: ScoreMatrix, mode="map") -> BatchScores:
    """Score every respondent independently; failures are collected, not raised."""
    bank = as_bank(model)
    mode = as_mode(mode)
    missing = [t for t in table.test_ids if t not in bank]
    if missing:
        raise ValidationError(f"tests {missing} are not in the model", code="UNKNOWN_TEST")
    n = table.shape[0]
    Y = np.full((n, len(bank)), np.nan)
    if n:
        Y[:, [bank.position(t) for t in table.test_ids]] = table.values
    theta, se, status = _solve(bank.arrays(), Y, mode) if n else (np.empty(0), np.empty(0), np.empty(0, int))
    errors = {}
    for i in np.flatnonzero(status):
        rid = table.respondent_ids[i]
        errors[rid] = _error_for(int(status[i]), rid)
        logger.info("%s", errors[rid])
    theta = np.where(status == 0, theta, np.nan)
    se = np.where(status == 0, se, np.nan)
    return BatchScores(tuple(table.respondent_ids), theta, se, mode, errors)


def write_scores_csv(path, scores: BatchScores) -> None:
    """``respondent_id,theta,se,mode``; failed respondents get empty theta and se."""
    write_csv(path, ("respondent_id", "theta", "se", "mode"), scores.rows())


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson r over entries where both values are finite."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("x and y must be 1-D sequences of equal length")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 3:
        raise InsufficientDataError(f"need at least 3 complete pairs, got {x.size}", code="TOO_FEW_PAIRS")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("correlation undefined: zero variance", code="DEGENERATE_VARIANCE")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
