"""Adaptive test selection, replay of recorded batteries and fixed-theta prescriptions.

The loop per respondent: start at theta = 0, give the unadministered test
with the largest information (or information per median minute) at the
current estimate, rescore by MAP on everything administered so far, repeat.
Ties go to the lexicographically smallest test id.
"""

from __future__ import annotations

import enum
import logging
import math
import uuid
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ScoreMatrix, write_csv
from .errors import (
    DuplicateTestError,
    MissingTimingError,
    NoTestsRemainingError,
    UnknownTestError,
    ValidationError,
)
from .model import ItemBank, Theta, item_information_array, log_density_array
from .scoring import _GRID, ScoringMode, _solve, as_bank, pearson_correlation

logger = logging.getLogger(__name__)


class Metric(str, enum.Enum):
    INFO = "info"
    INFO_PER_MINUTE = "info-per-minute"


def as_metric(metric) -> Metric:
    value = str(getattr(metric, "value", metric)).lower().replace("_", "-")
    try:
        return Metric(value)
    except ValueError:
        raise ValidationError(f"unknown metric {metric!r}; use 'info' or 'info-per-minute'") from None


def _metric_values(bank: ItemBank, ids: Sequence[str], theta, metric: Metric) -> np.ndarray:
    """Selection criterion for ``ids`` at ``theta`` (scalar or column vector)."""
    alpha, beta, omega, g1, g2 = bank.arrays(ids)
    info = item_information_array(alpha, beta, omega, g1, g2, theta)
    if metric is Metric.INFO:
        return info
    return info / bank.minutes(ids)  # raises MissingTimingError when any timing is absent


def _argmax_lexicographic(ids: Sequence[str], values: np.ndarray) -> str:
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    best = order[int(np.argmax(np.asarray(values)[order]))]
    return ids[best]


@dataclass(frozen=True)
class Administration:
    test_id: str
    score: float
    cumulative_minutes: float
    theta: float
    se: float


@dataclass
class Session:
    """One respondent's adaptive run. ``metric`` cannot change after creation."""

    session_id: str
    bank: ItemBank
    metric: Metric
    eligible: tuple[str, ...]
    administered: list[Administration] = field(default_factory=list)
    current_theta: Theta = field(default_factory=lambda: Theta(0.0, 1.0))

    def __setattr__(self, name, value):
        if name == "metric" and "metric" in self.__dict__:
            raise AttributeError("a session's metric is fixed at creation")
        super().__setattr__(name, value)

    @property
    def administered_ids(self) -> list[str]:
        return [a.test_id for a in self.administered]

    @property
    def remaining(self) -> list[str]:
        done = set(self.administered_ids)
        return [t for t in self.eligible if t not in done]

    @property
    def cumulative_minutes(self) -> float:
        return self.administered[-1].cumulative_minutes if self.administered else 0.0

    @property
    def responses(self) -> list[tuple[str, float]]:
        return [(a.test_id, a.score) for a in self.administered]

    def next_test(self) -> str | None:
        return select_next(self) if self.remaining else None


def select_next(session: Session) -> str:
    """Best remaining test at the session's current theta."""
    remaining = session.remaining
    if not remaining:
        raise NoTestsRemainingError(f"session {session.session_id!r} has no tests left")
    values = _metric_values(session.bank, remaining, session.current_theta.value, session.metric)
    return _argmax_lexicographic(remaining, np.atleast_1d(values))


def start_session(
    model, metric=Metric.INFO, session_id: str | None = None, eligible: Sequence[str] | None = None
) -> Session:
    """New session at theta = 0 (prior mean, se 1)."""
    bank = as_bank(model)
    metric = as_metric(metric)
    if len(bank) == 0:
        raise ValidationError("model has no items", code="EMPTY_MODEL")
    ids = tuple(bank.ids) if eligible is None else tuple(eligible)
    unknown = [t for t in ids if t not in bank]
    if unknown:
        raise UnknownTestError(f"tests {unknown} are not in the model")
    if not ids:
        raise ValidationError("no eligible tests", code="EMPTY_MODEL")
    if metric is Metric.INFO_PER_MINUTE:
        _metric_values(bank, list(ids), 0.0, metric)  # fail early on missing timings
    return Session(session_id or uuid.uuid4().hex, bank, metric, ids)


def record_result(session: Session, test_id: str, score: float) -> Session:
    """Add a scaled score, advance the clock by the test's median time, rescore by MAP.

    The session is only modified once every check has passed.
    """
    if test_id not in session.bank or test_id not in session.eligible:
        raise UnknownTestError(f"test {test_id!r} is not eligible in this session")
    if test_id in session.administered_ids:
        raise DuplicateTestError(f"test {test_id!r} was already administered")
    try:
        score = float(score)
    except (TypeError, ValueError):
        raise ValidationError(f"score {score!r} is not a number", code="INVALID_SCORE") from None
    if not (0.0 <= score <= 1.0):
        raise ValidationError(f"scaled score {score!r} is outside [0, 1]", code="INVALID_SCORE")
    bank = session.bank
    y = np.full(len(bank), np.nan)
    for tid, v in session.responses + [(test_id, score)]:
        y[bank.position(tid)] = v
    theta, se, _ = _solve(bank.arrays(), y[None, :], ScoringMode.MAP)
    minutes = bank[test_id].median_minutes
    cumulative = session.cumulative_minutes + (minutes if minutes is not None else 0.0)
    session.administered.append(Administration(test_id, score, cumulative, float(theta[0]), float(se[0])))
    session.current_theta = Theta(float(theta[0]), float(se[0]))
    return session


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayReport:
    metric: Metric
    test_ids: tuple[str, ...]
    respondent_ids: tuple[str, ...]
    orders: list[list[str]]
    thetas: np.ndarray
    minutes: np.ndarray
    accuracy: np.ndarray
    excluded: dict[str, str]

    @property
    def n_steps(self) -> int:
        return len(self.test_ids)

    def order_frequency(self) -> np.ndarray:
        """Counts with shape (test, position), rows in ``test_ids`` order."""
        index = {t: k for k, t in enumerate(self.test_ids)}
        counts = np.zeros((self.n_steps, self.n_steps), dtype=int)
        for order in self.orders:
            for pos, tid in enumerate(order):
                counts[index[tid], pos] += 1
        return counts

    def step_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean cumulative minutes, r) at each administration index."""
        mean_minutes = self.minutes.mean(axis=0) if len(self.respondent_ids) else np.full(self.n_steps, np.nan)
        r = np.array([_safe_r(self.thetas[:, k], self.accuracy) for k in range(self.n_steps)])
        return mean_minutes, r

    def time_curve(self, times: Sequence[float] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """r on a time grid; each respondent's estimate is held until their next test ends.

        Before a respondent's first test finishes their estimate is the prior
        mean 0. Default grid: every whole minute up to the longest total time.
        """
        if times is None:
            total = float(self.minutes[:, -1].max()) if self.minutes.size else 0.0
            times = np.arange(0.0, math.floor(total) + 1.0)
        times = np.asarray(times, dtype=float)
        r = np.empty(times.size)
        for k, t in enumerate(times):
            done = (self.minutes <= t).sum(axis=1)
            running = np.where(done > 0, self.thetas[np.arange(len(done)), np.maximum(done - 1, 0)], 0.0)
            r[k] = _safe_r(running, self.accuracy)
        return times, r

    @property
    def final_r(self) -> float:
        return self.step_curve()[1][-1]


def _safe_r(x, y) -> float:
    try:
        return pearson_correlation(x, y)
    except ValidationError:
        return float("nan")


def _align_accuracy(data: ScoreMatrix, accuracy) -> np.ndarray:
    if isinstance(accuracy, Mapping):
        return np.array([float(accuracy.get(r, np.nan)) for r in data.respondent_ids])
    acc = np.asarray(accuracy, dtype=float)
    if acc.shape != (data.shape[0],):
        raise ValidationError("accuracy must be a mapping or align with the score rows")
    return acc


def replay(
    model,
    data: ScoreMatrix,
    accuracy,
    metric=Metric.INFO,
    exclude: Sequence[str] = (),
) -> ReplayReport:
    """Run the adaptive loop on recorded scores as if no test had been taken.

    Only respondents with every eligible test observed and a finite accuracy
    take part; the rest are listed in ``excluded`` with a reason. All
    respondents advance in lockstep, one administration per step.
    """
    bank = as_bank(model)
    metric = as_metric(metric)
    eligible = [t for t in data.test_ids if t not in set(exclude)]
    unknown = [t for t in eligible if t not in bank]
    if unknown:
        raise UnknownTestError(f"tests {unknown} are not in the model")
    if not eligible:
        raise ValidationError("no tests left after exclusions", code="NO_TESTS")
    acc_all = _align_accuracy(data, accuracy)
    sub = data.select_tests(eligible)
    full = sub.mask.all(axis=1)
    excluded = {}
    for rid, ok, a in zip(data.respondent_ids, full, acc_all):
        if not ok:
            excluded[rid] = "missing scores"
        elif not np.isfinite(a):
            excluded[rid] = "missing accuracy"
    keep = np.flatnonzero(full & np.isfinite(acc_all))
    if excluded:
        logger.info("replay excluded %d respondents", len(excluded))
    recorded_all = sub.values[keep]
    accuracy_kept = acc_all[keep]
    n, J = len(keep), len(eligible)

    # work in bank coordinates so scoring matches a live session exactly
    params = bank.arrays()
    cols = np.array([bank.position(t) for t in eligible])
    recorded = np.full((n, len(bank)), np.nan)
    recorded[:, cols] = recorded_all
    lex = sorted(range(J), key=lambda k: eligible[k])
    lex_cols = cols[lex]
    lex_ids = [eligible[k] for k in lex]
    sel_params = [p[lex_cols] for p in params]
    minutes_lex = np.array(
        [np.nan if bank[t].median_minutes is None else bank[t].median_minutes for t in lex_ids]
    )
    if metric is Metric.INFO_PER_MINUTE and np.any(np.isnan(minutes_lex)):
        raise MissingTimingError("info-per-minute replay needs median_minutes for every test")
    minutes_lex = np.nan_to_num(minutes_lex, nan=0.0)

    Y = np.full_like(recorded, np.nan)
    grid_obj = np.zeros((n, _GRID.size))
    remaining = np.ones((n, J), dtype=bool)
    theta = np.zeros(n)
    orders = np.empty((n, J), dtype=int)
    thetas = np.empty((n, J))
    minutes = np.empty((n, J))
    clock = np.zeros(n)
    rows = np.arange(n)
    for step in range(J):
        info = item_information_array(*(p[None, :] for p in sel_params), theta[:, None])
        if metric is Metric.INFO_PER_MINUTE:
            info = info / minutes_lex[None, :]
        info = np.where(remaining, info, -np.inf)
        pick = np.argmax(info, axis=1)
        remaining[rows, pick] = False
        bank_col = lex_cols[pick]
        y = recorded[rows, bank_col]
        Y[rows, bank_col] = y
        grid_obj += log_density_array(
            *(p[bank_col][:, None] for p in params), _GRID[None, :], y[:, None]
        )
        theta, _, _ = _solve(params, Y, ScoringMode.MAP, grid_obj)
        clock = clock + minutes_lex[pick]
        orders[:, step] = pick
        thetas[:, step] = theta
        minutes[:, step] = clock

    return ReplayReport(
        metric=metric,
        test_ids=tuple(eligible),
        respondent_ids=tuple(data.respondent_ids[i] for i in keep),
        orders=[[lex_ids[k] for k in row] for row in orders],
        thetas=thetas,
        minutes=minutes,
        accuracy=accuracy_kept,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# prescriptions


@dataclass(frozen=True)
class Prescription:
    position: int
    test_id: str
    cumulative_minutes: float


def prescribe(model, theta: float, metric=Metric.INFO, time_budget: float = math.inf) -> list[Prescription]:
    """Tests ranked by the metric at fixed ``theta``, cut at the time budget.

    Keeps the longest prefix whose cumulative median time is within
    ``time_budget``; an empty list (with a warning) when even the first test
    does not fit.
    """
    bank = as_bank(model)
    metric = as_metric(metric)
    ids = sorted(bank.ids)
    minutes = bank.minutes(ids)  # raises MissingTimingError when any timing is absent
    values = np.atleast_1d(_metric_values(bank, ids, float(theta), metric))
    # stable sort on -value keeps lexicographic order among ties
    order = np.argsort(-values, kind="stable")
    out, total = [], 0.0
    for pos, k in enumerate(order, start=1):
        total += float(minutes[k])
        if total > time_budget:
            break
        out.append(Prescription(pos, ids[k], total))
    if not out and len(ids):
        warnings.warn(f"time budget {time_budget} is shorter than the first test", stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# CSV bundles


def write_order_csv(path, reports: Sequence[ReplayReport]) -> None:
    rows = (
        (rid, pos, tid, rep.metric.value)
        for rep in reports
        for rid, order in zip(rep.respondent_ids, rep.orders)
        for pos, tid in enumerate(order, start=1)
    )
    write_csv(path, ("respondent", "position", "test_id", "metric"), rows)


def _by_metric(reports: Sequence[ReplayReport]) -> dict[Metric, ReplayReport]:
    out = {}
    for rep in reports:
        if rep.metric in out:
            raise ValidationError(f"two replay reports for metric {rep.metric.value}")
        out[rep.metric] = rep
    return out


def write_curve_csv(path, reports: Sequence[ReplayReport]) -> None:
    """Index-aligned curves.

    ``mean_minutes`` is taken from the info run when present, otherwise from
    the info-per-minute run; both are also given separately.
    """
    reps = _by_metric(reports)
    steps = max(r.n_steps for r in reps.values())
    curves = {m: reps[m].step_curve() if m in reps else (None, None) for m in Metric}

    def at(arr, k):
        return None if arr is None else float(arr[k])

    rows = []
    for k in range(steps):
        mm_info = at(curves[Metric.INFO][0], k)
        mm_ipm = at(curves[Metric.INFO_PER_MINUTE][0], k)
        rows.append((
            k + 1,
            mm_info if mm_info is not None else mm_ipm,
            at(curves[Metric.INFO][1], k),
            at(curves[Metric.INFO_PER_MINUTE][1], k),
            mm_info,
            mm_ipm,
        ))
    header = ("step", "mean_minutes", "r_info", "r_info_per_minute",
              "mean_minutes_info", "mean_minutes_info_per_minute")
    write_csv(path, header, rows)


def write_time_curve_csv(path, reports: Sequence[ReplayReport]) -> None:
    """Time-aligned curves on a shared whole-minute grid."""
    reps = _by_metric(reports)
    total = max(float(r.minutes[:, -1].max()) if r.minutes.size else 0.0 for r in reps.values())
    times = np.arange(0.0, math.floor(total) + 1.0)
    curves = {m: reps[m].time_curve(times)[1] if m in reps else None for m in Metric}
    rows = (
        (float(t),
         None if curves[Metric.INFO] is None else float(curves[Metric.INFO][k]),
         None if curves[Metric.INFO_PER_MINUTE] is None else float(curves[Metric.INFO_PER_MINUTE][k]))
        for k, t in enumerate(times)
    )
    write_csv(path, ("minutes", "r_info", "r_info_per_minute"), rows)


def write_prescriptions_csv(path, prescriptions: Mapping[float, Sequence[Prescription]]) -> None:
    rows = (
        (float(theta), p.position, p.test_id, p.cumulative_minutes)
        for theta, plist in prescriptions.items()
        for p in plist
    )
    write_csv(path, ("theta", "position", "test_id", "cumulative_minutes"), rows)
