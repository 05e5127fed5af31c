"""Reading score tables, fixing test bounds, scaling to [0, 1], model files.

File formats
------------
scores CSV      ``respondent_id,test_id,raw_score``
accuracy CSV    ``respondent_id,accuracy``  (lower is better)
tests JSON      ``[{"test_id", "lower_bound"?, "upper_bound"?, "median_minutes"}]``
model JSON      ``{"schema_version", "items": [...], "prior_config", "provenance"}``
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConstantTestError,
    MissingMetadataError,
    SchemaVersionError,
    ValidationError,
)
from .model import BoundaryCategory, ItemBank, ItemParams

SCHEMA_VERSION = 1


class BoundSource(str, enum.Enum):
    THEORETICAL = "theoretical"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class TestMeta:
    test_id: str
    lower_bound: float
    upper_bound: float
    bound_source: BoundSource = BoundSource.EMPIRICAL
    median_minutes: float | None = None

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        if not (math.isfinite(self.lower_bound) and math.isfinite(self.upper_bound)):
            raise ValidationError(f"test {self.test_id!r}: bounds must be finite")
        if not self.lower_bound < self.upper_bound:
            raise ValidationError(f"test {self.test_id!r}: lower_bound must be < upper_bound")
        if self.median_minutes is not None and not self.median_minutes > 0:
            raise ValidationError(f"test {self.test_id!r}: median_minutes must be > 0")

    def scale(self, raw):
        raw = np.asarray(raw, dtype=float)
        return (raw - self.lower_bound) / (self.upper_bound - self.lower_bound)

    def unscale(self, scaled):
        scaled = np.asarray(scaled, dtype=float)
        return self.lower_bound + scaled * (self.upper_bound - self.lower_bound)


@dataclass
class RawScoreTable:
    """Long-format raw scores with an optional per-respondent accuracy column."""

    rows: list[tuple[str, str, float]]
    accuracy: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        clean = []
        for resp, test, raw in self.rows:
            key = (str(resp), str(test))
            if key in seen:
                raise ValidationError(f"duplicate entry for respondent {key[0]!r}, test {key[1]!r}")
            seen.add(key)
            raw = float(raw)
            if not math.isfinite(raw):
                raise ValidationError(f"non-finite raw score for {key}")
            clean.append((key[0], key[1], raw))
        self.rows = clean

    @property
    def respondent_ids(self) -> list[str]:
        return list(dict.fromkeys(r for r, _, _ in self.rows))

    @property
    def test_ids(self) -> list[str]:
        return list(dict.fromkeys(t for _, t, _ in self.rows))

    def by_test(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for _, test, raw in self.rows:
            out.setdefault(test, []).append(raw)
        return out


@dataclass(frozen=True)
class ScoreMatrix:
    """Respondents x tests matrix of scaled scores; NaN marks a missing entry.

    ``censored`` maps test id to ``(n_below, n_above)``, the number of raw
    scores that fell outside the frozen bounds and were clamped.
    """

    respondent_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    values: np.ndarray
    censored: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        object.__setattr__(self, "respondent_ids", tuple(self.respondent_ids))
        object.__setattr__(self, "test_ids", tuple(self.test_ids))
        if values.shape != (len(self.respondent_ids), len(self.test_ids)):
            raise ValidationError(
                f"values shape {values.shape} does not match "
                f"{len(self.respondent_ids)} respondents x {len(self.test_ids)} tests"
            )
        present = values[~np.isnan(values)]
        if np.any((present < 0.0) | (present > 1.0)):
            raise ValidationError("scaled scores must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def mask(self) -> np.ndarray:
        """True where a score is observed."""
        return ~np.isnan(self.values)

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())

    @property
    def categories(self) -> np.ndarray:
        """Integer category codes (1, 2, 3); 0 where missing."""
        v = self.values
        cats = np.where(v == 0.0, BoundaryCategory.LOWER, BoundaryCategory.INTERIOR)
        cats = np.where(v == 1.0, BoundaryCategory.UPPER, cats)
        return np.where(np.isnan(v), 0, cats).astype(int)

    def responses(self, i: int) -> list[tuple[str, float]]:
        row = self.values[i]
        return [(t, float(y)) for t, y in zip(self.test_ids, row) if not math.isnan(y)]

    def select_tests(self, test_ids: Sequence[str]) -> "ScoreMatrix":
        cols = [self.test_ids.index(t) for t in test_ids]
        return ScoreMatrix(
            self.respondent_ids,
            tuple(test_ids),
            self.values[:, cols],
            {t: self.censored[t] for t in test_ids if t in self.censored},
        )

    def select_respondents(self, rows: Sequence[int]) -> "ScoreMatrix":
        rows = list(rows)
        return ScoreMatrix(
            tuple(self.respondent_ids[i] for i in rows),
            self.test_ids,
            self.values[rows],
            dict(self.censored),
        )

    def complete_cases(self) -> tuple["ScoreMatrix", list[str]]:
        """Rows with every test observed, plus the ids of the dropped rows."""
        full = self.mask.all(axis=1)
        dropped = [r for r, ok in zip(self.respondent_ids, full) if not ok]
        return self.select_respondents(np.flatnonzero(full)), dropped

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.respondent_ids).encode())
        h.update(b"\x1e")
        h.update("\x1f".join(self.test_ids).encode())
        h.update(b"\x1e")
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# bounds and scaling


def compute_empirical_bounds(
    table: RawScoreTable,
    overrides: Mapping[str, tuple[float, float]] | None = None,
    minutes: Mapping[str, float | None] | None = None,
) -> dict[str, TestMeta]:
    """Per-test bounds from the observed min and max.

    ``overrides`` supplies theoretical bounds that are kept verbatim; a test
    without an override whose observations are all equal raises
    ``ConstantTestError``.
    """
    overrides = overrides or {}
    minutes = minutes or {}
    observed = table.by_test()
    out = {}
    for test in list(observed) + [t for t in overrides if t not in observed]:
        mm = minutes.get(test)
        if test in overrides:
            lo, hi = overrides[test]
            out[test] = TestMeta(test, float(lo), float(hi), BoundSource.THEORETICAL, mm)
            continue
        vals = observed[test]
        lo, hi = min(vals), max(vals)
        if lo == hi:
            raise ConstantTestError(f"test {test!r} has a single observed value {lo}")
        out[test] = TestMeta(test, lo, hi, BoundSource.EMPIRICAL, mm)
    return out


def scale_scores(
    table: RawScoreTable,
    meta: Mapping[str, TestMeta],
    test_ids: Sequence[str] | None = None,
) -> ScoreMatrix:
    """Affine map of raw scores onto [0, 1] using frozen bounds.

    Scores outside the bounds are clamped to the nearest boundary and counted
    in ``ScoreMatrix.censored``.
    """
    tests = list(test_ids) if test_ids is not None else table.test_ids
    missing = sorted(set(tests) - set(meta))
    if missing:
        raise MissingMetadataError(f"no bounds for tests {missing}")
    respondents = table.respondent_ids
    r_index = {r: k for k, r in enumerate(respondents)}
    t_index = {t: k for k, t in enumerate(tests)}
    values = np.full((len(respondents), len(tests)), np.nan)
    below = dict.fromkeys(tests, 0)
    above = dict.fromkeys(tests, 0)
    for resp, test, raw in table.rows:
        if test not in t_index:
            continue
        m = meta[test]
        if raw < m.lower_bound:
            below[test] += 1
        elif raw > m.upper_bound:
            above[test] += 1
        values[r_index[resp], t_index[test]] = min(max(float(m.scale(raw)), 0.0), 1.0)
    censored = {t: (below[t], above[t]) for t in tests if below[t] or above[t]}
    return ScoreMatrix(tuple(respondents), tuple(tests), values, censored)


# ---------------------------------------------------------------------------
# file IO


def read_scores_csv(path: str | os.PathLike) -> RawScoreTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"respondent_id", "test_id", "raw_score"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns {sorted(need)}")
        for line in reader:
            raw = (line["raw_score"] or "").strip()
            if raw == "" or raw.upper() == "NA":
                continue
            try:
                value = float(raw)
            except ValueError:
                raise ValidationError(f"{path}: bad raw_score {raw!r}") from None
            rows.append((line["respondent_id"], line["test_id"], value))
    return RawScoreTable(rows)


def read_accuracy_csv(path: str | os.PathLike) -> dict[str, float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"respondent_id", "accuracy"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns respondent_id, accuracy")
        for line in reader:
            try:
                out[line["respondent_id"]] = float(line["accuracy"])
            except ValueError:
                raise ValidationError(f"{path}: bad accuracy {line['accuracy']!r}") from None
    return out


def read_test_meta(path: str | os.PathLike) -> list[dict]:
    """Raw metadata records; bounds are optional per record."""
    try:
        with open(path, encoding="utf-8") as fh:
            records = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(records, list):
        raise ValidationError(f"{path}: expected a JSON array")
    for rec in records:
        if not isinstance(rec, dict) or "test_id" not in rec:
            raise ValidationError(f"{path}: every record needs a test_id")
        if ("lower_bound" in rec) != ("upper_bound" in rec):
            raise ValidationError(f"{path}: test {rec['test_id']!r} has only one bound")
    return records


def write_test_meta(path: str | os.PathLike, meta: Mapping[str, TestMeta]) -> None:
    """Inverse of :func:`read_test_meta` for fully specified metadata."""
    records = []
    for m in meta.values():
        rec = {"test_id": m.test_id, "lower_bound": m.lower_bound, "upper_bound": m.upper_bound}
        if m.median_minutes is not None:
            rec["median_minutes"] = m.median_minutes
        records.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(records, indent=2, allow_nan=False) + "\n")


def build_meta(table: RawScoreTable, records: Iterable[dict]) -> dict[str, TestMeta]:
    """Combine metadata records with empirical bounds from ``table``."""
    records = list(records)
    overrides = {
        r["test_id"]: (r["lower_bound"], r["upper_bound"])
        for r in records
        if r.get("lower_bound") is not None
    }
    minutes = {r["test_id"]: r.get("median_minutes") for r in records}
    unknown = sorted(set(table.test_ids) - set(minutes))
    if unknown:
        raise MissingMetadataError(f"tests {unknown} are not listed in the metadata file")
    meta = compute_empirical_bounds(table, overrides, minutes)
    order = [r["test_id"] for r in records]
    return {t: meta[t] for t in order if t in meta}


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# model persistence


@dataclass
class SavedModel:
    """Everything needed to score new respondents with frozen parameters."""

    bank: ItemBank
    meta: dict[str, TestMeta] = field(default_factory=dict)
    prior_config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    se: dict[str, dict[str, float]] = field(default_factory=dict)
    # 5x5 Laplace covariance over (log alpha, beta, omega, gamma1, log(gamma2 - gamma1))
    item_cov: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        items = []
        for it in self.bank:
            rec = {
                "id": it.id,
                "alpha": it.alpha,
                "beta": it.beta,
                "omega": it.omega,
                "gamma1": it.gamma1,
                "gamma2": it.gamma2,
                "bounds": None,
                "median_minutes": it.median_minutes,
            }
            m = self.meta.get(it.id)
            if m is not None:
                rec["bounds"] = {
                    "lower": m.lower_bound,
                    "upper": m.upper_bound,
                    "source": m.bound_source.value,
                }
            if it.id in self.se:
                rec["se"] = dict(self.se[it.id])
            if it.id in self.item_cov:
                rec["laplace_cov"] = np.asarray(self.item_cov[it.id], dtype=float).tolist()
            items.append(rec)
        return {
            "schema_version": SCHEMA_VERSION,
            "items": items,
            "prior_config": self.prior_config,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SavedModel":
        if not isinstance(doc, dict):
            raise ValidationError("model document must be a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"expected schema_version {SCHEMA_VERSION}, found {version!r}")
        items, meta, se, cov = [], {}, {}, {}
        try:
            for rec in doc["items"]:
                mm = rec.get("median_minutes")
                items.append(
                    ItemParams(
                        id=str(rec["id"]),
                        alpha=float(rec["alpha"]),
                        beta=float(rec["beta"]),
                        omega=float(rec["omega"]),
                        gamma1=float(rec["gamma1"]),
                        gamma2=float(rec["gamma2"]),
                        median_minutes=None if mm is None else float(mm),
                    )
                )
                bounds = rec.get("bounds")
                if bounds is not None:
                    meta[rec["id"]] = TestMeta(
                        rec["id"],
                        float(bounds["lower"]),
                        float(bounds["upper"]),
                        BoundSource(bounds.get("source", "empirical")),
                        None if mm is None else float(mm),
                    )
                if rec.get("se") is not None:
                    se[rec["id"]] = {k: float(v) for k, v in rec["se"].items()}
                if rec.get("laplace_cov") is not None:
                    c = np.array(rec["laplace_cov"], dtype=float)
                    if c.shape != (5, 5):
                        raise ValidationError(f"item {rec['id']!r}: laplace_cov must be 5x5")
                    cov[rec["id"]] = c
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise

            raise ValidationError(f"malformed model document: {exc!r}") from None
        return cls(
            bank=ItemBank(tuple(items)),
            meta=meta,
            prior_config=doc.get("prior_config") or {},
            provenance=doc.get("provenance") or {},
            se=se,
            item_cov=cov,
        )

    def scale(self, test_id: str, raw: float) -> float:
        """Scale a raw score with this model's frozen bounds, clamping to [0, 1]."""
        if test_id not in self.meta:
            raise MissingMetadataError(f"model has no bounds for test {test_id!r}")
        return min(max(float(self.meta[test_id].scale(raw)), 0.0), 1.0)


def save_model(path: str | os.PathLike, model: SavedModel) -> None:
    text = json.dumps(model.to_dict(), indent=2, sort_keys=False, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_model(path: str | os.PathLike) -> SavedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: corrupted model file ({exc})") from None
    return SavedModel.from_dict(doc)
