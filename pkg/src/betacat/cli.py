"""Command-line entry point: ``betacat <subcommand> ...``.

Every subcommand writes plain CSV/JSON artifacts into ``--out`` (a
directory). Outputs carry no timestamps and use shortest round-trip float
formatting, so identical inputs and seeds give byte-identical files.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import (
    Metric,
    prescribe,
    replay,
    write_curve_csv,
    write_order_csv,
    write_prescriptions_csv,
    write_time_curve_csv,
)
from .calibration import (
    OptimizerConfig,
    PriorConfig,
    calibrate,
    posterior_predictive_check,
    ppc_rows,
    sample_information_band,
)
from .data import (
    build_meta,
    load_model,
    read_accuracy_csv,
    read_scores_csv,
    read_test_meta,
    save_model,
    scale_scores,
    write_csv,
    write_test_meta,
)
from .errors import BetacatError, ConvergenceError, MissingTimingError, ValidationError
from .model import item_information_array
from .scoring import batch_score, pearson_correlation, write_scores_csv
from .simulation import TruthSpec, default_battery, generate_dataset, unit_meta

logger = logging.getLogger("betacat")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4
INFO_GRID = np.round(np.arange(-40, 41) * 0.1, 10)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _parse_prior(text: str) -> tuple[str, dict]:
    """``name=a,b`` -> (name, dict); alpha takes (mu, sigma), the rest (mean, sd)."""
    try:
        name, values = text.split("=", 1)
        a, b = (float(v) for v in values.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"prior override {text!r} must look like name=a,b") from None
    name = name.strip()
    if name == "alpha":
        return name, {"dist": "lognormal", "mu": a, "sigma": b}
    return name, {"dist": "normal", "mean": a, "sd": b}


def _priors(args) -> PriorConfig:
    doc = PriorConfig().to_dict()
    if args.priors:
        with open(args.priors, encoding="utf-8") as fh:
            doc.update(json.load(fh))
    for name, spec in args.prior or []:
        doc[name] = spec
    return PriorConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args) -> int:
    out = _out_dir(args.out)
    table = read_scores_csv(args.scores)
    meta = build_meta(table, read_test_meta(args.meta))
    data = scale_scores(table, meta)
    for tid, (below, above) in sorted(data.censored.items()):
        if below or above:
            logger.warning("test %s: %d scores clamped low, %d high", tid, below, above)
    config = OptimizerConfig(method=args.method, seed=args.seed, max_iter=args.max_iter,
                             newton_steps=args.newton_steps, se_mode=args.se_mode, raise_on_failure=False)
    model = calibrate(data, _priors(args), config, meta=meta)
    diag = dict(model.diagnostics)
    _write_json(out / "diagnostics.json", diag)
    if not diag["converged"]:
        raise ConvergenceError(f"gradient norm {diag['grad_norm']:.3g} above {config.gtol}", diag)

    save_model(out / "model.json", model.to_saved(meta))
    ppc = posterior_predictive_check(model, data, n_reps=args.ppc_reps, seed=args.seed)
    write_csv(out / "ppc.csv", ("test_id", "series", "bin_lo", "bin_hi", "density"), ppc_rows(ppc))
    write_csv(
        out / "ppc_boundary.csv",
        ("test_id", "series", "p_lower", "p_upper"),
        (
            row
            for tid, res in ppc.items()
            for row in [
                (tid, "observed", *map(float, res.observed_boundary)),
                (tid, "expected", *map(float, res.expected_boundary)),
                *((tid, f"rep{r}", *map(float, b)) for r, b in enumerate(res.replicated_boundary)),
            ]
        ),
    )
    _write_info_curve(out / "info_curve.csv", model, INFO_GRID, args.band_draws, args.seed)
    return EXIT_OK


def _write_info_curve(path, model, grid, draws: int, seed: int, columns: str = "both") -> None:
    """Long format: test_id, theta, information and/or info_per_minute[, band quantiles].

    Bands are quantiles (2.5%, 50%, 97.5%) of information under Laplace draws.
    """
    header = ["test_id", "theta"]
    header += {"both": ["information", "info_per_minute"], "info": ["information"],
               "per-minute": ["info_per_minute"]}[columns]
    if draws:
        header += ["band_lo", "band_mid", "band_hi"]
    rows = []
    for item in model.bank:
        info = np.atleast_1d(item_information_array(
            item.alpha, item.beta, item.omega, item.gamma1, item.gamma2, grid))
        per_min = info / item.median_minutes if item.median_minutes else None
        if columns == "per-minute" and per_min is None:
            raise MissingTimingError(f"test {item.id!r} has no median_minutes")
        band = None
        if draws:
            b = sample_information_band(model, item.id, grid, draws, seed=seed)
            band = np.quantile(b.draws, [0.025, 0.5, 0.975], axis=0)
            if columns == "per-minute":
                band = band / item.median_minutes
        for k, t in enumerate(grid):
            pm = None if per_min is None else float(per_min[k])
            row = [item.id, float(t)]
            row += {"both": [float(info[k]), pm], "info": [float(info[k])], "per-minute": [pm]}[columns]
            if band is not None:
                row += [float(band[0, k]), float(band[1, k]), float(band[2, k])]
            rows.append(row)
    write_csv(path, header, rows)


def _scaled_for_model(model, scores_path):
    table = read_scores_csv(scores_path)
    data = scale_scores(table, model.meta)
    for tid, (below, above) in sorted(data.censored.items()):
        if below or above:
            logger.warning("test %s: %d scores clamped low, %d high", tid, below, above)
    return table, data


def cmd_score(args) -> int:
    out = _out_dir(args.out)
    model = load_model(args.model)
    _, data = _scaled_for_model(model, args.scores)
    result = batch_score(model, data, args.mode)
    for rid, err in result.errors.items():
        logger.warning("%s", err)
    write_scores_csv(out / "scores.csv", result)
    return EXIT_OK


def cmd_info(args) -> int:
    out = _out_dir(args.out)
    model = load_model(args.model)
    grid = np.array(sorted(set(args.theta)), dtype=float) if args.theta else INFO_GRID
    columns = "per-minute" if args.per_minute else "info"
    _write_info_curve(out / "info.csv", model, grid, args.band_draws, args.seed, columns)
    return EXIT_OK


def cmd_replay(args) -> int:
    out = _out_dir(args.out)
    model = load_model(args.model)
    table, data = _scaled_for_model(model, args.scores)
    accuracy = read_accuracy_csv(args.accuracy) if args.accuracy else table.accuracy
    if not accuracy:
        raise ValidationError("replay needs --accuracy (columns respondent_id, accuracy)")
    metrics = [Metric.INFO, Metric.INFO_PER_MINUTE] if args.metric == "both" else [Metric(args.metric)]
    reports = [replay(model, data, accuracy, m, exclude=args.exclude or ()) for m in metrics]
    write_order_csv(out / "order.csv", reports)
    write_curve_csv(out / "curve.csv", reports)
    write_time_curve_csv(out / "curve_time.csv", reports)
    rep = reports[0]
    batch = batch_score(model, data.select_tests(list(rep.test_ids)).select_respondents(
        [data.respondent_ids.index(r) for r in rep.respondent_ids]), "map")
    summary = {
        "n_respondents": len(rep.respondent_ids),
        "tests": list(rep.test_ids),
        "excluded": dict(sorted(rep.excluded.items())),
        "final_r": {r.metric.value: r.final_r for r in reports},
        "batch_r": pearson_correlation(batch.thetas, rep.accuracy) if len(rep.respondent_ids) >= 3 else None,
    }
    _write_json(out / "replay_summary.json", summary)
    return EXIT_OK


def cmd_prescribe(args) -> int:
    out = _out_dir(args.out)
    model = load_model(args.model)
    thetas = args.theta or [0.0]
    plans = {t: prescribe(model, t, args.metric, args.budget) for t in thetas}
    write_prescriptions_csv(out / "prescriptions.csv", plans)
    return EXIT_OK


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    bank = default_battery(seed=args.seed, n_items=args.items)
    data, thetas = generate_dataset(
        TruthSpec(bank, args.n, seed=args.seed, missing_rate=args.missing_rate)
    )
    rows = (
        (rid, tid, float(y))
        for i, rid in enumerate(data.respondent_ids)
        for tid, y in zip(data.test_ids, data.values[i])
        if not math.isnan(y)
    )
    write_csv(out / "scores.csv", ("respondent_id", "test_id", "raw_score"), rows)
    write_test_meta(out / "meta.json", unit_meta(bank))
    rng = np.random.default_rng([args.seed, 1])
    accuracy = -thetas + args.accuracy_noise * rng.standard_normal(thetas.size)
    write_csv(out / "accuracy.csv", ("respondent_id", "accuracy"),
              zip(data.respondent_ids, map(float, accuracy)))
    truth = {
        "seed": args.seed,
        "items": [
            {"id": it.id, "alpha": it.alpha, "beta": it.beta, "omega": it.omega,
             "gamma1": it.gamma1, "gamma2": it.gamma2, "median_minutes": it.median_minutes}
            for it in bank
        ],
        "thetas": dict(zip(data.respondent_ids, map(float, thetas))),
    }
    _write_json(out / "truth.json", truth)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(load_model(args.model), idle_timeout=args.idle_timeout)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="betacat", description="Calibrate, score and adaptively select tests with a beta/graded-response model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=True, out=True):
        if model:
            sp.add_argument("--model", required=True, help="model JSON from `calibrate`")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("calibrate", help="fit item parameters by MAP with Laplace uncertainty")
    common(sp, model=False)
    sp.add_argument("--scores", required=True, help="CSV: respondent_id,test_id,raw_score")
    sp.add_argument("--meta", required=True, help="JSON array of test metadata")
    sp.add_argument("--priors", help="JSON file overriding prior settings")
    sp.add_argument("--prior", action="append", type=_parse_prior, metavar="NAME=A,B",
                    help="override one prior, e.g. beta=0,2 or alpha=0,1 (repeatable)")
    sp.add_argument("--max-iter", type=int, default=2000, help="L-BFGS iterations")
    sp.add_argument("--newton-steps", type=int, default=50, help="Newton polish steps after L-BFGS")
    sp.add_argument("--method", choices=("marginal", "joint"), default="marginal",
                    help="integrate thetas out (marginal) or fit them as parameters (joint)")
    sp.add_argument("--se-mode", choices=("joint", "conditional"), default="joint",
                    help="item standard errors for --method joint")
    sp.add_argument("--ppc-reps", type=int, default=100)
    sp.add_argument("--band-draws", type=int, default=0,
                    help="add Laplace information bands from this many draws")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("score", help="score respondents with a frozen model")
    common(sp)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--mode", choices=("mle", "map"), default="map")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("info", help="information curves per test")
    common(sp)
    sp.add_argument("--theta", type=float, action="append", help="theta value (repeatable)")
    sp.add_argument("--per-minute", action="store_true", help="divide by median_minutes")
    sp.add_argument("--band-draws", type=int, default=0)
    sp.set_defaults(func=cmd_info)

    sp = sub.add_parser("replay", help="replay the adaptive loop on recorded scores")
    common(sp)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--accuracy", help="CSV: respondent_id,accuracy")
    sp.add_argument("--metric", choices=("info", "info-per-minute", "both"), default="both")
    sp.add_argument("--exclude", action="append", metavar="TEST_ID", help="leave a test out (repeatable)")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("prescribe", help="fixed-theta test orderings under a time budget")
    common(sp)
    sp.add_argument("--theta", type=float, action="append", help="theta value (repeatable; default 0)")
    sp.add_argument("--metric", choices=("info", "info-per-minute"), default="info")
    sp.add_argument("--budget", type=float, default=math.inf, help="minutes (default: no limit)")
    sp.set_defaults(func=cmd_prescribe)

    sp = sub.add_parser("simulate", help="synthetic battery, scores, metadata and truth")
    common(sp, model=False)
    sp.add_argument("--n", type=int, default=500, help="respondents")
    sp.add_argument("--items", type=int, default=18)
    sp.add_argument("--missing-rate", type=float, default=0.0)
    sp.add_argument("--accuracy-noise", type=float, default=0.0,
                    help="sd of noise added to accuracy = -theta")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("serve", help="run the session HTTP service")
    sp.add_argument("--model", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--idle-timeout", type=float, default=1800.0, help="seconds")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except BetacatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if exc.kind == "numeric" else EXIT_INPUT if exc.kind == "input" else EXIT_INTERNAL
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"error: internal: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
