"""Command-line entry points: ``swedge analyze`` and ``swedge simulate``.

Exit codes: 0 success, 2 usage error, 3 data validation error, 4 fit failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .data_model import DataError, load_trial_csv
from .design import Structure, TreatmentEffectSpec
from .estfun import SandwichError
from .lmm import Correlation, FitError
from .report import Scale, render

log = logging.getLogger("swedge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _parse_probs(text):
    if text is None:
        return None
    try:
        probs = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--design-probs must be comma-separated numbers, got {text!r}") from None
    if not probs:
        raise UsageError("--design-probs is empty")
    return probs


def _parse_adjust(text):
    if text is None or text.strip().lower() == "none":
        return []
    return [c.strip() for c in text.split(",") if c.strip()]


def _parse_lrt(text):
    if text is None:
        return None
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"--lrt expects RESTRICTED:GENERAL, got {text!r}")
    try:
        return Structure.parse(parts[0]), Structure.parse(parts[1])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_combination(args):
    try:
        structure = Structure.parse(args.structure)
        scale = Scale.parse(args.scale)
        corr = Correlation.parse(args.correlation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if scale.is_ratio and structure not in (Structure.PERIOD, Structure.SATURATED):
        raise UsageError(f"--scale {scale.value} requires --structure period or saturated; "
                         "ratio estimands are only defined per period")
    if args.estimator == "lmm" and args.link not in (None, "identity"):
        raise UsageError("--link applies to --estimator gee only; the mixed model uses the identity link")
    if args.lrt is not None and args.estimator != "lmm":
        raise UsageError("--lrt requires --estimator lmm")
    return structure, scale, corr


def _fit_report(data, args, structure, scale):
    from .gee import WorkingCorrelation, estimate_estimands_gee, fit_gee
    from .lmm import extract_estimands, fit_lmm
    spec = TreatmentEffectSpec(structure, data.n_periods)
    if args.estimator == "lmm":
        fit = fit_lmm(data, spec, args.correlation)
        return extract_estimands(fit, scale=scale.value)
    fit = fit_gee(data, spec, WorkingCorrelation(args.correlation), args.link or "identity")
    return estimate_estimands_gee(fit, scale=scale.value)


def _lrt_block(data, args, pair):
    from .lmm import fit_lmm, lrt_structures
    restricted, general = pair
    J = data.n_periods
    g = fit_lmm(data, TreatmentEffectSpec(general, J), args.correlation)
    r = fit_lmm(data, TreatmentEffectSpec(restricted, J), args.correlation,
                max_period=g.design.n_periods_used)
    try:
        return lrt_structures(r, g).as_dict()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_analyze(args) -> int:
    structure, scale, _ = _check_combination(args)
    probs = _parse_probs(args.design_probs)
    lrt = _parse_lrt(args.lrt)
    data = load_trial_csv(args.data, design_probs=probs)
    missing = [c for c in _parse_adjust(args.adjust) if c not in data.covariate_names]
    if missing:
        raise UsageError(f"--adjust names unknown covariate(s): {', '.join(missing)}")
    data = data.select_covariates(_parse_adjust(args.adjust))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = _fit_report(data, args, structure, scale)
        if lrt is not None:
            report.tests.append(_lrt_block(data, args, lrt))
    for w in caught:
        log.warning("%s", w.message)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, name in (("json", "report.json"), ("csv", "report.csv"), ("table", "report.txt")):
        (out / name).write_text(render(report, fmt), encoding="utf-8")
    sys.stdout.write(render(report, "table"))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulation import load_config, run_study
    try:
        config = load_config(args.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    env_seed = os.environ.get("SWEDGE_SEED")
    if env_seed:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise UsageError(f"SWEDGE_SEED must be an integer, got {env_seed!r}") from None
    step = max(1, config.replicates // 10)

    def progress(n):
        if n % step == 0 or n == config.replicates:
            log.info("replicate %d/%d", n, config.replicates)

    metrics = run_study(config, threads=args.threads, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics.to_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")
    for name, errors in metrics.failures.items():
        if errors:
            log.warning("model %s: %s", name, errors[0])
    sys.stdout.write(metrics.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swedge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="fit a working model and report marginal estimands")
    a.add_argument("--data", required=True, help="long-format CSV with cluster, period, y, z columns")
    a.add_argument("--estimator", choices=("lmm", "gee"), default="lmm")
    a.add_argument("--structure", default="constant",
                   help="constant, duration, period or saturated")
    a.add_argument("--correlation", default="nested",
                   help="independence, exchangeable or nested")
    a.add_argument("--link", choices=("identity", "logit", "log"), default=None)
    a.add_argument("--scale", default="difference", help="difference, rr or or")
    a.add_argument("--adjust", default="none", help="comma-separated covariates, or none")
    a.add_argument("--design-probs", default=None,
                   help="comma-separated randomization probabilities per adoption period")
    a.add_argument("--lrt", default=None, metavar="A:B",
                   help="likelihood-ratio test of structure A within structure B")
    a.add_argument("--out", default=".", help="output directory")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    s.add_argument("--config", required=True, help="TOML or JSON study configuration")
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--threads", type=int, default=1, help="worker processes")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "simulate"
                        else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("invalid data: %s", exc)
        return EXIT_DATA
    except (FitError, SandwichError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("fit failed: %s", exc)
        return EXIT_FIT
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
