"""Command-line entry point (``dmoe``).

Exit codes: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .em_fit import EmConfig, InitStrategy, fit_mle
from .exceptions import DmoeError, InvalidConfigurationError, InvalidInputError, NumericalError
from .gauss_calculus import distinguishability_score
from .harness import BUNDLED, StudyAbortedError, load_bundled, load_config, run_rate_study
from .metrics import DistanceConfig, hellinger, total_variation
from .model import Dataset, DeviatedModel, MixingMeasure, sample_dataset
from .polysys import SearchConfig, verify_r_bar
from .voronoi_loss import loss_d1, loss_d2, loss_d3, loss_d4, loss_vanishing

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

LOSSES = ("D1", "D2", "D3", "D4", "VanishingLambda", "VanishingLambdaTimesD3")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path} is not valid JSON: {exc}") from None


def _read_model(path) -> DeviatedModel:
    return DeviatedModel.from_dict(_read_json(path))


def _read_measure(path) -> MixingMeasure:
    doc = _read_json(path)
    # accept either a bare mixing measure or a full model document
    if "g0" in doc and "weights" not in doc:
        doc = doc["g0"]
    return MixingMeasure.from_dict(doc)


def _emit(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    model = _read_model(args.model)
    data = sample_dataset(model, args.n, args.seed)
    if args.out:
        data.to_csv(args.out)
    else:
        import csv

        writer = csv.writer(sys.stdout)
        writer.writerow([f"x{j + 1}" for j in range(data.dim)] + ["y"])
        for row, yv in zip(data.covariates, data.responses):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(yv))])
    return EXIT_OK


def _em_config(args) -> EmConfig:
    cfg = EmConfig.from_dict(_read_json(args.config)) if args.config else EmConfig()
    overrides = {}
    for name in ("k", "restarts", "max_iters"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.init is not None:
        overrides["init"] = InitStrategy(args.init)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return replace(cfg, **overrides) if overrides else cfg


def _cmd_fit(args) -> int:
    data = Dataset.from_csv(args.data)
    g0 = _read_measure(args.g0)
    cfg = _em_config(args)
    result = fit_mle(data, g0, cfg)
    doc = result.to_dict(g0)
    doc["config"] = cfg.to_dict()
    _emit(doc, args.out)
    return EXIT_OK


def _cmd_loss(args) -> int:
    fitted = _read_model(args.fitted)
    truth = _read_model(args.truth)
    metric = args.metric
    if metric == "D1":
        rep = loss_d1(fitted.lam, fitted.mixture, truth.lam, truth.mixture)
    elif metric == "D2":
        rep = loss_d2(fitted.lam, fitted.mixture, truth.lam, truth.mixture, truth.g0, k_fit=args.k_fit)
    elif metric == "D3":
        rep = loss_d3(fitted.mixture, truth.mixture)
    elif metric == "D4":
        rep = loss_d4(fitted.lam, fitted.mixture, truth.lam, truth.mixture, truth.g0)
    elif metric == "VanishingLambda":
        rep = loss_vanishing(fitted.lam)
    else:
        rep = loss_vanishing(fitted.lam, fitted.mixture, truth.g0, distinguishable=False)
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def _cmd_rate_study(args) -> int:
    if bool(args.config) == bool(args.bundled):
        raise InvalidConfigurationError("give exactly one of --config or --bundled")
    cfg = load_config(args.config) if args.config else load_bundled(args.bundled)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.trials is not None:
        cfg = replace(cfg, trials=args.trials)
    try:
        result = run_rate_study(cfg, workers=args.workers, partial_path=args.out)
    except StudyAbortedError as exc:
        if args.out is None:
            print(exc.partial.to_json(), file=sys.stdout)
        raise
    if args.csv:
        result.write_csv(args.csv)
    if args.per_n_csv:
        result.write_per_n_csv(args.per_n_csv)
    if args.out:
        result.to_json(args.out)
    else:
        print(result.to_json())
    return EXIT_OK


def _cmd_polysys(args) -> int:
    cfg = SearchConfig(starts=args.starts, seed=args.seed if args.seed is not None else 0)
    report = verify_r_bar(args.m, cfg)
    doc = report.to_dict()
    doc["found_at"] = {str(c.r): c.found for c in (report.below, report.at) if c is not None}
    _emit(doc, args.out)
    return EXIT_OK


def _cmd_distinguish(args) -> int:
    model = _read_model(args.model)
    r = args.r
    if len(r) == 1 and model.mixture.n_atoms > 1:
        r = r * model.mixture.n_atoms
    score = distinguishability_score(model.mixture, model.g0, r, threshold=args.threshold)
    doc = score.to_dict()
    doc["r"] = list(r)
    _emit(doc, args.out)
    return EXIT_OK


def _cmd_distance(args) -> int:
    m1, m2 = _read_model(args.model1), _read_model(args.model2)
    cfg = DistanceConfig(n_covariates=args.n_covariates, seed=args.seed if args.seed is not None else 0)
    doc = {
        "total_variation": total_variation(m1, m2, cfg).to_dict(),
        "hellinger": hellinger(m1, m2, cfg).to_dict(),
        "config": cfg.to_dict(),
    }
    _emit(doc, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmoe", description="Deviated Gaussian mixture of experts toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="sample a dataset CSV from a model JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit a deviated model by EM")
    p.add_argument("--data", required=True)
    p.add_argument("--g0", required=True, help="mixing measure JSON (or a model JSON whose g0 is used)")
    p.add_argument("--config", help="EmConfig JSON")
    p.add_argument("--k", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--init", choices=[s.value for s in InitStrategy])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("loss", help="Voronoi loss between a fitted and a true model")
    p.add_argument("--fitted", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--metric", choices=LOSSES, default="D1")
    p.add_argument("--k-fit", dest="k_fit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("rate-study", help="run a convergence-rate study")
    p.add_argument("--config", help="TOML study file")
    p.add_argument("--bundled", choices=BUNDLED)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="summary JSON path")
    p.add_argument("--csv", help="per-trial CSV path")
    p.add_argument("--per-n-csv", dest="per_n_csv", help="per-n CSV path")
    p.set_defaults(func=_cmd_rate_study)

    p = sub.add_parser("polysys", help="polynomial-system checks")
    psub = p.add_subparsers(dest="action", parser_class=_Parser)
    psub.required = True
    v = psub.add_parser("verify", help="check the tabulated solvability exponent for m")
    v.add_argument("--m", type=int, required=True)
    v.add_argument("--starts", type=int, default=200)
    v.add_argument("--seed", type=int)
    v.add_argument("--out")
    v.set_defaults(func=_cmd_polysys)

    p = sub.add_parser("distinguish", help="rank test for distinguishability from g0")
    p.add_argument("--model", required=True)
    p.add_argument("--r", type=int, nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_distinguish)

    p = sub.add_parser("distance", help="total variation and Hellinger distances")
    p.add_argument("--model1", required=True)
    p.add_argument("--model2", required=True)
    p.add_argument("--n-covariates", dest="n_covariates", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_distance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
