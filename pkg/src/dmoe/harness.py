"""Convergence-rate studies: configuration, execution and slope read-off.

A study samples ``trials`` datasets at each ``n``, fits the deviated model by
EM, scores the fit with one metric and regresses ``log(mean metric)`` on
``log n``. Every random stream derives from ``SeedSequence([seed, n_index,
trial])`` so results do not depend on worker count or scheduling order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import __version__
from .em_fit import EmConfig, FitResult, InitStrategy, fit_mle
from .exceptions import (
    FitFailureError,
    InsufficientDataError,
    InvalidConfigurationError,
    NumericalError,
    RegimeMismatchError,
)
from .metrics import DistanceConfig, hellinger
from .model import DeviatedModel, MixingMeasure, ParameterBox, measure_from_lists, sample_dataset
from .voronoi_loss import Regime, classify_regime, loss_d1, loss_d2, loss_d4, loss_vanishing

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

logger = logging.getLogger(__name__)

THREADS_ENV = "DMOE_THREADS"
BUNDLED = ("distinguishable", "nondistinguishable", "distinguishable_short_grid",
           "nondistinguishable_short_grid", "vanishing_lambda", "vanishing_lambda_d3")


class Metric(str, Enum):
    D1 = "D1"
    D2 = "D2"
    D4 = "D4"
    VANISHING_LAMBDA = "VanishingLambda"
    VANISHING_LAMBDA_D3 = "VanishingLambdaTimesD3"
    HELLINGER = "Hellinger"


@dataclass(frozen=True)
class RateStudyConfig:
    lam_star: float
    G_star: MixingMeasure
    g0: MixingMeasure
    k: int
    metric: Metric
    n_grid: Tuple[int, ...] = (100, 200, 400, 800, 1600)
    trials: int = 20
    em: EmConfig = field(default_factory=EmConfig)
    seed: int = 0
    failure_budget: float = 0.05
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    name: str = "study"

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if len(self.n_grid) < 3:
            raise InvalidConfigurationError("the n grid needs at least 3 points")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise InvalidConfigurationError("the n grid must be strictly increasing")
        if self.n_grid[0] < 1:
            raise InvalidConfigurationError("sample sizes must be positive")
        if self.trials < 1:
            raise InvalidConfigurationError("trials must be at least 1")
        if not (0.0 <= self.failure_budget <= 1.0):
            raise InvalidConfigurationError("failure budget must lie in [0, 1]")
        if self.em.k != self.k:
            object.__setattr__(self, "em", replace(self.em, k=self.k))

    @property
    def truth(self) -> DeviatedModel:
        return DeviatedModel(self.lam_star, self.G_star, self.g0)

    def with_seed(self, seed: int) -> "RateStudyConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        em = self.em.to_dict()
        em.pop("truth", None)
        em.pop("seed", None)
        return {
            "name": self.name,
            "truth": {"lambda": self.lam_star, "mixture": self.G_star.to_dict()},
            "g0": self.g0.to_dict(),
            "k": self.k,
            "metric": self.metric.value,
            "n_grid": list(self.n_grid),
            "trials": self.trials,
            "seed": self.seed,
            "failure_budget": self.failure_budget,
            "em": em,
            "distance": self.distance.to_dict() if self.metric is Metric.HELLINGER else None,
        }


def _measure_from_toml(section: dict, what: str) -> MixingMeasure:
    try:
        atoms = [(row[:-2], row[-2], row[-1]) for row in section["atoms"]]
        return measure_from_lists(section["weights"], atoms)
    except (KeyError, TypeError, IndexError) as exc:
        raise InvalidConfigurationError(f"[{what}] needs 'weights' and 'atoms' rows [a..., b, sigma]") from exc


def config_from_dict(doc: dict) -> RateStudyConfig:
    """Build a study configuration from the parsed TOML tables."""
    for section in ("truth", "g0", "fit", "study"):
        if section not in doc:
            raise InvalidConfigurationError(f"missing [{section}] table")
    truth, fit, study = doc["truth"], dict(doc["fit"]), doc["study"]
    if "lambda" not in truth:
        raise InvalidConfigurationError("[truth] needs 'lambda'")
    G_star = _measure_from_toml(truth, "truth")
    g0 = _measure_from_toml(doc["g0"], "g0")
    lam_star = float(truth["lambda"])
    try:
        k = int(fit.pop("k"))
    except KeyError as exc:
        raise InvalidConfigurationError("[fit] needs 'k'") from exc
    box = None
    if "sigma_low" in fit:
        dim = G_star.dim
        box = ParameterBox(np.full(dim, -10.0), np.full(dim, 10.0), sigma_low=float(fit.pop("sigma_low")))
    init = InitStrategy(fit.get("init", InitStrategy.PERTURB_TRUTH.value))
    try:
        em = EmConfig(
            k=k,
            max_iters=int(fit.get("max_iters", 1000)),
            tol=float(fit.get("tol", 1e-8)),
            restarts=int(fit.get("restarts", 3)),
            weight_floor=float(fit.get("weight_floor", 1e-3)),
            box=box,
            init=init,
            init_scale=float(fit.get("init_scale", 0.5)),
            truth=(lam_star, G_star),
        )
    except TypeError as exc:
        raise InvalidConfigurationError(str(exc)) from exc
    unknown = set(fit) - {"max_iters", "tol", "restarts", "weight_floor", "init", "init_scale"}
    if unknown:
        raise InvalidConfigurationError(f"unknown [fit] keys: {sorted(unknown)}")
    distance = DistanceConfig(**doc["distance"]) if "distance" in doc else DistanceConfig()
    try:
        return RateStudyConfig(
            lam_star=lam_star,
            G_star=G_star,
            g0=g0,
            k=k,
            metric=Metric(study["metric"]),
            n_grid=tuple(study.get("n_grid", (100, 200, 400, 800, 1600))),
            trials=int(study.get("trials", 20)),
            em=em,
            seed=int(study.get("seed", 0)),
            failure_budget=float(study.get("failure_budget", 0.05)),
            distance=distance,
            name=str(doc.get("name", "study")),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, InvalidConfigurationError):
            raise
        raise InvalidConfigurationError(f"bad [study] table: {exc}") from exc


def load_config(path) -> RateStudyConfig:
    """Read a TOML study file (tables ``[truth]``, ``[g0]``, ``[fit]``, ``[study]``)."""
    with open(path, "rb") as fh:
        try:
            doc = _toml.load(fh)
        except _toml.TOMLDecodeError as exc:
            raise InvalidConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def bundled_config_path(name: str) -> Path:
    if name not in BUNDLED:
        raise InvalidConfigurationError(f"unknown bundled config {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("dmoe") / "configs" / f"{name}.toml"))


def load_bundled(name: str) -> RateStudyConfig:
    return load_config(bundled_config_path(name))


# ---------------------------------------------------------------------------
# metric evaluation and the regime guard
# ---------------------------------------------------------------------------

def check_regime(cfg: RateStudyConfig) -> Regime:
    """Refuse metric/truth combinations outside the metric's hypotheses."""
    metric = cfg.metric
    if metric in (Metric.VANISHING_LAMBDA, Metric.VANISHING_LAMBDA_D3):
        if cfg.lam_star != 0.0:
            raise RegimeMismatchError(f"{metric.value} needs a truth with lambda* = 0")
        return classify_regime(cfg.G_star, cfg.g0).regime
    regime = classify_regime(cfg.G_star, cfg.g0).regime
    required = {
        Metric.D1: Regime.DISTINGUISHABLE,
        Metric.D2: Regime.PARTIAL_OVERLAP,
        Metric.D4: Regime.FULL_OVERLAP,
    }.get(metric)
    if required is not None and regime is not required:
        raise RegimeMismatchError(f"{metric.value} needs the {required.value} regime, truth is {regime.value}")
    return regime


def evaluate_metric(cfg: RateStudyConfig, lam_hat: float, G_hat: MixingMeasure) -> float:
    m = cfg.metric
    if m is Metric.D1:
        return loss_d1(lam_hat, G_hat, cfg.lam_star, cfg.G_star).value
    if m is Metric.D2:
        return loss_d2(lam_hat, G_hat, cfg.lam_star, cfg.G_star, cfg.g0, k_fit=cfg.k).value
    if m is Metric.D4:
        return loss_d4(lam_hat, G_hat, cfg.lam_star, cfg.G_star, cfg.g0).value
    if m is Metric.VANISHING_LAMBDA:
        return loss_vanishing(lam_hat).value
    if m is Metric.VANISHING_LAMBDA_D3:
        return loss_vanishing(lam_hat, G_hat, cfg.g0, distinguishable=False).value
    return hellinger(DeviatedModel(lam_hat, G_hat, cfg.g0), cfg.truth, cfg.distance).estimate


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    n: int
    trial: int
    metric_value: float
    lambda_hat: float
    converged: bool
    failed: bool = False
    min_increment: float = math.inf
    n_iter: int = 0
    G_hat: Optional[MixingMeasure] = None
    max_row_error: float = 0.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "trial": self.trial,
            "metric_value": self.metric_value,
            "lambda_hat": self.lambda_hat,
            "converged": self.converged,
            "failed": self.failed,
            "min_increment": self.min_increment,
            "n_iter": self.n_iter,
            "max_row_error": self.max_row_error,
            "mixture": None if self.G_hat is None else self.G_hat.to_dict(),
        }


def trial_seeds(seed: int, n_index: int, trial: int) -> Tuple[np.random.SeedSequence, int]:
    """Data stream and EM seed for one trial."""
    ss = np.random.SeedSequence([int(seed), int(n_index), int(trial)])
    data_ss, em_ss = ss.spawn(2)
    return data_ss, int(em_ss.generate_state(1)[0])


def run_trial(cfg: RateStudyConfig, n_index: int, trial: int) -> TrialRecord:
    n = cfg.n_grid[n_index]
    data_ss, em_seed = trial_seeds(cfg.seed, n_index, trial)
    data = sample_dataset(cfg.truth, n, data_ss)
    em = replace(cfg.em, seed=em_seed, truth=(cfg.lam_star, cfg.G_star))
    try:
        fit = fit_mle(data, cfg.g0, em)
    except FitFailureError as exc:
        logger.warning("n=%d trial=%d: %s", n, trial, exc)
        return TrialRecord(n, trial, math.nan, math.nan, False, failed=True)
    value = evaluate_metric(cfg, fit.lambda_hat, fit.G_hat)
    return TrialRecord(
        n, trial, value, fit.lambda_hat, fit.converged,
        min_increment=min(fit.restart_min_increments, default=math.inf), n_iter=fit.n_iter,
        G_hat=fit.G_hat, max_row_error=fit.max_row_error,
    )


def _run_trial_packed(args):
    return run_trial(*args)


@dataclass
class PerN:
    n: int
    mean: float
    stderr: float
    excluded: int

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "stderr": self.stderr, "excluded": self.excluded}


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci95: Tuple[float, float]
    excluded: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class RateStudyResult:
    config: RateStudyConfig
    records: List[TrialRecord]
    per_n: List[PerN]
    slope: float
    intercept: float
    ci95: Tuple[float, float]
    wall_seconds: float
    aborted: bool = False

    def summary(self) -> dict:
        """Result document; ``wall_seconds`` is the only run-dependent field."""
        return {
            "config": self.config.to_dict(),
            "per_n": [p.to_dict() for p in self.per_n],
            "slope": self.slope,
            "intercept": self.intercept,
            "ci95": list(self.ci95),
            "aborted": self.aborted,
            "failures": sum(r.failed for r in self.records),
            "version": __version__,
            "wall_seconds": self.wall_seconds,
        }

    def to_json(self, path=None, include_wall_time: bool = True) -> str:
        doc = self.summary()
        if not include_wall_time:
            doc.pop("wall_seconds")
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "trial", "metric_value", "lambda_hat", "converged"])
            for r in self.records:
                writer.writerow([r.n, r.trial, repr(r.metric_value), repr(r.lambda_hat), str(r.converged).lower()])

    def write_per_n_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "mean", "stderr", "excluded"])
            for p in self.per_n:
                writer.writerow([p.n, repr(p.mean), repr(p.stderr), p.excluded])


class StudyAbortedError(NumericalError):
    """Too many EM fits failed; ``partial`` holds what was computed."""

    def __init__(self, message, partial: RateStudyResult):
        super().__init__(message)
        self.partial = partial


def worker_count(requested: Optional[int] = None) -> int:
    """Worker processes: ``requested`` or the CPU count, capped by ``DMOE_THREADS``."""
    n = max(1, int(requested)) if requested is not None else (os.cpu_count() or 1)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise InvalidConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return n


def fit_loglog_slope(points: Sequence[Tuple[float, float]]) -> SlopeFit:
    """OLS of ``log value`` on ``log n`` with a t-based 95% interval for the slope.

    Non-positive values are dropped and reported in ``excluded``.
    """
    kept = [(float(n), float(v)) for n, v in points if v > 0 and math.isfinite(v)]
    excluded = [(float(n), float(v)) for n, v in points if not (v > 0 and math.isfinite(v))]
    if len(kept) < 3:
        raise InsufficientDataError(f"need at least 3 positive points, got {len(kept)}")
    x = np.log([p[0] for p in kept])
    y = np.log([p[1] for p in kept])
    fit = stats.linregress(x, y)
    dof = len(kept) - 2
    half = stats.t.ppf(0.975, dof) * fit.stderr
    return SlopeFit(float(fit.slope), float(fit.intercept), (float(fit.slope - half), float(fit.slope + half)), excluded)


def _aggregate(cfg: RateStudyConfig, records: List[TrialRecord]) -> List[PerN]:
    out = []
    for n in cfg.n_grid:
        vals = np.array([r.metric_value for r in records if r.n == n and not r.failed])
        pos = vals[vals > 0]
        excluded = int(sum(1 for r in records if r.n == n)) - pos.size
        mean = float(pos.mean()) if pos.size else math.nan
        se = float(pos.std(ddof=1) / math.sqrt(pos.size)) if pos.size > 1 else math.nan
        out.append(PerN(n, mean, se, excluded))
    return out


def _result(cfg, records, start, aborted=False) -> RateStudyResult:
    records = sorted(records, key=lambda r: (r.n, r.trial))
    per_n = _aggregate(cfg, records)
    pts = [(p.n, p.mean) for p in per_n if math.isfinite(p.mean)]
    try:
        s = fit_loglog_slope(pts)
        slope, intercept, ci = s.slope, s.intercept, s.ci95
    except InsufficientDataError:
        if not aborted:
            raise
        slope, intercept, ci = math.nan, math.nan, (math.nan, math.nan)
    return RateStudyResult(cfg, records, per_n, slope, intercept, ci, time.perf_counter() - start, aborted)


def run_rate_study(
    cfg: RateStudyConfig,
    workers: Optional[int] = None,
    partial_path=None,
) -> RateStudyResult:
    """Run every ``(n, trial)`` fit and read off the log-log slope.

    Raises
    ------
    RegimeMismatchError
        If the metric does not apply to the truth's overlap regime.
    StudyAbortedError
        If more than ``failure_budget`` of the fits fail; the partial result
        is attached and, when ``partial_path`` is given, written there.
    """
    check_regime(cfg)
    start = time.perf_counter()
    jobs = [(cfg, i, t) for i in range(len(cfg.n_grid)) for t in range(cfg.trials)]
    budget = math.floor(cfg.failure_budget * len(jobs))
    records: List[TrialRecord] = []
    n_workers = worker_count(workers)

    def consume(iterable):
        failures = 0
        for rec in iterable:
            records.append(rec)
            failures += rec.failed
            if failures > budget:
                partial = _result(cfg, records, start, aborted=True)
                if partial_path is not None:
                    partial.to_json(partial_path)
                raise StudyAbortedError(f"{failures} EM fits failed (budget {budget})", partial)

    if n_workers <= 1:
        consume(run_trial(*job) for job in jobs)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            consume(pool.map(_run_trial_packed, jobs, chunksize=1))
    logger.info("%s: %d fits in %.1fs", cfg.name, len(records), time.perf_counter() - start)
    return _result(cfg, records, start)


def rescore(result: RateStudyResult, metric: Metric, distance: Optional[DistanceConfig] = None) -> RateStudyResult:
    """Re-evaluate stored fits of ``result`` under another metric without refitting."""
    cfg = replace(result.config, metric=Metric(metric), distance=distance or result.config.distance)
    check_regime(cfg)
    start = time.perf_counter()
    records = []
    for r in result.records:
        if r.failed:
            records.append(r)
            continue
        value = evaluate_metric(cfg, r.lambda_hat, r.G_hat)
        records.append(replace(r, metric_value=value))
    return _result(cfg, records, start)
