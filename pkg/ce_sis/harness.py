"""Repeated experiments, baselines, quadrature oracle and result files"""

import csv
import json
import logging
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence

import numpy as np
from scipy import integrate, optimize
from tqdm import tqdm

from .allocation import allocate_from_scores, round_half_away
from .config import ExperimentSpec, RunConfig
from .densities import GmmParams, InputDensity
from .driver import RunReport, run_ce_sis
from .errors import ConfigError, OracleError
from .estimators import OptimalSisDensity, cmc_ratio, optimal_allocation_exact, optimal_sis_density_1d
from .models import OracleModel, SimulationModel
from .rng import Stream, repetition_rng

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["method", "mean", "std_error", "cmc_ratio", "n_total", "p_ref"]
RESULT_COLUMNS = ["method", "repetition", "estimate", "n_used"]
ITERATION_COLUMNS = ["repetition", "iteration", "k_star", "p_bar", "sims_used"]


@dataclass(frozen=True)
class RepetitionResult:
    method: str
    repetition: int
    estimate: float
    n_used: int


@dataclass(frozen=True)
class SummaryRow:
    method: str
    mean: float
    std_error: float
    cmc_ratio: float
    n_total: int
    p_ref: float


def _require_oracle(model: SimulationModel, density: InputDensity) -> OracleModel:
    if not isinstance(model, OracleModel):
        raise OracleError(f"{type(model).__name__} has no closed-form s(x)")
    if density.dimension != 1 or model.input_dimension != 1:
        raise OracleError("Quadrature oracles are only available for one-dimensional inputs")
    return model


def oracle_p(model: SimulationModel, density: InputDensity, l: float, epsabs: float = 1e-9, limit: int = 500) -> float:
    """P(Y > l) = integral of f(x) * s(x) by adaptive quadrature"""
    oracle = _require_oracle(model, density)
    lo, hi = density.quadrature_bounds()
    logger.debug(f"Integrating f * s over {density.support}, truncated to [{lo:.6g}, {hi:.6g}]")

    def integrand(t: float) -> float:
        x = np.array([[t]])
        s = np.asarray(oracle.true_s(x, l), dtype=float).reshape(-1)[0]
        return float(density.pdf(x)[0] * s)

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, abserr = integrate.quad(integrand, lo, hi, epsabs=epsabs, epsrel=1e-10, limit=limit)
        except integrate.IntegrationWarning as e:
            raise OracleError(f"Quadrature did not converge at l={l}: {e}") from e
    if abserr > 10.0 * epsabs:
        raise OracleError(f"Quadrature error {abserr:.2g} above tolerance at l={l}")
    return float(min(max(value, 0.0), 1.0))


def calibrate_l(
    model: SimulationModel,
    density: InputDensity,
    target_p: float,
    start: Sequence[float] = (-1.0, 1.0),
    max_expansions: int = 60,
) -> float:
    """Threshold l with oracle_p(l) = target_p, found by bracketing and Brent's method"""
    if not 0.0 < target_p < 1.0:
        raise ConfigError("target_p must lie in (0, 1)")

    def gap(l: float) -> float:
        return oracle_p(model, density, l) - target_p

    lo, hi = float(start[0]), float(start[1])
    width = hi - lo
    for _ in range(max_expansions):
        if gap(lo) > 0.0:
            break
        lo -= width
        width *= 2.0
    else:
        raise OracleError(f"Could not bracket target {target_p} from below")
    width = hi - lo
    for _ in range(max_expansions):
        if gap(hi) < 0.0:
            break
        hi += width
        width *= 2.0
    else:
        raise OracleError(f"Could not bracket target {target_p} from above")

    l = optimize.brentq(gap, lo, hi, xtol=1e-12, rtol=1e-14, maxiter=500)
    error = abs(gap(l))
    if error >= 1e-6 * target_p:
        raise OracleError(f"Calibration missed target {target_p} by {error:.3g}")
    logger.info(f"Calibrated l={l:.12g} for target p={target_p}")
    return float(l)


def run_cmc_baseline(config: RunConfig, repetition: int) -> RepetitionResult:
    """Crude Monte Carlo with the CE-SIS total budget, one replication per input"""
    model, density = config.build_model(), config.build_density()
    n = config.total_budget
    rng = repetition_rng(config.seed, repetition, 0, Stream.CMC)
    x = density.sample(rng, n)
    failures = sum(int(model.simulate(point, rng) > config.threshold) for point in x)
    return RepetitionResult(method="cmc", repetition=repetition, estimate=failures / n, n_used=n)


def run_optimal_sis(config: RunConfig, repetition: int, q_star: OptimalSisDensity, n: int) -> RepetitionResult:
    """SIS from the tabulated optimal density with the exact optimal allocation"""
    model = _require_oracle(config.build_model(), config.build_density())
    density = q_star.f
    m = max(1, int(round_half_away(np.array(config.m_ratio * n))))
    x = q_star.sample(repetition_rng(config.seed, repetition, 0, Stream.OPTIMAL, 0), m)
    q = q_star.pdf(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(q > 0.0, density.pdf(x) / q, 0.0)
    s = np.asarray(model.true_s(x[:, 0], config.threshold), dtype=float)
    n_reps = allocate_from_scores(optimal_allocation_exact(s, n), n)

    failures = np.empty(m, dtype=np.int64)
    for i, (point, reps) in enumerate(zip(x, n_reps)):
        rng = repetition_rng(config.seed, repetition, 0, Stream.OPTIMAL, i + 1)
        failures[i] = int(np.count_nonzero(model.simulate_batch(point, int(reps), rng) > config.threshold))
    estimate = float(np.mean(failures / n_reps * w))
    return RepetitionResult(method="optimal_sis", repetition=repetition, estimate=estimate, n_used=int(n_reps.sum()))


def summarize(method: str, estimates: Sequence[float], n_total: int, p_ref: float) -> SummaryRow:
    """Mean, between-repetition standard deviation and CMC ratio of one method"""
    values = np.asarray(estimates, dtype=float)
    if values.size == 0:
        raise ValueError("No estimates to summarize")
    std_error = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
    ratio = cmc_ratio(n_total, std_error, p_ref) if math.isfinite(std_error) else float("nan")
    return SummaryRow(
        method=method,
        mean=float(values.mean()),
        std_error=std_error,
        cmc_ratio=ratio,
        n_total=n_total,
        p_ref=p_ref,
    )


def kl_divergence_1d(q_star: OptimalSisDensity, theta: GmmParams) -> float:
    """KL(q* || q(.; theta)) by the trapezoid rule on the q* table"""
    grid = q_star.grid
    q = q_star.smooth_pdf(grid)
    q = q / integrate.trapezoid(q, grid)
    log_theta = theta.log_pdf(grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(q > 0.0, q * (np.log(q) - log_theta), 0.0)
    return float(integrate.trapezoid(integrand, grid))


def kl_diag(thetas: Sequence[GmmParams], q_star: OptimalSisDensity) -> List[float]:
    """KL(q* || theta) for each density of a run, in iteration order"""
    return [kl_divergence_1d(q_star, theta) for theta in thetas]


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row[column]) for column in columns])
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def merge_csv(path: Path, columns: Sequence[str], rows: List[Dict], replace_methods: Iterable[str]) -> Path:
    """Rewrite a CSV keeping rows of other methods and appending the new ones"""
    replace_methods = set(replace_methods)
    kept = [row for row in read_csv(path) if row["method"] not in replace_methods]
    return write_csv(path, columns, kept + rows)


def _ce_sis_repetition(config: RunConfig, repetition: int) -> RunReport:
    return run_ce_sis(config, repetition)


class ExperimentRunner:
    """Runs repetitions of CE-SIS and the baselines described by an ExperimentSpec"""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.logger = logging.getLogger(__name__)
        self.out_dir = Path(spec.out)

    @property
    def config(self) -> RunConfig:
        return self.spec.run

    def resolve_threshold(self) -> ExperimentSpec:
        """Replace threshold.l=auto by the calibrated value"""
        if self.spec.run.threshold is None:
            self.logger.info(f"Calibrating l for target p={self.config.target_p}")
            l = calibrate_l(self.config.build_model(), self.config.build_density(), self.config.target_p)
            self.spec = self.spec.with_threshold(l)
        return self.spec

    def reference_p(self, fallback: float) -> float:
        """Configured p_ref, else the quadrature oracle, else the given estimate"""
        if self.spec.p_ref is not None:
            return self.spec.p_ref
        try:
            return oracle_p(self.config.build_model(), self.config.build_density(), self.config.threshold)
        except OracleError as e:
            self.logger.warning(f"No oracle reference ({e}); using the estimate {fallback:.6g}")
            return fallback

    def _map(self, fn: Callable, desc: str) -> list:
        """Call fn(config, repetition) for every repetition; results come back in repetition order"""
        reps = self.spec.repetitions
        show = reps > 1 and sys.stdout.isatty()
        results = {}
        with tqdm(total=reps, desc=desc, disable=not show) as pbar:
            if self.spec.jobs > 1 and reps > 1:
                with ProcessPoolExecutor(max_workers=self.spec.jobs) as executor:
                    futures = {executor.submit(fn, self.config, rep): rep for rep in range(reps)}
                    for future in as_completed(futures):
                        results[futures[future]] = future.result()
                        pbar.update(1)
            else:
                for rep in range(reps):
                    results[rep] = fn(self.config, rep)
                    pbar.update(1)
        return [results[rep] for rep in range(reps)]

    def run(self) -> List[RunReport]:
        self.resolve_threshold()
        self.logger.info(
            f"Running {self.spec.repetitions} CE-SIS repetitions "
            f"(budget {self.config.total_budget}, l={self.config.threshold:.6g}, jobs={self.spec.jobs})"
        )
        return self._map(_ce_sis_repetition, "CE-SIS")

    def write_run(self, reports: List[RunReport]) -> Dict[str, Path]:
        """Write summary.csv, results.csv, iterations.csv and one JSON report per repetition"""
        completed = [r for r in reports if r.completed]
        results = [
            asdict(RepetitionResult("ce_sis", r.repetition, r.estimate, r.total_simulations)) for r in completed
        ]
        estimates = [r.estimate for r in completed]
        files = {}
        reports_dir = self.out_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        for report in reports:
            path = reports_dir / f"run_{report.repetition}.json"
            path.write_text(report.to_json(), encoding="utf-8")
        files["reports"] = reports_dir
        files["iterations"] = write_csv(
            self.out_dir / "iterations.csv", ITERATION_COLUMNS, [row for r in reports for row in r.iteration_rows()]
        )
        files["results"] = merge_csv(self.out_dir / "results.csv", RESULT_COLUMNS, results, ["ce_sis"])
        if estimates:
            p_ref = self.reference_p(float(np.mean(estimates)))
            row = summarize("ce_sis", estimates, self.config.total_budget, p_ref)
            files["summary"] = merge_csv(self.out_dir / "summary.csv", SUMMARY_COLUMNS, [asdict(row)], ["ce_sis"])
            self._print_summary([row])
        return files

    def run_baselines(self) -> Dict[str, List[RepetitionResult]]:
        self.resolve_threshold()
        baselines = {}
        if self.spec.cmc:
            self.logger.info(f"Running {self.spec.repetitions} CMC repetitions with budget {self.config.total_budget}")
            baselines["cmc"] = self._map(run_cmc_baseline, "CMC")
        if self.spec.optimal_sis:
            model, density = self.config.build_model(), self.config.build_density()
            if not isinstance(model, OracleModel) or density.dimension != 1:
                raise ConfigError("The optimal SIS baseline needs a one-dimensional model with a closed-form s(x)")
            n = self.spec.optimal_n
            q_star = optimal_sis_density_1d(model, density, self.config.threshold, n)
            self.logger.info(f"Running {self.spec.repetitions} optimal SIS repetitions with budget {n}")
            baselines["optimal_sis"] = self._map(_OptimalSisTask(q_star, n), "Optimal SIS")
        if not baselines:
            self.logger.warning("No baseline enabled (experiment.cmc / experiment.optimal_sis)")
        return baselines

    def write_baselines(self, baselines: Dict[str, List[RepetitionResult]]) -> Dict[str, Path]:
        if not baselines:
            return {}
        rows, results = [], []
        for method, reps in baselines.items():
            estimates = [r.estimate for r in reps]
            p_ref = self.reference_p(float(np.mean(estimates)))
            rows.append(asdict(summarize(method, estimates, reps[0].n_used, p_ref)))
            results.extend(asdict(r) for r in reps)
        files = {
            "summary": merge_csv(self.out_dir / "summary.csv", SUMMARY_COLUMNS, rows, baselines),
            "results": merge_csv(self.out_dir / "results.csv", RESULT_COLUMNS, results, baselines),
        }
        self._print_summary([SummaryRow(**row) for row in rows])
        return files

    def _print_summary(self, rows: List[SummaryRow]) -> None:
        for row in rows:
            print(
                f"{row.method:<12} mean={row.mean:.6g} std_error={row.std_error:.6g} "
                f"cmc_ratio={row.cmc_ratio:.6g} n_total={row.n_total}"
            )

    def kl_diag(self, report_path) -> List[float]:
        """KL(q* || theta^(t)) for each iteration of a saved run report"""
        data = json.loads(Path(report_path).read_text(encoding="utf-8"))
        l = data["threshold"]
        model, density = self.config.build_model(), self.config.build_density()
        oracle = _require_oracle(model, density)
        q_star = optimal_sis_density_1d(oracle, density, l, int(data["total_budget"]))
        thetas = [GmmParams.from_dict(it["theta"]) for it in data["iterations"]]
        values = kl_diag(thetas, q_star)
        for it, value in zip(data["iterations"], values):
            print(f"iteration {it['iteration']:>3}  k*={it['k_star']}  KL={value:.6g}")
        return values


@dataclass(frozen=True)
class _OptimalSisTask:
    """Picklable optimal SIS repetition for the worker pool"""

    q_star: OptimalSisDensity
    n: int

    def __call__(self, config: RunConfig, repetition: int) -> RepetitionResult:
        return run_optimal_sis(config, repetition, self.q_star, self.n)
