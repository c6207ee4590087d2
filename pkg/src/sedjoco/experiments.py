"""Config-driven experiment runners.

Every runner takes a validated :class:`ExperimentConfig`, an output
directory and a thread count, and writes CSV/JSON artifacts that depend only
on the config (including its ``master_seed``). Monte Carlo trial ``t`` draws
all of its randomness from ``numpy.random.default_rng([master_seed, t])``,
and results are aggregated in trial order, so serial and threaded runs
produce identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .core import (
    build_augmented_targets,
    check_existence,
    problem_from_json,
    problem_to_json,
    random_pd_problem,
    residual,
    solution_to_json,
)
from .metrics import (
    CrlbReport,
    IsrReport,
    align_solution,
    format_float,
    icrlb,
    isr_contributions,
    to_db,
)
from .model import (
    Experiment2Params,
    Experiment3Params,
    ScvCovarianceSet,
    build_cov_experiment2,
    build_cov_experiment3,
    build_target_matrices,
    mix,
    random_mixing,
    sample_sources,
    separate_ml,
    separate_per_set,
)
from .solvers import NonConvergenceError, SolverOptions, ir_solve, newton_solve

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "run_convergence",
    "run_nonstationary",
    "run_stationary",
    "run_solve",
    "run_crlb",
    "RUNNERS",
]

logger = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "nonstationary2x2", "stationary3x3", "solve", "crlb")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    experiment: str
    params: Dict[str, Any] = field(default_factory=dict)
    master_seed: int = 0
    base_dir: Path = field(default_factory=Path)

    def get(self, key, default=None):
        return self.params.get(key, default)

    @property
    def n_trials(self) -> int:
        default = 100 if self.experiment == "convergence" else 200
        return int(self.params.get("n_trials", default))


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def load_config(path, expected: Optional[str] = None,
                seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read and validate a JSON experiment config."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    _require(isinstance(doc, dict), "config must be a JSON object")
    experiment = doc.get("experiment", expected)
    _require(experiment in EXPERIMENTS, f"unknown experiment {experiment!r}")
    _require(expected is None or experiment == expected,
             f"config is for {experiment!r}, not {expected!r}")
    params = {k: v for k, v in doc.items() if k not in ("experiment", "master_seed")}
    if isinstance(doc.get("params"), dict):
        params.update(doc["params"])
        params.pop("params", None)
    if seed_override is not None:
        seed = seed_override
    else:
        _require("master_seed" in doc or experiment in ("solve", "crlb"),
                 "config must set master_seed")
        seed = doc.get("master_seed", 0)
    _require(isinstance(seed, int) and seed >= 0, "master_seed must be a nonnegative integer")
    cfg = ExperimentConfig(experiment, params, seed, path.parent)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    p = cfg.params
    if cfg.experiment in ("convergence", "nonstationary2x2", "stationary3x3"):
        _require(isinstance(p.get("n_trials", 1), int) and p.get("n_trials", 1) >= 1,
                 "n_trials must be a positive integer")
    if cfg.experiment == "convergence":
        pairs = p.get("pairs", [[2, 2]])
        _require(isinstance(pairs, list) and len(pairs) > 0, "pairs must be a nonempty list")
        for pair in pairs:
            _require(isinstance(pair, list) and len(pair) == 2
                     and all(isinstance(v, int) and v >= 1 for v in pair),
                     f"invalid (K, M) pair {pair!r}")
        solvers = p.get("solvers", ["newton", "ir"])
        _require(set(solvers) <= {"newton", "ir"} and solvers, "solvers must be newton and/or ir")
    elif cfg.experiment == "nonstationary2x2":
        alphas = p.get("alphas", [0.0])
        _require(isinstance(alphas, list) and len(alphas) > 0, "alphas must be a nonempty list")
    elif cfg.experiment == "stationary3x3":
        grid = p.get("T_grid", [300, 1000])
        _require(isinstance(grid, list) and len(grid) > 0
                 and all(isinstance(t, int) and t >= 1 for t in grid),
                 "T_grid must be a nonempty list of positive integers")
    elif cfg.experiment == "solve":
        _require(isinstance(p.get("problem"), str), "solve config needs a 'problem' path")
        _require(p.get("solver", "newton") in ("newton", "ir"), "solver must be newton or ir")
    elif cfg.experiment == "crlb":
        _require(isinstance(p.get("source"), dict), "crlb config needs a 'source' object")


def _solver_options(overrides: Optional[dict], **defaults) -> SolverOptions:
    overrides = dict(defaults, **(overrides or {}))
    try:
        return SolverOptions(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver options: {exc}") from None


def _map_trials(fn: Callable[[int], Any], n: int, threads: int) -> List[Any]:
    if threads <= 1:
        return [fn(t) for t in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _write_csv(path: Path, header: List[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _jsonable(x):
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else ("-inf" if x < 0 else "nan"))


# -- convergence study -------------------------------------------------------


def run_convergence(cfg: ExperimentConfig, out: Path, threads: int = 1) -> List[Path]:
    """Random PD instances per ``(K, M)``; both solvers from the identity."""
    p = cfg.params
    pairs = [tuple(x) for x in p.get("pairs", [[2, 2]])]
    solvers = p.get("solvers", ["newton", "ir"])
    tol = float(p.get("tol", 1e-10))
    opts = {
        "newton": _solver_options(p.get("newton"), max_iters=100, tol=tol),
        "ir": _solver_options(p.get("ir"), max_iters=5000, tol=tol),
    }
    record_timing = bool(p.get("record_timing", False))
    dump = bool(p.get("dump_instances", False))
    n = cfg.n_trials
    out.mkdir(parents=True, exist_ok=True)
    if dump:
        (out / "instances").mkdir(exist_ok=True)

    rows, summary = [], []
    for pi, (K, M) in enumerate(pairs):
        def trial(t, K=K, M=M, pi=pi):
            prob = random_pd_problem(K, M, np.random.default_rng([cfg.master_seed, pi, t]))
            res = {"problem": prob}
            for name in solvers:
                run = newton_solve if name == "newton" else ir_solve
                try:
                    _, tr = run(prob, opts[name])
                except NonConvergenceError as exc:
                    tr = exc.trace
                res[name] = tr
            return res

        results = _map_trials(trial, n, threads)
        for name in solvers:
            its, times, n_conv = [], [], 0
            for t, res in enumerate(results):
                tr = res[name]
                for i, r in enumerate(tr.residuals):
                    rows.append([name, K, M, t, i, float(np.log10(max(r, 1e-300)))])
                hit = tr.iterations_to(opts[name].tol)
                if hit is not None:
                    n_conv += 1
                    its.append(hit)
                times.append(tr.wall_time)
            entry = {"solver": name, "K": K, "M": M, "n_trials": n, "n_converged": n_conv,
                     "median_iterations": statistics.median(its) if its else None,
                     "max_iterations": max(its) if its else None}
            if record_timing:
                entry["mean_wall_time"] = float(np.mean(times))
            summary.append(entry)
        if dump:
            for t, res in enumerate(results):
                path = out / "instances" / f"K{K}_M{M}_trial{t}.json"
                path.write_text(problem_to_json(res["problem"]))

    trace_path = out / "convergence_trace.csv"
    _write_csv(trace_path, ["solver", "K", "M", "trial", "iteration", "log10_residual"], rows)
    summary_path = out / "convergence_summary.json"
    _write_json(summary_path, {"tol": tol, "master_seed": cfg.master_seed, "results": summary})
    return [trace_path, summary_path]


# -- separation studies ------------------------------------------------------


@dataclass
class _TrialResult:
    extended: Optional[np.ndarray]
    per_set: Optional[np.ndarray]
    ext_failed: bool
    per_set_failed: int
    omega_pd: bool


def _separation_trial(source, cov: ScvCovarianceSet, seed, opts: SolverOptions,
                      multistart, methods) -> _TrialResult:
    rng = np.random.default_rng(seed)
    S = sample_sources(source, 1, rng)[0]
    A = random_mixing(cov.K, cov.M, rng)
    data = mix(S, A)
    ext = ps = None
    ext_failed = False
    ps_failed = 0
    omega_pd = True
    if "extended" in methods:
        try:
            sol, _, _ = separate_ml(data, cov, opts, multistart, check_identifiability=False)
        except NonConvergenceError as exc:
            ext_failed = True
            sol = exc.solution
        if sol is not None:
            ext = isr_contributions(align_solution(sol, A), A, cov)
        prob = build_target_matrices(data, cov)
        omega_pd = check_existence(build_augmented_targets(prob), tol=0.0).is_pd_all
    if "per_set" in methods:
        sol, ps_failed = separate_per_set(data, cov, opts, multistart)
        ps = isr_contributions(align_solution(sol, A), A, cov)
    return _TrialResult(ext, ps, ext_failed, ps_failed, omega_pd)


def _per_set_bound(cov: ScvCovarianceSet) -> np.ndarray:
    bound = np.empty((cov.M, cov.K, cov.K))
    for m in range(cov.M):
        bound[m] = icrlb(cov.marginal(m)).bound[0]
    return bound


def _run_separation_grid(cfg, out, threads, grid_name, grid, make_source):
    p = cfg.params
    n = cfg.n_trials
    opts = _solver_options(p.get("solver"), max_iters=100, tol=1e-10, init="per_set_sedjoco")
    multistart = p.get("multistart")
    methods = p.get("methods", ["extended", "per_set"])
    out.mkdir(parents=True, exist_ok=True)
    isr_rows, norm_rows, points = [], [], []
    for value in grid:
        source, cov = make_source(value)
        crlb: CrlbReport = cov.crlb
        bounds = {"extended": crlb.bound, "per_set": _per_set_bound(cov)}
        results = _map_trials(
            lambda t: _separation_trial(source, cov, [cfg.master_seed, t], opts, multistart,
                                        methods),
            n, threads,
        )
        point = {grid_name: value, "identifiable": cov.identifiable,
                 "n_trials": n, "omega_not_pd": sum(not r.omega_pd for r in results)}
        K, M = cov.K, cov.M
        mask = ~np.eye(K, dtype=bool)
        for method in methods:
            rep = IsrReport.empty(K, M)
            for r in results:
                c = r.extended if method == "extended" else r.per_set
                rep = (IsrReport(rep.sums, rep.n_trials, rep.n_excluded + 1) if c is None
                       else IsrReport(rep.sums + c, rep.n_trials + 1, rep.n_excluded))
            failed = (sum(r.ext_failed for r in results) if method == "extended"
                      else sum(r.per_set_failed for r in results))
            isr = rep.isr
            bound = bounds[method]
            for m in range(M):
                for k in range(K):
                    for l in range(K):
                        if k != l:
                            isr_rows.append([value, method, m, k, l,
                                             float(to_db(isr[m, k, l])),
                                             float(to_db(bound[m, k, l]))])
            bnorm = float(bound[:, mask].mean())
            norm_rows.append([value, method, float(rep.isr_norm), float(to_db(rep.isr_norm)),
                              bnorm, float(to_db(bnorm)), rep.n_trials, failed])
            point[method] = {"isr_norm_db": _jsonable(to_db(rep.isr_norm)),
                             "crlb_norm_db": _jsonable(to_db(bnorm)),
                             "n_nonconverged": failed, "n_excluded": rep.n_excluded}
        points.append(point)
        if not cov.identifiable:
            logger.warning("%s=%s: source model is not identifiable", grid_name, value)

    isr_path = out / "isr.csv"
    _write_csv(isr_path, [grid_name, "method", "m", "k", "l", "isr_db", "crlb_db"], isr_rows)
    norm_path = out / "isr_norm.csv"
    _write_csv(norm_path, [grid_name, "method", "isr_norm", "isr_norm_db", "crlb_norm",
                           "crlb_norm_db", "n_trials", "n_nonconverged"], norm_rows)
    summary_path = out / "summary.json"
    _write_json(summary_path, {"experiment": cfg.experiment, "master_seed": cfg.master_seed,
                               "points": points})
    return [isr_path, norm_path, summary_path]


def _experiment2_params(p: dict, alpha: float, T: int) -> Experiment2Params:
    kw = {k: p[k] for k in ("phi0", "N", "sigma") if k in p}
    try:
        return Experiment2Params(alpha=float(alpha), T=T, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_nonstationary(cfg: ExperimentConfig, out: Path, threads: int = 1) -> List[Path]:
    """Amplitude-modulated sources over a grid of modulation depths ``alpha``."""
    T = int(cfg.get("T", 1000))
    alphas = [float(a) for a in cfg.get("alphas", [0.0, 0.25, 0.5, 0.75, 1.0])]

    def make(alpha):
        params = _experiment2_params(cfg.params, alpha, T)
        return params, build_cov_experiment2(params)

    return _run_separation_grid(cfg, out, threads, "alpha", alphas, make)


def _experiment3_params(p: dict, T: int) -> Experiment3Params:
    try:
        return Experiment3Params(K=int(p.get("K", 3)), M=int(p.get("M", 3)),
                                 L=int(p.get("L", 5)), eta=float(p.get("eta", 1.0)), T=T,
                                 seed=int(p.get("filter_seed", 0)),
                                 filters=p.get("filters"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_stationary(cfg: ExperimentConfig, out: Path, threads: int = 1) -> List[Path]:
    """Delayed filtered-noise sources over a grid of observation lengths."""
    grid = [int(t) for t in cfg.get("T_grid", [100, 300, 1000])]

    def make(T):
        params = _experiment3_params(cfg.params, T)
        return params, build_cov_experiment3(params)

    return _run_separation_grid(cfg, out, threads, "T", grid, make)


# -- single solve and bound table -------------------------------------------


class SolveFailed(RuntimeError):
    pass


def run_solve(cfg: ExperimentConfig, out: Path, threads: int = 1) -> List[Path]:
    """Solve one problem file; raises :class:`SolveFailed` if not converged."""
    path = Path(cfg.get("problem"))
    if not path.is_absolute():
        path = cfg.base_dir / path
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read problem {path}: {exc.strerror}") from None
    try:
        prob = problem_from_json(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not check_existence(build_augmented_targets(prob)).is_pd_all:
        logger.warning("augmented targets are not all positive definite; "
                       "a solution may not exist")
    solver = cfg.get("solver", "newton")
    defaults = {"max_iters": 100 if solver == "newton" else 5000}
    opts = _solver_options(cfg.get("options"), **defaults)
    run = newton_solve if solver == "newton" else ir_solve
    try:
        sol, trace = run(prob, opts)
        error = None
    except NonConvergenceError as exc:
        sol, trace, error = exc.solution, exc.trace, exc
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if sol is not None:
        sol_path = out / "solution.json"
        sol_path.write_text(solution_to_json(sol))
        written.append(sol_path)
    if trace is not None:
        trace_path = out / "trace.csv"
        _write_csv(trace_path, ["iteration", "residual", "log_likelihood"],
                   ([i, float(r), float(f)] for i, (r, f)
                    in enumerate(zip(trace.residuals, trace.likelihoods))))
        written.append(trace_path)
    if error is not None or not trace.converged:
        final = residual(sol, prob).total if sol is not None else math.nan
        raise SolveFailed(f"solver stopped at residual {final:.3g} (tol {opts.tol:g})")
    return written


def _crlb_source(cfg: ExperimentConfig) -> ScvCovarianceSet:
    src = cfg.get("source")
    model = src.get("model")
    if model == "nonstationary2x2":
        return build_cov_experiment2(_experiment2_params(src, src.get("alpha", 0.0),
                                                         int(src.get("T", 1000))))
    if model == "stationary3x3":
        return build_cov_experiment3(_experiment3_params(src, int(src.get("T", 1000))))
    if model == "file":
        path = Path(src.get("path", ""))
        if not path.is_absolute():
            path = cfg.base_dir / path
        try:
            C = np.load(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load covariances from {path}: {exc}") from None
        try:
            return ScvCovarianceSet(C, int(src.get("M", 1)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    raise ConfigError(f"unknown covariance source model {model!r}")


def run_crlb(cfg: ExperimentConfig, out: Path, threads: int = 1) -> List[Path]:
    """Tabulate the induced bound for one covariance model."""
    cov = _crlb_source(cfg)
    rep = icrlb(cov)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in range(cov.M):
        for k in range(cov.K):
            for l in range(cov.K):
                if k != l:
                    b = float(rep.bound[m, k, l])
                    rows.append([m, k, l, b, float(to_db(b)), int(rep.infinite[m, k, l])])
    path = out / "crlb.csv"
    _write_csv(path, ["m", "k", "l", "bound", "bound_db", "infinite"], rows)
    return [path]


RUNNERS = {
    "convergence": run_convergence,
    "nonstationary2x2": run_nonstationary,
    "stationary3x3": run_stationary,
    "solve": run_solve,
    "crlb": run_crlb,
}
