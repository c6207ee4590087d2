"""Newton and iterative-relaxation solvers for the extended congruence system.

Both solvers work on the augmented targets ``Omega[k]`` and return a
:class:`~sedjoco.core.SolutionSet` together with a :class:`ConvergenceTrace`.

Newton maximizes the associated log-likelihood using its analytic Hessian
over ``vec(B)`` (column-major ``K^2 M`` vector, block ``m`` occupying entries
``m K^2 ... (m+1) K^2 - 1``). Iterative relaxation (IR) updates one row
``b_k^(m)`` at a time by projecting out the other transformed columns of the
same dataset and renormalizing.
"""

from __future__ import annotations

import logging
import math
import itertools
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linear_sum_assignment

from .core import (
    EXT,
    AugmentedTargetSet,
    ProblemDims,
    ProblemInstance,
    SolutionSet,
    build_augmented_targets,
    is_nonsingular,
    residual_matrices,
    transformed_columns,
)

__all__ = [
    "SolverOptions",
    "ConvergenceTrace",
    "NonConvergenceError",
    "SingularIterateError",
    "gradient",
    "hessian",
    "vec",
    "unvec",
    "newton_solve",
    "ir_solve",
    "standard_sedjoco_solve",
    "make_initial",
    "per_set_solutions",
    "align_datasets",
    "rank_dataset_alignments",
]

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("identity", "per_set_sedjoco")


@dataclass
class SolverOptions:
    """Options shared by both solvers.

    Parameters
    ----------
    max_iters : int
        Newton iterations or IR sweeps (one sweep updates every row once).
    tol : float
        Stop once the total residual is at or below ``tol``.
    init : str or SolutionSet
        ``"identity"``, ``"per_set_sedjoco"`` or an explicit starting point.
    newton_damping : bool
        If True, Newton falls back to a line search along an ascent
        direction whenever the full step fails to improve. If False the
        full step is always taken unless it produces a singular iterate.
    seed : int
        Seed for the jitter IR applies to degenerate updates.
    """

    max_iters: int = 100
    tol: float = 1e-10
    init: Union[str, SolutionSet] = "identity"
    newton_damping: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be a positive integer")
        if not (self.tol > 0):
            raise ValueError("tol must be positive")
        if isinstance(self.init, str) and self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init!r}")


@dataclass
class ConvergenceTrace:
    residuals: List[float] = field(default_factory=list)
    likelihoods: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        """Number of completed iterations (the first entry is the start point)."""
        return max(len(self.residuals) - 1, 0)

    def iterations_to(self, tol: float) -> Optional[int]:
        for i, r in enumerate(self.residuals):
            if r <= tol:
                return i
        return None


class NonConvergenceError(RuntimeError):
    """Raised when a solver cannot continue; carries the best iterate found."""

    def __init__(self, message: str, solution: Optional[SolutionSet] = None,
                 trace: Optional[ConvergenceTrace] = None):
        super().__init__(message)
        self.solution = solution
        self.trace = trace


class SingularIterateError(NonConvergenceError):
    pass


# -- derivatives -------------------------------------------------------------


def vec(G: np.ndarray) -> np.ndarray:
    """Column-major vectorization of each ``G[m]``, concatenated over ``m``."""
    return np.asarray(G).transpose(0, 2, 1).reshape(-1)


def unvec(v: np.ndarray, M: int, K: int) -> np.ndarray:
    return np.asarray(v).reshape(M, K, K).transpose(0, 2, 1)


def _refined_inverse(B: np.ndarray) -> np.ndarray:
    """``inv(B[m])`` in extended precision via one residual-correction step."""
    A = np.linalg.inv(B).astype(EXT)
    BL = np.asarray(B, dtype=EXT)
    eye = np.eye(B.shape[1], dtype=EXT)
    return A + np.matmul(A, eye - np.matmul(BL, A))


def _omegas(targets) -> np.ndarray:
    if isinstance(targets, AugmentedTargetSet):
        return np.asarray(targets.omegas)
    if isinstance(targets, ProblemInstance):
        return np.asarray(build_augmented_targets(targets).omegas)
    return np.asarray(targets)


def _matrices(s) -> np.ndarray:
    return np.asarray(s.B if isinstance(s, SolutionSet) else s, dtype=float)


def gradient(s, targets) -> np.ndarray:
    """Gradient of the log-likelihood, ``G[m] = B[m]^{-T} - Beta[m]``.

    ``Beta[m]`` stacks the transformed columns ``beta_k^(m)`` as rows.
    Returned as an ``(M, K, K)`` array.
    """
    B = _matrices(s)
    om = _omegas(targets)
    G = _refined_inverse(B).transpose(0, 2, 1) - transformed_columns(om, B)
    return np.asarray(G, dtype=float)


def hessian(s, targets) -> np.ndarray:
    """Hessian over ``vec(B)``, a symmetric ``K^2 M x K^2 M`` matrix.

    Entry ``((p, q, i), (m, n, j))`` (row ``p``, column ``q`` of ``B[i]``) is
    ``-[i == j] A_i[q, m] A_i[n, p] - [p == m] Q[p, i, j][q, n]`` with
    ``A_i = inv(B[i])``.
    """
    B = _matrices(s)
    om = _omegas(targets)
    M, K, _ = B.shape
    A = np.linalg.inv(B)
    # axes: [i, q, p, j, n, m]
    H = np.zeros((M, K, K, M, K, K))
    for i in range(M):
        H[i, :, :, i, :, :] -= np.einsum("qm,np->qpnm", A[i], A[i])
    Q = om.reshape(K, M, K, M, K)  # [p, i, q, j, n]
    idx = np.arange(K)
    H[:, :, idx, :, :, idx] -= Q  # fancy indices move to the front: [p, i, q, j, n]
    return H.reshape(M * K * K, M * K * K)


def _loglik(B: np.ndarray, om: np.ndarray) -> float:
    if not is_nonsingular(B):
        return -math.inf
    logdet = sum(np.linalg.slogdet(b)[1] for b in B)
    quad = (np.asarray(B, dtype=EXT) * transformed_columns(om, B)).sum()
    return float(logdet - 0.5 * float(quad))


def _resid(B: np.ndarray, om: np.ndarray) -> float:
    R = residual_matrices(om, B)
    return float(np.sqrt((R * R).sum()))


# -- helpers -----------------------------------------------------------------


def _sign_normalize(B: np.ndarray, om: np.ndarray):
    """Flip rows (jointly over all datasets) so ``diag(B[0] @ chol(Q[0,0,0])) >= 0``.

    Flipping row ``k`` in every ``B[m]`` at once preserves the drilled
    conditions; flipping it in one dataset only would not.
    """
    K = B.shape[1]
    try:
        L = np.linalg.cholesky(om[0, :K, :K])
    except np.linalg.LinAlgError:
        return B, np.ones(K)
    signs = np.where(np.diag(B[0] @ L) < 0, -1.0, 1.0)
    return B * signs[None, :, None], signs


def _finish(B, om, trace, t0, tol, dims):
    B, signs = _sign_normalize(B, om)
    trace.metadata["row_signs"] = signs.tolist()
    trace.wall_time = time.perf_counter() - t0
    trace.converged = bool(trace.residuals and trace.residuals[-1] <= tol)
    return SolutionSet(dims, B)


def _start_point(problem: ProblemInstance, opts: SolverOptions) -> np.ndarray:
    init = opts.init
    if isinstance(init, SolutionSet):
        if (init.K, init.M) != (problem.K, problem.M):
            raise ValueError("initial solution does not match problem dimensions")
        B = np.array(init.B, dtype=float)
    else:
        B = np.array(make_initial(problem, init, opts).B, dtype=float)
    if not is_nonsingular(B):
        raise ValueError("initial point is singular")
    return B


# -- Newton ------------------------------------------------------------------


def _newton_direction(H, g, M, K):
    """Solve ``H d = -g`` by LU; add a small ridge when ``H`` is singular."""
    n = H.shape[0]
    for ridge in (0.0, 1e-10 * np.linalg.norm(H)):
        Hr = H + ridge * np.eye(n) if ridge else H
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            try:
                lu, piv = sla.lu_factor(Hr, check_finite=False)
            except (ValueError, np.linalg.LinAlgError):
                continue
        u = np.abs(np.diag(lu))
        if u.min() <= 1e-14 * max(u.max(), 1e-300):
            logger.debug("singular Hessian, retrying with ridge")
            continue
        d = sla.lu_solve((lu, piv), -g, check_finite=False)
        if np.all(np.isfinite(d)):
            return unvec(d, M, K)
    return None


def _ascent_direction(H, g, M, K):
    """Newton direction for a negative-definite surrogate of ``H``.

    Eigenvalues are replaced by ``-max(|w|, 1e-8 max|w|)`` which keeps the
    exact Newton step whenever ``H`` is already negative definite.
    """
    w, V = np.linalg.eigh(H)
    if w.max() >= 0:
        w = -np.maximum(np.abs(w), 1e-8 * np.abs(w).max())
    return unvec(-(V @ ((V.T @ g) / w)), M, K)


def newton_solve(problem: ProblemInstance, opts: Optional[SolverOptions] = None):
    """Maximize the log-likelihood with Newton's method.

    Each iteration first tries the full Newton step and accepts it if the
    iterate stays nonsingular and either the residual or the likelihood
    improves. Otherwise (when damping is enabled) it backtracks along an
    ascent direction with an Armijo test on the likelihood.

    Returns
    -------
    solution : SolutionSet
        Best iterate (smallest residual) encountered.
    trace : ConvergenceTrace
        Residual and likelihood histories; ``trace.converged`` tells whether
        ``opts.tol`` was reached.

    Raises
    ------
    SingularIterateError
        If 60 step halvings cannot keep the iterate nonsingular.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    om = np.asarray(build_augmented_targets(problem).omegas)
    M, K = problem.M, problem.K
    B = _start_point(problem, opts)
    trace = ConvergenceTrace(metadata={"solver": "newton"})
    r = _resid(B, om)
    f = _loglik(B, om)
    trace.residuals.append(r)
    trace.likelihoods.append(f)
    best_B, best_r = B, r
    slack = lambda f0: 1e-12 * (1.0 + abs(f0))  # noqa: E731

    for _ in range(opts.max_iters):
        if r <= opts.tol:
            break
        g = vec(gradient(B, om))
        H = hessian(B, om)
        d = _newton_direction(H, g, M, K)
        accepted = None
        if d is not None:
            Bn = B + d
            if is_nonsingular(Bn):
                rn, fn = _resid(Bn, om), _loglik(Bn, om)
                if not opts.newton_damping or rn < r or fn > f:
                    accepted = (Bn, rn, fn)
        if accepted is None and not opts.newton_damping:
            t = 0.5
            for _ in range(60):
                Bn = B + t * d
                if is_nonsingular(Bn):
                    accepted = (Bn, _resid(Bn, om), _loglik(Bn, om))
                    break
                t *= 0.5
        elif accepted is None:
            d = _ascent_direction(H, g, M, K)
            slope = float(g @ vec(d))
            t = 1.0
            any_regular = False
            for _ in range(60):
                Bn = B + t * d
                if is_nonsingular(Bn):
                    any_regular = True
                    rn, fn = _resid(Bn, om), _loglik(Bn, om)
                    if fn >= f + 1e-4 * t * slope - slack(f) or rn < r:
                        accepted = (Bn, rn, fn)
                        break
                t *= 0.5
            if accepted is None and any_regular:
                # no further progress is representable in double precision
                trace.metadata["stalled"] = True
                break
        if accepted is None:
            sol = _finish(best_B, om, trace, t0, opts.tol, problem.dims)
            raise SingularIterateError(
                "Newton iterate became singular after 60 step halvings", sol, trace
            )
        B, r, f = accepted
        trace.residuals.append(r)
        trace.likelihoods.append(f)
        if r < best_r:
            best_B, best_r = B, r

    if best_r < trace.residuals[-1]:
        trace.residuals.append(best_r)
        trace.likelihoods.append(_loglik(best_B, om))
    return _finish(best_B, om, trace, t0, opts.tol, problem.dims), trace


# -- iterative relaxation ----------------------------------------------------


def ir_solve(problem: ProblemInstance, opts: Optional[SolverOptions] = None):
    """Iterative relaxation: sweep over ``m`` (outer) and ``k`` (inner).

    For each row, remove its components along the other transformed
    columns of the same dataset,
    ``b <- b - X^T (X X^T)^{-1} X b``,
    then rescale so that ``b^T beta_k^(m) == 1`` in magnitude, with
    ``beta_k^(m)`` evaluated at the projected row (for ``M = 1`` this is
    the familiar ``b^T Q_k b`` normalization). The transformed columns are
    refreshed incrementally after every update.
    A degenerate update is retried up to ten times with a jitter of norm
    1e-6.

    Returns the best iterate and its trace, like :func:`newton_solve`.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    om = np.asarray(build_augmented_targets(problem).omegas)
    M, K = problem.M, problem.K
    Q = om.reshape(K, M, K, M, K).transpose(0, 1, 3, 2, 4)  # Q[k, m1, m2]
    rng = np.random.default_rng(opts.seed)
    B = _start_point(problem, opts)
    trace = ConvergenceTrace(metadata={"solver": "ir"})
    r = _resid(B, om)
    trace.residuals.append(r)
    trace.likelihoods.append(_loglik(B, om))
    best_B, best_r = B.copy(), r

    for _ in range(opts.max_iters):
        if r <= opts.tol:
            break
        beta = np.asarray(transformed_columns(om, B), dtype=float)
        for m in range(M):
            for k in range(K):
                old = B[m, k].copy()
                b = old
                for attempt in range(11):
                    new = _relax_row(b, beta[m], k, Q[k, m, m])
                    if new is not None:
                        break
                    if attempt == 10:
                        sol = _finish(best_B, om, trace, t0, opts.tol, problem.dims)
                        raise NonConvergenceError(
                            f"degenerate relaxation update for row {k} of dataset {m}",
                            sol, trace,
                        )
                    jitter = rng.standard_normal(K)
                    b = old + 1e-6 * jitter / np.linalg.norm(jitter)
                    # beta[m, k] depends on b through Q[k, m, m]
                    beta[:, k, :] += Q[k, :, m] @ (b - B[m, k])
                    B[m, k] = b
                beta[:, k, :] += Q[k, :, m] @ (new - B[m, k])
                B[m, k] = new
        r = _resid(B, om)
        trace.residuals.append(r)
        trace.likelihoods.append(_loglik(B, om))
        if r < best_r:
            best_B, best_r = B.copy(), r

    if best_r < trace.residuals[-1]:
        trace.residuals.append(best_r)
        trace.likelihoods.append(_loglik(best_B, om))
    return _finish(best_B, om, trace, t0, opts.tol, problem.dims), trace


def _relax_row(b, beta_m, k, q_mm):
    K = beta_m.shape[0]
    old = b
    if K > 1:
        X = np.delete(beta_m, k, axis=0)
        gram = X @ X.T
        try:
            coef = np.linalg.solve(gram, X @ b)
        except np.linalg.LinAlgError:
            return None
        if np.linalg.cond(gram) > 1e14:
            return None
        b = b - X.T @ coef
    # beta_k^(m) depends on the row itself; refresh it for the projected row
    scale = abs(b @ (beta_m[k] + q_mm @ (b - old)))
    if not np.isfinite(scale) or scale < 1e-14:
        return None
    return b / math.sqrt(scale)


# -- standard problem and initialization -------------------------------------


def standard_sedjoco_solve(targets, opts: Optional[SolverOptions] = None,
                           solver: str = "newton") -> SolutionSet:
    """Solve the single-set system ``B Q[k] B^T e_k = e_k`` for ``K`` targets.

    Raises :class:`NonConvergenceError` when the tolerance is not reached.
    """
    if isinstance(targets, ProblemInstance):
        p = targets
        if p.M != 1:
            raise ValueError("standard problems have M == 1")
    else:
        p = ProblemInstance.standard(targets)
    opts = opts or SolverOptions()
    run = newton_solve if solver == "newton" else ir_solve
    sol, trace = run(p, opts)
    if not trace.converged:
        raise NonConvergenceError(
            f"standard solve stopped at residual {trace.residuals[-1]:.3g}", sol, trace
        )
    return sol


def make_initial(problem: ProblemInstance, strategy: str = "identity",
                 opts: Optional[SolverOptions] = None) -> SolutionSet:
    """Starting point for the extended solvers.

    ``"identity"`` uses ``B[m] = I``. ``"per_set_sedjoco"`` solves the
    standard system on each dataset's own targets ``Q[k, m, m]`` (falling
    back to the identity, with a warning, where that fails) and then
    relabels and re-signs the rows of each dataset consistently, see
    :func:`rank_dataset_alignments`.
    """
    K, M = problem.K, problem.M
    if strategy == "identity":
        return SolutionSet.identity(K, M)
    if strategy != "per_set_sedjoco":
        raise ValueError(f"unknown init strategy {strategy!r}")
    B = per_set_solutions(problem, opts)
    if M > 1:
        B = rank_dataset_alignments(B, build_augmented_targets(problem).omegas)[0]
    return SolutionSet(problem.dims, B)


def per_set_solutions(problem: ProblemInstance, opts: Optional[SolverOptions] = None) -> np.ndarray:
    """Independent standard solutions on each ``Q[k, m, m]``, shape ``(M, K, K)``."""
    K, M = problem.K, problem.M
    base = opts or SolverOptions()
    sub_opts = SolverOptions(max_iters=base.max_iters, tol=base.tol, init="identity",
                             newton_damping=base.newton_damping, seed=base.seed)
    B = np.empty((M, K, K))
    for m in range(M):
        sub = ProblemInstance(ProblemDims(K, 1),
                              problem.targets[:, m:m + 1, m:m + 1])
        try:
            sol, trace = newton_solve(sub, sub_opts)
            ok = trace.converged or trace.residuals[-1] < 1e-6
        except NonConvergenceError:
            ok = False
        if ok:
            B[m] = sol.B[0]
        else:
            warnings.warn(f"per-set initialization failed for dataset {m}; using identity",
                          RuntimeWarning, stacklevel=2)
            B[m] = np.eye(K)
    return B


def _pair_terms(B: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """``terms[k, m1, m2, i, j] = B[m1][i] @ Q[k, m1, m2] @ B[m2][j]``."""
    M, K, _ = B.shape
    Qb = np.asarray(omegas).reshape(K, M, K, M, K)  # [k, m1, p, m2, q]
    return np.einsum("aip,kapbq,bjq->kabij", B, Qb, B)


def _sign_patterns(M: int) -> np.ndarray:
    """All sign vectors of length ``M`` with a leading +1."""
    rest = np.array(list(itertools.product((1.0, -1.0), repeat=M - 1)), dtype=float)
    return np.hstack([np.ones((len(rest), 1)), rest.reshape(len(rest), M - 1)])


MAX_EXHAUSTIVE_LABELINGS = 50_000


def rank_dataset_alignments(B: np.ndarray, omegas: np.ndarray, n_best: int = 1) -> List[np.ndarray]:
    """Candidate reorderings of independently obtained per-dataset solutions.

    Each ``B[m]`` is only defined up to its own row permutation and row
    signs, while the extended likelihood couples row ``k`` of every dataset
    through ``Q[k, m1, m2]``. Relabeling and re-signing rows leaves the
    log-determinants unchanged, so candidates are ranked by the quadratic
    term alone. For each assignment of rows to sources the best signs are
    found per source over all ``2^(M-1)`` relative sign patterns.

    All ``(K!)^M`` assignments are scored when that count is at most
    ``MAX_EXHAUSTIVE_LABELINGS``; otherwise datasets are matched greedily one
    at a time and a single candidate is returned.

    Returns
    -------
    list of ndarray
        Up to ``n_best`` arrays of shape ``(M, K, K)``, best first.
    """
    B = np.asarray(B, dtype=float)
    M, K, _ = B.shape
    if math.factorial(K) ** M > MAX_EXHAUSTIVE_LABELINGS:
        return [align_datasets(B, omegas)]
    terms = _pair_terms(B, omegas)
    perms = np.array(list(itertools.permutations(range(K))))
    labels = np.array(list(itertools.product(range(len(perms)), repeat=M)))
    rows = perms[labels]  # (nL, M, K): rows[l, m, k] = row of B[m] labelled k
    signs = _sign_patterns(M)  # (nS, M)
    m_idx = np.arange(M)
    quad = np.zeros(len(labels))
    best_signs = np.empty((len(labels), K), dtype=int)
    for k in range(K):
        r = rows[:, :, k]  # (nL, M)
        c = terms[k][m_idx[None, :, None], m_idx[None, None, :], r[:, :, None], r[:, None, :]]
        energy = np.einsum("sa,sb,lab->ls", signs, signs, c)
        best_signs[:, k] = energy.argmin(axis=1)
        quad += energy.min(axis=1)
    order = np.argsort(quad, kind="stable")[: max(int(n_best), 1)]
    out = []
    for l in order:
        cand = np.empty_like(B)
        for m in range(M):
            cand[m] = B[m][rows[l, m]] * signs[best_signs[l], m][:, None]
        out.append(cand)
    return out


def align_datasets(B: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Greedy version of :func:`rank_dataset_alignments`.

    Dataset 0 keeps its labelling; every later dataset is matched to the
    ones already fixed by solving a linear assignment over row-to-source
    pairings, each scored with its best sign.
    """
    B = np.array(B, dtype=float)
    M, K, _ = B.shape
    Qb = np.asarray(omegas).reshape(K, M, K, M, K)  # [k, m1, p, m2, q]
    for m in range(1, M):
        diag = np.einsum("ip,kpq,iq->ki", B[m], Qb[:, m, :, m, :], B[m])
        cross = np.zeros((K, K))
        for mp in range(m):
            cross += np.einsum("kp,kpq,iq->ki", B[mp], Qb[:, mp, :, m, :], B[m])
        rows, cols = linear_sum_assignment(-0.5 * diag + np.abs(cross), maximize=True)
        signs = np.where(cross[rows, cols] > 0, -1.0, 1.0)
        B[m] = signs[:, None] * B[m][cols]
    return B
