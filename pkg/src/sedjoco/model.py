"""Gaussian multi-set source model, simulation and semi-blind ML separation.

Each source ``k`` is described by its *source component vector* (SCV): the
concatenation ``s_k = [s_k^(0); ...; s_k^(M-1)]`` of its ``M`` per-dataset
signals of length ``T``. SCVs of different sources are independent zero-mean
Gaussian vectors with known ``MT x MT`` covariances ``C_k``; mixtures are
``X[m] = A[m] @ S[m]`` where row ``k`` of ``S[m]`` is ``s_k^(m)``.

The ML estimate of the demixing matrices given the ``X[m]`` and the ``C_k``
solves the extended congruence system with targets
``Q[k, m1, m2] = X[m1] @ P_k[m1, m2] @ X[m2].T / T``, where ``P_k = inv(C_k)``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import lapack

from .core import (
    ProblemDims,
    ProblemInstance,
    SolutionSet,
    build_augmented_targets,
    log_likelihood_core,
    permute_solution,
    problem_from_omegas,
)
from .solvers import (
    NonConvergenceError,
    SolverOptions,
    newton_solve,
    per_set_solutions,
    rank_dataset_alignments,
)

__all__ = [
    "ScvCovarianceSet",
    "Experiment2Params",
    "Experiment3Params",
    "DatasetCollection",
    "NonIdentifiabilityWarning",
    "build_cov_experiment2",
    "build_cov_experiment3",
    "draw_experiment3_filters",
    "sample_sources",
    "mix",
    "random_mixing",
    "build_target_matrices",
    "separate_ml",
    "separate_per_set",
    "dump_dataset",
    "load_dataset",
]

logger = logging.getLogger(__name__)


class NonIdentifiabilityWarning(UserWarning):
    """The source model does not allow the mixing to be identified."""


def _cholesky_inverse(C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lower Cholesky factor and inverse of a symmetric PD matrix."""
    c, info = lapack.dpotrf(C, lower=1, clean=1)
    if info != 0:
        raise np.linalg.LinAlgError(
            f"covariance is not positive definite (leading minor {info} fails)"
        )
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("covariance inversion failed")
    inv = np.tril(inv) + np.tril(inv, -1).T
    return c, inv


class ScvCovarianceSet:
    """Stacked SCV covariances ``C[k]`` of shape ``(K, M*T, M*T)``.

    Block ``(m1, m2)`` of ``C[k]`` is the ``T x T`` cross-covariance between
    ``s_k^(m1)`` and ``s_k^(m2)``. Cholesky factors and inverses are computed
    on first use and cached.

    Parameters
    ----------
    C : ndarray, shape (K, M*T, M*T)
    M : int
        Number of datasets.
    """

    def __init__(self, C, M: int):
        C = np.array(C, dtype=float)
        if C.ndim != 3 or C.shape[1] != C.shape[2] or C.shape[1] % M:
            raise ValueError(f"expected (K, M*T, M*T) covariances, got {C.shape} for M={M}")
        if not np.all(np.isfinite(C)):
            raise ValueError("covariances contain non-finite entries")
        asym = np.abs(C - C.transpose(0, 2, 1)).max()
        if asym > 1e-10 * np.abs(C).max():
            raise ValueError(f"covariances are not symmetric (max deviation {asym:.3g})")
        C = 0.5 * (C + C.transpose(0, 2, 1))
        C.setflags(write=False)
        self.C = C
        self.dims = ProblemDims(C.shape[0], int(M), C.shape[1] // int(M))
        self._marginals = {}

    @classmethod
    def from_blocks(cls, blocks) -> "ScvCovarianceSet":
        """Build from an array of blocks with shape ``(K, M, M, T, T)``."""
        blocks = np.asarray(blocks, dtype=float)
        K, M, _, T, _ = blocks.shape
        return cls(blocks.transpose(0, 1, 3, 2, 4).reshape(K, M * T, M * T), M)

    @property
    def K(self) -> int:
        return self.dims.K

    @property
    def M(self) -> int:
        return self.dims.M

    @property
    def T(self) -> int:
        return self.dims.T

    def block(self, k: int, m1: int, m2: int) -> np.ndarray:
        T = self.T
        return self.C[k, m1 * T:(m1 + 1) * T, m2 * T:(m2 + 1) * T]

    def blocks(self) -> np.ndarray:
        """View of the covariances as ``(K, M, T, M, T)``."""
        K, M, T = self.K, self.M, self.T
        return self.C.reshape(K, M, T, M, T)

    @cached_property
    def _factors(self):
        chol = np.empty_like(self.C)
        inv = np.empty_like(self.C)
        for k in range(self.K):
            try:
                chol[k], inv[k] = _cholesky_inverse(self.C[k])
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(f"SCV covariance {k}: {exc}") from None
        chol.setflags(write=False)
        inv.setflags(write=False)
        return chol, inv

    @property
    def cholesky(self) -> np.ndarray:
        return self._factors[0]

    @property
    def P(self) -> np.ndarray:
        """Stacked inverses ``inv(C[k])``, shape ``(K, M*T, M*T)``."""
        return self._factors[1]

    def inverse_blocks(self) -> np.ndarray:
        K, M, T = self.K, self.M, self.T
        return self.P.reshape(K, M, T, M, T)

    def trace(self, k: int, m: int) -> float:
        return float(np.trace(self.block(k, m, m)))

    def marginal(self, m: int) -> "ScvCovarianceSet":
        """Covariances of dataset ``m`` alone (an ``M = 1`` set)."""
        if not 0 <= m < self.M:
            raise IndexError(f"dataset index {m} out of range")
        if m not in self._marginals:
            T = self.T
            self._marginals[m] = ScvCovarianceSet(
                self.C[:, m * T:(m + 1) * T, m * T:(m + 1) * T], 1
            )
        return self._marginals[m]

    @cached_property
    def crlb(self):
        from .metrics import icrlb

        return icrlb(self)

    @property
    def identifiable(self) -> bool:
        return not bool(np.any(self.crlb.infinite))


# -- experiment 2: nonstationary sources coupled through a shared process ----

_TABLE_PHI0 = ((math.pi, 5 * math.pi / 3), (math.pi / 3, math.pi))
_TABLE_N = ((50, 350), (200, 500))
_TABLE_SIGMA = ((2.0, 10.0 / 3.0), (8.0 / 3.0, 4.0))


@dataclass
class Experiment2Params:
    """Parameters of the amplitude-modulated source model.

    ``s_k^(m)[n] = (sigma[k, m] + alpha cos(2 pi n / N[k, m] + phi0[k, m])) w_k[n]
    + v_k^(m)[n]`` for ``n = 0 .. T-1``, with ``w_k`` shared by all datasets
    and ``v_k^(m)`` independent white noise. Arrays are indexed ``[k, m]``.
    """

    alpha: float = 0.0
    T: int = 1000
    phi0: np.ndarray = field(default_factory=lambda: np.array(_TABLE_PHI0))
    N: np.ndarray = field(default_factory=lambda: np.array(_TABLE_N, dtype=float))
    sigma: np.ndarray = field(default_factory=lambda: np.array(_TABLE_SIGMA))

    def __post_init__(self):
        self.phi0 = np.asarray(self.phi0, dtype=float)
        self.N = np.asarray(self.N, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (self.phi0.shape == self.N.shape == self.sigma.shape) or self.N.ndim != 2:
            raise ValueError("phi0, N and sigma must be (K, M) arrays of equal shape")
        if np.any(self.N <= 0):
            raise ValueError("periods N must be positive")
        if int(self.T) < 1:
            raise ValueError("T must be positive")
        self.T = int(self.T)

    @property
    def K(self) -> int:
        return self.N.shape[0]

    @property
    def M(self) -> int:
        return self.N.shape[1]

    def envelopes(self) -> np.ndarray:
        """``sigma + alpha cos(phi)`` as a ``(K, M, T)`` array."""
        n = np.arange(self.T)
        phi = 2 * np.pi * n[None, None, :] / self.N[:, :, None] + self.phi0[:, :, None]
        return self.sigma[:, :, None] + self.alpha * np.cos(phi)


def build_cov_experiment2(params: Experiment2Params) -> ScvCovarianceSet:
    """Analytic SCV covariances of :class:`Experiment2Params`.

    Every block is diagonal: ``g_{k,m1}[n] g_{k,m2}[n] + [m1 == m2]``.
    """
    g = params.envelopes()
    K, M, T = g.shape
    diag = g[:, :, None, :] * g[:, None, :, :] + np.eye(M)[None, :, :, None]
    blocks = np.zeros((K, M, M, T, T))
    idx = np.arange(T)
    blocks[:, :, :, idx, idx] = diag
    return ScvCovarianceSet.from_blocks(blocks)


# -- experiment 3: stationary, zero-lag uncorrelated across datasets ----------


def draw_experiment3_filters(K: int, M: int, L: int, eta: float, seed) -> np.ndarray:
    """Random FIR filters ``h[k, m1, m2]`` (shape ``(K, M, M, L)``).

    Each filter is drawn standard normal and rescaled to energy 1 when
    ``m1 == m2`` and ``eta`` otherwise.
    """
    if L < 1:
        raise ValueError("filter length L must be at least 1")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((K, M, M, L))
    energy = np.where(np.eye(M, dtype=bool), 1.0, float(eta))
    for k, m1, m2 in itertools.product(range(K), range(M), range(M)):
        if energy[m1, m2] == 0:
            h[k, m1, m2] = 0.0
            continue
        while not np.any(h[k, m1, m2]):
            h[k, m1, m2] = rng.standard_normal(L)
        h[k, m1, m2] *= math.sqrt(energy[m1, m2]) / np.linalg.norm(h[k, m1, m2])
    return h


@dataclass
class Experiment3Params:
    """Delayed, filtered-noise source model.

    ``s_k^(m)[n] = v_k^(m)[n - L m]`` with
    ``v_k^(m) = sum_l h[k, m, l] * w_k^(l)`` (convolution with independent
    white driving noises). Filters are drawn from ``seed`` unless given.
    """

    K: int = 3
    M: int = 3
    L: int = 5
    eta: float = 1.0
    T: int = 1000
    seed: int = 0
    filters: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.filters is None:
            self.filters = draw_experiment3_filters(self.K, self.M, self.L, self.eta, self.seed)
        self.filters = np.asarray(self.filters, dtype=float)
        if self.filters.shape != (self.K, self.M, self.M, self.L):
            raise ValueError(
                f"filters must have shape {(self.K, self.M, self.M, self.L)}, got {self.filters.shape}"
            )
        if int(self.T) < 1:
            raise ValueError("T must be positive")
        energy = (self.filters ** 2).sum(axis=-1)
        target = np.where(np.eye(self.M, dtype=bool), 1.0, self.eta)
        if np.abs(energy - target[None]).max() > 1e-9:
            raise ValueError("filters violate the energy normalization (1 within set, eta across)")

    @property
    def extension(self) -> int:
        """Samples of driving noise needed before ``n = 0``."""
        return (self.L - 1) + self.L * (self.M - 1)


def _filter_xcorr(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """``c[tau + L - 1] = sum_i h1[i] h2[i - tau]`` for ``|tau| < L``."""
    return np.correlate(h1, h2, mode="full")


def build_cov_experiment3(params: Experiment3Params) -> ScvCovarianceSet:
    """Analytic SCV covariances (Toeplitz blocks) of :class:`Experiment3Params`."""
    K, M, L, T = params.K, params.M, params.L, params.T
    h = params.filters
    n = np.arange(T)
    blocks = np.zeros((K, M, M, T, T))
    for k in range(K):
        for m1 in range(M):
            for m2 in range(m1, M):
                c = sum(_filter_xcorr(h[k, m1, l], h[k, m2, l]) for l in range(M))
                lag = n[:, None] - n[None, :] - L * (m1 - m2)
                inside = np.abs(lag) <= L - 1
                blk = np.where(inside, c[np.clip(lag + L - 1, 0, 2 * L - 2)], 0.0)
                blocks[k, m1, m2] = blk
                blocks[k, m2, m1] = blk.T
    cov = ScvCovarianceSet.from_blocks(blocks)
    cov.cholesky  # fail early on a non-PD model
    return cov


# -- sampling and mixing -----------------------------------------------------


@dataclass
class DatasetCollection:
    """Observations ``X`` (shape ``(M, K, T)``) with optional ground truth."""

    X: np.ndarray
    A: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 3:
            raise ValueError(f"X must have shape (M, K, T), got {self.X.shape}")

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.X.shape[2]

    def subset(self, m: int) -> "DatasetCollection":
        sl = slice(m, m + 1)
        return DatasetCollection(
            self.X[sl],
            None if self.A is None else self.A[sl],
            None if self.S is None else self.S[sl],
        )


SourceModel = Union[ScvCovarianceSet, Experiment2Params, Experiment3Params]


def sample_sources(source: SourceModel, n_trials: int, rng) -> np.ndarray:
    """Draw source realizations, shape ``(n_trials, M, K, T)``.

    A :class:`ScvCovarianceSet` is sampled through its Cholesky factor;
    experiment parameter objects are simulated directly in the time domain.
    """
    rng = np.random.default_rng(rng)
    if isinstance(source, ScvCovarianceSet):
        K, M, T = source.K, source.M, source.T
        z = rng.standard_normal((n_trials, K, M * T))
        scv = np.einsum("kij,nkj->nki", source.cholesky, z)
        return scv.reshape(n_trials, K, M, T).transpose(0, 2, 1, 3).copy()
    if isinstance(source, Experiment2Params):
        g = source.envelopes()  # (K, M, T)
        K, M, T = g.shape
        w = rng.standard_normal((n_trials, K, T))
        v = rng.standard_normal((n_trials, M, K, T))
        return g.transpose(1, 0, 2)[None] * w[:, None] + v
    if isinstance(source, Experiment3Params):
        K, M, L, T = source.K, source.M, source.L, source.T
        ext = source.extension
        w = rng.standard_normal((n_trials, K, M, T + ext))
        s = np.zeros((n_trials, M, K, T))
        h = source.filters
        for k, m, l, i in itertools.product(range(K), range(M), range(M), range(L)):
            if h[k, m, l, i] == 0.0:
                continue
            start = ext - L * m - i
            s[:, m, k, :] += h[k, m, l, i] * w[:, k, l, start:start + T]
        return s
    raise TypeError(f"cannot sample from {type(source).__name__}")


def random_mixing(K: int, M: int, rng) -> np.ndarray:
    """Standard-normal mixing matrices, shape ``(M, K, K)``."""
    return np.random.default_rng(rng).standard_normal((M, K, K))


def mix(S: np.ndarray, A: np.ndarray) -> DatasetCollection:
    """``X[m] = A[m] @ S[m]``; rejects numerically singular ``A[m]``."""
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    if S.ndim != 3 or A.shape != (S.shape[0], S.shape[1], S.shape[1]):
        raise ValueError(f"incompatible sources {S.shape} and mixing {A.shape}")
    for m, a in enumerate(A):
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond >= 1e12:
            raise np.linalg.LinAlgError(f"mixing matrix {m} is singular (cond={cond:.3g})")
        logger.debug("mixing matrix %d condition number %.3g", m, cond)
    return DatasetCollection(A @ S, A, S)


def build_target_matrices(data: DatasetCollection, cov: ScvCovarianceSet) -> ProblemInstance:
    """Targets ``Q[k, m1, m2] = X[m1] P_k[m1, m2] X[m2]^T / T``."""
    X = data.X
    M, K, T = X.shape
    if (cov.K, cov.M, cov.T) != (K, M, T):
        raise ValueError(
            f"data has (K, M, T) = {(K, M, T)} but covariances have {(cov.K, cov.M, cov.T)}"
        )
    # block-diagonal X^T of shape (M T, M K)
    Xbd = np.zeros((M * T, M * K))
    for m in range(M):
        Xbd[m * T:(m + 1) * T, m * K:(m + 1) * K] = X[m].T
    P = cov.P
    omegas = np.empty((K, M * K, M * K))
    for k in range(K):
        omegas[k] = Xbd.T @ (P[k] @ Xbd) / T
    omegas = 0.5 * (omegas + omegas.transpose(0, 2, 1))
    return problem_from_omegas(omegas, T=T)


# -- ML separation -----------------------------------------------------------


def _default_multistart(K: int) -> int:
    return math.factorial(K) - 1 if K <= 4 else 0


def separate_ml(data: DatasetCollection, cov: ScvCovarianceSet,
                opts: Optional[SolverOptions] = None, multistart: Optional[int] = None,
                check_identifiability: bool = True):
    """Semi-blind ML estimate of the demixing matrices.

    Newton is started from the per-set solutions, relabelled consistently
    across datasets, and from up to ``multistart`` alternative labellings
    (the next best by likelihood). The converged candidate with the largest
    log-likelihood is returned.

    Parameters
    ----------
    multistart : int, optional
        Extra starts. Defaults to ``K! - 1`` for ``K <= 4`` and none
        otherwise.
    check_identifiability : bool
        Warn with :class:`NonIdentifiabilityWarning` when the induced bound
        is infinite for some source pair.

    Returns
    -------
    (SolutionSet, ConvergenceTrace, float)
        Solution, its Newton trace and its log-likelihood.

    Raises
    ------
    NonConvergenceError
        If no start converges; carries the best iterate found.
    """
    opts = opts or SolverOptions()
    if check_identifiability and not cov.identifiable:
        warnings.warn(
            "source covariances do not identify the mixing (infinite bound)",
            NonIdentifiabilityWarning, stacklevel=2,
        )
    problem = build_target_matrices(data, cov)
    augmented = build_augmented_targets(problem)
    K = problem.K
    if multistart is None:
        multistart = _default_multistart(K)
    n_starts = 1 + max(int(multistart), 0)
    if isinstance(opts.init, SolutionSet):
        perms = list(itertools.permutations(range(K)))[:n_starts]
        starts = [permute_solution(opts.init, p).B for p in perms]
    else:
        starts = rank_dataset_alignments(per_set_solutions(problem, opts),
                                         augmented.omegas, n_starts)

    best = None
    fallback = None
    for start in starts:
        run_opts = SolverOptions(opts.max_iters, opts.tol, SolutionSet(problem.dims, start),
                                 opts.newton_damping, opts.seed)
        try:
            sol, trace = newton_solve(problem, run_opts)
        except NonConvergenceError as exc:
            sol, trace = exc.solution, exc.trace
            if sol is None:
                continue
        if trace.converged:
            ll = log_likelihood_core(sol, augmented)
            if best is None or ll > best[2]:
                best = (sol, trace, ll)
        elif fallback is None or trace.residuals[-1] < fallback[1].residuals[-1]:
            fallback = (sol, trace)
    if best is None:
        sol, trace = fallback if fallback else (None, None)
        raise NonConvergenceError("no ML start converged", sol, trace)
    return best


def separate_per_set(data: DatasetCollection, cov: ScvCovarianceSet,
                     opts: Optional[SolverOptions] = None, multistart: Optional[int] = None):
    """Separate every dataset on its own (``M = 1`` ML on each set).

    Returns the stacked :class:`SolutionSet` and the number of datasets whose
    solve did not converge (their best iterate is used).
    """
    B = np.empty((data.M, data.K, data.K))
    failures = 0
    for m in range(data.M):
        try:
            sol, _, _ = separate_ml(data.subset(m), cov.marginal(m), opts, multistart,
                                    check_identifiability=False)
        except NonConvergenceError as exc:
            failures += 1
            if exc.solution is None:
                raise
            sol = exc.solution
        B[m] = sol.B[0]
    return SolutionSet(ProblemDims(data.K, data.M), B), failures


# -- raw dataset dump --------------------------------------------------------


def dump_dataset(data: DatasetCollection, path) -> Tuple[Path, Path]:
    """Write ``X`` as raw little-endian float64 plus a JSON header sidecar.

    The binary holds ``X[m][k][n]`` in dataset-major, row-major order.
    """
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    hdr_path = path.with_suffix(".json")
    np.ascontiguousarray(data.X, dtype="<f8").tofile(bin_path)
    header = {"M": data.M, "K": data.K, "T": data.T, "dtype": "<f8",
              "order": "dataset-major, row-major", "file": bin_path.name}
    hdr_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return bin_path, hdr_path


def load_dataset(header_path) -> DatasetCollection:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    shape = (int(header["M"]), int(header["K"]), int(header["T"]))
    X = np.fromfile(header_path.parent / header["file"], dtype="<f8")
    if X.size != np.prod(shape):
        raise ValueError(f"binary holds {X.size} values, header expects {shape}")
    return DatasetCollection(X.reshape(shape).astype(float))
