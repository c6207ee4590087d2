"""Separation quality: interference-to-source ratios and their lower bound.

For an estimate ``B_hat[m]`` of the demixing matrices and the true mixing
``A[m]``, the global matrix ``G = B_hat[m] @ A[m]`` would be diagonal for a
perfect estimate. The ISR of source ``l`` leaking into output ``k`` is the
trial average of

    |G[k, l]|^2 / |G[k, k]|^2 * tr(C_l[m, m]) / tr(C_k[m, m]).

The induced Cramer-Rao bound gives the smallest ISR achievable by any
unbiased equivariant estimator for the given SCV covariances.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import SolutionSet

__all__ = [
    "IsrReport",
    "CrlbReport",
    "best_alignment",
    "align_solution",
    "isr_contributions",
    "isr_accumulate",
    "isr_norm",
    "icrlb",
    "to_db",
    "format_float",
    "write_report_csv",
]

RCOND_TOL = 1e-12


def to_db(x):
    """``10 log10(x)`` with ``0 -> -inf`` and ``inf -> inf``."""
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(x)


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def _offdiag_mask(K: int) -> np.ndarray:
    return ~np.eye(K, dtype=bool)


@dataclass(frozen=True)
class IsrReport:
    """Running ISR totals over Monte Carlo trials.

    ``sums[m, k, l]`` accumulates per-trial contributions; diagonal entries
    stay zero. Reports over disjoint trial sets combine with :meth:`merge`.
    """

    sums: np.ndarray
    n_trials: int = 0
    n_excluded: int = 0

    @classmethod
    def empty(cls, K: int, M: int) -> "IsrReport":
        return cls(np.zeros((M, K, K)))

    @property
    def M(self) -> int:
        return self.sums.shape[0]

    @property
    def K(self) -> int:
        return self.sums.shape[1]

    @property
    def isr(self) -> np.ndarray:
        """Mean ISR per ``(m, k, l)``; diagonal entries are zero."""
        if self.n_trials < 1:
            raise ValueError("ISR report holds no trials")
        return self.sums / self.n_trials

    @property
    def isr_db(self) -> np.ndarray:
        return to_db(self.isr)

    @property
    def isr_norm(self) -> float:
        return isr_norm(self)

    def merge(self, other: "IsrReport") -> "IsrReport":
        if self.sums.shape != other.sums.shape:
            raise ValueError("cannot merge reports of different shapes")
        return IsrReport(self.sums + other.sums, self.n_trials + other.n_trials,
                         self.n_excluded + other.n_excluded)


@dataclass(frozen=True)
class CrlbReport:
    """Induced bound on the ISR, ``bound[m, k, l]`` for ``k != l``.

    Diagonal entries are NaN. Entries whose ``M x M`` system is singular
    (relative reciprocal condition below 1e-12) are ``+inf`` and flagged in
    ``infinite``.
    """

    bound: np.ndarray
    infinite: np.ndarray
    kappa: np.ndarray = field(repr=False)

    @property
    def bound_db(self) -> np.ndarray:
        return to_db(self.bound)

    @property
    def norm(self) -> float:
        """Average over all off-diagonal entries (comparable to ``isr_norm``)."""
        K = self.bound.shape[1]
        return float(self.bound[:, _offdiag_mask(K)].mean())


# -- alignment ---------------------------------------------------------------


def _global(Bhat, A) -> np.ndarray:
    B = np.asarray(Bhat.B if isinstance(Bhat, SolutionSet) else Bhat, dtype=float)
    A = np.asarray(A, dtype=float)
    if B.ndim == 2:
        B = B[None]
    if A.ndim == 2:
        A = A[None]
    if B.shape != A.shape:
        raise ValueError(f"estimate {B.shape} and mixing {A.shape} differ in shape")
    return B @ A


def best_alignment(Bhat, A) -> np.ndarray:
    """Row permutation ``perm`` (shared by all datasets) maximizing
    ``sum_m sum_k log|G[m][perm[k], k]|`` with ``G[m] = Bhat[m] @ A[m]``."""
    G = _global(Bhat, A)
    with np.errstate(divide="ignore"):
        W = np.log(np.abs(G)).sum(axis=0)  # W[i, k]
    zero = ~np.isfinite(W)
    if np.any(zero):
        W = np.where(zero, -1e300, W)
    rows, cols = linear_sum_assignment(W.T, maximize=True)
    perm = np.empty_like(cols)
    perm[rows] = cols
    if np.any(zero[perm, np.arange(len(perm))]):
        warnings.warn("every alignment leaves a zero diagonal entry; using best effort",
                      RuntimeWarning, stacklevel=2)
    return perm


def align_solution(Bhat: SolutionSet, A) -> SolutionSet:
    """Reorder the rows of ``Bhat`` to best match the sources of ``A``."""
    perm = best_alignment(Bhat, A)
    meta = dict(Bhat.metadata)
    meta["alignment"] = perm.tolist()
    return SolutionSet(Bhat.dims, Bhat.B[:, perm, :], meta)


# -- ISR ---------------------------------------------------------------------


def _traces(cov) -> np.ndarray:
    """``tr(C_k[m, m])`` as a ``(K, M)`` array."""
    if hasattr(cov, "trace") and hasattr(cov, "K"):
        return np.array([[cov.trace(k, m) for m in range(cov.M)] for k in range(cov.K)])
    return np.asarray(cov, dtype=float)


def isr_contributions(Bhat_aligned, A, cov) -> Optional[np.ndarray]:
    """Per-trial ISR terms, shape ``(M, K, K)``; ``None`` if some ``G[k, k] == 0``.

    ``cov`` is a :class:`~sedjoco.model.ScvCovarianceSet` or a ``(K, M)``
    array of per-dataset source energies.
    """
    G = _global(Bhat_aligned, A)
    tr = _traces(cov)  # (K, M)
    diag = np.abs(np.diagonal(G, axis1=1, axis2=2))  # (M, K)
    if np.any(diag == 0):
        return None
    energy = tr.T  # (M, K)
    out = (np.abs(G) ** 2 / (diag ** 2)[:, :, None]) * (energy[:, None, :] / energy[:, :, None])
    K = G.shape[1]
    out[:, np.arange(K), np.arange(K)] = 0.0
    return out


def isr_accumulate(Bhat_aligned, A, cov, acc: IsrReport) -> IsrReport:
    """Add one trial to ``acc``; trials with a zero diagonal gain are excluded."""
    c = isr_contributions(Bhat_aligned, A, cov)
    if c is None:
        return IsrReport(acc.sums, acc.n_trials, acc.n_excluded + 1)
    return IsrReport(acc.sums + c, acc.n_trials + 1, acc.n_excluded)


def isr_norm(report: IsrReport) -> float:
    """Average of the off-diagonal ISR entries over all datasets."""
    isr = report.isr
    K = isr.shape[1]
    return float(isr[:, _offdiag_mask(K)].sum() / (isr.shape[0] * K * (K - 1)))


# -- induced CRLB ------------------------------------------------------------


def _kappa(cov) -> np.ndarray:
    """``kappa[k, l][m, n] = tr(P_k[n, m] C_l[m, n]) / T``."""
    K, M, T = cov.K, cov.M, cov.T
    C = cov.blocks()
    P = cov.inverse_blocks()
    out = np.empty((K, K, M, M))
    for k, l in itertools.product(range(K), range(K)):
        for m, n in itertools.product(range(M), range(M)):
            # tr(X Y) = sum(X * Y^T)
            out[k, l, m, n] = np.sum(P[k, n, :, m, :] * C[l, m, :, n, :].T) / T
    return out


def _rcond(X: np.ndarray) -> float:
    s = np.linalg.svd(X, compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def icrlb(cov) -> CrlbReport:
    """Induced Cramer-Rao bound on every ISR entry.

    With ``kappa`` as in :func:`_kappa`, the bound is
    ``[(kappa[k, l] - inv(kappa[l, k]))^{-1}]_{mm} / T`` scaled by the
    source-energy ratio ``tr(C_l[m, m]) / tr(C_k[m, m])``.

    The difference matrix counts as singular (bound ``+inf``) when its
    smallest singular value is below 1e-12 times the norm of the larger of
    the two terms it is formed from. Measuring against the terms rather
    than the difference itself matters for ``M = 1``, where a 1x1
    difference of two equal numbers is pure round-off.
    """
    K, M, T = cov.K, cov.M, cov.T
    kap = _kappa(cov)
    tr = _traces(cov)
    bound = np.full((M, K, K), np.nan)
    infinite = np.zeros((M, K, K), dtype=bool)
    for k, l in itertools.permutations(range(K), 2):
        F = None
        if _rcond(kap[l, k]) >= RCOND_TOL:
            inv_lk = np.linalg.inv(kap[l, k])
            D = kap[k, l] - inv_lk
            scale = max(np.linalg.norm(kap[k, l], 2), np.linalg.norm(inv_lk, 2))
            if np.linalg.svd(D, compute_uv=False)[-1] >= RCOND_TOL * scale:
                F = np.linalg.inv(D)
        for m in range(M):
            if F is None or not F[m, m] > 0:
                bound[m, k, l] = np.inf
                infinite[m, k, l] = True
            else:
                bound[m, k, l] = F[m, m] / T * tr[l, m] / tr[k, m]
    return CrlbReport(bound, infinite, kap)


# -- reporting ---------------------------------------------------------------


def write_report_csv(path, report: IsrReport, crlb: Optional[CrlbReport] = None):
    """One row per ``(m, k, l)``, ``k != l``: linear and dB ISR, bound, trial count."""
    isr = report.isr
    M, K, _ = isr.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "k", "l", "isr", "isr_db", "crlb", "crlb_db", "n_trials"])
        for m, k, l in itertools.product(range(M), range(K), range(K)):
            if k == l:
                continue
            b = crlb.bound[m, k, l] if crlb is not None else math.nan
            w.writerow([m, k, l, format_float(isr[m, k, l]), format_float(to_db(isr[m, k, l])),
                        format_float(b), format_float(to_db(b)), report.n_trials])


def report_summary(report: IsrReport, crlb: Optional[CrlbReport] = None) -> dict:
    out = {"isr_norm": report.isr_norm, "isr_norm_db": float(to_db(report.isr_norm)),
           "n_trials": report.n_trials, "n_excluded": report.n_excluded}
    if crlb is not None:
        out["crlb_norm"] = crlb.norm
        out["crlb_norm_db"] = float(to_db(crlb.norm))
    return out
