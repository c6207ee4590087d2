"""Problem and solution containers for the extended joint congruence system.

A problem is a family of target matrices ``Q[k, m1, m2]`` (each ``K x K``)
for ``k < K`` and ``m1, m2 < M``. A solution is a family of ``M`` square
matrices ``B[m]`` such that, for every ``k`` and ``m``,

    sum_l B[m] @ Q[k, m, l] @ B[l].T @ e_k == e_k

i.e. the ``k``-th column of each transformed matrix is "drilled" to the
``k``-th identity column. With ``M == 1`` this is the standard single-set
system ``B @ Q[k] @ B.T @ e_k == e_k``.

Arrays use zero-based indices throughout:

* targets: ``(K, M, M, K, K)``
* demixing matrices: ``(M, K, K)``; row ``k`` of ``B[m]`` is ``b_k^(m)``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ProblemDims",
    "ProblemInstance",
    "SolutionSet",
    "AugmentedTargetSet",
    "ResidualReport",
    "ExistenceReport",
    "build_augmented_targets",
    "check_existence",
    "residual",
    "log_likelihood_core",
    "likelihood_upper_bound",
    "permute_solution",
    "permute_problem",
    "permutation_matrix",
    "random_pd_problem",
    "problem_from_omegas",
    "is_nonsingular",
    "problem_to_json",
    "problem_from_json",
    "solution_to_json",
    "solution_from_json",
]

# extended precision for sums with heavy cancellation (residual, gradient)
EXT = np.longdouble

DET_FLOOR = 1e-300
COND_CEILING = 1e12
SYMMETRY_RTOL = 1e-8


@dataclass(frozen=True)
class ProblemDims:
    K: int
    M: int
    T: Optional[int] = None

    def __post_init__(self):
        if int(self.K) < 1 or int(self.M) < 1:
            raise ValueError(f"K and M must be positive, got K={self.K}, M={self.M}")
        if self.T is not None and int(self.T) < 1:
            raise ValueError(f"T must be positive, got {self.T}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ProblemInstance:
    """Target matrices ``Q[k, m1, m2]`` of an extended system.

    Construction validates shapes, finiteness and the pairwise transpose
    symmetry ``Q[k, m1, m2] == Q[k, m2, m1].T`` (relative tolerance 1e-8).
    """

    dims: ProblemDims
    targets: np.ndarray

    def __post_init__(self):
        Q = _readonly(self.targets)
        K, M = self.dims.K, self.dims.M
        if Q.shape != (K, M, M, K, K):
            raise ValueError(
                f"targets must have shape {(K, M, M, K, K)}, got {Q.shape}"
            )
        if not np.all(np.isfinite(Q)):
            raise ValueError("targets contain non-finite entries")
        asym = np.abs(Q - Q.transpose(0, 2, 1, 4, 3)).max()
        scale = np.abs(Q).max()
        if asym > SYMMETRY_RTOL * max(scale, 1e-300):
            raise ValueError(
                f"targets violate Q[k,m1,m2] = Q[k,m2,m1]^T (max deviation {asym:.3g})"
            )
        object.__setattr__(self, "targets", Q)

    @property
    def K(self) -> int:
        return self.dims.K

    @property
    def M(self) -> int:
        return self.dims.M

    @classmethod
    def from_targets(cls, targets, T: Optional[int] = None) -> "ProblemInstance":
        targets = np.asarray(targets, dtype=float)
        if targets.ndim != 5:
            raise ValueError(f"targets must be 5-dimensional, got ndim={targets.ndim}")
        K, M = targets.shape[0], targets.shape[1]
        return cls(ProblemDims(K, M, T), targets)

    @classmethod
    def standard(cls, targets) -> "ProblemInstance":
        """Wrap ``K`` single-set targets (shape ``(K, K, K)``) as an ``M = 1`` problem."""
        targets = np.asarray(targets, dtype=float)
        if targets.ndim != 3 or targets.shape[0] != targets.shape[1] != targets.shape[2]:
            raise ValueError(f"expected K targets of shape (K, K), got {targets.shape}")
        return cls.from_targets(targets[:, None, None, :, :])

    def omegas(self) -> np.ndarray:
        return build_augmented_targets(self).omegas


@dataclass(frozen=True)
class SolutionSet:
    """Demixing matrices ``B[m]``, stored as an ``(M, K, K)`` array."""

    dims: ProblemDims
    B: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        B = _readonly(self.B)
        K, M = self.dims.K, self.dims.M
        if B.shape != (M, K, K):
            raise ValueError(f"B must have shape {(M, K, K)}, got {B.shape}")
        object.__setattr__(self, "B", B)

    @classmethod
    def from_matrices(cls, B, T: Optional[int] = None, **metadata) -> "SolutionSet":
        B = np.asarray(B, dtype=float)
        if B.ndim == 2:
            B = B[None]
        return cls(ProblemDims(B.shape[1], B.shape[0], T), B, dict(metadata))

    @classmethod
    def identity(cls, K: int, M: int) -> "SolutionSet":
        return cls.from_matrices(np.tile(np.eye(K), (M, 1, 1)))

    @property
    def K(self) -> int:
        return self.dims.K

    @property
    def M(self) -> int:
        return self.dims.M

    @property
    def stacked(self) -> np.ndarray:
        """The ``K x KM`` matrix ``[B[0] ... B[M-1]]``."""
        return np.concatenate(list(self.B), axis=1)

    def is_nonsingular(self) -> bool:
        return is_nonsingular(self.B)


@dataclass(frozen=True)
class AugmentedTargetSet:
    """The ``K`` symmetric ``KM x KM`` block matrices ``Omega[k]``."""

    omegas: np.ndarray
    K: int
    M: int


@dataclass(frozen=True)
class ExistenceReport:
    is_pd_all: bool
    lambda_min: np.ndarray
    tol: float


@dataclass(frozen=True)
class ResidualReport:
    per_dataset: np.ndarray
    total: float
    transformed: np.ndarray  # D[k, m], shape (K, M, K, K)


def is_nonsingular(B: np.ndarray) -> bool:
    B = np.asarray(B, dtype=float)
    if B.ndim == 2:
        B = B[None]
    if not np.all(np.isfinite(B)):
        return False
    for b in B:
        if abs(np.linalg.det(b)) <= DET_FLOOR or np.linalg.cond(b) >= COND_CEILING:
            return False
    return True


def _check_compatible(s: SolutionSet, p: ProblemInstance):
    if (s.K, s.M) != (p.K, p.M):
        raise ValueError(
            f"solution has (K, M) = {(s.K, s.M)} but problem has {(p.K, p.M)}"
        )


def build_augmented_targets(p: ProblemInstance) -> AugmentedTargetSet:
    Q = np.asarray(p.targets, dtype=float)
    if Q.ndim != 5 or Q.shape[1] != Q.shape[2] or Q.shape[3] != Q.shape[4] or Q.shape[0] != Q.shape[3]:
        raise ValueError(f"inconsistent target dimensions {Q.shape}")
    K, M = Q.shape[0], Q.shape[1]
    omegas = Q.transpose(0, 1, 3, 2, 4).reshape(K, K * M, K * M)
    omegas = 0.5 * (omegas + omegas.transpose(0, 2, 1))
    omegas.setflags(write=False)
    return AugmentedTargetSet(omegas, K, M)


def problem_from_omegas(omegas, T: Optional[int] = None) -> ProblemInstance:
    """Slice ``K`` matrices of size ``KM x KM`` into their ``K x K`` target blocks."""
    omegas = np.asarray(omegas, dtype=float)
    K = omegas.shape[0]
    if omegas.ndim != 3 or omegas.shape[1] != omegas.shape[2] or omegas.shape[1] % K:
        raise ValueError(f"expected (K, KM, KM) array, got {omegas.shape}")
    M = omegas.shape[1] // K
    targets = omegas.reshape(K, M, K, M, K).transpose(0, 1, 3, 2, 4)
    return ProblemInstance(ProblemDims(K, M, T), targets)


def random_pd_problem(K: int, M: int, rng) -> ProblemInstance:
    """Draw ``Omega[k] = U U^T`` with standard normal ``U`` and slice it into targets."""
    rng = np.random.default_rng(rng)
    U = rng.standard_normal((K, K * M, K * M))
    return problem_from_omegas(U @ U.transpose(0, 2, 1))


def check_existence(a: AugmentedTargetSet, tol: Optional[float] = None) -> ExistenceReport:
    """Sufficient existence check: every ``Omega[k]`` positive definite.

    A negative answer does not rule out a solution.
    """
    omegas = np.asarray(a.omegas)
    if not np.all(np.isfinite(omegas)):
        raise ValueError("augmented targets contain non-finite entries")
    if tol is None:
        tol = 1e-10 * max(np.linalg.norm(o) for o in omegas)
    lam = np.array([np.linalg.eigvalsh(o)[0] for o in omegas])
    return ExistenceReport(bool(np.all(lam > tol)), lam, float(tol))


def transformed_columns(omegas: np.ndarray, B: np.ndarray, dtype=EXT) -> np.ndarray:
    """``beta[m, k] = sum_l Q[k, m, l] @ b_k^(l)``, shape ``(M, K, K)``."""
    K = omegas.shape[0]
    M = B.shape[0]
    # row k of the stacked matrix, for every k: (K, KM)
    rows = np.asarray(B, dtype=dtype).transpose(1, 0, 2).reshape(K, K * M)
    out = np.matmul(np.asarray(omegas, dtype=dtype), rows[:, :, None])[:, :, 0]
    return out.reshape(K, M, K).transpose(1, 0, 2)


def residual_matrices(omegas: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``R[m] = sum_k D[k, m] E_kk - I``, evaluated in extended precision."""
    beta = transformed_columns(omegas, B)
    K = B.shape[1]
    return np.matmul(np.asarray(B, dtype=EXT), beta.transpose(0, 2, 1)) - np.eye(K, dtype=EXT)


def residual_total(omegas: np.ndarray, B: np.ndarray) -> float:
    R = residual_matrices(omegas, B)
    return float(np.sqrt((R * R).sum()))


def residual(s: SolutionSet, p: ProblemInstance) -> ResidualReport:
    """Per-dataset and total Frobenius residuals of the drilled conditions.

    ``per_dataset[m] = ||sum_k D[k, m] E_kk - I||_F`` and ``total`` is the
    root-sum-of-squares over datasets, so ``total`` vanishes exactly at
    solutions for any ``M``.
    """
    _check_compatible(s, p)
    Q = p.targets
    B = s.B
    # D[k, m] = sum_l B[m] Q[k, m, l] B[l]^T
    D = np.einsum("mij,kmljn,lpn->kmip", B, Q, B)
    R = residual_matrices(build_augmented_targets(p).omegas, B)
    per = np.sqrt((R * R).sum(axis=(1, 2)))
    total = float(np.sqrt((per * per).sum()))
    return ResidualReport(np.asarray(per, dtype=float), total, D)


def log_likelihood_core(s: SolutionSet, a: AugmentedTargetSet) -> float:
    """``sum_m log|det B[m]| - 1/2 sum_k b_k^T Omega[k] b_k``.

    Returns ``-inf`` when any ``B[m]`` is numerically singular.
    """
    B = np.asarray(s.B, dtype=float)
    if (s.K, s.M) != (a.K, a.M):
        raise ValueError("solution and augmented targets disagree on (K, M)")
    if not is_nonsingular(B):
        return -math.inf
    logdet = sum(np.linalg.slogdet(b)[1] for b in B)
    beta = transformed_columns(a.omegas, B)
    quad = (np.asarray(B, dtype=EXT) * beta).sum()
    return float(logdet - 0.5 * float(quad))


def likelihood_upper_bound(a: AugmentedTargetSet) -> float:
    """Hadamard-type bound ``(M/2) sum_k (-log lambda_k - 1)``; needs PD ``Omega[k]``."""
    lam = np.array([np.linalg.eigvalsh(o)[0] for o in a.omegas])
    if np.any(lam <= 0):
        raise ValueError("bound requires positive definite augmented targets")
    return float(0.5 * a.M * np.sum(-np.log(lam) - 1.0))


def _check_perm(perm: Sequence[int], K: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (K,) or not np.array_equal(np.sort(perm), np.arange(K)):
        raise ValueError(f"not a permutation of 0..{K - 1}: {perm.tolist()}")
    return perm.astype(int)


def permutation_matrix(perm: Sequence[int]) -> np.ndarray:
    """``P`` with ``(P @ X)[i] == X[perm[i]]``."""
    perm = _check_perm(perm, len(perm))
    return np.eye(len(perm))[perm]


def permute_solution(s: SolutionSet, perm: Sequence[int]) -> SolutionSet:
    """Reorder the rows of every ``B[m]``: row ``i`` of the result is row ``perm[i]``."""
    perm = _check_perm(perm, s.K)
    return SolutionSet(s.dims, s.B[:, perm, :], dict(s.metadata))


def permute_problem(p: ProblemInstance, perm: Sequence[int]) -> ProblemInstance:
    """Re-index the source dimension of the targets so that
    ``permute_solution(solve(permute_problem(p, perm)), perm)`` solves ``p``.

    The new family satisfies ``Q_new[perm[j]] = Q[j]``.
    """
    perm = _check_perm(perm, p.K)
    Q = np.empty_like(p.targets)
    Q[perm] = p.targets
    return ProblemInstance(p.dims, Q)


# -- serialization ---------------------------------------------------------


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("cannot serialize non-finite value")
    return "%.17g" % x


def _write_nested(buf: io.StringIO, a: np.ndarray):
    if a.ndim == 1:
        buf.write("[" + ", ".join(_fmt(float(x)) for x in a) + "]")
        return
    buf.write("[")
    for i, sub in enumerate(a):
        if i:
            buf.write(",\n" if a.ndim == 2 else ", ")
        _write_nested(buf, sub)
    buf.write("]")


def _dump(header: dict, key: str, a: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write("{")
    for name, value in header.items():
        buf.write(f"{json.dumps(name)}: {json.dumps(value)}, ")
    buf.write(f"{json.dumps(key)}: ")
    _write_nested(buf, np.asarray(a, dtype=float))
    buf.write("}\n")
    return buf.getvalue()


def problem_to_json(p: ProblemInstance) -> str:
    header = {"K": p.K, "M": p.M}
    if p.dims.T is not None:
        header["T"] = p.dims.T
    return _dump(header, "targets", p.targets)


def solution_to_json(s: SolutionSet) -> str:
    return _dump({"K": s.K, "M": s.M}, "B", s.B)


def _header(doc, what: str):
    if not isinstance(doc, dict):
        raise ValueError(f"{what} document must be a JSON object")
    try:
        K, M = int(doc["K"]), int(doc["M"])
    except KeyError as exc:
        raise ValueError(f"{what} document is missing field {exc.args[0]!r}") from None
    return K, M


def problem_from_json(text: str) -> ProblemInstance:
    """Parse a problem document; raises ``json.JSONDecodeError`` or ``ValueError``."""
    doc = json.loads(text)
    K, M = _header(doc, "problem")
    if "targets" not in doc:
        raise ValueError("problem document is missing field 'targets'")
    try:
        Q = np.array(doc["targets"], dtype=float)
    except (TypeError, ValueError):
        raise ValueError("targets must be a rectangular nested array of numbers") from None
    if Q.shape != (K, M, M, K, K):
        raise ValueError(f"targets have shape {Q.shape}, expected {(K, M, M, K, K)}")
    return ProblemInstance(ProblemDims(K, M, doc.get("T")), Q)


def solution_from_json(text: str) -> SolutionSet:
    doc = json.loads(text)
    K, M = _header(doc, "solution")
    if "B" not in doc:
        raise ValueError("solution document is missing field 'B'")
    try:
        B = np.array(doc["B"], dtype=float)
    except (TypeError, ValueError):
        raise ValueError("B must be a rectangular nested array of numbers") from None
    if B.shape != (M, K, K):
        raise ValueError(f"B has shape {B.shape}, expected {(M, K, K)}")
    return SolutionSet(ProblemDims(K, M), B)
