"""Dense symmetric-matrix primitives, norms and eigensolvers.

A :class:`SymmetricMatrix` is built from one triangle, so ``A[i, j] == A[j, i]``
holds bit for bit. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

__all__ = [
    "ConvergenceError",
    "NormalizationError",
    "SymmetricMatrix",
    "EigenDecomposition",
    "eig_all",
    "jacobi_eigh",
    "spectral_normalize",
    "norm_1to2",
    "diag_of",
    "operator_norm",
    "write_matrix",
    "read_matrix",
    "MAGIC",
]

MAGIC = b"SYMPCA1\0"
MAX_DENSE_DIM = 5000


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


class NormalizationError(ValueError):
    """The matrix cannot be scaled to leading eigenvalue 1 with norm 1."""


class SymmetricMatrix:
    """Immutable dense symmetric matrix.

    The lower triangle of ``entries`` is authoritative; the upper triangle is
    overwritten by its mirror image.

    Args:
        entries: Square array-like. Only the lower triangle is read.
    """

    __slots__ = ("_a",)

    def __init__(self, entries):
        a = np.array(entries, dtype=np.float64, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix entries must be finite")
        lower = np.tril(a)
        a = lower + np.tril(a, -1).T
        a.setflags(write=False)
        self._a = a

    @classmethod
    def from_packed(cls, d: int, packed) -> "SymmetricMatrix":
        """Build from the row-major lower triangle (``d*(d+1)/2`` values)."""
        packed = np.asarray(packed, dtype=np.float64)
        if packed.shape != (d * (d + 1) // 2,):
            raise ValueError(f"expected {d * (d + 1) // 2} packed entries, got {packed.size}")
        a = np.zeros((d, d))
        a[np.tril_indices(d)] = packed
        return cls(a)

    @property
    def d(self) -> int:
        return self._a.shape[0]

    @property
    def dense(self) -> np.ndarray:
        """Read-only full ``(d, d)`` array."""
        return self._a

    def packed(self) -> np.ndarray:
        return self._a[np.tril_indices(self.d)].copy()

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._a
        return self._a.astype(dtype)

    def __getitem__(self, key):
        return self._a[key]

    def __truediv__(self, c: float) -> "SymmetricMatrix":
        return SymmetricMatrix(self._a / c)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SymmetricMatrix):
            return NotImplemented
        return bool(np.array_equal(self._a, other._a))

    def __hash__(self):
        return hash((self.d, self._a.tobytes()))

    def __repr__(self) -> str:
        return f"SymmetricMatrix(d={self.d})"


MatrixLike = Union[SymmetricMatrix, np.ndarray]


def _as_array(A: MatrixLike) -> np.ndarray:
    if isinstance(A, SymmetricMatrix):
        return A.dense
    a = np.asarray(A, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return a


def _as_symmetric(A: MatrixLike) -> SymmetricMatrix:
    return A if isinstance(A, SymmetricMatrix) else SymmetricMatrix(A)


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order with matching orthonormal eigenvectors.

    ``vectors[:, j]`` is the eigenvector of ``values[j]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    @property
    def leading(self) -> np.ndarray:
        return self.vectors[:, 0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _sorted_desc(values: np.ndarray, vectors: np.ndarray) -> EigenDecomposition:
    order = np.argsort(values, kind="stable")[::-1]
    values = np.ascontiguousarray(values[order])
    vectors = np.ascontiguousarray(vectors[:, order])
    values.setflags(write=False)
    vectors.setflags(write=False)
    return EigenDecomposition(values, vectors)


def jacobi_eigh(A: MatrixLike, tol: float = 1e-14, max_sweeps: int = 100) -> EigenDecomposition:
    """Cyclic Jacobi eigenvalue algorithm.

    Each sweep annihilates every off-diagonal pair once. Intended for small
    matrices and as an independent check of :func:`eig_all`.

    Raises:
        ConvergenceError: if the off-diagonal mass is still above ``tol``
            (relative to the Frobenius norm) after ``max_sweeps`` sweeps.
    """
    a = np.array(_as_array(A), dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            return _sorted_desc(np.diag(a).copy(), v)
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps (d={d})")


def eig_all(A: MatrixLike, method: str = "lapack") -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending.

    Args:
        A: Symmetric matrix with ``d <= 5000``.
        method: ``"lapack"`` (divide and conquer via numpy) or ``"jacobi"``.

    Raises:
        ConvergenceError: if the underlying solver fails to converge.
    """
    a = _as_symmetric(A).dense
    if a.shape[0] > MAX_DENSE_DIM:
        raise ValueError(f"dense eigensolver limited to d <= {MAX_DENSE_DIM}")
    if method == "jacobi":
        return jacobi_eigh(a)
    if method != "lapack":
        raise ValueError(f"unknown method {method!r}")
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(str(exc)) from exc
    return _sorted_desc(values, vectors)


def spectral_normalize(A: MatrixLike) -> SymmetricMatrix:
    """Scale ``A`` so its leading eigenvalue is 1 and its operator norm is 1.

    Raises:
        NormalizationError: if ``s_1 <= 0`` or ``|s_d| > s_1``; no pure scaling
            then reaches both conditions.
    """
    A = _as_symmetric(A)
    values = np.linalg.eigvalsh(A.dense)
    s1, sd = values[-1], values[0]
    if not s1 > 0.0:
        raise NormalizationError(f"leading eigenvalue {s1:.6g} is not positive")
    if abs(sd) > s1:
        raise NormalizationError(
            f"smallest eigenvalue {sd:.6g} exceeds the leading eigenvalue {s1:.6g} in magnitude"
        )
    if s1 == 1.0:
        return A
    return A / s1


def norm_1to2(A: MatrixLike) -> float:
    """Largest Euclidean column norm."""
    a = _as_array(A)
    return float(np.sqrt(np.max(np.sum(a * a, axis=0))))


def diag_of(M) -> np.ndarray:
    """Diagonal matrix holding the diagonal of ``M``."""
    m = _as_array(M)
    return np.diag(np.diag(m).copy())


def operator_norm(M) -> float:
    """Spectral norm: largest singular value (max ``|eigenvalue|`` if symmetric)."""
    m = _as_array(M)
    if m.shape[0] > MAX_DENSE_DIM:
        raise ValueError(f"dense norm limited to d <= {MAX_DENSE_DIM}")
    try:
        if np.array_equal(m, m.T):
            return float(np.max(np.abs(np.linalg.eigvalsh(m))))
        return float(np.linalg.norm(m, 2))
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(str(exc)) from exc


def write_matrix(path, A: MatrixLike) -> None:
    """Write the binary matrix format: magic, ``u64`` dimension, packed lower triangle."""
    A = _as_symmetric(A)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", A.d))
        fh.write(A.packed().astype("<f8").tobytes())


def read_matrix(path) -> SymmetricMatrix:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a SYMPCA1 matrix file")
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header")
    (d,) = struct.unpack("<Q", data[8:16])
    n = d * (d + 1) // 2
    if d < 1 or len(data) != 16 + 8 * n:
        raise ValueError(f"{path}: expected {16 + 8 * n} bytes for d={d}, found {len(data)}")
    packed = np.frombuffer(data, dtype="<f8", offset=16, count=n)
    return SymmetricMatrix.from_packed(int(d), packed)
