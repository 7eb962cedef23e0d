"""Dense linear algebra used by the Koopman and symmetry code.

Everything here is a pure function of its arguments. Matrices are plain
``numpy`` arrays of dtype float64 (complex128 for eigenvectors).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_COMMUTANT_DIM = 64
NULLSPACE_RTOL = 1e-10
LSTSQ_RTOL = 1e-12
DEFAULT_COND_LIMIT = 1e8


class LinalgError(ValueError):
    pass


class NonDiagonalizable(LinalgError):
    """Eigenvector matrix too ill-conditioned to invert reliably."""

    def __init__(self, condition: float, limit: float):
        super().__init__(f"eigenvector condition {condition:.3e} exceeds limit {limit:.3e}")
        self.condition = condition
        self.limit = limit


class EmptyCommutant(LinalgError):
    """Only the deflated (trivial) directions commute with the matrix."""


@dataclass
class Eigendecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    inverse: np.ndarray
    condition_estimate: float

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.inverse


@dataclass
class CommutantBasis:
    generators: list[np.ndarray] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.generators)


def _as_square(k, name="K") -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise LinalgError(f"{name} must be square, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise LinalgError(f"{name} has non-finite entries")
    return k


def _fix_phase(v: np.ndarray) -> np.ndarray:
    # unit norm; largest-magnitude component made real positive (first index on ties)
    v = v / np.linalg.norm(v)
    j = int(np.argmax(np.abs(v)))
    return v * (np.abs(v[j]) / v[j])


def eig(k, cond_limit: float = DEFAULT_COND_LIMIT) -> Eigendecomposition:
    """Eigendecomposition of a real square matrix with a fixed ordering.

    Eigenvalues are sorted by descending real part, then descending
    imaginary part, so a conjugate pair ``a +/- bi`` appears as ``a+bi``
    followed by ``a-bi``. Each eigenvector has unit norm with its
    largest-magnitude entry real and positive, which keeps the vectors of a
    conjugate pair exact conjugates of each other.

    Raises:
        NonDiagonalizable: if the 2-norm condition number of the eigenvector
            matrix exceeds ``cond_limit``.
    """
    k = _as_square(k)
    n = k.shape[0]
    # LAPACK geev: Hessenberg reduction + shifted QR
    lam, vecs = np.linalg.eig(k)
    lam = lam.astype(complex)
    vecs = vecs.astype(complex)
    order = sorted(range(n), key=lambda i: (-lam[i].real, -lam[i].imag))
    lam = lam[order]
    vecs = vecs[:, order]

    u = np.empty((n, n), dtype=complex)
    i = 0
    while i < n:
        if lam[i].imag > 0 and i + 1 < n and np.isclose(lam[i + 1], np.conj(lam[i]), rtol=1e-12, atol=0):
            u[:, i] = _fix_phase(vecs[:, i])
            u[:, i + 1] = np.conj(u[:, i])
            lam[i + 1] = np.conj(lam[i])
            i += 2
            continue
        if lam[i].imag == 0:
            u[:, i] = _fix_phase(vecs[:, i].real.astype(complex))
        else:
            u[:, i] = _fix_phase(vecs[:, i])
        i += 1

    s = np.linalg.svd(u, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if not np.isfinite(cond) or cond > cond_limit:
        raise NonDiagonalizable(cond, cond_limit)
    return Eigendecomposition(lam, u, np.linalg.inv(u), cond)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def sylvester_operator(k: np.ndarray) -> np.ndarray:
    """Matrix T with ``T @ vec(S) == vec(K S - S K)`` (column-major vec)."""
    n = k.shape[0]
    eye = np.eye(n)
    return np.kron(eye, k) - np.kron(k.T, eye)


def _vec(m: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def _unvec(v: np.ndarray, n: int) -> np.ndarray:
    return v.reshape((n, n), order="F")


def _sign_fix(m: np.ndarray) -> np.ndarray:
    j = np.argmax(np.abs(m))
    return -m if m.flat[j] < 0 else m


def commutant_basis(
    k,
    deflate: Sequence[np.ndarray] = (),
    ansatz: Sequence[np.ndarray] | None = None,
    rtol: float = NULLSPACE_RTOL,
) -> CommutantBasis:
    """Orthonormal basis of matrices commuting with ``k``.

    The commutant is the nullspace of the homogeneous Sylvester operator
    ``S -> K S - S K``. It is computed from the SVD of the dense N^2 x N^2
    Kronecker form; singular values below ``rtol * sigma_max`` count as zero.
    Nullvectors are visited in ascending singular-value order, the span of
    ``deflate`` is projected out and the survivors are Gram-Schmidt
    orthonormalized under the Frobenius inner product.

    If ``ansatz`` is given, the search is restricted to linear combinations
    of those matrices (e.g. "first row only").

    Raises:
        EmptyCommutant: nothing survives deflation.
    """
    k = _as_square(k)
    n = k.shape[0]
    if n > MAX_COMMUTANT_DIM:
        raise LinalgError(f"commutant_basis supports N <= {MAX_COMMUTANT_DIM}, got {n}")
    t = sylvester_operator(k)

    if ansatz is not None:
        b = np.stack([_vec(m) for m in ansatz], axis=1)
        t = t @ b
    _, sv, vt = np.linalg.svd(t, full_matrices=True)
    p = vt.shape[0]
    sv_full = np.zeros(p)
    sv_full[: sv.size] = sv
    smax = sv_full[0] if sv_full.size else 0.0
    null_idx = [i for i in range(p) if sv_full[i] <= rtol * smax]
    null_idx.sort(key=lambda i: (sv_full[i], i))
    if ansatz is not None:
        candidates = [b @ vt[i] for i in null_idx]
    else:
        candidates = [vt[i].copy() for i in null_idx]

    # orthonormal basis of the deflation span
    basis: list[np.ndarray] = []
    for d in deflate:
        v = _vec(d)
        for q in basis:
            v = v - (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > 1e-12 * max(1.0, np.linalg.norm(_vec(d))):
            basis.append(v / nv)
    n_deflate = len(basis)

    gens: list[np.ndarray] = []
    for v in candidates:
        v = v / np.linalg.norm(v)
        for _ in range(2):  # re-orthogonalize once for stability
            for q in basis:
                v = v - (q @ v) * q
        nv = np.linalg.norm(v)
        if nv < 1e-8:
            continue
        v = v / nv
        basis.append(v)
        gens.append(_sign_fix(_unvec(v, n)))

    if not gens:
        raise EmptyCommutant(
            f"no commuting directions beyond the {n_deflate}-dimensional deflation span"
        )
    residuals = [float(np.linalg.norm(commutator(g, k))) for g in gens]
    return CommutantBasis(gens, residuals)


def matrix_exp(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    a = _as_square(a, "A")
    n = a.shape[0]
    norm = np.linalg.norm(a, 1)
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    x = a / (2.0 ** s)
    # ||x||_1 <= 0.5: 20 terms leave a remainder far below 1e-16
    out = np.eye(n)
    term = np.eye(n)
    for j in range(1, 21):
        term = term @ x / j
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def lstsq(a, b, rtol: float = LSTSQ_RTOL) -> np.ndarray:
    """Minimum-norm least-squares solution of ``A X = B`` via the SVD pseudoinverse."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    vector_rhs = b.ndim == 1
    if vector_rhs:
        b = b[:, None]
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise LinalgError(f"row mismatch: A {a.shape}, B {b.shape}")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0:
        x = np.zeros((a.shape[1], b.shape[1]))
    else:
        keep = s > rtol * s[0]
        x = (vt[keep].T / s[keep]) @ (u[:, keep].T @ b)
    return x[:, 0] if vector_rhs else x


def rank(a, rtol: float = LSTSQ_RTOL) -> int:
    s = np.linalg.svd(np.asarray(a, dtype=float), compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size else 0
