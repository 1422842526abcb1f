"""Dense linear algebra helpers, a Jacobi eigensolver and a portable PRNG.

Matrices and vectors are plain float64 numpy arrays. The eigensolver and the
random generator are implemented here so that spectra and experiment streams
do not depend on the LAPACK build or on numpy's bit generators.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class EigenConvergenceError(RuntimeError):
    """Jacobi sweeps ran out before the off-diagonal mass became negligible."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(v) -> np.ndarray:
    x = np.array(v, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-d array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("vector has non-finite entries")
    return x


def matvec(a, v) -> np.ndarray:
    a = as_matrix(a)
    v = as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} matrix by length-{v.shape[0]} vector")
    return a @ v


# --------------------------------------------------------------------------- #
# Symmetric eigenproblem
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SpectrumReport:
    """Sorted eigenvalues with a three-way sign classification.

    ``zero_tolerance`` is an absolute threshold; eigenvalues with
    ``|lam| < zero_tolerance`` count as vanishing.
    """

    eigenvalues: np.ndarray
    zero_tolerance: float
    n_negative: int
    n_zero: int
    n_positive: int

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "zero_tolerance": float(self.zero_tolerance),
            "n_negative": self.n_negative,
            "n_zero": self.n_zero,
            "n_positive": self.n_positive,
        }


def classify_spectrum(eigenvalues, rel_tol: float = 1e-6, floor: float = 1.0) -> SpectrumReport:
    """Count negative / vanishing / positive eigenvalues.

    The zero threshold is ``rel_tol * max(max|lam|, floor)``. ``floor=0``
    makes it purely relative to the largest eigenvalue magnitude.
    """
    lam = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    tol = rel_tol * max(scale, floor)
    n_zero = int(np.count_nonzero(np.abs(lam) < tol))
    n_neg = int(np.count_nonzero(lam <= -tol))
    n_pos = lam.size - n_zero - n_neg
    return SpectrumReport(lam, tol, n_neg, n_zero, n_pos)


def _round_robin_pairs(n: int):
    """Yield n-1 rounds of disjoint index pairs covering every pair once (n even)."""
    order = list(range(n))
    for _ in range(n - 1):
        yield [(order[i], order[n - 1 - i]) for i in range(n // 2)]
        order = [order[0], order[-1]] + order[1:-1]


def _off_norm(a: np.ndarray) -> float:
    # direct sum; subtracting the diagonal from the full norm cancels badly
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def jacobi_eigh(a, max_sweeps: int = 100, tol: float = 1e-12, symmetry_tol: float = 1e-10):
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Rotations are applied in round-robin order, so each round annihilates
    ``n/2`` disjoint off-diagonal pairs at once.

    Args:
        a: square symmetric matrix.
        max_sweeps: maximum number of full sweeps over all index pairs.
        tol: stop once the off-diagonal Frobenius norm is below ``tol * ||A||_F``.
        symmetry_tol: absolute tolerance of the symmetry check.

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionError(f"matrix must be square, got {a.shape}")
    asym = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asym > symmetry_tol:
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))

    # Pad to even size with a decoupled zero row/column.
    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = a
    vecs = np.eye(m)
    target = tol * float(np.linalg.norm(a))
    rounds = [np.array(r).T for r in _round_robin_pairs(m)]

    off = _off_norm(work)
    sweeps = 0
    while off > target:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {off:.3e})", off
            )
        for p, q in rounds:
            apq = work[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (work[q, q] - work[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 0.0, theta)
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.where(safe >= 0, 1.0, -1.0) / (np.abs(safe) + np.sqrt(safe * safe + 1.0)),
            )
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            rp, rq = work[p, :], work[q, :]
            work[p, :] = c[:, None] * rp - s[:, None] * rq
            work[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = work[:, p], work[:, q]
            work[:, p] = cp * c - cq * s
            work[:, q] = cp * s + cq * c
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = vecs[:, p], vecs[:, q]
            vecs[:, p] = vp * c - vq * s
            vecs[:, q] = vp * s + vq * c
        sweeps += 1
        off = _off_norm(work)

    # The padding coordinate has zero couplings, so it is never rotated.
    lam = np.diag(work)[:n].copy()
    vecs = vecs[:n, :n]
    order = np.argsort(lam, kind="stable")
    return lam[order], vecs[:, order]


def symmetric_eigen(a, max_sweeps: int = 100, rel_tol: float = 1e-6, floor: float = 1.0):
    """Jacobi eigendecomposition plus spectrum classification.

    Returns:
        (SpectrumReport, eigenvector matrix with orthonormal columns)
    """
    lam, vecs = jacobi_eigh(a, max_sweeps=max_sweeps)
    return classify_spectrum(lam, rel_tol=rel_tol, floor=floor), vecs


# --------------------------------------------------------------------------- #
# Random numbers: splitmix64-seeded xoshiro256**
# --------------------------------------------------------------------------- #


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int):
    """Return (next_state, output) of one splitmix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Deterministic xoshiro256** stream.

    Identical seeds give identical streams on every platform. An instance is
    meant to have a single owner; use :meth:`clone` or :meth:`spawn` to hand
    out independent copies.
    """

    def __init__(self, seed: int = 0, *, state: tuple[int, int, int, int] | None = None):
        if state is not None:
            s = tuple(int(x) & _MASK64 for x in state)
        else:
            sm = int(seed) & _MASK64
            out = []
            for _ in range(4):
                sm, z = splitmix64(sm)
                out.append(z)
            s = tuple(out)
        if not any(s):
            raise ValueError("xoshiro state must not be all zero")
        self._s = list(s)
        self._spare: float | None = None

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def clone(self) -> "Rng":
        return copy.deepcopy(self)

    def spawn(self) -> "Rng":
        """New generator seeded from this stream (advances this one)."""
        return Rng(self.next_u64())

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform draw on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def normal(self) -> float:
        """Standard normal draw (Box-Muller, spare value cached)."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.normal() for _ in range(size)), dtype=np.float64, count=size)
        return out.reshape(shape)

    def uniform_array(self, shape) -> np.ndarray:
        size = int(np.prod(shape, dtype=np.int64))
        out = np.fromiter((self.uniform() for _ in range(size)), dtype=np.float64, count=size)
        return out.reshape(shape)

    def unit_sphere(self, dim: int) -> np.ndarray:
        while True:
            v = self.normal_array(dim)
            nrm = float(np.linalg.norm(v))
            if nrm > 1e-12:
                return v / nrm

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)
