"""Dense symmetric eigensolver and spectral matrix functions.

Everything downstream (entropy estimates, their gradients, fractional
matrix powers) reduces to one primitive: the full eigendecomposition of
a small dense symmetric matrix. The solver is a cyclic Jacobi sweep,
jitted with numba so that the gram-matrix sizes used here (tens to a few
hundred rows) decompose in milliseconds to about a second. Jacobi is
chosen for its unconditional stability on symmetric input and its
bitwise determinism: the rotation order is fixed, so identical input
bytes give identical output bytes on every call.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

SYMMETRY_TOL = 1e-9
CONVERGENCE_TOL = 1e-12
MAX_SWEEPS = 100
EIGENVALUE_CLAMP = 1e-12


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order with matching eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]


@njit(cache=True)
def _rotate(a, u, p, q, n):
    # One Jacobi rotation zeroing a[p, q], applied symmetrically in place.
    apq = a[p, q]
    tau = (a[q, q] - a[p, p]) / (2.0 * apq)
    if tau >= 0.0:
        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    a[p, p] -= t * apq
    a[q, q] += t * apq
    a[p, q] = 0.0
    a[q, p] = 0.0
    # Remaining rows/columns split into the three index ranges around p
    # and q so the symmetric mirror can be written without branching.
    for k in range(p):
        akp = a[k, p]
        akq = a[k, q]
        a[k, p] = c * akp - s * akq
        a[k, q] = s * akp + c * akq
        a[p, k] = a[k, p]
        a[q, k] = a[k, q]
    for k in range(p + 1, q):
        akp = a[p, k]
        akq = a[k, q]
        a[p, k] = c * akp - s * akq
        a[k, q] = s * akp + c * akq
        a[k, p] = a[p, k]
        a[q, k] = a[k, q]
    for k in range(q + 1, n):
        akp = a[p, k]
        akq = a[q, k]
        a[p, k] = c * akp - s * akq
        a[q, k] = s * akp + c * akq
        a[k, p] = a[p, k]
        a[k, q] = a[q, k]
    for k in range(n):
        ukp = u[k, p]
        ukq = u[k, q]
        u[k, p] = c * ukp - s * ukq
        u[k, q] = s * ukp + c * ukq


@njit(cache=True)
def _jacobi_cyclic(a, u, tol, max_sweeps):
    n = a.shape[0]
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    thresh = tol * np.sqrt(fro)
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        off = np.sqrt(2.0 * off)
        if off <= thresh:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] != 0.0:
                    _rotate(a, u, p, q, n)
    return max_sweeps


def _as_symmetric(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        raise ValueError("empty matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    defect = float(np.max(np.abs(m - m.T), initial=0.0))
    scale = float(np.max(np.abs(m), initial=0.0))
    if defect > SYMMETRY_TOL * max(scale, 1.0):
        raise ValueError(
            f"matrix is not symmetric: max asymmetry {defect:.3e} "
            f"exceeds {SYMMETRY_TOL:.0e} relative tolerance"
        )
    return 0.5 * (m + m.T)


def sym_eig(matrix: np.ndarray) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    The input must be square, finite, and symmetric up to a small
    relative defect; it is explicitly symmetrized before the sweep.
    Convergence is declared when the off-diagonal Frobenius norm drops
    below ``1e-12`` times the Frobenius norm of the input, within at
    most 100 cyclic sweeps.

    Returns eigenvalues sorted in descending order together with the
    matching orthonormal eigenvector columns.
    """
    a = _as_symmetric(matrix)
    n = a.shape[0]
    u = np.eye(n, dtype=np.float64)
    _jacobi_cyclic(a, u, CONVERGENCE_TOL, MAX_SWEEPS)
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(eigenvalues=vals[order], eigenvectors=u[:, order])


def clamp_small(eigenvalues: np.ndarray, eps: float = EIGENVALUE_CLAMP) -> np.ndarray:
    """Zero out eigenvalues with magnitude below ``eps``.

    Gram matrices are positive semidefinite in exact arithmetic but the
    solver can report tiny negative values; those must not reach
    fractional powers.
    """
    vals = np.asarray(eigenvalues, dtype=np.float64).copy()
    vals[np.abs(vals) < eps] = 0.0
    return vals


def spectral_apply(matrix: np.ndarray, func) -> np.ndarray:
    """Apply a scalar function to a symmetric matrix through its spectrum.

    Eigenvalues with magnitude below ``1e-12`` are clamped to zero
    before ``func`` is evaluated, so fractional powers of semidefinite
    matrices stay real. If ``func`` produces a non-finite value on any
    retained eigenvalue a :class:`NumericalError` is raised naming the
    offending eigenvalue.
    """
    from .errors import NumericalError

    decomp = sym_eig(matrix)
    vals = clamp_small(decomp.eigenvalues)
    mapped = np.empty_like(vals)
    for i, v in enumerate(vals):
        with np.errstate(all="ignore"):
            fv = float(func(v))
        if not np.isfinite(fv):
            raise NumericalError(
                f"spectral function returned {fv!r} at eigenvalue {v!r}"
            )
        mapped[i] = fv
    u = decomp.eigenvectors
    return (u * mapped) @ u.T
