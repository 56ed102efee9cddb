"""Dense complex linear algebra for small Hilbert spaces.

Matrices are plain ``numpy`` complex arrays of shape ``(d, d)`` with
``d <= MAX_DIM``.  The Hermitian eigensolver is a cyclic Jacobi sweep
with a fixed pair order, so results depend only on the input bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DIM = 64


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared across the package."""

    hermitian: float = 1e-8  # relative, input check for eig_hermitian
    psd: float = 1e-10  # most negative eigenvalue accepted as PSD
    unit_trace: float = 1e-12
    log_floor: float = 1e-300
    support: float = 1e-12  # weight on a clamped eigenvector that counts as support mismatch
    jacobi_max_sweeps: int = 100

    def replace(self, **changes) -> "Tolerances":
        fields = {**self.__dict__, **changes}
        return Tolerances(**fields)


DEFAULT_TOLERANCES = Tolerances()


class LinalgError(ValueError):
    """Raised on invalid matrix input."""


def as_matrix(a, dim: int | None = None) -> np.ndarray:
    """Return ``a`` as a square complex matrix, checking shape and finiteness."""
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LinalgError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[0] > MAX_DIM:
        raise LinalgError(f"dimension {m.shape[0]} outside [1, {MAX_DIM}]")
    if dim is not None and m.shape[0] != dim:
        raise LinalgError(f"dimension mismatch: expected {dim}, got {m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise LinalgError("matrix has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise LinalgError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a @ b


def adjoint(a) -> np.ndarray:
    return as_matrix(a).conj().T


def trace(a) -> complex:
    return complex(np.trace(as_matrix(a)))


def herm_part(a) -> np.ndarray:
    """Return (A + A^dagger)/2, exactly Hermitian in storage."""
    a = as_matrix(a)
    h = 0.5 * (a + a.conj().T)
    # mirror the upper triangle so h[j, i] is bitwise conj(h[i, j])
    upper = np.triu(h, 1)
    return upper + upper.conj().T + np.diag(h.diagonal().real).astype(complex)


def hermiticity_error(a) -> float:
    """Frobenius norm of A - A^dagger relative to that of A."""
    a = np.asarray(a, dtype=complex)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(a - a.conj().T) / norm)


@dataclass(frozen=True)
class HermitianSpectrum:
    """Eigenvalues in ascending order with eigenvectors as unitary columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T

    def apply(self, func) -> np.ndarray:
        """Matrix function V diag(func(lambda)) V^dagger."""
        v = self.eigenvectors
        return (v * func(self.eigenvalues)) @ v.conj().T


def _jacobi_rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    apq = a[p, q]
    mag = abs(apq)
    if mag == 0.0:
        return
    phase = apq / mag
    app = a[p, p].real
    aqq = a[q, q].real
    theta = (aqq - app) / (2.0 * mag)
    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
    if theta < 0.0:
        t = -t
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    # unitary acting on columns p, q; zeroes a[p, q] under a <- u^dagger a u
    u_pp, u_pq = c, s
    u_qp, u_qq = -s * np.conj(phase), c * np.conj(phase)
    col_p = a[:, p].copy()
    col_q = a[:, q].copy()
    a[:, p] = col_p * u_pp + col_q * u_qp
    a[:, q] = col_p * u_pq + col_q * u_qq
    row_p = a[p, :].copy()
    row_q = a[q, :].copy()
    a[p, :] = np.conj(u_pp) * row_p + np.conj(u_qp) * row_q
    a[q, :] = np.conj(u_pq) * row_p + np.conj(u_qq) * row_q
    a[p, q] = 0.0
    a[q, p] = 0.0
    a[p, p] = a[p, p].real
    a[q, q] = a[q, q].real
    vp = v[:, p].copy()
    vq = v[:, q].copy()
    v[:, p] = vp * u_pp + vq * u_qp
    v[:, q] = vp * u_pq + vq * u_qq


def eig_hermitian(a, tol: Tolerances = DEFAULT_TOLERANCES) -> HermitianSpectrum:
    """Eigendecomposition of a Hermitian matrix by cyclic Jacobi sweeps.

    Raises
    ------
    LinalgError
        If ``a`` is not Hermitian to within ``tol.hermitian`` (relative
        Frobenius norm) or the sweeps fail to converge.
    """
    a = as_matrix(a)
    if hermiticity_error(a) > tol.hermitian:
        raise LinalgError(f"matrix is not Hermitian (relative error {hermiticity_error(a):.3g})")
    d = a.shape[0]
    work = herm_part(a)
    v = np.eye(d, dtype=complex)
    scale = np.linalg.norm(work)
    if d > 1 and scale > 0.0:
        target = (np.finfo(float).eps * scale) ** 2
        for _ in range(tol.jacobi_max_sweeps):
            off = np.sum(np.abs(np.triu(work, 1)) ** 2)
            if off <= target:
                break
            for p in range(d - 1):
                for q in range(p + 1, d):
                    _jacobi_rotate(work, v, p, q)
        else:
            raise LinalgError("Jacobi sweeps did not converge")
    evals = work.diagonal().real.copy()
    order = np.argsort(evals, kind="stable")
    return HermitianSpectrum(evals[order], v[:, order])


def matrix_log_psd(rho, floor: float | None = None,
                   tol: Tolerances = DEFAULT_TOLERANCES) -> tuple[np.ndarray, bool]:
    """Matrix logarithm of a PSD matrix with eigenvalues floored at ``floor``.

    Returns the logarithm and a flag telling whether any eigenvalue was
    raised to the floor (rank-deficient input).
    """
    floor = tol.log_floor if floor is None else floor
    spec = eig_hermitian(rho, tol)
    if spec.eigenvalues[0] < -tol.psd:
        raise LinalgError(f"negative eigenvalue {spec.eigenvalues[0]:.3g}")
    clamped = bool(np.any(spec.eigenvalues < floor))
    log = spec.apply(lambda lam: np.log(np.maximum(lam, floor)))
    return log, clamped


def project_psd_unit_trace(rho) -> np.ndarray:
    """Clip negative eigenvalues to zero and rescale to unit trace."""
    spec = eig_hermitian(rho)
    lam = np.clip(spec.eigenvalues, 0.0, None)
    total = lam.sum()
    if total <= 0.0:
        raise LinalgError("matrix has no positive spectrum to normalise")
    out = herm_part((spec.eigenvectors * (lam / total)) @ spec.eigenvectors.conj().T)
    # absorb the last rounding error into the diagonal
    out[np.diag_indices_from(out)] += (1.0 - np.trace(out).real) / out.shape[0]
    return out


def operator_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=complex), 2))


def pauli() -> dict[str, np.ndarray]:
    """Pauli matrices and ladder operators; index 0 is the ground state."""
    return {
        "x": np.array([[0, 1], [1, 0]], dtype=complex),
        "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
        "z": np.array([[1, 0], [0, -1]], dtype=complex),
        # lowering operator |0><1|
        "minus": np.array([[0, 1], [0, 0]], dtype=complex),
        "plus": np.array([[0, 0], [1, 0]], dtype=complex),
    }
