"""Small dense matrix kernel: symmetric/SPD utilities, vech and duplication
machinery, Kronecker products, Cholesky log-determinants, symmetric square
roots, and Haar-random orthogonal matrices.

Sizes are tiny (p <= ~10), so everything favours clarity and exactness over
asymptotic speed.  ``vec`` is column-major throughout; for symmetric matrices
the two orderings coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A matrix counts as SPD iff every Cholesky pivot exceeds this fraction of
# the largest diagonal entry.  Guards against rounding noise in user input.
SPD_PIVOT_RTOL = 1e-12


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot fails the SPD gate.

    ``pivot_index`` is the 0-based index of the offending pivot.
    """

    def __init__(self, pivot_index: int, pivot_value: float, message: str | None = None):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        super().__init__(
            message
            or f"matrix is not positive definite: pivot {pivot_index} = {pivot_value:.6g}"
        )


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return 0.5*(A + A^T) so that entries[i][j] == entries[j][i] exactly."""
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def duplication_matrix(p: int) -> np.ndarray:
    """0/1 matrix G_p of shape (p^2, p(p+1)/2) with vec(S) = G_p @ vech(S).

    vech stacks the lower triangle column by column; vec is column-major.
    """
    if p < 1:
        raise ValueError(f"dimension must be >= 1, got {p}")
    q = p * (p + 1) // 2
    g = np.zeros((p * p, q))
    col = 0
    for j in range(p):
        for i in range(j, p):
            g[j * p + i, col] = 1.0  # (i, j) entry in column-major vec
            g[i * p + j, col] = 1.0  # (j, i) mirror; same cell when i == j
            col += 1
    return g


def vech(s: np.ndarray) -> np.ndarray:
    """Column-stacked lower triangle of a symmetric matrix."""
    s = np.asarray(s, dtype=float)
    p = s.shape[0]
    return np.concatenate([s[j:, j] for j in range(p)])


def unvech(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of :func:`vech`: rebuild the symmetric p x p matrix."""
    out = np.zeros((p, p))
    k = 0
    for j in range(p):
        m = p - j
        out[j:, j] = v[k : k + m]
        out[j, j:] = v[k : k + m]
        k += m
    return out


# Standard Kronecker product; kept on the module surface so callers do not
# need to care which backend provides it.
kron = np.kron


def cholesky_lower(a: np.ndarray, rtol: float = SPD_PIVOT_RTOL) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor and log-determinant with a relative pivot gate.

    Raises :class:`NotPositiveDefiniteError` carrying the offending pivot
    index when a pivot is <= rtol * max(diag).
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[0]
    tol = rtol * max(np.max(np.diag(a)), 0.0)
    chol = np.zeros((p, p))
    logdet = 0.0
    for j in range(p):
        d = a[j, j] - chol[j, :j] @ chol[j, :j]
        if not np.isfinite(d) or d <= tol:
            raise NotPositiveDefiniteError(j, float(d))
        chol[j, j] = np.sqrt(d)
        logdet += np.log(d)
        if j + 1 < p:
            chol[j + 1 :, j] = (a[j + 1 :, j] - chol[j + 1 :, :j] @ chol[j, :j]) / chol[j, j]
    return chol, float(logdet)


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive definite matrix with cached Cholesky factor.

    ``logdet`` equals twice the sum of the log pivots of ``chol``.
    """

    mat: np.ndarray
    chol: np.ndarray
    logdet: float

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def from_sym(cls, a: np.ndarray, rtol: float = SPD_PIVOT_RTOL) -> "SpdMatrix":
        a = symmetrize(a)
        chol, logdet = cholesky_lower(a, rtol=rtol)
        a.flags.writeable = False
        chol.flags.writeable = False
        return cls(mat=a, chol=chol, logdet=logdet)

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = np.linalg.solve(self.chol, b)
        return np.linalg.solve(self.chol.T, y)

    def inv(self) -> np.ndarray:
        return symmetrize(self.solve(np.eye(self.dim)))


def spd_from_sym(s: np.ndarray, rtol: float = SPD_PIVOT_RTOL) -> SpdMatrix:
    """Validate a symmetric matrix as SPD, caching factor and log-determinant."""
    return SpdMatrix.from_sym(s, rtol=rtol)


def sym_sqrt(s: SpdMatrix | np.ndarray) -> np.ndarray:
    """Symmetric (spectral) square root R with R @ R == S."""
    mat = s.mat if isinstance(s, SpdMatrix) else symmetrize(s)
    w, v = np.linalg.eigh(mat)
    if np.min(w) <= 0:
        raise NotPositiveDefiniteError(int(np.argmin(w)), float(np.min(w)))
    return symmetrize((v * np.sqrt(w)) @ v.T)


def haar_orthogonal(p: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a p x p orthogonal matrix from the Haar distribution.

    QR of a standard Gaussian matrix with the R diagonal signs fixed
    positive, which makes the factorization unique and the Q factor Haar.
    """
    if p < 1:
        raise ValueError(f"dimension must be >= 1, got {p}")
    z = rng.standard_normal((p, p))
    q, r = np.linalg.qr(z)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
