"""Hermite functions adapted to an anisotropic Gaussian.

The approximation space is spanned by functions

    h_alpha(y) = sqrt(G_{mu,Sigma}(y)) * H_alpha(y; mu, Sigma),   |alpha| <= d,

where H_alpha is the product of normalized probabilists' Hermite polynomials
in the whitened coordinates z = S^{-1} (y - mu), Sigma = Q D Q^T, S = Q D^{1/2}.
The h_alpha are L2-orthonormal, and they are exact eigenfunctions of the
Schroedinger operator of the Gaussian itself with eigenvalues
sum_i alpha_i / D_ii, which is what makes the stiffness assembly cheap.

Multi-indices are ordered graded-lexicographically (by total degree, then
lexicographic), and that ordering is shared by the monomial side, so the
change-of-basis matrix C with H_alpha = sum_beta C[alpha, beta] y^beta is
square and lower-triangular in the grading.
"""

from __future__ import annotations

import math
from functools import cached_property

import numpy as np

from .errors import DimensionError, NumericError, UsageError


def multi_indices(n: int, d: int) -> list[tuple[int, ...]]:
    """All multi-indices alpha in N^n with |alpha| <= d, graded lex order."""
    if n < 1:
        raise UsageError("dimension must be >= 1")
    if d < 0:
        raise UsageError("degree must be >= 0")
    out: list[tuple[int, ...]] = []

    def compositions(total: int, slots: int, prefix: tuple[int, ...]):
        if slots == 1:
            out.append(prefix + (total,))
            return
        for first in range(total + 1):
            compositions(total - first, slots - 1, prefix + (first,))

    for degree in range(d + 1):
        block: list[tuple[int, ...]] = []
        start = len(out)
        compositions(degree, n, ())
        block = sorted(out[start:])
        out[start:] = block
    return out


def index_ranks(indices: list[tuple[int, ...]]) -> dict[tuple[int, ...], int]:
    return {alpha: r for r, alpha in enumerate(indices)}


def hermite_coefficients_1d(d: int) -> np.ndarray:
    """Lower-triangular (d+1, d+1) matrix of monomial coefficients.

    Row r holds the coefficients of the normalized probabilists' Hermite
    polynomial H_r in powers of s, from the three-term recurrence
    sqrt(r+1) H_{r+1}(s) = s H_r(s) - sqrt(r) H_{r-1}(s).
    """
    C = np.zeros((d + 1, d + 1))
    C[0, 0] = 1.0
    if d == 0:
        return C
    C[1, 1] = 1.0
    for r in range(1, d):
        shifted = np.zeros(d + 1)
        shifted[1 : r + 2] = C[r, : r + 1]
        C[r + 1] = (shifted - math.sqrt(r) * C[r - 1]) / math.sqrt(r + 1)
    return C


def hermite_values_1d(d: int, s: np.ndarray) -> np.ndarray:
    """Table (npts, d+1) of H_0..H_d evaluated by the recurrence."""
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape + (d + 1,))
    out[..., 0] = 1.0
    if d >= 1:
        out[..., 1] = s
    for r in range(1, d):
        out[..., r + 1] = (s * out[..., r] - math.sqrt(r) * out[..., r - 1]) / math.sqrt(
            r + 1
        )
    return out


class HermiteBasis:
    """Hermite-function basis for one Gaussian envelope.

    Parameters
    ----------
    n : int
        Fast-space dimension.
    d : int
        Maximal total degree; the basis has C(n + d, n) elements.
    mu : array (n,)
        Gaussian mean.
    sigma : array (n, n)
        Gaussian covariance; must be symmetric positive definite.
    """

    def __init__(self, n: int, d: int, mu, sigma):
        self.n = int(n)
        self.d = int(d)
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float)).copy()
        self.sigma = np.atleast_2d(np.asarray(sigma, dtype=float)).copy()
        if self.mu.shape != (self.n,):
            raise DimensionError(f"mu must have shape ({self.n},)")
        if self.sigma.shape != (self.n, self.n):
            raise DimensionError(f"sigma must have shape ({self.n}, {self.n})")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise UsageError("sigma must be symmetric")

        evals, evecs = np.linalg.eigh(self.sigma)
        if evals[0] <= 0.0:
            raise NumericError(
                f"sigma is not positive definite (smallest eigenvalue {evals[0]:g})"
            )
        # canonical eigenvector signs so the basis is reproducible
        for j in range(self.n):
            k = int(np.argmax(np.abs(evecs[:, j])))
            if evecs[k, j] < 0:
                evecs[:, j] = -evecs[:, j]
        self.eigvals = evals
        self.Q = evecs
        self.S = evecs * np.sqrt(evals)
        self.S_inv = (evecs / np.sqrt(evals)).T
        self.rates = 1.0 / evals

        self.indices = multi_indices(self.n, self.d)
        self.ranks = index_ranks(self.indices)
        self.size = len(self.indices)
        self._index_array = np.array(self.indices, dtype=np.intp)
        self._log_norm = 0.5 * (
            -0.5 * self.n * math.log(2.0 * math.pi) - 0.5 * float(np.sum(np.log(evals)))
        )

    # -- whitening ---------------------------------------------------------

    def whiten(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        squeeze = Y.ndim == 1
        Y2 = np.atleast_2d(Y)
        if Y2.shape[-1] != self.n:
            raise DimensionError(f"points must have trailing dimension {self.n}")
        Z = (Y2 - self.mu) @ self.S_inv.T
        return Z[0] if squeeze else Z

    def sqrt_gaussian(self, Y) -> np.ndarray:
        """sqrt(G_{mu,Sigma}) evaluated at Y (vectorized)."""
        Z = np.atleast_2d(self.whiten(Y))
        log = self._log_norm - 0.25 * np.sum(Z * Z, axis=-1)
        out = np.exp(log)
        return out[0] if np.asarray(Y).ndim == 1 else out

    # -- evaluation --------------------------------------------------------

    def eigenvalue(self, alpha) -> float:
        """Eigenvalue of the Gaussian Schroedinger operator on h_alpha."""
        alpha = self._check_index(alpha)
        return float(np.dot(alpha, self.rates))

    def eigenvalues(self) -> np.ndarray:
        return self._index_array @ self.rates

    def polynomial_table(self, Y) -> np.ndarray:
        """Matrix (npts, size) of H_alpha(y) for every basis index."""
        Z = np.atleast_2d(self.whiten(Y))
        per_dim = [hermite_values_1d(self.d, Z[:, k]) for k in range(self.n)]
        out = per_dim[0][:, self._index_array[:, 0]].copy()
        for k in range(1, self.n):
            out *= per_dim[k][:, self._index_array[:, k]]
        return out

    def eval_polynomial(self, alpha, Y) -> np.ndarray:
        alpha = self._check_index(alpha)
        Z = np.atleast_2d(self.whiten(Y))
        vals = np.ones(Z.shape[0])
        for k in range(self.n):
            vals *= hermite_values_1d(alpha[k], Z[:, k])[:, alpha[k]]
        return vals[0] if np.asarray(Y).ndim == 1 else vals

    def eval_function(self, alpha, Y) -> np.ndarray:
        return self.eval_polynomial(alpha, Y) * self.sqrt_gaussian(Y)

    def function_table(self, Y) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Y, dtype=float))
        return self.polynomial_table(Z) * self.sqrt_gaussian(Z)[:, None]

    def _check_index(self, alpha) -> tuple[int, ...]:
        alpha = tuple(int(a) for a in np.atleast_1d(alpha))
        if len(alpha) != self.n:
            raise DimensionError(f"multi-index must have length {self.n}")
        if any(a < 0 for a in alpha):
            raise UsageError("multi-index entries must be nonnegative")
        if sum(alpha) > self.d:
            raise UsageError(
                f"multi-index degree {sum(alpha)} exceeds basis degree {self.d}"
            )
        return alpha

    # -- monomial expansion --------------------------------------------------

    @cached_property
    def monomial_matrix(self) -> np.ndarray:
        """C with H_alpha(y) = sum_beta C[rank(alpha), rank(beta)] y^beta.

        Built as C = C* T: C* expands H_alpha in z-monomials (a sparse product
        of 1D coefficient triangles), and T expands z-monomials in y-monomials
        by the graded recurrence z^beta = z^(beta - e_k) * (row_k . y + b_k)
        with k the last nonzero coordinate of beta.
        """
        N = self.size
        A = self.S_inv
        b = -A @ self.mu

        # shift maps: rank(gamma) -> rank(gamma + e_j), -1 past degree d
        shift = np.full((self.n, N), -1, dtype=np.intp)
        for r, gamma in enumerate(self.indices):
            if sum(gamma) == self.d:
                continue
            g = list(gamma)
            for j in range(self.n):
                g[j] += 1
                shift[j, r] = self.ranks[tuple(g)]
                g[j] -= 1

        T = np.zeros((N, N))
        T[0, 0] = 1.0
        for r in range(1, N):
            beta = self.indices[r]
            k = max(j for j in range(self.n) if beta[j] > 0)
            parent = list(beta)
            parent[k] -= 1
            row = T[self.ranks[tuple(parent)]]
            acc = b[k] * row
            support = np.nonzero(row)[0]
            for j in range(self.n):
                if A[k, j] == 0.0:
                    continue
                dst = shift[j, support]
                acc[dst] += A[k, j] * row[support]
            T[r] = acc

        C1 = hermite_coefficients_1d(self.d)
        Cstar = np.zeros((N, N))
        for r, alpha in enumerate(self.indices):
            partial = [((), 1.0)]
            for k in range(self.n):
                nxt = []
                for degs, coeff in partial:
                    for j in range(alpha[k] % 2, alpha[k] + 1, 2):
                        c = C1[alpha[k], j]
                        if c != 0.0:
                            nxt.append((degs + (j,), coeff * c))
                partial = nxt
            for degs, coeff in partial:
                Cstar[r, self.ranks[degs]] = coeff
        return Cstar @ T

    def monomial_coefficients(self, alpha) -> dict[tuple[int, ...], float]:
        """Expansion of H_alpha in plain monomials y^beta (nonzero terms)."""
        alpha = self._check_index(alpha)
        row = self.monomial_matrix[self.ranks[alpha]]
        return {
            self.indices[r]: float(row[r]) for r in np.nonzero(row)[0]
        }


def monomial_table(Y: np.ndarray, indices: list[tuple[int, ...]]) -> np.ndarray:
    """Matrix (npts, len(indices)) of monomials y^beta, graded recurrence.

    `indices` must be downward closed and graded-lex ordered (every
    beta - e_k with beta_k > 0 precedes beta), which multi_indices guarantees.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    ranks = index_ranks(indices)
    out = np.empty((Y.shape[0], len(indices)))
    for r, beta in enumerate(indices):
        s = sum(beta)
        if s == 0:
            out[:, r] = 1.0
            continue
        k = max(j for j in range(len(beta)) if beta[j] > 0)
        parent = list(beta)
        parent[k] -= 1
        out[:, r] = out[:, ranks[tuple(parent)]] * Y[:, k]
    return out
