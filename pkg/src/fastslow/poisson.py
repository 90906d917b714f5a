"""Galerkin assembly and deflated solves for the transformed cell problem.

The corrector equation of the averaged slow dynamics is posed against the
invariant density e^{-V}/Z of the fast process.  Conjugating with the square
root of that density turns the weighted operator into Schrodinger form
Delta - W with W = |grad V|^2/4 - (lap V)/2, acting on
psi = sqrt(e^{-V}/Z) * phi.  In a Hermite function basis built on a Gaussian
proposal the Galerkin matrix then splits into a known diagonal part (the
Gaussian eigenvalues of the basis) plus a correction weighted by W - W_gauss,
which is evaluated by Gauss-Hermite quadrature.

The matrix carries a one dimensional near-kernel spanned by the coefficient
vector of sqrt(e^{-V}/Z).  Solves are deflated by a rank-one shift along that
direction, refined to a tight relative residual, and projected back onto the
orthogonal complement of the kernel, which pins down the additive constant of
the corrector.

Assembly happens once per (measure, basis) pair; slow states enter through
right-hand sides only, so time stepping the coarse equation amortizes the
expensive part.

Numerical note: the correction block is contracted directly against Hermite
value tables produced by the stable three-term recurrence.  Routing it
through monomial moments is algebraically equivalent but loses roughly one
bit per degree to cancellation, which is fatal at the degrees this package
targets; a low-degree equivalence test keeps both routes honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericError
from .expressions import Expression, differentiate
from .gibbs import GibbsMeasure, gaussian_schrodinger_values
from .hermite import HermiteBasis
from .quadrature import tensorize

# node tables over this many entries are streamed in blocks instead of cached
_TABLE_CACHE_LIMIT = 30_000_000
_CHUNK_ROWS = 4096

_SOLVE_TOL = 1.0e-9
_MAX_REFINE = 12


def default_node_count(degree: int) -> int:
    """Per-dimension Gauss-Hermite node count paired with a basis degree."""
    return 2 * int(degree) + 10


class StiffnessMatrix:
    """Dense symmetric Galerkin matrix for one (measure, basis) pair.

    Also owns the shared quadrature rule, the density-ratio values at the
    nodes, the kernel coefficient vector and the Cholesky factor of the
    deflated matrix, so that repeated solves across slow states only pay
    for right-hand sides.  Immutable after construction; safe to share
    read-only between threads.
    """

    def __init__(self, gibbs: GibbsMeasure, basis: HermiteBasis, n_quad: int | None = None):
        if gibbs.n != basis.n:
            raise DimensionError(
                f"measure dimension {gibbs.n} != basis dimension {basis.n}"
            )
        if n_quad is None:
            n_quad = default_node_count(basis.d)
        self.gibbs = gibbs
        self.basis = basis
        self.n_quad = int(n_quad)
        self.rule = tensorize(self.n_quad, basis.n, basis.mu, basis.sigma)
        # sqrt(e^{-V} / (Z * G)) at the nodes; the Gaussian factor G lives
        # in the quadrature weights
        self.ratio = gibbs.density_ratio_sqrt(basis.mu, basis.sigma, self.rule.nodes)
        self._table: np.ndarray | None = None
        if len(self.rule) * basis.size <= _TABLE_CACHE_LIMIT:
            self._table = basis.polynomial_table(self.rule.nodes)
        self.matrix, self.kernel = self._assemble()
        khat = self.kernel / np.linalg.norm(self.kernel)
        self.kernel_unit = khat
        self.deflation_shift = 1.0 + float(np.max(np.diag(self.matrix)))
        deflated = self.matrix + self.deflation_shift * np.outer(khat, khat)
        self._deflated = deflated
        try:
            self._factor = scipy.linalg.cho_factor(deflated, lower=False)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError(
                "deflated stiffness matrix is not positive definite; "
                "the potential may not be confining or the degree is too small"
            ) from exc
        self.last_residual = 0.0

    @property
    def size(self) -> int:
        return self.basis.size

    def _blocks(self):
        # yields (slice, Hermite polynomial values) over quadrature nodes
        if self._table is not None:
            yield slice(None), self._table
            return
        nodes = self.rule.nodes
        for start in range(0, len(self.rule), _CHUNK_ROWS):
            stop = min(start + _CHUNK_ROWS, len(self.rule))
            yield slice(start, stop), self.basis.polynomial_table(nodes[start:stop])

    def _assemble(self) -> tuple[np.ndarray, np.ndarray]:
        basis = self.basis
        nodes, weights = self.rule.nodes, self.rule.weights
        w_vals = np.asarray(self.gibbs.W.evaluate(None, nodes), dtype=float)
        w_gauss = gaussian_schrodinger_values(basis.mu, basis.sigma, nodes)
        correction = weights * (w_vals - w_gauss)
        kernel_weights = weights * self.ratio

        delta = np.zeros((basis.size, basis.size))
        kernel = np.zeros(basis.size)
        for sl, table in self._blocks():
            delta += (table * correction[sl, None]).T @ table
            kernel += table.T @ kernel_weights[sl]
        matrix = 0.5 * (delta + delta.T)
        diag = np.arange(basis.size)
        matrix[diag, diag] += basis.eigenvalues()
        if not np.all(np.isfinite(matrix)) or not np.all(np.isfinite(kernel)):
            raise NumericError("stiffness assembly produced non-finite entries")
        norm = np.linalg.norm(kernel)
        if norm == 0.0:
            raise NumericError("kernel vector vanished; density ratio underflowed")
        return matrix, kernel

    def project_rhs(self, values: np.ndarray) -> np.ndarray:
        """Coefficients <g, h_alpha> for g given by values at the nodes.

        `values` may have any leading shape ending in the node axis.
        """
        values = np.asarray(values, dtype=float)
        weighted = values * self.rule.weights
        flat = weighted.reshape(-1, len(self.rule))
        out = np.zeros((flat.shape[0], self.size))
        for sl, table in self._blocks():
            out += flat[:, sl] @ table
        return out.reshape(values.shape[:-1] + (self.size,))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Deflated solve, refined to a 1e-9 relative residual, projected.

        Accepts stacks of right-hand sides along leading axes.  The returned
        coefficients are orthogonal to the kernel direction.  The worst
        relative residual of the most recent call is kept in
        `last_residual`.
        """
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[-1] != self.size:
            raise DimensionError(
                f"right-hand side length {rhs.shape[-1]} != basis size {self.size}"
            )
        flat = rhs.reshape(-1, self.size)
        scale = np.max(np.abs(flat), axis=1)
        live = scale > 0.0
        sol = np.zeros_like(flat)
        if np.any(live):
            b = flat[live]
            x = scipy.linalg.cho_solve(self._factor, b.T).T
            worst = np.inf
            for _ in range(_MAX_REFINE):
                residual = b - x @ self._deflated
                worst = float(
                    np.max(np.max(np.abs(residual), axis=1) / scale[live])
                )
                if worst <= _SOLVE_TOL:
                    break
                x = x + scipy.linalg.cho_solve(self._factor, residual.T).T
            if worst > _SOLVE_TOL:
                raise NumericError(
                    f"cell-problem solve stalled at relative residual {worst:.3e}"
                )
            self.last_residual = worst
            sol[live] = x
        else:
            self.last_residual = 0.0
        khat = self.kernel_unit
        sol -= np.outer(sol @ khat, khat)
        return sol.reshape(rhs.shape)


def assemble_stiffness(
    gibbs: GibbsMeasure, basis: HermiteBasis, n_quad: int | None = None
) -> StiffnessMatrix:
    """Build the Galerkin matrix and its deflated factorization."""
    return StiffnessMatrix(gibbs, basis, n_quad)


def _evaluate_at_nodes(expr: Expression, x, nodes: np.ndarray) -> np.ndarray:
    values = expr.evaluate(x, nodes)
    return np.broadcast_to(np.asarray(values, dtype=float), (nodes.shape[0],))


def assemble_rhs(stiffness: StiffnessMatrix, f, x) -> np.ndarray:
    """Right-hand side coefficients b_alpha = <ratio * f_i, h_alpha>.

    `f` is a sequence of expressions in (x, y); `x` is the frozen slow
    state.  Uses the quadrature rule and density ratio shared with the
    stiffness assembly, so drift differences across x are not polluted by
    rule changes.  Returns an array of shape (len(f), basis size).
    """
    x = np.asarray(x, dtype=float)
    nodes = stiffness.rule.nodes
    vals = np.stack(
        [_evaluate_at_nodes(expr, x, nodes) * stiffness.ratio for expr in f]
    )
    out = stiffness.project_rhs(vals)
    if not np.all(np.isfinite(out)):
        raise NumericError("right-hand side assembly produced non-finite entries")
    return out


def solve_cell_problem(
    stiffness: StiffnessMatrix, rhs: np.ndarray, kernel: np.ndarray | None = None
) -> np.ndarray:
    """Solve (A + sigma k k^T) psi = b and project psi off the kernel.

    `kernel`, when given, overrides the kernel vector computed at assembly
    (it is normalized internally).  Shapes of `rhs` are preserved.
    """
    if kernel is None:
        return stiffness.solve(rhs)
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (stiffness.size,):
        raise DimensionError("kernel vector length does not match the basis")
    khat = kernel / np.linalg.norm(kernel)
    shift = 1.0 + float(np.max(np.diag(stiffness.matrix)))
    deflated = stiffness.matrix + shift * np.outer(khat, khat)
    rhs = np.asarray(rhs, dtype=float)
    flat = rhs.reshape(-1, stiffness.size)
    factor = scipy.linalg.cho_factor(deflated, lower=False)
    x = scipy.linalg.cho_solve(factor, flat.T).T
    for _ in range(_MAX_REFINE):
        residual = flat - x @ deflated
        scale = np.max(np.abs(flat), axis=1)
        scale[scale == 0.0] = 1.0
        if np.max(np.max(np.abs(residual), axis=1) / scale) <= _SOLVE_TOL:
            break
        x = x + scipy.linalg.cho_solve(factor, residual.T).T
    x -= np.outer(x @ khat, khat)
    return x.reshape(rhs.shape)


@dataclass(frozen=True)
class PoissonSolution:
    """Transformed corrector coefficients at one slow state.

    psi[i] holds the coefficients of the corrector for slow component i;
    grad_psi[i, j] those of its derivative with respect to x_j.  kernel is
    the coefficient vector of sqrt(e^{-V}/Z) in the same basis.
    """

    basis: HermiteBasis
    x: np.ndarray
    psi: np.ndarray
    grad_psi: np.ndarray
    kernel: np.ndarray
    residual: float

    def kernel_defect(self) -> float:
        """Largest |<khat, psi>| over all stored coefficient vectors."""
        khat = self.kernel / np.linalg.norm(self.kernel)
        primal = float(np.max(np.abs(self.psi @ khat)))
        grad = float(np.max(np.abs(self.grad_psi @ khat)))
        return max(primal, grad)


def solve_state(stiffness: StiffnessMatrix, f, x) -> PoissonSolution:
    """Assemble and solve primal plus gradient systems at one slow state.

    The gradient right-hand sides use the x-derivatives of `f` on the same
    quadrature rule.  All m * (1 + m) systems are solved as one stacked
    factor application so the arithmetic per state does not depend on how
    states are batched.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    m_slow = x.shape[0]
    f = list(f)
    exprs = list(f)
    for fi in f:
        exprs.extend(differentiate(fi, "x", j) for j in range(m_slow))
    rhs = assemble_rhs(stiffness, exprs, x)
    coeffs = stiffness.solve(rhs)
    psi = coeffs[: len(f)]
    grad = coeffs[len(f) :].reshape(len(f), m_slow, stiffness.size)
    return PoissonSolution(
        basis=stiffness.basis,
        x=x,
        psi=psi,
        grad_psi=grad,
        kernel=stiffness.kernel.copy(),
        residual=stiffness.last_residual,
    )


def evaluate_solution(sol: PoissonSolution, Y) -> np.ndarray:
    """Evaluate the corrector components at fast points.

    Returns shape (..., m) for Y of shape (..., n); a single point gives a
    vector with one entry per slow component of the right-hand side.
    """
    Y = np.asarray(Y, dtype=float)
    single = Y.ndim == 1
    pts = np.atleast_2d(Y)
    table = sol.basis.function_table(pts)
    values = table @ sol.psi.T
    if single:
        return values[0]
    return values.reshape(Y.shape[:-1] + (sol.psi.shape[0],))
