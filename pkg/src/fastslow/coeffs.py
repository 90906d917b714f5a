"""Effective drift and diffusion of the coarse equation, plus the noise factor.

Given the corrector and its x-derivatives at a slow state, the coarse drift
and diffusion are plain contractions of coefficient vectors because the basis
is orthonormal:

    F[i]   = sum_j <d psi_i / d x_j, b_j>
    A0     = <psi_i, b_j>            (i, j entries)
    D      = integral of alpha alpha^T against the invariant measure
             + A0 + A0^T

with b the right-hand-side coefficient vectors.  The simulated equation needs
a factor A with A A^T = D; a Cholesky factorization with a semidefinite clamp
provides it and reports genuinely indefinite input instead of silently
proceeding.

SpectralModel packages the whole pipeline behind a single coefficients(x)
call: fit the measure once, assemble and factor the stiffness once, then each
slow state costs right-hand sides, triangular solves and the contractions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, UsageError
from .expressions import Expression, differentiate
from .gibbs import GibbsMeasure, build
from .hermite import HermiteBasis
from .poisson import PoissonSolution, StiffnessMatrix, assemble_rhs, assemble_stiffness

_FACTOR_CLAMP = 1.0e-12   # pivots no worse than this are treated as zero
_FACTOR_REJECT = 1.0e-10  # relative pivot below which D is called indefinite


@dataclass(frozen=True)
class EffectiveCoefficients:
    """Coarse-equation data at one slow state: dX = drift dt + factor dW."""

    x: np.ndarray
    drift: np.ndarray
    diffusion: np.ndarray
    factor: np.ndarray

    def factor_residual(self) -> float:
        """Entrywise |A A^T - D| relative to 1 + |D|."""
        gap = np.max(np.abs(self.factor @ self.factor.T - self.diffusion))
        return float(gap / (1.0 + np.max(np.abs(self.diffusion))))


def effective_drift(sol: PoissonSolution, rhs: np.ndarray) -> np.ndarray:
    """Contract gradient-corrector coefficients with the right-hand sides."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != sol.psi.shape:
        raise DimensionError("right-hand side block does not match the solution")
    return np.einsum("ijk,jk->i", sol.grad_psi, rhs)


def effective_diffusion(
    sol: PoissonSolution,
    rhs: np.ndarray,
    stiffness: StiffnessMatrix,
    alpha=None,
    x=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Coarse diffusion D and the corrector block A0 at one slow state.

    `alpha` is an m x p matrix of expressions for noise acting directly on
    the slow components; None means no such term.  Returns (D, A0) with
    D = <alpha alpha^T> + A0 + A0^T, symmetric by construction.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != sol.psi.shape:
        raise DimensionError("right-hand side block does not match the solution")
    a0 = sol.psi @ rhs.T
    diffusion = a0 + a0.T
    if alpha is not None:
        if x is None:
            x = sol.x
        diffusion = diffusion + alpha_second_moment(stiffness, alpha, x)
    return diffusion, a0


def alpha_second_moment(stiffness: StiffnessMatrix, alpha, x) -> np.ndarray:
    """<alpha alpha^T> against the invariant measure, by shared quadrature."""
    x = np.asarray(x, dtype=float)
    rule = stiffness.rule
    # ratio^2 converts Gaussian-weighted quadrature into invariant-measure
    # averages; self-normalize so the probability measure integrates 1 to 1
    weights = rule.weights * stiffness.ratio**2
    weights = weights / weights.sum()
    rows = len(alpha)
    values = np.empty((rows, len(alpha[0]), len(rule)))
    for i, row in enumerate(alpha):
        if len(row) != values.shape[1]:
            raise DimensionError("alpha rows have unequal lengths")
        for k, entry in enumerate(row):
            values[i, k] = np.broadcast_to(
                np.asarray(entry.evaluate(x, rule.nodes), dtype=float),
                (len(rule),),
            )
    return np.einsum("ikn,jkn,n->ij", values, values, weights)


def cholesky_factor(diffusion: np.ndarray) -> np.ndarray:
    """Lower-triangular A with A A^T = D, tolerating semidefinite D.

    Pivots down to -1e-12 (relative to the largest entry) are clamped to
    zero, which covers rank-deficient limits; anything below -1e-10 relative
    raises, since an indefinite D means the spectral truncation is too
    coarse to represent a covariance.
    """
    D = np.asarray(diffusion, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError("diffusion matrix must be square")
    scale = float(np.max(np.abs(D))) if D.size else 0.0
    if np.max(np.abs(D - D.T)) > 1e-12 * max(scale, 1.0):
        raise UsageError("diffusion matrix must be symmetric")
    m = D.shape[0]
    L = np.zeros_like(D)
    for j in range(m):
        pivot = D[j, j] - L[j, :j] @ L[j, :j]
        if pivot < -_FACTOR_REJECT * max(scale, 1e-300):
            raise NumericError(
                f"diffusion matrix is not positive semidefinite "
                f"(pivot {pivot:.3e} at index {j})"
            )
        if pivot <= _FACTOR_CLAMP * scale:
            # rank-deficient direction: zero column, matches the PSD limit
            continue
        L[j, j] = np.sqrt(pivot)
        if j + 1 < m:
            L[j + 1 :, j] = (D[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


class SpectralModel:
    """Coarse-equation coefficients from the spectral cell-problem pipeline.

    Construction fits the invariant measure, builds the basis at the given
    degree and assembles/factorizes the stiffness once.  coefficients(x) is
    then cheap and safe to call from several threads; the worst Cholesky
    reconstruction gap seen so far is kept in max_factor_residual.
    """

    def __init__(
        self,
        problem,
        degree: int,
        n_quad: int | None = None,
        fit_nodes: int = 64,
        lam: float | None = None,
    ):
        if degree < 1:
            raise UsageError("degree must be at least 1")
        self.problem = problem
        self.degree = int(degree)
        self.lam = problem.lam if lam is None else float(lam)
        self.gibbs: GibbsMeasure = build(
            problem.V, problem.n, lam=self.lam, fit_nodes=fit_nodes
        )
        self.basis = HermiteBasis(problem.n, self.degree, self.gibbs.mean, self.gibbs.sigma)
        self.stiffness = assemble_stiffness(self.gibbs, self.basis, n_quad)
        self.m = problem.m
        # primal right-hand sides first, then x-derivatives in row-major
        # (component, direction) order; one stacked solve per slow state
        self._exprs: list[Expression] = list(problem.f)
        for fi in problem.f:
            self._exprs.extend(differentiate(fi, "x", j) for j in range(self.m))
        self._alpha = problem.alpha
        self._alpha_static: np.ndarray | None = None
        if self._alpha is not None:
            entries = [e for row in self._alpha for e in row]
            x_free = not any(
                kind == "x" for e in entries for kind, _ in e.variables()
            )
            if x_free:
                self._alpha_static = alpha_second_moment(
                    self.stiffness, self._alpha, np.zeros(self.m)
                )
        self.max_factor_residual = 0.0
        self._residual_lock = threading.Lock()

    def solve(self, x) -> tuple[PoissonSolution, np.ndarray]:
        """Corrector solution and right-hand-side block at one slow state."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.m,):
            raise DimensionError(f"slow state must have {self.m} components")
        rhs_all = assemble_rhs(self.stiffness, self._exprs, x)
        coeff_all = self.stiffness.solve(rhs_all)
        size = self.stiffness.size
        sol = PoissonSolution(
            basis=self.basis,
            x=x,
            psi=coeff_all[: self.m],
            grad_psi=coeff_all[self.m :].reshape(self.m, self.m, size),
            kernel=self.stiffness.kernel,
            residual=self.stiffness.last_residual,
        )
        return sol, rhs_all[: self.m]

    def coefficients(self, x) -> EffectiveCoefficients:
        sol, rhs = self.solve(x)
        drift = effective_drift(sol, rhs)
        if self._alpha_static is not None:
            diffusion, _ = effective_diffusion(sol, rhs, self.stiffness)
            diffusion = diffusion + self._alpha_static
        else:
            diffusion, _ = effective_diffusion(
                sol, rhs, self.stiffness, self._alpha, sol.x
            )
        factor = cholesky_factor(diffusion)
        coeffs = EffectiveCoefficients(
            x=sol.x, drift=drift, diffusion=diffusion, factor=factor
        )
        gap = coeffs.factor_residual()
        with self._residual_lock:
            if gap > self.max_factor_residual:
                self.max_factor_residual = gap
        return coeffs
