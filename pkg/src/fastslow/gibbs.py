"""Gibbs measures exp(-V)/Z and the derived quantities the solver needs.

The invariant measure of the fast gradient flow is mu(dy) = exp(-V)/Z dy.
Building a basis requires its normalization Z, mean and covariance; none are
known in closed form for the multiwell potentials, so they are fitted:
a mode of V is located by descent, a Gaussian proposal is formed from the
(absolute) Hessian there, inflated to cover other wells, and Z, mean and
covariance are computed by Gauss-Hermite quadrature with importance
reweighting exp(-V)/G_proposal.  The fit is iterated with the fitted Gaussian
as the next proposal until the moments stop moving (a trust region keeps one
bad pass from collapsing the proposal; the three-well potential has a
degenerate critical point at the origin that makes the plain Hessian
proposal arbitrarily wide, so a single refit is not enough there).  The
drift between the last two passes is kept as the `moment_error` diagnostic.
Iterating to the fixed point also makes the fitted moments exactly
equivariant under affine rescalings of V, which the downstream invariance
of the computed coefficients relies on.

Also here: the Schroedinger potential W = |grad V|^2/4 - lap V/2 built
symbolically, its closed form W_{mu,Sigma} for a Gaussian, and the square
root density ratio sqrt(exp(-V)/(Z G_{mu,Sigma})) evaluated in log space so
tails underflow to zero instead of overflowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, UsageError
from .expressions import Const, Expression, add, differentiate, mul, sub
from .quadrature import gauss_hermite, tensorize

HESSIAN_FLOOR = 0.1


def schrodinger_potential(V: Expression, n: int) -> Expression:
    """W = |grad V|^2 / 4 - lap V / 2, assembled symbolically."""
    out: Expression = Const(0.0)
    for i in range(n):
        Vi = differentiate(V, "y", i)
        out = add(out, mul(Vi, Vi) / 4.0)
        out = sub(out, differentiate(Vi, "y", i) / 2.0)
    return out


def gaussian_potential(mu, sigma) -> Expression:
    """Normalized quadratic potential V with exp(-V) = G_{mu,Sigma}."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = mu.shape[0]
    prec = np.linalg.inv(sigma)
    from .expressions import Var

    expr: Expression = Const(
        0.5 * (n * math.log(2.0 * math.pi) + math.log(np.linalg.det(sigma)))
    )
    for i in range(n):
        di = sub(Var("y", i), Const(mu[i]))
        for j in range(n):
            dj = sub(Var("y", j), Const(mu[j]))
            expr = add(expr, mul(Const(0.5 * prec[i, j]), mul(di, dj)))
    return expr


def gaussian_schrodinger_values(mu, sigma, Y) -> np.ndarray:
    """W_{mu,Sigma}(y) = (y-mu)^T Sigma^{-2} (y-mu)/4 - tr(Sigma^{-1})/2."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    prec = np.linalg.inv(sigma)
    diff = Y - mu
    quad = np.einsum("bi,ij,bj->b", diff, prec @ prec, diff)
    return 0.25 * quad - 0.5 * float(np.trace(prec))


def log_gaussian_density(mu, sigma, Y) -> np.ndarray:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = mu.shape[0]
    prec = np.linalg.inv(sigma)
    _, logdet = np.linalg.slogdet(sigma)
    diff = Y - mu
    quad = np.einsum("bi,ij,bj->b", diff, prec, diff)
    return -0.5 * (n * math.log(2.0 * math.pi) + logdet + quad)


@dataclass
class GibbsMeasure:
    """Fitted invariant measure of the fast process plus basis parameters."""

    V: Expression
    n: int
    log_Z: float
    mean: np.ndarray
    cov: np.ndarray
    lam: float
    W: Expression = field(repr=False)
    moment_error: float = 0.0

    @property
    def Z(self) -> float:
        return math.exp(self.log_Z)

    @property
    def sigma(self) -> np.ndarray:
        """Basis covariance lam * cov (lam is the free spread parameter)."""
        return self.lam * self.cov

    def potential_values(self, Y) -> np.ndarray:
        return np.asarray(self.V.evaluate(None, Y), dtype=float)

    def log_density(self, Y) -> np.ndarray:
        """log of exp(-V)/Z."""
        return -self.potential_values(Y) - self.log_Z

    def density_ratio_sqrt(self, basis_mu, basis_sigma, Y) -> np.ndarray:
        """sqrt(exp(-V) / (Z G_{mu,Sigma})) evaluated stably at points Y."""
        logr = self.log_density(Y) - log_gaussian_density(basis_mu, basis_sigma, Y)
        return np.exp(0.5 * logr)


def _descend_to_mode(V: Expression, grads, n: int, max_iter: int = 100):
    y = np.zeros(n)
    fy = float(V.evaluate(None, y))
    for _ in range(max_iter):
        g = np.array([float(gi.evaluate(None, y)) for gi in grads])
        gnorm2 = float(g @ g)
        if gnorm2 < 1e-24:
            break
        t = 1.0
        while t > 1e-12:
            trial = y - t * g
            ft = float(V.evaluate(None, trial))
            if ft <= fy - 1e-4 * t * gnorm2:
                y, fy = trial, ft
                break
            t *= 0.5
        else:
            break
    return y


def _hessian(grads, point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = point.shape[0]
    H = np.empty((n, n))
    for j in range(n):
        up = point.copy()
        up[j] += h
        down = point.copy()
        down[j] -= h
        for i in range(n):
            H[i, j] = (
                float(grads[i].evaluate(None, up)) - float(grads[i].evaluate(None, down))
            ) / (2 * h)
    return 0.5 * (H + H.T)


def _importance_pass(V: Expression, prop_mu, prop_cov, npts: int, n: int):
    rule = tensorize(npts, n, prop_mu, prop_cov)
    logv = -np.asarray(V.evaluate(None, rule.nodes), dtype=float)
    logr = logv - log_gaussian_density(prop_mu, prop_cov, rule.nodes)
    shift = float(np.max(logr))
    r = rule.weights * np.exp(logr - shift)
    total = float(np.sum(r))
    if not math.isfinite(total) or total <= 0.0:
        raise NumericError("importance pass produced a non-finite normalization")
    log_Z = shift + math.log(total)
    mean = (r @ rule.nodes) / total
    diff = rule.nodes - mean
    cov = (diff * r[:, None]).T @ diff / total
    cov = 0.5 * (cov + cov.T)
    return log_Z, mean, cov


def build(
    V: Expression,
    n: int,
    lam: float = 1.0,
    fit_nodes: int = 64,
    inflate: float = 3.0,
) -> GibbsMeasure:
    """Fit exp(-V)/Z and return the measure with basis parameters attached.

    Parameters
    ----------
    V : Expression
        Potential in fast variables y0..y{n-1}.
    n : int
        Fast dimension.
    lam : float
        Free spread parameter; the basis Gaussian uses covariance lam * cov.
    fit_nodes : int
        Gauss-Hermite nodes per dimension for the moment fit.
    inflate : float
        Covariance inflation of the initial Hessian proposal, so that a
        single-well proposal still covers the other wells of a multiwell V.
    """
    if lam <= 0.0:
        raise UsageError("lam must be positive")
    if n < 1:
        raise UsageError("fast dimension must be >= 1")
    grads = [differentiate(V, "y", i) for i in range(n)]

    mode = _descend_to_mode(V, grads, n)
    H = _hessian(grads, mode)
    evals, evecs = np.linalg.eigh(H)
    # saddle-safe proposal: |eigenvalue| with a floor, then inflated
    scales = 1.0 / np.maximum(np.abs(evals), HESSIAN_FLOOR)
    prop_cov = inflate * (evecs * scales) @ evecs.T
    prop_mu = mode

    log_Z = 0.0
    mean, cov = prop_mu, prop_cov
    moment_error = math.inf
    for _ in range(16):
        log_Z, mean1, cov1 = _importance_pass(V, mean, cov, fit_nodes, n)
        # trust region: one pass may not move covariance eigenvalues by
        # more than 16x in either direction
        ev_old = np.linalg.eigvalsh(cov)
        evs, vecs = np.linalg.eigh(cov1)
        evs = np.clip(evs, ev_old[0] / 16.0, ev_old[-1] * 16.0)
        cov1 = (vecs * evs) @ vecs.T
        _check_cov(cov1)
        scale = max(1.0, float(np.max(np.abs(cov1))))
        moment_error = max(
            float(np.max(np.abs(mean1 - mean))) / scale,
            float(np.max(np.abs(cov1 - cov))) / scale,
        )
        mean, cov = mean1, cov1
        if moment_error < 1e-13:
            break

    W = schrodinger_potential(V, n)
    return GibbsMeasure(
        V=V,
        n=n,
        log_Z=log_Z,
        mean=mean,
        cov=cov,
        lam=lam,
        W=W,
        moment_error=moment_error,
    )


def _check_cov(cov: np.ndarray) -> None:
    evals = np.linalg.eigvalsh(cov)
    if evals[0] <= 0.0 or not np.all(np.isfinite(evals)):
        raise NumericError("fitted covariance is not positive definite")
