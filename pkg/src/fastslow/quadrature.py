"""Gauss-Hermite quadrature in the probabilists' normalization.

A 1D rule integrates against the standard Gaussian density: weights sum to 1
and the rule is exact for polynomials of degree <= 2 npts - 1.  Tensorized
rules push the product grid through an affine map, so they integrate against
an arbitrary Gaussian G_{mu,Sigma}.  Node ordering is the C order of the
product grid (first dimension slowest), fixed so that summation order, and
therefore floating-point output, is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ResourceError, UsageError

NODE_CAP = 100_000_000


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (npts, n) and weights (npts,) for integration against a Gaussian."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def __len__(self) -> int:
        return self.nodes.shape[0]


def gauss_hermite(npts: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating f against the standard normal density.

    Returns
    -------
    nodes : (npts,) ndarray, symmetric about 0
    weights : (npts,) ndarray, positive, summing to 1
    """
    if npts < 1:
        raise UsageError("quadrature rule needs at least one node")
    nodes, weights = np.polynomial.hermite_e.hermegauss(npts)
    weights = weights / math.sqrt(2.0 * math.pi)
    # symmetrize exactly: hermegauss nodes are antisymmetric up to roundoff
    half = npts // 2
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if npts % 2 == 1:
        nodes[half] = 0.0
    return nodes, weights


def tensorize(npts: int, n: int, mu, sigma, cap: int = NODE_CAP) -> QuadratureRule:
    """Tensor rule with npts^n nodes mapped to the Gaussian N(mu, sigma)."""
    if n < 1:
        raise UsageError("dimension must be >= 1")
    total = npts**n
    if total > cap:
        raise ResourceError(
            f"tensor rule would need {total} nodes (cap {cap}); "
            "reduce npts or dimension"
        )
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if mu.shape != (n,) or sigma.shape != (n, n):
        raise DimensionError("mu/sigma shapes inconsistent with dimension")
    evals, evecs = np.linalg.eigh(sigma)
    if evals[0] <= 0.0:
        raise NumericError("sigma is not positive definite")
    for j in range(n):
        k = int(np.argmax(np.abs(evecs[:, j])))
        if evecs[k, j] < 0:
            evecs[:, j] = -evecs[:, j]
    S = evecs * np.sqrt(evals)

    x1, w1 = gauss_hermite(npts)
    grids = np.meshgrid(*([x1] * n), indexing="ij")
    Z = np.stack([g.ravel() for g in grids], axis=-1)
    w = np.ones(1)
    for _ in range(n):
        w = np.multiply.outer(w, w1).ravel()
    nodes = mu + Z @ S.T
    return QuadratureRule(nodes=nodes, weights=w)


def integrate(fn, rule: QuadratureRule) -> float:
    """Apply the rule to a callable or an array of node values.

    The callable receives the full (npts, n) node array.  A non-finite value
    at any node aborts with the node's index and coordinates.
    """
    values = fn(rule.nodes) if callable(fn) else np.asarray(fn, dtype=float)
    values = np.broadcast_to(np.asarray(values, dtype=float), (len(rule),))
    bad = np.nonzero(~np.isfinite(values))[0]
    if bad.size:
        i = int(bad[0])
        raise NumericError(
            f"integrand is not finite at node {i} (y = {rule.nodes[i]})"
        )
    return float(rule.weights @ values)
