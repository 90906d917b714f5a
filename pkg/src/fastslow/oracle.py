"""Brute-force finite-difference check of the spectral cell solutions.

Solves div(e^{-V} grad phi) = -e^{-V} f on a truncated box with a
second-order flux scheme and homogeneous Neumann walls, entirely
independent of the Hermite machinery: different discretization, different
linear algebra, different variable of comparison.  Agreement between the
two routes validates both.

The grid operator depends only on the potential and the box, so one
factorization serves every right-hand side, including the shifted slow
states used to difference the corrector in x.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .errors import DimensionError, NumericError, UsageError
from .gibbs import GibbsMeasure
from .poisson import PoissonSolution, evaluate_solution

_BOUNDARY_WARN = 1e-12
_BOUNDARY_ERROR = 1e-6
_RESIDUAL_TOL = 1e-10
_CENTER_TOL = 1e-8
# edges this far below the strongest conductance are dropped, and with
# them any node left without a live edge: on wide boxes (quartic wells
# push e^-V past 1e-308) they underflow or sink beneath the rhs roundoff
# floor, turning nodal values into noise; the cut bounds the system's
# conditioning near 1/cut while every weighted quantity the dropped nodes
# feed is perturbed by at most the cut itself
_DEAD_CUT = 1e-20
# a dropped node holding more than this share of the modal density means
# the grid cannot connect mass that actually matters
_MASS_GUARD = 1e-10


def default_box(gibbs: GibbsMeasure) -> tuple[tuple[float, float], ...]:
    """Per-dimension bounds mean +- 8 sigma from the fitted measure."""
    sigma = np.sqrt(np.diag(gibbs.cov))
    return tuple(
        (float(m - 8 * s), float(m + 8 * s)) for m, s in zip(gibbs.mean, sigma)
    )


def _normalize_box(box) -> tuple[tuple[float, float], ...]:
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DimensionError("box must be (lo, hi) or a sequence of (lo, hi) pairs")
    if arr.shape[0] not in (1, 2):
        raise UsageError("grid oracle supports one or two fast dimensions")
    if np.any(arr[:, 1] <= arr[:, 0]):
        raise UsageError("box upper bounds must exceed lower bounds")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


@dataclass(frozen=True)
class GridSolution:
    """Nodal corrector values on the oracle grid.

    phi is stored in mesh shape (one axis per dimension); density holds
    e^{-V} at the nodes and volumes the trapezoid cell volumes, so weighted
    integrals are plain sums.  residual is the normwise backward error of
    the discrete solve.
    """

    box: tuple[tuple[float, float], ...]
    cells: tuple[int, ...]
    h: tuple[float, ...]
    nodes: tuple[np.ndarray, ...]
    phi: np.ndarray
    density: np.ndarray
    volumes: np.ndarray
    residual: float

    @property
    def dim(self) -> int:
        return len(self.cells)

    def points(self) -> np.ndarray:
        """All grid nodes as an (npts, dim) array in mesh order."""
        grids = np.meshgrid(*self.nodes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def weighted_mean(self) -> float:
        """Mean of phi against the discrete Gibbs weight."""
        mass = float(np.sum(self.volumes * self.density))
        return float(np.sum(self.volumes * self.density * self.phi)) / mass


class GridOperator:
    """Assembled divergence-form operator on a box, reusable across solves.

    Each edge gets the conductance of its resistance integral (Simpson on
    e^V, so steep potential ramps are integrated, not sampled); the
    singular Neumann system is closed with a mean-zero Lagrange multiplier
    row (bordered matrix), factored once with SuperLU.
    """

    def __init__(self, V, box, cells, x=None):
        self.box = _normalize_box(box)
        dim = len(self.box)
        if np.isscalar(cells):
            cells = (int(cells),) * dim
        cells = tuple(int(c) for c in cells)
        if len(cells) != dim:
            raise DimensionError("need one cell count per dimension")
        if any(c < 4 for c in cells):
            raise UsageError("need at least 4 cells per dimension")
        self.cells = cells
        self.x = None if x is None else np.asarray(x, dtype=float)
        self.V = V
        self.nodes = tuple(
            np.linspace(lo, hi, c + 1) for (lo, hi), c in zip(self.box, cells)
        )
        self.h = tuple(float(n[1] - n[0]) for n in self.nodes)
        self.shape = tuple(c + 1 for c in cells)

        pts = self._mesh_points(self.nodes)
        self._vnodes = self._potential(pts).reshape(self.shape)
        self.density = np.exp(-self._vnodes)
        self._check_boundary()
        vols = [np.full(s, h) for s, h in zip(self.shape, self.h)]
        for v in vols:
            v[0] *= 0.5
            v[-1] *= 0.5
        self.volumes = vols[0] if dim == 1 else np.outer(vols[0], vols[1])
        self._assemble()

    def _potential(self, pts: np.ndarray) -> np.ndarray:
        vals = self.V.evaluate(self.x, pts)
        return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],))

    @staticmethod
    def _mesh_points(nodes) -> np.ndarray:
        grids = np.meshgrid(*nodes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def _check_boundary(self):
        if self.density.ndim == 1:
            edge = max(self.density[0], self.density[-1])
        else:
            edge = max(
                self.density[0].max(),
                self.density[-1].max(),
                self.density[:, 0].max(),
                self.density[:, -1].max(),
            )
        if edge > _BOUNDARY_ERROR:
            raise UsageError(
                f"boundary density {edge:.2e} too large; the box truncates "
                "significant invariant mass"
            )
        if edge > _BOUNDARY_WARN:
            warnings.warn(
                f"boundary density {edge:.2e} above 1e-12; widen the box "
                "for full oracle accuracy",
                stacklevel=3,
            )

    @staticmethod
    def _edge_conductance(va, vm, vb, dist):
        # two-point flux with the resistance integral int e^V along the
        # edge (Simpson), max-shifted so the exponentials cannot overflow;
        # constant V reduces to the plain e^-V / dist conductance
        top = np.maximum(np.maximum(va, vm), vb)
        s = np.exp(va - top) + 4.0 * np.exp(vm - top) + np.exp(vb - top)
        return np.exp(-top) * 6.0 / (dist * s)

    def _edges(self):
        """All grid edges as (conductance, left flat index, right flat index).

        Conductance of an edge is (resistance integral along it)^-1 times
        the transverse face area, so the row sum telescopes exactly and
        the assembled matrix stays symmetric.
        """
        dim = len(self.cells)
        vn = self._vnodes
        if dim == 1:
            (ny,) = self.shape
            mids = 0.5 * (self.nodes[0][:-1] + self.nodes[0][1:])
            vm = self._potential(mids[:, None])
            w = self._edge_conductance(vn[:-1], vm, vn[1:], self.h[0])
            idx = np.arange(ny)
            return w, idx[:-1], idx[1:]
        ny, nz = self.shape
        flat = np.arange(ny * nz).reshape(ny, nz)
        mid0 = 0.5 * (self.nodes[0][:-1] + self.nodes[0][1:])
        g0, g1 = np.meshgrid(mid0, self.nodes[1], indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
        vm = self._potential(pts).reshape(ny - 1, nz)
        face = np.full((ny - 1, nz), self.h[1])
        face[:, 0] *= 0.5
        face[:, -1] *= 0.5
        w0 = self._edge_conductance(vn[:-1, :], vm, vn[1:, :], self.h[0]) * face
        mid1 = 0.5 * (self.nodes[1][:-1] + self.nodes[1][1:])
        g0, g1 = np.meshgrid(self.nodes[0], mid1, indexing="ij")
        pts = np.stack([g0.ravel(), g1.ravel()], axis=1)
        vm = self._potential(pts).reshape(ny, nz - 1)
        face = np.full((ny, nz - 1), self.h[0])
        face[0] *= 0.5
        face[-1] *= 0.5
        w1 = self._edge_conductance(vn[:, :-1], vm, vn[:, 1:], self.h[1]) * face
        conduct = np.concatenate([w0.ravel(), w1.ravel()])
        left = np.concatenate([flat[:-1].ravel(), flat[:, :-1].ravel()])
        right = np.concatenate([flat[1:].ravel(), flat[:, 1:].ravel()])
        return conduct, left, right

    def _assemble(self):
        size = int(np.prod(self.shape))
        conduct, left, right = self._edges()
        cmax = float(conduct.max(initial=0.0))
        if cmax <= 0.0:
            raise NumericError("grid operator has no usable edges")
        keep = conduct >= _DEAD_CUT * cmax
        conduct, left, right = conduct[keep], left[keep], right[keep]
        self.active = np.zeros(size, dtype=bool)
        self.active[left] = True
        self.active[right] = True
        dens = self.density.ravel()
        dropped = dens[~self.active]
        if dropped.size and float(dropped.max()) > _MASS_GUARD * float(dens.max()):
            raise NumericError(
                "grid drops a node carrying significant invariant mass; "
                "the potential pinches too sharply for this mesh"
            )
        n_active = int(self.active.sum())
        index = np.full(size, -1)
        index[self.active] = np.arange(n_active)
        left = index[left]
        right = index[right]
        adjacency = csr_matrix(
            (np.ones(left.size), (left, right)), shape=(n_active, n_active)
        )
        ncomp = connected_components(adjacency, directed=False, return_labels=False)
        if ncomp > 1:
            raise NumericError(
                "grid operator decouples: the invariant density pinches "
                "below the conductance cutoff inside the box"
            )
        diag = np.zeros(n_active)
        np.add.at(diag, left, -conduct)
        np.add.at(diag, right, -conduct)
        idx = np.arange(n_active)
        # mean-zero deflation: border the singular operator with the
        # constraint column/row, then factor once
        ones = np.ones(n_active)
        rows = np.concatenate([left, right, idx, idx, np.full(n_active, n_active)])
        cols = np.concatenate([right, left, idx, np.full(n_active, n_active), idx])
        vals = np.concatenate([conduct, conduct, diag, ones, ones])
        matrix = csr_matrix((vals, (rows, cols)), shape=(n_active + 1, n_active + 1))
        self._system = matrix
        self._opnorm = float(np.max(np.abs(matrix).sum(axis=1)))
        self._lu = splu(matrix.tocsc())
        self._size = size
        self._n_active = n_active

    def solve(self, f_values: np.ndarray) -> GridSolution:
        """Corrector for nodal forcing values (mesh shape or flat)."""
        fv = np.asarray(f_values, dtype=float).reshape(-1)
        if fv.shape != (self._size,):
            raise DimensionError("forcing values must cover every grid node")
        wv = (self.density.ravel() * self.volumes.ravel())[self.active]
        rhs = -(wv * fv[self.active])
        # compatibility: center f against the discrete Gibbs weight; a
        # uniform shift would instead load the weakest rows with the
        # entire incompatibility and blow up the fringe
        rhs = rhs - (rhs.sum() / wv.sum()) * wv
        rhs_full = np.concatenate([rhs, [0.0]])
        full = self._lu.solve(rhs_full)
        residual = np.inf
        # normwise backward error: the raw defect scales like |A||phi|,
        # which dwarfs the h-scaled rhs on fine grids, so rhs-relative
        # max-norm would reject machine-accurate solves
        for _ in range(4):
            defect = rhs_full - self._system @ full
            scale = self._opnorm * float(np.max(np.abs(full)))
            scale = max(scale + float(np.max(np.abs(rhs))), 1e-300)
            residual = float(np.max(np.abs(defect))) / scale
            if residual <= _RESIDUAL_TOL:
                break
            full = full + self._lu.solve(defect)
        if residual > _RESIDUAL_TOL:
            raise NumericError(f"grid solve residual {residual:.2e} above tolerance")
        phi = np.zeros(self._size)
        phi[self.active] = full[:-1]
        phi = phi.reshape(self.shape)
        sol = GridSolution(
            box=self.box,
            cells=self.cells,
            h=self.h,
            nodes=self.nodes,
            phi=phi,
            density=self.density,
            volumes=self.volumes,
            residual=residual,
        )
        centered = GridSolution(
            box=sol.box,
            cells=sol.cells,
            h=sol.h,
            nodes=sol.nodes,
            phi=phi - sol.weighted_mean(),
            density=sol.density,
            volumes=sol.volumes,
            residual=residual,
        )
        if abs(centered.weighted_mean()) > _CENTER_TOL:
            raise NumericError("grid solution failed the centering condition")
        return centered

    def forcing(self, f, x=None) -> np.ndarray:
        """Nodal values of an expression-like forcing at frozen slow state."""
        pts = self._mesh_points(self.nodes)
        use_x = self.x if x is None else np.asarray(x, dtype=float)
        vals = f.evaluate(use_x, pts)
        return np.broadcast_to(np.asarray(vals, dtype=float), (pts.shape[0],)).copy()


def fd_solve(V, f, box, cells, x=None) -> GridSolution:
    """One-shot oracle solve of the cell problem for forcing f at state x."""
    op = GridOperator(V, box, cells, x=x)
    return op.solve(op.forcing(f))


def weighted_l2_error(grid: GridSolution, sol: PoissonSolution, component: int = 0) -> float:
    """Squared Gibbs-weighted gap between grid and spectral correctors.

    Both solutions are mapped to the flat space (multiplied by the square
    root of the normalized density) where the spectral coefficients live;
    the constant-shift direction is projected out before integrating, since
    correctors are only defined up to constants.
    """
    psi = evaluate_solution(sol, grid.points())
    if psi.ndim == 1:
        psi = psi[:, None]
    if not 0 <= component < psi.shape[1]:
        raise UsageError("component index outside the solution's slow range")
    vol = grid.volumes.ravel()
    dens = grid.density.ravel()
    mass = float(np.sum(vol * dens))
    half = np.sqrt(dens / mass)
    diff = grid.phi.ravel() * half - psi[:, component]
    # <half, half> integrates to one, so alignment is a plain projection
    diff = diff - np.sum(vol * diff * half) * half
    return float(np.sum(vol * diff**2))


def grid_coefficients(problem, x, box, cells, delta: float = 1e-4):
    """Effective drift and diffusion by grid quadrature, no spectral parts.

    Drift pairs the x-derivative of the corrector (central difference of
    two shifted solves) with the forcing; diffusion symmetrizes the
    corrector-forcing pairing and adds the averaged slow-noise square.
    """
    x = np.asarray(x, dtype=float)
    op = GridOperator(problem.V, box, cells, x=x)
    m = problem.m
    vol = op.volumes.ravel()
    dens = op.density.ravel()
    mass = float(np.sum(vol * dens))
    weight = vol * dens / mass

    forcing = np.stack([op.forcing(fi) for fi in problem.f])
    phi = np.stack([op.solve(forcing[i]).phi.ravel() for i in range(m)])
    drift = np.zeros(m)
    for j in range(m):
        shift = np.zeros(m)
        shift[j] = delta
        plus = [op.forcing(fi, x=x + shift) for fi in problem.f]
        minus = [op.forcing(fi, x=x - shift) for fi in problem.f]
        for i in range(m):
            dphi = (op.solve(plus[i]).phi - op.solve(minus[i]).phi).ravel()
            dphi /= 2 * delta
            drift[i] += float(np.sum(weight * dphi * forcing[j]))
    a0 = np.einsum("ik,jk->ij", phi * weight, forcing)
    diffusion = a0 + a0.T
    if problem.alpha is not None:
        width = len(problem.alpha[0])
        pts = op._mesh_points(op.nodes)
        av = np.empty((m, width, len(weight)))
        for i in range(m):
            for j in range(width):
                vals = problem.alpha[i][j].evaluate(x, pts)
                av[i, j] = np.broadcast_to(np.asarray(vals, dtype=float), weight.shape)
        diffusion = diffusion + np.einsum("ipk,jpk,k->ij", av, av, weight)
    return drift, diffusion
