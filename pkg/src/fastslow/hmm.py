"""Micro-burst baseline estimator for the effective coefficients.

Instead of solving the cell problem, run a short burst of the fast dynamics
at frozen slow state and estimate drift and diffusion by Green-Kubo lag
sums of the drift autocorrelation.  One integer p controls every knob: the
micro step is 2^-p in the fast time scale, the burst holds 10 * 8^p
samples after a 16-step transient discard, and the lag window spans p * 2^p
steps.  Tightening p by one halves the step, extends the window one unit
of correlation time, and quadruples the averaging time, so the total error
contracts like 2^-p while the cost grows eightfold.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .coeffs import EffectiveCoefficients, cholesky_factor
from .errors import NumericError, UsageError
from .expressions import differentiate
from .sde import BURST_STREAM, normal_draws

_TRANSIENT = 16


@dataclass(frozen=True)
class HmmConfig:
    """Precision schedule for the micro solver, indexed by one integer p."""

    p: int
    eps: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise UsageError("precision parameter p must be a positive integer")
        if self.eps <= 0:
            raise UsageError("eps must be positive")
        if not self.n_lags < self.n_samples:
            raise UsageError("lag window must be shorter than the sample run")

    @property
    def dt(self) -> float:
        """Micro step in the fast time scale (2^-p)."""
        return 2.0 ** -self.p

    @property
    def n_transient(self) -> int:
        return _TRANSIENT

    @property
    def ensembles(self) -> int:
        return 1

    @property
    def n_samples(self) -> int:
        return 10 * 8**self.p

    @property
    def n_lags(self) -> int:
        return self.p * 2**self.p


def lag_weights(n_lags: int) -> np.ndarray:
    """Trapezoid weights for the lag sum: endpoints count half."""
    w = np.ones(n_lags + 1)
    w[0] = 0.5
    w[-1] = 0.5
    return w


def micro_trajectory(problem, x, cfg: HmmConfig, burst: int = 0) -> np.ndarray:
    """One burst of the fast dynamics at frozen slow state x.

    Runs n_transient + n_samples steps from y = 0 and returns the last
    n_samples states, shape (n_samples, n).  Problems declaring ou_rates
    advance by the exact Gaussian transition of each linear mode (stable
    at any step); otherwise the step is forward Euler on the gradient flow
    dY = -grad V dt + sqrt(2) dW.  burst selects an independent noise
    block, so estimates at distinct macro states decorrelate.
    """
    n = problem.n
    total = cfg.n_transient + cfg.n_samples
    draws = normal_draws(cfg.seed, BURST_STREAM, burst, 0, total * n)
    draws = draws.reshape(total, n)
    rates = getattr(problem, "ou_rates", None)
    if rates is not None:
        rates = np.asarray(rates, dtype=float)
        noise = getattr(problem, "ou_noise", None)
        if noise is None:
            noise = math.sqrt(2.0) * np.ones(n)
        noise = np.asarray(noise, dtype=float)
        decay = np.exp(-rates * cfg.dt)
        v = noise**2 / (2.0 * rates)
        sigma = np.sqrt(v * (1.0 - decay**2))
        out = np.empty((total, n))
        for i in range(n):
            # y_k = decay * y_{k-1} + sigma * xi_k is a first-order filter
            out[:, i] = lfilter([sigma[i]], [1.0, -decay[i]], draws[:, i])
        if not np.all(np.isfinite(out)):
            raise NumericError("fast burst diverged")
        return out[cfg.n_transient :]
    x = np.asarray(x, dtype=float)
    grad_v = [differentiate(problem.V, "y", i) for i in range(n)]
    h = cfg.dt
    root = math.sqrt(2.0 * h)
    y = np.zeros(n)
    out = np.empty((total, n))
    for k in range(total):
        g = np.array([gi.evaluate(x, y) for gi in grad_v], dtype=float)
        y = y - h * g + root * draws[k]
        if not np.all(np.isfinite(y)):
            raise NumericError(f"fast burst diverged at micro step {k}")
        out[k] = y
    return out[cfg.n_transient :]


def estimate_coefficients(traj, f, grad_f, alpha, x, cfg: HmmConfig):
    """Green-Kubo estimates (F, D) from one stationary burst.

    F_i sums grad_x f_i at lag k against f at lag 0; D adds the
    symmetrized drift autocovariance to the time average of alpha alpha^T.
    Lag sums use trapezoid weights over n_lags micro steps.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2:
        raise UsageError("trajectory must be a (samples, n) array")
    x = np.asarray(x, dtype=float)
    m = len(f)
    total = traj.shape[0]
    lags = cfg.n_lags
    if total <= lags:
        raise UsageError("trajectory shorter than the lag window")
    fv = np.empty((m, total))
    gv = np.empty((m, m, total))
    for i in range(m):
        fv[i] = np.broadcast_to(f[i].evaluate(x, traj), (total,))
        for j in range(m):
            gv[i, j] = np.broadcast_to(grad_f[i][j].evaluate(x, traj), (total,))
    length = total - lags
    w = lag_weights(lags)
    scale = cfg.dt / length
    # windows[i, j, k, l] = gv[i, j, k + l]; summing l pairs lag k with lag 0
    gwin = sliding_window_view(gv, length, axis=2)
    s1 = np.einsum("ijkl,jl->ki", gwin, fv[:, :length])
    drift = scale * (w @ s1)
    fwin = sliding_window_view(fv, length, axis=1)
    c = np.einsum("ikl,jl->kij", fwin, fv[:, :length])
    half = scale * np.einsum("k,kij->ij", w, c)
    if alpha is None:
        m_alpha = np.zeros((m, m))
    else:
        width = len(alpha[0])
        av = np.empty((m, width, total))
        for i in range(m):
            for j in range(width):
                av[i, j] = np.broadcast_to(alpha[i][j].evaluate(x, traj), (total,))
        m_alpha = np.einsum("ipn,jpn->ij", av, av) / total
    diffusion = m_alpha + half + half.T
    return drift, diffusion


def slow_gradients(problem):
    """The m x m table of slow-drift x-derivatives for any problem kind."""
    if hasattr(problem, "grad_f"):
        return problem.grad_f
    return tuple(
        tuple(differentiate(fi, "x", j) for j in range(problem.m))
        for fi in problem.f
    )


def hmm_coefficients(problem, x, cfg: HmmConfig, burst: int = 0) -> EffectiveCoefficients:
    """Burst-estimated coefficients at one macro state, factored."""
    traj = micro_trajectory(problem, x, cfg, burst=burst)
    drift, diffusion = estimate_coefficients(
        traj, problem.f, slow_gradients(problem), problem.alpha, x, cfg
    )
    factor = cholesky_factor(diffusion)
    return EffectiveCoefficients(
        x=np.asarray(x, dtype=float), drift=drift, diffusion=diffusion, factor=factor
    )


class HmmModel:
    """Coarse model whose coefficients come from micro bursts.

    Presents the same surface as the spectral models (problem, m,
    coefficients(x)), so one Euler-Maruyama driver integrates either route
    under shared macro noise.  Bursts are keyed by a checksum of the state
    bytes: stateless, hence bitwise-reproducible for any thread count or
    call order.
    """

    def __init__(self, problem, cfg: HmmConfig):
        self.problem = problem
        self.cfg = cfg
        self.m = problem.m

    def coefficients(self, x) -> EffectiveCoefficients:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        burst = zlib.crc32(x.tobytes())
        return hmm_coefficients(self.problem, x, self.cfg, burst=burst)


def error_Ep(hmm_coeffs, spectral_coeffs, dt: float, horizon: float) -> float:
    """Mean coefficient gap along a shared macro-state sequence.

    Averages |F_hmm - F_sp| + |A_hmm - A_sp| (Euclidean and Frobenius)
    over the sequence; both sequences must cover horizon/dt states.
    """
    count = round(horizon / dt)
    if len(hmm_coeffs) != count or len(spectral_coeffs) != count:
        raise UsageError(
            f"coefficient sequences must hold {count} states to span the horizon"
        )
    total = 0.0
    for h, s in zip(hmm_coeffs, spectral_coeffs):
        total += float(np.linalg.norm(h.drift - s.drift))
        total += float(np.linalg.norm(h.factor - s.factor))
    return total / count


@dataclass(frozen=True)
class HmmComparison:
    """One precision level of the baseline-vs-spectral comparison."""

    p: int
    error: float
    coefficients: tuple[EffectiveCoefficients, ...]


def compare_along_trajectory(
    model, states, p_values, eps: float = 0.1, seed: int = 0
) -> list[HmmComparison]:
    """E_p of burst estimates against the spectral model at given states.

    states is an (N, m) array of macro states; each state gets its own
    noise burst (burst = state index).  The spectral reference is computed
    once and shared across precision levels.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    problem = model.problem
    reference = [model.coefficients(s) for s in states]
    count = len(states)
    dt = 1.0 / count
    rows = []
    for p in p_values:
        cfg = HmmConfig(p=int(p), eps=eps, seed=seed)
        estimates = tuple(
            hmm_coefficients(problem, s, cfg, burst=i) for i, s in enumerate(states)
        )
        rows.append(
            HmmComparison(
                p=int(p),
                error=error_Ep(estimates, reference, dt, 1.0),
                coefficients=estimates,
            )
        )
    return rows


def fitted_slope(p_values, errors):
    """Least-squares slope of log2(error) against p; None below two points."""
    if len(p_values) < 2:
        return None
    if len(p_values) != len(errors):
        raise UsageError("need one error per precision level")
    logs = np.log2(np.asarray(errors, dtype=float))
    return float(np.polyfit(np.asarray(p_values, dtype=float), logs, 1)[0])
