"""Euler-Maruyama integration for coarse models and the full stiff system.

Noise is produced by a counter-based generator keyed on
(seed, stream, replica, step), so any increment can be regenerated in
isolation: ensembles simulated with different models but equal seeds are
driven by identical Brownian paths (coupling), and parallel execution over
replicas is bitwise identical to serial execution.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .errors import DimensionError, NumericError, UsageError
from .expressions import Expression, differentiate, fast_dimension

# stream ids partition the counter space between consumers
MACRO_STREAM = 0
MICRO_STREAM = 1
BURST_STREAM = 2


@dataclass(frozen=True)
class FastSlowProblem:
    """A fast/slow system in canonical form.

    Slow components move by f(x, y)/eps; the fast variable follows the
    gradient flow of the confining potential V at rate 1/eps^2 with
    additive noise sqrt(2)/eps, whose invariant density is e^{-V}/Z.
    alpha, when present, is an m x p matrix of expressions adding noise
    directly to the slow components.  lam scales the fitted covariance of
    the basis Gaussian; x0 and d_ref carry per-problem defaults for the
    experiment drivers.

    ou_rates, when set, declares that V is the axis-aligned quadratic
    sum_i rates_i y_i^2 / 2 (up to a constant), which lets micro
    integrators run the exact per-mode linear recursion instead of a
    generic gradient step.
    """

    name: str
    m: int
    n: int
    f: tuple[Expression, ...]
    V: Expression
    alpha: tuple[tuple[Expression, ...], ...] | None = None
    eps: float = 0.1
    lam: float = 1.0
    x0: tuple[float, ...] | None = None
    d_ref: int = 40
    ou_rates: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.f) != self.m:
            raise DimensionError(f"expected {self.m} drift components, got {len(self.f)}")
        used = fast_dimension(self.V, *self.f)
        if used > self.n:
            raise DimensionError(
                f"expressions reference fast variable y{used - 1} but n = {self.n}"
            )
        if self.alpha is not None:
            if len(self.alpha) != self.m:
                raise DimensionError("alpha must have one row per slow component")
            widths = {len(row) for row in self.alpha}
            if len(widths) != 1:
                raise DimensionError("alpha rows have unequal lengths")
        if self.eps <= 0 or self.lam <= 0:
            raise UsageError("eps and lam must be positive")
        if self.ou_rates is not None:
            if len(self.ou_rates) != self.n:
                raise DimensionError("ou_rates must list one rate per fast mode")
            if any(r <= 0 for r in self.ou_rates):
                raise UsageError("ou_rates must be positive")

    @property
    def noise_dim(self) -> int:
        return len(self.alpha[0]) if self.alpha is not None else self.m

    def start_state(self) -> np.ndarray:
        if self.x0 is None:
            return np.ones(self.m)
        return np.asarray(self.x0, dtype=float)


@dataclass(frozen=True)
class IntegratorConfig:
    """Macro-integrator settings shared by the experiment drivers."""

    dt: float
    horizon: float
    replicas: int
    seed: int
    degree: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise UsageError("dt must be positive")
        if self.horizon < self.dt:
            raise UsageError("horizon must cover at least one step")
        if self.replicas < 1:
            raise UsageError("need at least one replica")

    @property
    def steps(self) -> int:
        ratio = self.horizon / self.dt
        rounded = round(ratio)
        if abs(ratio - rounded) <= 1e-9 * max(1.0, abs(ratio)):
            return int(rounded)
        return int(math.ceil(ratio))


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Replica trajectories on a fixed step grid.

    states has shape (replicas, steps + 1, m).  increments retains the
    Brownian increments that drove each step (replicas, steps, p) so
    coupled comparisons can verify they share noise; trajectories obtained
    by subsampling a finer simulation carry None.
    """

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray | None
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return self.states.shape[0]


def normal_draws(seed: int, stream: int, replica: int, step: int, count: int) -> np.ndarray:
    """`count` standard normals, a pure function of the key tuple.

    Uniforms come from the counter-based generator as 53-bit integers
    mapped to (0, 1), then through the inverse normal CDF; no rejection
    stage depends on floating-point comparisons, keeping the draw bitwise
    reproducible for a fixed key.
    """
    bits = Philox(
        key=np.array([seed, stream], dtype=np.uint64),
        counter=np.array([0, 0, replica, step], dtype=np.uint64),
    )
    raw = Generator(bits).integers(0, 1 << 53, size=count, dtype=np.uint64)
    uniforms = (raw.astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(uniforms)


def euler_maruyama_step(x, drift, factor, dt: float, dw) -> np.ndarray:
    """One explicit step x + dt * drift + factor @ dw."""
    x = np.asarray(x, dtype=float)
    out = x + dt * np.asarray(drift, dtype=float) + np.asarray(factor, dtype=float) @ dw
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite state after Euler-Maruyama step")
    return out


def _run_replica(model, cfg: IntegratorConfig, x0, replica, states, increments):
    noise_dim = increments.shape[2]
    scale = math.sqrt(cfg.dt)
    x = x0.copy()
    states[replica, 0] = x
    for step in range(cfg.steps):
        try:
            coeffs = model.coefficients(x)
            dw = scale * normal_draws(cfg.seed, MACRO_STREAM, replica, step, noise_dim)
            x = euler_maruyama_step(x, coeffs.drift, coeffs.factor, cfg.dt, dw)
        except NumericError as exc:
            raise NumericError(
                f"replica {replica}, step {step}, x={np.array2string(x, precision=6)}: {exc}"
            ) from exc
        states[replica, step + 1] = x
        increments[replica, step] = dw


def simulate_homogenized(
    model, cfg: IntegratorConfig, x0=None, threads: int = 1
) -> TrajectoryEnsemble:
    """Integrate the coarse model for an ensemble of replicas.

    The model supplies coefficients(x) -> object with drift and factor.
    Replicas are independent work items; the result is identical for any
    thread count because every increment is keyed, not streamed.
    """
    if x0 is None:
        x0 = model.problem.start_state()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.m,):
        raise DimensionError(f"start state must have {model.m} components")
    steps = cfg.steps
    noise_dim = model.m
    states = np.empty((cfg.replicas, steps + 1, model.m))
    increments = np.empty((cfg.replicas, steps, noise_dim))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_run_replica, model, cfg, x0, r, states, increments)
                for r in range(cfg.replicas)
            ]
            for fut in futures:
                fut.result()
    else:
        for r in range(cfg.replicas):
            _run_replica(model, cfg, x0, r, states, increments)
    times = cfg.dt * np.arange(steps + 1)
    meta = {
        "degree": getattr(model, "degree", None),
        "problem": getattr(getattr(model, "problem", None), "name", None),
        "dt": cfg.dt,
        "horizon": cfg.horizon,
    }
    return TrajectoryEnsemble(
        times=times, states=states, increments=increments, seed=cfg.seed, meta=meta
    )


def simulate_multiscale(
    problem: FastSlowProblem,
    cfg: IntegratorConfig,
    micro_dt: float,
    x0=None,
    y0=None,
    eps: float | None = None,
) -> TrajectoryEnsemble:
    """Direct integration of the full stiff system, subsampled to the macro grid.

    The fast equation is the gradient flow of V at rate 1/eps^2 with noise
    sqrt(2)/eps.  micro_dt must resolve the fast scale (<= eps^2 / 10) and
    divide the macro step.  Noise is drawn in one keyed block per replica.
    """
    eps = problem.eps if eps is None else float(eps)
    if micro_dt > eps**2 / 10 + 1e-15:
        raise UsageError(
            f"micro step {micro_dt} too coarse for eps={eps}; need <= eps^2/10"
        )
    per_macro = round(cfg.dt / micro_dt)
    if per_macro < 1 or abs(per_macro * micro_dt - cfg.dt) > 1e-9 * cfg.dt:
        raise UsageError("micro step must divide the macro step")
    if x0 is None:
        x0 = problem.start_state()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    y0 = np.zeros(problem.n) if y0 is None else np.atleast_1d(np.asarray(y0, dtype=float))

    grad_v = [differentiate(problem.V, "y", i) for i in range(problem.n)]
    h = micro_dt
    steps = cfg.steps
    total = steps * per_macro
    m, n = problem.m, problem.n
    p = problem.noise_dim
    states = np.empty((cfg.replicas, steps + 1, m))
    terminal_fast = np.empty((cfg.replicas, n))

    for r in range(cfg.replicas):
        bits = Philox(
            key=np.array([cfg.seed, MICRO_STREAM], dtype=np.uint64),
            counter=np.array([0, 0, r, 0], dtype=np.uint64),
        )
        raw = Generator(bits).integers(0, 1 << 53, size=total * (n + p), dtype=np.uint64)
        normals = ndtri((raw.astype(np.float64) + 0.5) * 2.0**-53).reshape(total, n + p)
        x = x0.copy()
        y = y0.copy()
        states[r, 0] = x
        idx = 0
        for macro in range(steps):
            for _ in range(per_macro):
                z = normals[idx]
                idx += 1
                fx = np.array(
                    [float(np.asarray(fi.evaluate(x, y))) for fi in problem.f]
                )
                drift_x = fx / eps
                if problem.alpha is not None:
                    amat = np.array(
                        [
                            [float(np.asarray(a.evaluate(x, y))) for a in row]
                            for row in problem.alpha
                        ]
                    )
                    x_new = x + h * drift_x + amat @ (math.sqrt(h) * z[n:])
                else:
                    x_new = x + h * drift_x
                gv = np.array([float(np.asarray(g.evaluate(x, y))) for g in grad_v])
                y = y - (h / eps**2) * gv + (math.sqrt(2.0 * h) / eps) * z[:n]
                x = x_new
                if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                    raise NumericError(
                        f"full system diverged (replica {r}, macro step {macro})"
                    )
            states[r, macro + 1] = x
        terminal_fast[r] = y
    times = cfg.dt * np.arange(steps + 1)
    meta = {
        "problem": problem.name,
        "eps": eps,
        "micro_dt": micro_dt,
        "terminal_fast": terminal_fast,
    }
    return TrajectoryEnsemble(
        times=times, states=states, increments=None, seed=cfg.seed, meta=meta
    )


def error_E(reference: TrajectoryEnsemble, approx: TrajectoryEnsemble) -> float:
    """Root-mean over replicas of the squared sup-in-time pathwise distance."""
    if reference.states.shape != approx.states.shape:
        raise UsageError("ensembles have different shapes")
    if not np.array_equal(reference.times, approx.times):
        raise UsageError("ensembles use different time grids")
    gap = np.linalg.norm(reference.states - approx.states, axis=2)
    worst = np.max(gap, axis=1)
    return float(np.sqrt(np.mean(worst**2)))


def error_pointwise(exact, approx) -> float:
    """Relative drift error plus relative factor error at one slow state."""
    f_norm = float(np.linalg.norm(exact.drift))
    a_norm = float(np.linalg.norm(exact.factor))
    if f_norm == 0.0 or a_norm == 0.0:
        raise UsageError("pointwise error undefined where F or A vanishes")
    df = float(np.linalg.norm(exact.drift - approx.drift))
    da = float(np.linalg.norm(exact.factor - approx.factor))
    return df / f_norm + da / a_norm
