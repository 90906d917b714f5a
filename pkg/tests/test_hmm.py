"""Tests for the micro-burst Green-Kubo estimator."""

import math

import numpy as np
import pytest

from fastslow.coeffs import EffectiveCoefficients
from fastslow.errors import NumericError, UsageError
from fastslow.expressions import parse
from fastslow.hmm import (
    HmmConfig,
    HmmModel,
    compare_along_trajectory,
    error_Ep,
    estimate_coefficients,
    fitted_slope,
    hmm_coefficients,
    lag_weights,
    micro_trajectory,
    slow_gradients,
)
from fastslow.problems import get_problem
from fastslow.sde import (
    BURST_STREAM,
    FastSlowProblem,
    IntegratorConfig,
    normal_draws,
    simulate_homogenized,
)
from fastslow.spde import ReducedSpectralModel, SpectralSpde, homogenize_reduced


# ------------------------------------------------------------ configuration


def test_config_schedule():
    c3 = HmmConfig(p=3)
    assert c3.dt == 0.125
    assert c3.n_samples == 5120
    assert c3.n_lags == 24
    assert c3.n_transient == 16
    assert c3.ensembles == 1
    c5 = HmmConfig(p=5)
    assert c5.n_samples == 327680
    assert c5.n_lags == 160
    assert c5.n_lags < c5.n_samples


def test_config_validation():
    with pytest.raises(UsageError):
        HmmConfig(p=0)
    with pytest.raises(UsageError):
        HmmConfig(p=-2)
    with pytest.raises(UsageError):
        HmmConfig(p=2.5)
    with pytest.raises(UsageError):
        HmmConfig(p=3, eps=0.0)


def test_lag_weights_trapezoid():
    assert lag_weights(3).tolist() == [0.5, 1.0, 1.0, 0.5]
    assert lag_weights(1).tolist() == [0.5, 0.5]


# ------------------------------------------------------------- micro bursts


def test_micro_matches_hand_recursion():
    # the filter evaluates the exact per-step Gaussian transition; running
    # the recursion by hand over the same draw block pins the step count
    # at n_transient + n_samples and the discard at the front
    prob = get_problem("ou")
    cfg = HmmConfig(p=3, seed=42)
    traj = micro_trajectory(prob, [0.7], cfg)
    total = cfg.n_transient + cfg.n_samples
    draws = normal_draws(cfg.seed, BURST_STREAM, 0, 0, total).reshape(total, 1)
    decay = math.exp(-cfg.dt)
    sigma = math.sqrt(1.0 - decay**2)
    y = 0.0
    hand = np.empty(total)
    for k in range(total):
        y = decay * y + sigma * draws[k, 0]
        hand[k] = y
    assert traj.shape == (cfg.n_samples, 1)
    assert np.allclose(traj[:, 0], hand[cfg.n_transient :], rtol=0, atol=1e-13)


def test_micro_output_length_and_reproducibility():
    sys2 = SpectralSpde(n_modes=2).reduce()
    cfg = HmmConfig(p=2, seed=9)
    one = micro_trajectory(sys2, [1.2, 1.2], cfg)
    assert one.shape == (cfg.n_samples, 2)
    two = micro_trajectory(sys2, [1.2, 1.2], cfg)
    assert np.array_equal(one, two)
    other = micro_trajectory(sys2, [1.2, 1.2], cfg, burst=1)
    assert not np.array_equal(one, other)


def test_micro_stationary_variance():
    # unit-variance invariant law; band is 3 standard errors with the
    # effective sample count n dt / (2 tau), tau = 1
    prob = get_problem("ou")
    cfg = HmmConfig(p=4, seed=7)
    traj = micro_trajectory(prob, [0.3], cfg)
    neff = cfg.n_samples * cfg.dt / 2
    assert abs(traj[:, 0].var() - 1.0) < 3 * math.sqrt(2 / neff)


def test_micro_generic_gradient_path_matches_euler():
    # without declared rates the burst is forward Euler on -grad V
    prob = FastSlowProblem(
        name="g",
        m=1,
        n=1,
        f=(parse("sin(x0)*y0"),),
        V=parse("y0^2/2 + 0.9189385332046727"),
    )
    cfg = HmmConfig(p=3, seed=5)
    traj = micro_trajectory(prob, [0.7], cfg)
    total = cfg.n_transient + cfg.n_samples
    draws = normal_draws(cfg.seed, BURST_STREAM, 0, 0, total).reshape(total, 1)
    h = cfg.dt
    root = math.sqrt(2 * h)
    y = np.zeros(1)
    hand = np.empty(total)
    for k in range(total):
        y = y - h * y + root * draws[k]
        hand[k] = y[0]
    assert np.array_equal(traj[:, 0], hand[cfg.n_transient :])


@pytest.mark.filterwarnings("ignore:overflow")
def test_micro_blowup_raises():
    # step 1/4 on rate 20 gives growth factor -4 per step
    stiff = FastSlowProblem(name="s", m=1, n=1, f=(parse("0"),), V=parse("10*y0^2"))
    with pytest.raises(NumericError):
        micro_trajectory(stiff, [0.0], HmmConfig(p=2, seed=1))


# --------------------------------------------------------------- estimator


def test_estimate_zero_drift():
    cfg = HmmConfig(p=1, seed=0)
    traj = np.random.default_rng(3).normal(size=(100, 1))
    zero = parse("0")
    F, D = estimate_coefficients(traj, [zero], [[zero]], None, [0.5], cfg)
    assert F.tolist() == [0.0]
    assert D.tolist() == [[0.0]]


def test_estimate_alpha_time_average():
    cfg = HmmConfig(p=1, seed=0)
    traj = np.random.default_rng(4).normal(size=(120, 1))
    zero = parse("0")
    # constant-in-y alpha: time average is alpha alpha^T exactly
    F, D = estimate_coefficients(traj, [zero], [[zero]], ((parse("x0"),),), [0.5], cfg)
    assert F.tolist() == [0.0]
    assert abs(D[0, 0] - 0.25) < 1e-14
    # state-dependent alpha averages y^2 along the burst
    _, Dy = estimate_coefficients(traj, [zero], [[zero]], ((parse("y0"),),), [0.5], cfg)
    assert abs(Dy[0, 0] - np.mean(traj[:, 0] ** 2)) < 1e-12


def test_estimate_rejects_short_trajectory():
    cfg = HmmConfig(p=3, seed=0)  # lag window 24
    zero = parse("0")
    with pytest.raises(UsageError):
        estimate_coefficients(np.zeros((20, 1)), [zero], [[zero]], None, [0.0], cfg)
    with pytest.raises(UsageError):
        estimate_coefficients(np.zeros(50), [zero], [[zero]], None, [0.0], cfg)


def test_estimate_ou_analytic_targets():
    # bands are 3 standard errors of the single-burst estimate, measured
    # across seeds: sd(F) = 0.022/0.015 and sd(D) = 0.037/0.077 at p=5
    prob = get_problem("ou")
    grads = slow_gradients(prob)
    bands = {0.7: (0.066, 0.110), 1.2: (0.045, 0.230)}
    cfg = HmmConfig(p=5, seed=0)
    for x, (band_f, band_d) in bands.items():
        traj = micro_trajectory(prob, [x], cfg)
        F, D = estimate_coefficients(traj, prob.f, grads, None, [x], cfg)
        assert abs(F[0] - math.sin(x) * math.cos(x)) < band_f
        assert abs(D[0, 0] - 2 * math.sin(x) ** 2) < band_d


def test_estimate_error_shrinks_with_p():
    # measured mean |F - F_exact| over these 20 seeds: 0.042, 0.027, 0.018
    prob = get_problem("ou")
    grads = slow_gradients(prob)
    x = 0.7
    exact = math.sin(x) * math.cos(x)
    means = []
    for p in (3, 4, 5):
        gaps = []
        for seed in range(20):
            cfg = HmmConfig(p=p, seed=seed)
            traj = micro_trajectory(prob, [x], cfg)
            F, _ = estimate_coefficients(traj, prob.f, grads, None, [x], cfg)
            gaps.append(abs(F[0] - exact))
        means.append(np.mean(gaps))
    assert means[0] > means[1] > means[2]


def test_estimate_unbiased_across_bursts():
    # 50 independent bursts at p=5: the averaged estimate brackets the
    # analytic coefficients within 3 standard errors of the mean
    prob = get_problem("ou")
    grads = slow_gradients(prob)
    x = 0.7
    fs, ds = [], []
    for seed in range(50):
        cfg = HmmConfig(p=5, seed=seed)
        traj = micro_trajectory(prob, [x], cfg)
        F, D = estimate_coefficients(traj, prob.f, grads, None, [x], cfg)
        fs.append(F[0])
        ds.append(D[0, 0])
    fs, ds = np.array(fs), np.array(ds)
    se_f = fs.std(ddof=1) / math.sqrt(len(fs))
    se_d = ds.std(ddof=1) / math.sqrt(len(ds))
    assert abs(fs.mean() - math.sin(x) * math.cos(x)) < 3 * se_f
    assert abs(ds.mean() - 2 * math.sin(x) ** 2) < 3 * se_d


def test_hmm_coefficients_factored():
    prob = get_problem("ou")
    out = hmm_coefficients(prob, [0.7], HmmConfig(p=4, seed=2))
    assert out.drift.shape == (1,)
    assert out.factor_residual() < 1e-12
    assert abs(out.diffusion[0, 0] - 2 * math.sin(0.7) ** 2) < 0.3


# ------------------------------------------------------------- comparison


def make_coeffs(drift, factor):
    drift = np.asarray(drift, dtype=float)
    factor = np.asarray(factor, dtype=float)
    return EffectiveCoefficients(
        x=np.zeros_like(drift),
        drift=drift,
        diffusion=factor @ factor.T,
        factor=factor,
    )


def test_error_ep_examples():
    eye = np.eye(2)
    base = [make_coeffs([1.0, 2.0], eye) for _ in range(4)]
    assert error_Ep(base, base, 0.25, 1.0) == 0.0
    shifted = [make_coeffs([1.3, 2.0], eye) for _ in range(4)]
    assert abs(error_Ep(shifted, base, 0.25, 1.0) - 0.3) < 1e-15


def test_error_ep_rejects_grid_mismatch():
    eye = np.eye(2)
    seq = [make_coeffs([0.0, 0.0], eye) for _ in range(3)]
    with pytest.raises(UsageError):
        error_Ep(seq, seq, 0.25, 1.0)  # horizon wants 4 states
    with pytest.raises(UsageError):
        error_Ep(seq, seq[:2], 1.0 / 3.0, 1.0)


def test_fitted_slope():
    assert abs(fitted_slope([3, 4, 5], [0.4, 0.2, 0.1]) + 1.0) < 1e-12
    assert fitted_slope([3], [0.4]) is None
    with pytest.raises(UsageError):
        fitted_slope([3, 4], [0.4])


def test_slow_gradients_dispatch():
    reduced = SpectralSpde(n_modes=2).reduce()
    assert slow_gradients(reduced) is reduced.grad_f
    prob = get_problem("ou")
    table = slow_gradients(prob)
    x, y = np.array([0.7]), np.array([1.3])
    assert abs(table[0][0].evaluate(x, y) - math.cos(0.7) * 1.3) < 1e-14


def test_compare_along_trajectory_smoke():
    # two-mode reduction keeps the bursts cheap; the error drops from
    # p=2 to p=3 (measured 0.060 -> 0.052 for these frozen seeds)
    model = homogenize_reduced(SpectralSpde(n_modes=2))
    states = np.array([[1.2, 1.2], [1.1, 1.15], [1.3, 1.25]])
    rows = compare_along_trajectory(model, states, (2, 3), seed=4)
    assert [r.p for r in rows] == [2, 3]
    assert all(len(r.coefficients) == 3 for r in rows)
    assert 0.0 < rows[1].error < rows[0].error < 0.2
    for r in rows:
        for c in r.coefficients:
            assert c.factor_residual() < 1e-12


def test_coupled_trajectories_close_in_on_spectral():
    """Under shared macro noise, burst-driven paths approach spectral ones.

    The replica-averaged max gap is the statistic that contracts with p;
    a single path's max is dominated by one burst's luck.
    """
    spde = SpectralSpde(n_modes=2, eps=0.1)
    spectral = ReducedSpectralModel(spde, 4)
    system = spectral.problem
    cfg = IntegratorConfig(dt=0.05, horizon=0.5, replicas=8, seed=7)
    reference = simulate_homogenized(spectral, cfg)
    gaps = []
    for p in (2, 3, 4):
        burst = HmmModel(system, HmmConfig(p=p, eps=system.eps, seed=0))
        trajectories = simulate_homogenized(burst, cfg)
        per_replica = np.max(
            np.abs(trajectories.states - reference.states), axis=(1, 2)
        )
        gaps.append(float(per_replica.mean()))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.05


def test_hmm_model_reuses_state_keyed_bursts():
    system = homogenize_reduced(SpectralSpde(n_modes=2)).problem
    model = HmmModel(system, HmmConfig(p=2, eps=system.eps, seed=0))
    a = model.coefficients([1.2, 1.2])
    b = model.coefficients([1.2, 1.2])
    c = model.coefficients([1.1, 1.2])
    assert np.array_equal(a.drift, b.drift)
    assert not np.array_equal(a.drift, c.drift)
