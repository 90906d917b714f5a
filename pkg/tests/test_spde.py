"""Tests for the spectral reduction of the periodic SPDE."""

import math

import numpy as np
import pytest

from fastslow.errors import DimensionError, NumericError, UsageError
from fastslow.hermite import hermite_values_1d, multi_indices
from fastslow.quadrature import gauss_hermite
from fastslow.sde import IntegratorConfig
from fastslow.spde import (
    ReducedSpectralModel,
    SpectralSpde,
    eigenpair,
    homogenize_reduced,
    simulate_reduced,
)

from oracles import central_diff

SQRT_PI = math.sqrt(math.pi)


# ---------------------------------------------------------------- eigenpairs


def test_eigenpair_kernel_and_first_fast_modes():
    theta = np.array([-2.1, -0.3, 0.0, 0.7, 2.9])
    lam1, e1 = eigenpair(1)
    lam2, e2 = eigenpair(2)
    lam3, e3 = eigenpair(3)
    lam4, e4 = eigenpair(4)
    assert lam1 == 0.0 and lam2 == 0.0
    assert lam3 == -3.0 and lam4 == -3.0
    assert np.allclose(e1(theta), np.sin(theta) / SQRT_PI, atol=1e-15)
    assert np.allclose(e2(theta), np.cos(theta) / SQRT_PI, atol=1e-15)
    assert np.allclose(e3(theta), np.sin(2 * theta) / SQRT_PI, atol=1e-15)
    assert np.allclose(e4(theta), np.cos(2 * theta) / SQRT_PI, atol=1e-15)


def test_eigenpair_rejects_nonpositive_index():
    with pytest.raises(UsageError):
        eigenpair(0)
    with pytest.raises(UsageError):
        eigenpair(-3)


def test_mode_table_orthonormal_on_grid():
    # uniform periodic grid integrates products of two modes exactly
    s = SpectralSpde(n_modes=5)
    gram = s.weight * (s.mode_values.T @ s.mode_values)
    assert np.allclose(gram, np.eye(s.total_modes), atol=1e-12)


# --------------------------------------------------------------- projection


def test_projection_matches_integration_by_parts_oracle():
    # the quartic drift is a total derivative: int 2 u^3 u' e_i equals
    # -int (u^4/2) e_i'; evaluate the right side on an independent dense
    # grid with finite-difference mode derivatives
    s = SpectralSpde(n_modes=3)
    rng = np.random.default_rng(5)
    c = rng.uniform(-1.0, 1.0, s.total_modes)
    a, b = s.project_nonlinearity(c)
    assert a.shape == (2,) and b.shape == (3,)

    M = 4096
    theta = -np.pi + 2.0 * np.pi * np.arange(M) / M
    modes = [eigenpair(i)[1] for i in range(1, s.total_modes + 1)]
    u = sum(ci * e(theta) for ci, e in zip(c, modes))
    h = 1e-6
    proj = np.array(
        [-np.mean(0.5 * u**4 * (e(theta + h) - e(theta - h)) / (2 * h)) * 2 * np.pi
         for e in modes]
    )
    assert np.allclose(np.concatenate([a, b]), proj, atol=1e-8)


def test_projection_zero_field_is_zero():
    s = SpectralSpde(n_modes=4)
    a, b = s.project_nonlinearity(np.zeros(s.total_modes))
    assert np.all(a == 0.0) and np.all(b == 0.0)


def test_projection_pure_sine_hand_values():
    # u = sin(theta) gives 2 u^3 u' = 2 sin^3 cos = sin(2t)/2 - sin(4t)/4,
    # so the kernel picks up nothing and only the sin(2t) and sin(4t)
    # fast modes (indices 3 and 7) carry weight
    s = SpectralSpde(n_modes=6)
    c = np.zeros(s.total_modes)
    c[0] = SQRT_PI  # coefficient times sin/sqrt(pi) = sin
    a, b = s.project_nonlinearity(c)
    expected_b = np.array([SQRT_PI / 2, 0.0, 0.0, 0.0, -SQRT_PI / 4, 0.0])
    assert np.allclose(a, 0.0, atol=1e-12)
    assert np.allclose(b, expected_b, atol=1e-12)


def test_field_values_single_mode():
    s = SpectralSpde(n_modes=2)
    c = np.zeros(s.total_modes)
    c[1] = 2.0
    u = s.field_values(c)
    assert np.allclose(u, 2.0 * np.cos(s.theta) / SQRT_PI, atol=1e-14)


# --------------------------------------------------------------- validation


def test_constructor_validation():
    with pytest.raises(UsageError):
        SpectralSpde(n_modes=0)
    with pytest.raises(UsageError):
        SpectralSpde(n_modes=2, eps=0.0)
    with pytest.raises(DimensionError):
        SpectralSpde(n_modes=3, q=[1.0, 1.0])
    with pytest.raises(UsageError):
        SpectralSpde(n_modes=2, q=[1.0, 0.0])
    with pytest.raises(UsageError):
        SpectralSpde(n_modes=2, grid_size=31)  # below the alias-free minimum


def test_projection_rejects_wrong_length():
    s = SpectralSpde(n_modes=2)
    with pytest.raises(DimensionError):
        s.project_nonlinearity(np.zeros(3))
    with pytest.raises(DimensionError):
        s.field_values(np.zeros(5))


# ---------------------------------------------------------- reduced system


def test_reduce_system_layout():
    q = np.array([1.0, 0.5, 2.0])
    s = SpectralSpde(n_modes=3, q=q, eps=0.2, x0=(0.4, -0.1))
    sys = s.reduce()
    assert sys.m == 2 and sys.n == 3
    assert sys.name == "spde"
    assert len(sys.f) == 2
    assert len(sys.grad_f) == 2 and all(len(row) == 2 for row in sys.grad_f)
    assert sys.alpha is None
    assert sys.ou_noise == tuple(q)
    rates = np.asarray(sys.ou_rates)
    assert np.allclose(np.asarray(sys.variances), q**2 / (2 * rates), atol=1e-15)
    assert np.array_equal(sys.start_state(), [0.4, -0.1])


def test_single_mode_rate_and_variance():
    # first fast mode is sin(2 theta): eigenvalue 1 - 4 = -3
    s = SpectralSpde(n_modes=1)
    assert s.rates.tolist() == [3.0]
    assert np.allclose(s.variances, [1.0 / 6.0], atol=1e-16)


def test_fast_rate_coefficients_scale_with_eps():
    a = SpectralSpde(n_modes=2, eps=0.1).reduce()
    b = SpectralSpde(n_modes=2, eps=0.2).reduce()
    ratio = b.fast_rate_coefficients / a.fast_rate_coefficients
    assert np.allclose(ratio, 0.25, atol=1e-14)


def test_slow_drift_adapters_match_projection():
    s = SpectralSpde(n_modes=3)
    sys = s.reduce()
    rng = np.random.default_rng(11)
    x = np.array([0.7, -0.4])
    y = rng.normal(size=3) * 0.3
    a, _ = s.project_nonlinearity(np.concatenate([x, y]))
    for i in range(2):
        val = sys.f[i].evaluate(x, y)
        assert isinstance(val, float)
        assert abs(val - a[i]) < 1e-13
    # batched evaluation returns one value per sample row
    batch = rng.normal(size=(6, 3)) * 0.3
    vals = sys.f[0].evaluate(x, batch)
    assert vals.shape == (6,)
    direct = [s.project_nonlinearity(np.concatenate([x, row]))[0][0] for row in batch]
    assert np.allclose(vals, direct, atol=1e-13)


def test_gradient_adapters_match_finite_differences():
    s = SpectralSpde(n_modes=2)
    sys = s.reduce()
    rng = np.random.default_rng(13)
    y = rng.normal(size=2) * 0.4
    x = np.array([0.7, -0.4])
    for i in range(2):
        for j in range(2):
            fd = central_diff(lambda xv: sys.f[i].evaluate(xv, y), x, j)
            assert abs(sys.grad_f[i][j].evaluate(x, y) - fd) < 1e-6


def test_invariant_average_of_slow_drift_vanishes():
    # the kernel projection of a total theta-derivative averages to zero
    # against the product Gaussian invariant measure of the fast modes
    s = SpectralSpde(n_modes=2)
    sys = s.reduce()
    nodes, weights = gauss_hermite(12)
    root_v = np.sqrt(np.asarray(s.variances))
    g1, g2 = np.meshgrid(nodes, nodes, indexing="ij")
    Y = np.column_stack([root_v[0] * g1.ravel(), root_v[1] * g2.ravel()])
    W = np.outer(weights, weights).ravel()
    for x in (np.array([1.2, 0.3]), np.array([-0.8, 0.9])):
        for i in range(2):
            mean = W @ sys.f[i].evaluate(x, Y)
            assert abs(mean) < 1e-10


# ------------------------------------------------------------- homogenizer


def test_degree_must_cover_quartic():
    s = SpectralSpde(n_modes=2)
    with pytest.raises(UsageError):
        ReducedSpectralModel(s, degree=3)


def test_basis_size_counts_multi_indices():
    s = SpectralSpde(n_modes=2)
    m = homogenize_reduced(s)
    assert m.basis_size == len(multi_indices(2, 4)) == 15
    assert m.include_coupling_term is False
    assert m.degree == 4


def test_hermite_rhs_reconstructs_projection():
    # summing coefficients against the Hermite product basis must give back
    # the pointwise projections for every output component
    s = SpectralSpde(n_modes=3)
    m = homogenize_reduced(s)
    x = np.array([0.9, -0.6])
    coeffs, _ = m._hermite_rhs(x)
    rng = np.random.default_rng(17)
    root_v = np.sqrt(np.asarray(s.variances))
    alphas = np.asarray(m._alphas)
    for _ in range(4):
        y = rng.normal(size=3) * root_v
        tabs = [hermite_values_1d(4, np.array([y[d] / root_v[d]]))[0] for d in range(3)]
        basis = np.ones(len(alphas))
        for d in range(3):
            basis *= tabs[d][alphas[:, d]]
        recon = basis @ coeffs
        a, b = s.project_nonlinearity(np.concatenate([x, y]))
        direct = np.concatenate([a, b])
        assert np.allclose(recon, direct, rtol=1e-12, atol=1e-13)


def test_slow_coefficients_are_centered():
    # constant-mode Hermite coefficient of the slow outputs vanishes; this
    # is the solvability condition the cell problem needs
    s = SpectralSpde(n_modes=4)
    m = homogenize_reduced(s)
    rng = np.random.default_rng(23)
    for _ in range(5):
        x = rng.uniform(-1.5, 1.5, size=2)
        coeffs, _ = m._hermite_rhs(x)
        scale = max(np.max(np.abs(coeffs[:, :2])), 1e-300)
        assert np.max(np.abs(coeffs[0, :2])) < 1e-10 * scale


def test_degree_four_is_exact():
    # the data is a quartic polynomial, so degree 4 and degree 6 cell
    # solutions agree to rounding
    s = SpectralSpde(n_modes=4)
    m4 = homogenize_reduced(s, degree=4)
    m6 = homogenize_reduced(s, degree=6)
    for x in (np.array([1.2, 1.2]), np.array([-0.5, 0.8])):
        c4 = m4.coefficients(x)
        c6 = m6.coefficients(x)
        assert np.allclose(c4.drift, c6.drift, atol=1e-12)
        assert np.allclose(c4.diffusion, c6.diffusion, atol=1e-12)


def test_reference_coefficients_regression():
    # regression pins; the values are validated independently by the
    # projection, reconstruction, and gradient tests above
    x = np.array([1.2, 1.2])
    c4 = homogenize_reduced(SpectralSpde(n_modes=4)).coefficients(x)
    assert np.allclose(c4.drift, [0.02790755099887076] * 2, rtol=1e-9)
    expect_d4 = np.array(
        [
            [0.09316265797209479, -0.04496086142379833],
            [-0.04496086142379833, 0.09316265797209479],
        ]
    )
    assert np.allclose(c4.diffusion, expect_d4, rtol=1e-9)
    c8 = homogenize_reduced(SpectralSpde(n_modes=8)).coefficients(x)
    assert np.allclose(c8.drift, [0.0322459694310647] * 2, rtol=1e-9)
    expect_d8 = np.array(
        [
            [0.10403408234541042, -0.04786835678065806],
            [-0.04786835678065806, 0.10403408234541042],
        ]
    )
    assert np.allclose(c8.diffusion, expect_d8, rtol=1e-9)
    # the nonlinearity treats the two kernel directions symmetrically at
    # equal slow components
    assert abs(c8.drift[0] - c8.drift[1]) < 1e-13
    assert abs(c8.diffusion[0, 1] - c8.diffusion[1, 0]) < 1e-15


def test_truncation_error_decreases_with_modes():
    x = np.array([1.2, 1.2])
    ref = homogenize_reduced(SpectralSpde(n_modes=8)).coefficients(x)
    errs = []
    for n in (2, 4, 6):
        c = homogenize_reduced(SpectralSpde(n_modes=n)).coefficients(x)
        errs.append(
            np.linalg.norm(c.drift - ref.drift)
            + np.linalg.norm(c.diffusion - ref.diffusion)
        )
    # measured 4.94e-2, 2.21e-2, 8.32e-3
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.25 * errs[0]


def test_coupling_term_shifts_drift_only():
    x = np.array([1.2, 1.2])
    s = SpectralSpde(n_modes=8)
    plain = homogenize_reduced(s).coefficients(x)
    coupled = homogenize_reduced(s, include_coupling_term=True).coefficients(x)
    assert np.allclose(coupled.drift, [-0.20202791478949544] * 2, rtol=1e-9)
    assert np.linalg.norm(coupled.drift - plain.drift) > 0.1
    assert np.array_equal(coupled.diffusion, plain.diffusion)


def test_factor_residual_tracking():
    s = SpectralSpde(n_modes=4)
    m = homogenize_reduced(s)
    assert m.max_factor_residual == 0.0
    c = m.coefficients(np.array([1.2, 1.2]))
    seen = m.max_factor_residual
    assert seen == c.factor_residual()
    m.coefficients(np.array([0.3, -0.9]))
    assert m.max_factor_residual >= seen
    assert m.max_factor_residual <= 1e-12 * max(np.linalg.norm(c.diffusion), 1.0)


# ----------------------------------------------------------- direct solver


def test_simulate_reduced_guards():
    sys = SpectralSpde(n_modes=1).reduce()
    cfg = IntegratorConfig(dt=0.05, horizon=0.1, replicas=2, seed=1)
    with pytest.raises(UsageError):
        simulate_reduced(sys, cfg, micro_dt=0.002)  # coarser than eps^2/10
    with pytest.raises(UsageError):
        simulate_reduced(sys, cfg, micro_dt=0.0003)  # does not divide dt


def test_simulate_reduced_reproducible():
    sys = SpectralSpde(n_modes=1).reduce()
    cfg = IntegratorConfig(dt=0.05, horizon=0.1, replicas=3, seed=9)
    one = simulate_reduced(sys, cfg, micro_dt=1e-3)
    two = simulate_reduced(sys, cfg, micro_dt=1e-3)
    assert np.array_equal(one.states, two.states)
    assert one.states.shape == (3, 3, 2)
    assert one.meta["terminal_fast"].shape == (3, 1)
    assert np.allclose(one.times, [0.0, 0.05, 0.1], atol=1e-15)
    assert one.meta["problem"] == "spde"


def test_simulate_reduced_fast_mode_reaches_invariant_variance():
    # horizon 0.3 is about 180 fast relaxation times at rate 3/eps^2
    sys = SpectralSpde(n_modes=1).reduce()
    cfg = IntegratorConfig(dt=0.05, horizon=0.3, replicas=200, seed=3)
    out = simulate_reduced(sys, cfg, micro_dt=1e-4)
    assert np.all(np.isfinite(out.states))
    var = np.var(out.meta["terminal_fast"][:, 0])
    target = 1.0 / 6.0
    band = 3.0 * math.sqrt(2.0 / 200) * target
    assert abs(var - target) < band
