import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcs import sensing, solver, tensor, training


def test_soft_threshold_examples():
    np.testing.assert_array_equal(solver.soft_threshold(np.array([-2.0, -0.5, 0.0, 0.5, 3.0]), 1.0),
                                  [-1.0, 0.0, 0.0, 0.0, 2.0])
    v = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(solver.soft_threshold(v, 0.0), v)
    with pytest.raises(ValueError):
        solver.soft_threshold(v, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 5))
def test_soft_threshold_is_the_l1_prox(v, tau):
    # minimiser of (a - v)^2 + 2 tau |a|
    a = float(solver.soft_threshold(np.array(v), tau))
    grid = np.linspace(a - 1, a + 1, 2001)
    values = (grid - v) ** 2 + 2 * tau * np.abs(grid)
    assert (a - v) ** 2 + 2 * tau * abs(a) <= values.min() + 1e-12


def test_simplified_coefficients_exact():
    assert solver.simplified_coefficients(0.1, 1.0) == pytest.approx((0.8, 0.1, 0.1), abs=1e-15)
    for delta, eta in itertools.product([0.01, 0.1, 0.25, 0.5], [0.0, 0.1, 1.0, 3.0]):
        rho, d, gamma = solver.simplified_coefficients(delta, eta)
        assert rho == 1 - delta * (1 + eta)
        assert gamma == delta * eta
        assert d == delta


def test_dct_basis_is_orthonormal():
    B = solver.dct_basis(8)
    np.testing.assert_allclose(B @ B.T, np.eye(8), atol=1e-14)


@pytest.mark.parametrize("shape", [(8, 8), (13, 21), (64, 64)])
def test_default_bank_is_a_tight_frame(shape):
    bank = solver.dct_analysis_bank()
    assert bank.K == 64 and bank.n == 8 and bank.c == 1.0
    x = np.random.default_rng(0).normal(size=(1, *shape))
    np.testing.assert_allclose(bank.synthesis(bank.analysis(x)), x, rtol=1e-10, atol=1e-12)


def test_synthesis_is_adjoint_of_analysis():
    bank = solver.dct_analysis_bank()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 12, 17))
    a = rng.normal(size=(64, 12, 17))
    assert np.isclose(np.vdot(bank.analysis(x), a), np.vdot(x, bank.synthesis(a)))


def test_dc_band_is_not_thresholded_by_default():
    bank = solver.dct_analysis_bank()
    th = bank.thresholds(0.5)
    assert th[0, 0, 0] == 0 and np.all(th[1:] == 0.5)
    assert np.all(solver.dct_analysis_bank(penalize_dc=True).thresholds(0.5) == 0.5)


def _problem(seed=0, preset="rate0.2", size=24):
    rng = np.random.default_rng(seed)
    bank = sensing.preset_bank(preset, seed)
    x = rng.uniform(size=(1, size, size))
    return x, bank, sensing.sense_image(x, bank)


def test_update_x_with_zero_eta_is_landweber():
    x, bank, y = _problem()
    cfg = solver.SolverConfig(eta=1e-300, delta=0.3)
    xt = sensing.initial_estimate(y, bank)
    alpha = np.random.default_rng(1).normal(size=(64, *xt.shape[1:]))
    expected = xt - 0.3 * sensing.adjoint(
        sensing.MeasurementSet(maps=sensing.sense(xt, bank).maps - y.maps, meta=y.meta), bank)
    np.testing.assert_allclose(solver.update_x(xt, alpha, y, bank, solver.dct_analysis_bank(), cfg), expected,
                               atol=1e-12)


def test_update_x_simplified_is_identity_substitution():
    rng = np.random.default_rng(0)
    for delta, eta in itertools.product([0.05, 0.1, 0.3], [0.1, 1.0, 2.0]):
        cfg = solver.SolverConfig(eta=eta, delta=delta)
        xt, xh, x0 = rng.normal(size=(3, 1, 9, 9))
        # Phi^T Phi -> I and sum_k W_k^T W_k -> I with Phi^T y -> x0, sum_k W_k^T alpha_k -> x_half
        substituted = xt - delta * ((xt - x0) + eta * (xt - xh))
        np.testing.assert_allclose(solver.update_x_simplified(xt, xh, x0, cfg), substituted, rtol=0, atol=1e-12)


def test_simplified_update_fixed_point():
    cfg = solver.SolverConfig(eta=1.0, delta=0.1)
    v = np.random.default_rng(0).normal(size=(1, 5, 5))
    np.testing.assert_allclose(solver.update_x_simplified(v, v, v, cfg), v, atol=1e-15)


def test_objective_with_zero_eta_limit_is_data_term():
    x, bank, y = _problem()
    cfg = solver.SolverConfig(eta=1e-300)
    r = sensing.sense(sensing.pad_for_bank(x, bank.L, bank.stride)[0], bank).maps - y.maps
    xp = sensing.pad_for_bank(x, bank.L, bank.stride)[0]
    alpha = solver.update_alpha(xp, solver.dct_analysis_bank(), cfg)
    assert np.isclose(solver.objective(xp, alpha, y, bank, solver.dct_analysis_bank(), cfg), np.sum(r * r),
                      atol=1e-12)


def test_nonneg_objective_rejects_negative_codes():
    x, bank, y = _problem()
    cfg = solver.SolverConfig(regularizer="nonneg")
    ab = solver.dct_analysis_bank()
    xp = sensing.pad_for_bank(x, bank.L, bank.stride)[0]
    alpha = solver.update_alpha(xp, ab, cfg)
    assert np.all(alpha >= 0)
    solver.objective(xp, alpha, y, bank, ab, cfg)
    with pytest.raises(solver.InfeasibleCodesError):
        solver.objective(xp, alpha - 1.0, y, bank, ab, cfg)


@pytest.mark.parametrize("kw", [dict(eta=0), dict(delta=0), dict(tau=-1), dict(rel_tol=0), dict(max_iters=-1),
                                dict(regularizer="l2"), dict(step_mode="adaptive")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        solver.SolverConfig(**kw)


def test_zero_iterations_return_initial_estimate():
    x, bank, y = _problem()
    out, trace = solver.reconstruct_iterative(y, bank, cfg=solver.SolverConfig(max_iters=0))
    assert trace == []
    np.testing.assert_array_equal(out, sensing.initial_estimate(y, bank))


def test_zero_measurements_give_zero_image():
    bank = sensing.preset_bank("rate0.3", 0)
    y = sensing.sense(np.zeros((1, 21, 21)), bank)
    out, _ = solver.reconstruct_iterative(y, bank)
    assert out.shape == (1, 21, 21) and not np.any(out)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("regularizer", ["l1", "nonneg"])
def test_objective_trace_nonincreasing(seed, regularizer):
    x, bank, y = _problem(seed, size=32)
    cfg = solver.SolverConfig(max_iters=60, regularizer=regularizer)
    _, trace = solver.reconstruct_iterative(y, bank, cfg=cfg)
    obj = np.array([t[1] for t in trace])
    assert np.all(np.diff(obj) <= 1e-12 * obj[:-1])


def test_trace_objective_matches_direct_evaluation():
    x, bank, y = _problem(3)
    ab = solver.dct_analysis_bank()
    cfg = solver.SolverConfig(max_iters=5)
    x5, trace = solver.reconstruct_iterative(y, bank, ab, cfg)
    # the 5th trace entry pairs x5 with the codes computed from x4
    x4, _ = solver.reconstruct_iterative(y, bank, ab, solver.SolverConfig(max_iters=4))
    alpha4 = solver.update_alpha(x4, ab, cfg)
    assert np.isclose(trace[-1][1], solver.objective(x5, alpha4, y, bank, ab, cfg), rtol=1e-9)


def test_backtracking_accepts_largest_non_increasing_step():
    cfg = solver.SolverConfig(delta=1.0)
    assert solver.backtrack(1.0, lambda d: 1.0 + (d - 0.3), cfg) == 0.25
    assert solver.backtrack(1.0, lambda d: 0.0, cfg) == 1.0
    assert solver.backtrack(1.0, lambda d: 2.0, cfg) == 0.0


def test_trace_file(tmp_path):
    x, bank, y = _problem()
    path = tmp_path / "trace.txt"
    _, trace = solver.reconstruct_iterative(y, bank, cfg=solver.SolverConfig(max_iters=3), trace_path=str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration objective relative_change"
    assert len(lines) == 4 and float(lines[-1].split()[1]) == trace[-1][1]


def test_constant_image_recovered_at_rate03():
    bank = sensing.preset_bank("rate0.3", 1)
    x = np.full((1, 64, 64), 0.4)
    y = sensing.sense_image(x, bank)
    out, _ = solver.reconstruct_iterative(y, bank)
    assert training.psnr(x, np.clip(tensor.crop(out, y.meta.pads), 0, 1)) >= 40
