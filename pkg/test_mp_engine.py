import numpy as np
import pytest

from conftest import small_datasets
from core.dc_solver import Injection, solve_sample
from core.mp_engine import (DEFAULT_LAYERS, MpConfig, MpTrajectory, NotConverged, lc_residual, mp_adjoint, mp_forward,
                            mp_opt_solve, mp_solve_batch, phasor_update, update_mask)
from core.neural_core import prepare_dataset
from core.scenario_gen import OOD, TEST

TWO_BUS_Y = np.array([[10.0, -10.0], [-10.0, 10.0]])


def random_system(rng, n=5):
    """Connected weighted Laplacian (ring plus one chord) with balanced injections"""
    Y = np.zeros((n, n))
    edges = [(i, (i + 1) % n) for i in range(n)] + [(0, n // 2)]
    for a, b in edges:
        y = rng.uniform(2.0, 20.0)
        Y[a, a] += y
        Y[b, b] += y
        Y[a, b] -= y
        Y[b, a] -= y
    p = rng.normal(size=n)
    p[0] = -p[1:].sum()
    return Y, p


def test_single_layer_on_two_buses():
    theta = phasor_update(np.zeros(2), np.array([1.0, -1.0]), TWO_BUS_Y, slack=0)
    np.testing.assert_allclose(theta, [0.0, -0.1])
    np.testing.assert_allclose(lc_residual(theta, [1.0, -1.0], TWO_BUS_Y), [0.0, 0.0], atol=1e-12)


def test_single_layer_on_three_bus_path():
    Y = np.array([[5.0, -5.0, 0.0], [-5.0, 9.0, -4.0], [0.0, -4.0, 4.0]])
    theta = phasor_update(np.zeros(3), np.array([1.0, -0.4, -0.6]), Y, omega=1.0, slack=0)
    np.testing.assert_allclose(theta, [0.0, -0.4 / 9, -0.15])


def test_residual_on_two_buses():
    Y = np.array([[2.0, -2.0], [-2.0, 2.0]])
    np.testing.assert_allclose(lc_residual([0.0, -0.25], [1.0, -1.0], Y), [0.5, -0.5])


def test_damping_blends_previous_state():
    theta = phasor_update(np.array([0.0, 0.2]), np.array([1.0, -1.0]), TWO_BUS_Y, omega=0.5, slack=0)
    np.testing.assert_allclose(theta, [0.0, 0.5 * 0.2 + 0.5 * -0.1])


def test_update_mask_skips_slack_and_empty_slots():
    Y = np.zeros((4, 4))
    Y[:2, :2] = TWO_BUS_Y
    assert update_mask(Y, 0).tolist() == [False, True, False, False]


def test_mp_opt_matches_direct_solve(ieee14):
    tau = ieee14.default_topology().with_disconnected([5])
    bg, Y, p, solution, _ = solve_sample(ieee14, tau, Injection.nominal(ieee14))
    theta, trajectory = mp_opt_solve(bg, p, MpConfig(tol=1e-9))
    assert trajectory.converged
    assert np.max(np.abs(theta - solution.theta)) < 1e-6
    assert trajectory.max_residual[-1] < 1e-9
    assert theta[bg.slack_bus] == 0.0


def test_mp_opt_not_converged_carries_state(ieee14):
    bg, Y, p, _, _ = solve_sample(ieee14, ieee14.default_topology(), Injection.nominal(ieee14))
    with pytest.raises(NotConverged) as info:
        mp_opt_solve(bg, p, MpConfig(n_layers=2), Y)
    assert info.value.trajectory.n_layers == 2
    assert info.value.residual > 1e-6
    assert info.value.theta.shape == (bg.n_buses,)


def test_flat_start_forward_matches_mp_opt_at_equal_depth(ieee14):
    tau = ieee14.default_topology().with_disconnected([2])
    bg, Y, p, _, _ = solve_sample(ieee14, tau, Injection.nominal(ieee14))
    theta_opt, trajectory = mp_opt_solve(bg, p, MpConfig(tol=1e-7), Y)
    theta_fwd, _ = mp_forward(np.zeros(bg.n_buses), p, Y, 1.0, trajectory.n_layers, slack=bg.slack_bus,
                              keep_states=False)
    np.testing.assert_array_equal(theta_fwd, theta_opt)


def test_default_budget_converges_on_ieee14(ieee14, ieee14_datasets):
    for split in (TEST, OOD):
        for sample in ieee14_datasets[split].samples:
            bg, Y, p, solution, _ = solve_sample(ieee14, sample.tau, sample.inj)
            theta, trajectory = mp_opt_solve(bg, p, MpConfig(), Y)
            assert trajectory.n_layers <= DEFAULT_LAYERS
            assert np.max(np.abs(theta - solution.theta)) < 1e-4


@pytest.mark.slow
def test_mp_opt_agrees_with_direct_solve_on_1k_samples(ieee14):
    data = prepare_dataset(ieee14, small_datasets(ieee14, {TEST: 1_000}, seed=3)[TEST])
    result = mp_solve_batch(data.Y, data.p, data.slack_slot, 4 * DEFAULT_LAYERS, tol=1e-10)
    assert result.converged.all()
    assert np.max(np.abs(result.theta - data.theta_bus)) < 1e-6
    layers_to_tol = np.argmax(result.per_sample_max < 1e-6, axis=0) + 1
    # Jacobi needs more layers than the roughly 100 quoted for the learned solver
    assert 20 <= np.median(layers_to_tol) <= 1000
    assert layers_to_tol.max() <= DEFAULT_LAYERS


def test_mp_config_validation():
    with pytest.raises(ValueError):
        MpConfig(damping=0.0)
    with pytest.raises(ValueError):
        MpConfig(n_layers=0)
    with pytest.raises(ValueError):
        MpConfig(tol=-1.0)


def test_forward_with_zero_layers_pins_slack():
    theta0 = np.array([0.3, 0.2, 0.1])
    theta, cache = mp_forward(theta0, np.zeros(3), np.eye(3), n_layers=0, slack=0)
    np.testing.assert_allclose(theta, [0.0, 0.2, 0.1])
    assert len(cache.states) == 1


def test_forward_broadcasts_over_samples():
    rng = np.random.default_rng(4)
    systems = [random_system(rng) for _ in range(3)]
    Y = np.stack([s[0] for s in systems])
    p = np.stack([s[1] for s in systems])
    theta0 = rng.normal(size=p.shape)
    batched, _ = mp_forward(theta0, p, Y, 0.9, 4, slack=np.zeros(3, dtype=int))
    for i in range(3):
        single, _ = mp_forward(theta0[i], p[i], Y[i], 0.9, 4, slack=0)
        np.testing.assert_allclose(batched[i], single)


@pytest.mark.parametrize("depth", [1, 3, 10])
@pytest.mark.parametrize("omega", [1.0, 0.7])
def test_adjoint_matches_finite_differences(depth, omega):
    rng = np.random.default_rng(depth)
    for _ in range(5):
        Y, p = random_system(rng)
        theta0 = rng.normal(size=5)
        direction = rng.normal(size=5)
        weights = rng.normal(size=5)

        def objective(t0):
            theta, _ = mp_forward(t0, p, Y, omega, depth, slack=0)
            return weights @ theta

        _, cache = mp_forward(theta0, p, Y, omega, depth, slack=0)
        analytic = mp_adjoint(weights, cache) @ direction
        eps = 1e-6
        numeric = (objective(theta0 + eps * direction) - objective(theta0 - eps * direction)) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-5 * max(abs(numeric), abs(analytic), 1e-8)


def test_adjoint_accumulates_layer_gradients():
    rng = np.random.default_rng(11)
    Y, p = random_system(rng)
    depth = 3
    theta0 = rng.normal(size=5)
    direction = rng.normal(size=5)
    layer_weights = rng.normal(size=(depth + 1, 5))

    def objective(t0):
        _, cache = mp_forward(t0, p, Y, 0.8, depth, slack=0)
        return sum(w @ s for w, s in zip(layer_weights, cache.states))

    _, cache = mp_forward(theta0, p, Y, 0.8, depth, slack=0)
    analytic = mp_adjoint(np.zeros(5), cache, list(layer_weights)) @ direction
    eps = 1e-6
    numeric = (objective(theta0 + eps * direction) - objective(theta0 - eps * direction)) / (2 * eps)
    assert analytic == pytest.approx(numeric, rel=1e-5, abs=1e-9)


def test_batch_solve_records_per_sample_residuals():
    rng = np.random.default_rng(2)
    systems = [random_system(rng) for _ in range(4)]
    Y = np.stack([s[0] for s in systems])
    p = np.stack([s[1] for s in systems])
    result = mp_solve_batch(Y, p, np.zeros(4, dtype=int), n_layers=7)
    assert result.per_sample_max.shape == (7, 4)
    assert result.per_sample_mean.shape == (7, 4)
    assert result.trajectory.n_layers == 7
    np.testing.assert_allclose(result.trajectory.max_residual, result.per_sample_max.max(axis=1))
    assert not result.trajectory.converged


def test_batch_solve_stops_at_tolerance():
    rng = np.random.default_rng(3)
    Y, p = random_system(rng)
    result = mp_solve_batch(Y[None], p[None], np.array([0]), n_layers=20000, tol=1e-10)
    assert result.converged.all()
    assert result.trajectory.converged
    assert result.trajectory.n_layers < 20000


def test_batch_solve_freezes_converged_samples():
    rng = np.random.default_rng(5)
    systems = [random_system(rng) for _ in range(3)]
    Y = np.stack([s[0] for s in systems])
    p = np.stack([s[1] for s in systems])
    p[1] *= 1e-6
    result = mp_solve_batch(Y, p, np.zeros(3, dtype=int), n_layers=20000, tol=1e-10)
    assert result.converged.all()
    stops = []
    for i in range(3):
        single = mp_solve_batch(Y[i:i + 1], p[i:i + 1], np.array([0]), n_layers=20000, tol=1e-10)
        np.testing.assert_allclose(result.theta[i], single.theta[0], rtol=1e-12, atol=1e-15)
        stop = single.trajectory.n_layers
        stops.append(stop)
        assert np.all(result.per_sample_max[stop - 1:, i] == result.per_sample_max[stop - 1, i])
    assert result.trajectory.n_layers == max(stops)
    assert min(stops) < max(stops)


def test_trajectory_frame_log_column():
    trajectory = MpTrajectory()
    for value in (1.0, 1e-3, 1e-7):
        trajectory.record(np.array([value, value / 2]))
    frame = trajectory.to_frame()
    assert len(frame) == 3
    assert frame["layer"].tolist() == [1, 2, 3]
    np.testing.assert_allclose(frame["log10_max_residual"], np.log10(frame["max_residual"]), atol=1e-12)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
