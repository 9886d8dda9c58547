import numpy as np
import pytest

from hybridbem import rng
from hybridbem.errors import EnsembleFailure, OffGridTime
from hybridbem.markov_chain import sample_chain, transition_matrix, validate_generator
from hybridbem.model import FunctionModel
from hybridbem.simulator import (
    coupled_ensemble,
    ensemble_snapshots,
    grid_steps,
    run_ensemble,
    simulate,
    simulate_coupled,
)

from oracles import bisect_root, cubic_diffusion, cubic_drift


def test_linear_ode_closed_form(linear_ode, one_state):
    traj = simulate(linear_ode, one_state, [2.0], 1, 0.1, 30, seed=0)
    k = np.arange(31)
    np.testing.assert_allclose(traj.states[:, 0], 2.0 / 1.1 ** k, rtol=1e-13)
    assert len(traj.states) == len(traj.chain.states)


def test_brownian_variance(brownian, one_state):
    dt, K = 0.01, 100
    snap = ensemble_snapshots(brownian, one_state, [1.0], 1, dt, [K * dt], 20000, seed=3)[0]
    x = snap.x[:, 0]
    var = x.var(ddof=1)
    se = var * np.sqrt(2 / (len(x) - 1))
    assert abs(var - K * dt) <= 3 * se
    assert abs(x.mean() - 1.0) <= 3 * np.sqrt(K * dt / len(x))


def _oracle_path(x0, r, z, dt, drift_lag):
    x = [x0]
    for k in range(len(z)):
        v = x[k] + cubic_diffusion(x[k], r[k]) * np.sqrt(dt) * z[k]
        i = r[k + 1 - drift_lag]
        x.append(bisect_root(lambda w: w - dt * cubic_drift(w, i), v))
    return np.array(x)


def test_step_order_against_direct_recursion(cubic_model, gen_printed):
    """Regime r_{k+1} in the drift, (X_k, r_k) in the diffusion."""
    dt, K, seed = 0.05, 200, 17
    traj = simulate(cubic_model, gen_printed, [0.5], 1, dt, K, seed)
    r = sample_chain(transition_matrix(gen_printed, dt), 1, K, seed).states
    assert np.count_nonzero(np.diff(r)) >= 5
    z = rng.stream(seed, 0, rng.NOISE).standard_normal(K)
    np.testing.assert_array_equal(traj.chain.states, r)
    np.testing.assert_allclose(traj.states[:, 0], _oracle_path(0.5, r, z, dt, 0), atol=1e-10)
    # using r_k in the drift gives a visibly different path
    assert np.max(np.abs(traj.states[:, 0] - _oracle_path(0.5, r, z, dt, 1))) > 1e-4


def test_chain_matches_sample_chain(cubic_model, gen_printed):
    traj = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 200, seed=99)
    ref = sample_chain(transition_matrix(gen_printed, 0.01), 2, 200, seed=99)
    np.testing.assert_array_equal(traj.chain.states, ref.states)


def test_replay_determinism(cubic_model, gen_printed):
    a = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 300, seed=4)
    b = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 300, seed=4)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.chain.states, b.chain.states)


def test_two_regime_cubic_stays_finite(cubic_model, gen_printed):
    traj = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 10**4, seed=1)
    assert np.all(np.isfinite(traj.states))
    assert np.max(np.abs(traj.states)) < 5


def test_zero_steps(cubic_model, gen_printed):
    traj = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 0, seed=1)
    assert traj.rows() == [(0, 0.0, 0.5, 2)]


def test_step_bound(cubic_model, gen_printed):
    with pytest.raises(ValueError):
        simulate(cubic_model, gen_printed, [0.5], 2, 0.2, 10, seed=1)
    traj = simulate(cubic_model, gen_printed, [0.5], 2, 0.2, 10, seed=1, allow_unstable=True)
    assert np.all(np.isfinite(traj.states))


def test_coupled_identical_inputs(cubic_model, gen_fixed):
    pair = simulate_coupled(cubic_model, gen_fixed, [0.5], 2, [0.5], 2, 0.01, 300, seed=2)
    assert pair.tau == 0
    assert np.all(pair.differences == 0)


def test_coupled_linear_contraction(linear_ode, one_state):
    pair = simulate_coupled(linear_ode, one_state, [1.0], 1, [-2.0], 1, 0.05, 40, seed=0)
    k = np.arange(41)
    np.testing.assert_allclose(np.abs(pair.differences[:, 0]), 3.0 / 1.05 ** k, rtol=1e-12)


def test_coupled_shares_noise_and_merges_chains(cubic_model, gen_fixed):
    pair = simulate_coupled(cubic_model, gen_fixed, [0.5], 2, [-3.0], 1, 0.01, 500, seed=6)
    tau = pair.tau
    assert tau is not None
    np.testing.assert_array_equal(pair.a.chain.states[tau:], pair.b.chain.states[tau:])
    # the first path of a coupled run is the plain run with the same seed
    solo = simulate(cubic_model, gen_fixed, [0.5], 2, 0.01, 500, seed=6)
    np.testing.assert_array_equal(pair.a.states, solo.states)


def test_snapshots_single_path(cubic_model, gen_printed):
    snap = ensemble_snapshots(cubic_model, gen_printed, [0.5], 2, 0.01, [0.5], 1, seed=8)[0]
    traj = simulate(cubic_model, gen_printed, [0.5], 2, 0.01, 50, seed=8)
    assert snap.size == 1
    assert snap.x[0, 0] == traj.states[50, 0]
    assert snap.regimes[0] == traj.chain.states[50]


def test_deterministic_model_atoms_identical(linear_ode, one_state):
    snap = ensemble_snapshots(linear_ode, one_state, [1.0], 1, 0.1, [1.0], 50, seed=0)[0]
    assert np.all(snap.x == snap.x[0])


def test_off_grid_time_rejected(cubic_model, gen_printed):
    with pytest.raises(OffGridTime):
        grid_steps([0.015], 0.01)
    with pytest.raises(OffGridTime):
        ensemble_snapshots(cubic_model, gen_printed, [0.5], 2, 0.01, [0.015], 10, seed=0)
    assert grid_steps([0.05, 0.1, 0.3, 2, 10], 0.01) == [5, 10, 30, 200, 1000]


def test_results_independent_of_chunking_and_workers(cubic_model, gen_fixed):
    kw = dict(times=[0.3, 1.0], paths=37, seed=21)
    a = run_ensemble(cubic_model, gen_fixed, [0.5], 2, 0.01, chunk_size=37, **kw)
    b = run_ensemble(cubic_model, gen_fixed, [0.5], 2, 0.01, chunk_size=5, **kw)
    c = run_ensemble(cubic_model, gen_fixed, [0.5], 2, 0.01, chunk_size=5, workers=2, **kw)
    for sa, sb, sc in zip(a.snapshots, b.snapshots, c.snapshots):
        np.testing.assert_array_equal(sa.x, sb.x)
        np.testing.assert_array_equal(sa.regimes, sb.regimes)
        np.testing.assert_array_equal(sb.x, sc.x)
    np.testing.assert_array_equal(b.second_moment, c.second_moment)


def test_ensemble_paths_match_single_runs(cubic_model, gen_fixed):
    snap = ensemble_snapshots(cubic_model, gen_fixed, [0.5], 2, 0.01, [0.4], 6, seed=13)[0]
    solo = simulate(cubic_model, gen_fixed, [0.5], 2, 0.01, 40, seed=13)
    assert snap.x[0, 0] == solo.states[40, 0]


def test_substeps_share_fine_noise(brownian, one_state):
    # dX = dB: the endpoint is the sum of the fine increments at any coarse dt
    a = ensemble_snapshots(brownian, one_state, [0.0], 1, 0.01, [1.0], 20, seed=5, substeps=4)[0]
    b = ensemble_snapshots(brownian, one_state, [0.0], 1, 0.0025, [1.0], 20, seed=5, substeps=1)[0]
    np.testing.assert_allclose(a.x, b.x, atol=1e-12)


def test_second_moment_series(brownian, one_state):
    res = run_ensemble(brownian, one_state, [0.0], 1, 0.01, [0.5], 4000, seed=1)
    k = np.arange(51)
    assert np.all(np.abs(res.second_moment - 0.01 * k) <= 4 * res.second_moment_se + 1e-15)


def test_ensemble_failure_budget(one_state):
    # the drift is NaN above 0.5, which most unit-noise paths reach within 10 steps
    model = FunctionModel([lambda X: np.where(X > 0.5, np.nan, -X)], [lambda X: np.ones((len(X), 1, 1))])
    with pytest.raises(EnsembleFailure):
        run_ensemble(model, one_state, [0.0], 1, 0.1, [1.0], 200, seed=0)


def test_coupled_ensemble_series(cubic_model, gen_fixed):
    res = coupled_ensemble(cubic_model, gen_fixed, [0.5], 2, [-3.0], 1, 0.01, 300, 500, seed=3, p=0.5)
    assert res.mean_dp[0] == pytest.approx(3.5 ** 0.5)
    assert res.mean_dp[-1] < 0.1 * res.mean_dp[0]
    assert res.p_not_met[0] == 1.0 and res.p_not_met[-1] < res.p_not_met[0]
    assert res.failed == 0


def test_coupled_ensemble_identical_starts(cubic_model, gen_fixed):
    res = coupled_ensemble(cubic_model, gen_fixed, [0.5], 2, [0.5], 2, 0.01, 50, 20, seed=3)
    assert np.all(res.mean_dp == 0)
    assert np.all(res.tau == 0)


def test_two_regime_generator_validation_in_simulator(cubic_model):
    g3 = validate_generator([[-1, 1, 0], [0, -1, 1], [1, 0, -1]])
    # regime labels beyond the model are a configuration mismatch caught by the config layer;
    # the simulator itself only needs i0 in range of the generator
    with pytest.raises(Exception):
        simulate(cubic_model, g3, [0.5], 3, 0.01, 5, seed=0)
