import numpy as np
import pytest

from gridvolt.dynamics import (
    CostParams,
    DivergenceError,
    GridState,
    ScenarioConfig,
    dist_to_band,
    load_env_trace_csv,
    load_scenarios,
    make_suite,
    recovery_time,
    rollout,
    rollout_trace,
    sample_scenario,
    save_scenarios,
    stage_cost,
    step,
)

BOUNDS1 = (np.array([0.95]), np.array([1.05]))
BOUNDS2 = (np.array([0.95, 0.95]), np.array([1.05, 1.05]))
CP = CostParams()


def test_step_zero_action_is_identity():
    X = np.array([[0.1]])
    s = GridState.from_env(X, np.array([1.02]))
    s2 = step(s, np.zeros(1), 0.1, X)
    np.testing.assert_array_equal(s2.q, s.q)
    np.testing.assert_array_equal(s2.v, s.v)


def test_step_hand_example():
    X = np.array([[0.1]])
    s = GridState.from_env(X, np.array([1.06]))
    s2 = step(s, np.array([-0.5]), 0.1, X)
    assert s2.q[0] == pytest.approx(-0.05)
    assert s2.v[0] == pytest.approx(1.055)
    assert s2.v_env[0] == 1.06


def test_step_roundtrip_linearity():
    X = np.array([[0.1, 0.05], [0.05, 0.2]])
    rng = np.random.default_rng(0)
    s = GridState.from_env(X, rng.uniform(0.9, 1.1, 2), rng.normal(size=2))
    u = rng.normal(size=2)
    fwd = step(s, u, 0.1, X)
    back = step(fwd, -u, 0.1, X)
    np.testing.assert_array_equal(back.q, s.q)


def test_step_affine_in_action():
    X = np.array([[0.2, 0.1], [0.1, 0.3]])
    s = GridState.from_env(X, np.array([1.0, 1.0]))
    u1, u2 = np.array([0.3, -0.2]), np.array([-0.1, 0.4])
    a, b = 0.7, -1.3
    mix = step(s, a * u1 + b * u2, 0.1, X)
    q_mix = s.q + a * (step(s, u1, 0.1, X).q - s.q) \
        + b * (step(s, u2, 0.1, X).q - s.q)
    np.testing.assert_allclose(mix.q, q_mix, atol=1e-15)


def test_step_nonfinite_action_diagnosed():
    X = np.array([[0.1]])
    s = GridState.from_env(X, np.array([1.0]))
    with pytest.raises(DivergenceError):
        step(s, np.array([np.nan]), 0.1, X)


def test_v_env_conserved_over_long_rollout():
    X = np.array([[0.1, 0.05], [0.05, 0.2]])
    rng = np.random.default_rng(1)
    s = GridState.from_env(X, np.array([1.07, 0.93]))
    for _ in range(1000):
        s = step(s, rng.normal(scale=0.1, size=2), 0.1, X)
        np.testing.assert_allclose(s.v - X @ s.q, s.v_env, atol=1e-12)


# ---------------------------------------------------------------------------
# costs and distances
# ---------------------------------------------------------------------------

def test_stage_cost_zero_in_band():
    assert stage_cost(np.array([1.0]), np.zeros(1), BOUNDS1, CP) == 0.0


def test_stage_cost_deviation_term():
    c = stage_cost(np.array([1.06]), np.zeros(1), BOUNDS1, CP)
    assert c == pytest.approx(100 * 0.01 ** 2)


def test_stage_cost_action_term():
    c = stage_cost(np.array([1.0]), np.array([0.2]), BOUNDS1, CP)
    assert c == pytest.approx(50 * 0.04)


def test_stage_cost_nonnegative_and_zero_iff():
    rng = np.random.default_rng(2)
    for _ in range(200):
        v = rng.uniform(0.85, 1.15, 2)
        u = rng.normal(scale=0.5, size=2)
        c = stage_cost(v, u, BOUNDS2, CP)
        assert c >= 0.0
        if c == 0.0:
            assert dist_to_band(v, BOUNDS2) == 0.0
            assert np.all(u == 0.0)


def test_dist_to_band_examples():
    assert dist_to_band(np.array([1.0, 1.02]), BOUNDS2) == 0.0
    assert dist_to_band(np.array([1.06, 1.00]), BOUNDS2) == pytest.approx(0.01)
    got = dist_to_band(np.array([1.07, 0.93]), BOUNDS2)
    assert got == pytest.approx(np.hypot(0.02, 0.02))


def test_cost_params_validation():
    with pytest.raises(ValueError):
        CostParams(eta1=0.0, eta2=0.0)
    with pytest.raises(ValueError):
        CostParams(gamma=0.0)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def test_high_scenario_violates_upper():
    cfg = ScenarioConfig(kind="high", n=4)
    rng = np.random.default_rng(3)
    for _ in range(50):
        v_env, q0 = sample_scenario(cfg, rng)
        assert np.any(v_env > 1.05)
        np.testing.assert_array_equal(q0, 0.0)


def test_low_scenario_violates_lower():
    cfg = ScenarioConfig(kind="low", n=4)
    rng = np.random.default_rng(4)
    for _ in range(50):
        v_env, _ = sample_scenario(cfg, rng)
        assert np.any(v_env < 0.95)


def test_scenario_deterministic_under_seed():
    cfg = ScenarioConfig(kind="mixed", n=5)
    a, _ = sample_scenario(cfg, np.random.default_rng(9))
    b, _ = sample_scenario(cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_mixed_scenarios_cover_both_sides():
    cfg = ScenarioConfig(kind="mixed", n=4)
    rng = np.random.default_rng(5)
    over = under = 0
    for _ in range(1000):
        v_env, _ = sample_scenario(cfg, rng)
        over += int(np.any(v_env > 1.05))
        under += int(np.any(v_env < 0.95))
    assert over == 1000
    assert under == 1000


def test_scenario_json_roundtrip(tmp_path):
    suite = make_suite(n=4, count=6, seed=0)
    path = tmp_path / "suite.json"
    save_scenarios(suite, path)
    loaded = load_scenarios(path)
    assert len(loaded) == 6
    for (v1, q1, l1), (v2, q2, l2) in zip(suite, loaded):
        np.testing.assert_array_equal(v1, v2)
        np.testing.assert_array_equal(q1, q2)
        assert l1 == l2


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def zero_policy(v):
    return np.zeros_like(v)


def test_rollout_zero_policy_constant_voltage():
    X = np.array([[0.1, 0.05], [0.05, 0.2]])
    v_env = np.array([1.07, 1.01])
    traj = rollout(zero_policy, X, v_env, np.zeros(2), T=20, dt=0.1,
                   cp=CP, bounds=BOUNDS2)
    assert traj.horizon == 20
    for v in traj.v:
        np.testing.assert_array_equal(v, v_env)


def test_rollout_in_band_start_zero_cost():
    X = np.array([[0.1]])

    def deadband(v):
        return -np.maximum(v - 1.05, 0) + np.maximum(0.95 - v, 0)

    traj = rollout(deadband, X, np.array([1.0]), np.zeros(1), T=30, dt=0.1,
                   cp=CP, bounds=BOUNDS1)
    assert traj.discounted_cost == 0.0
    np.testing.assert_array_equal(traj.u, 0.0)


def test_rollout_matches_scalar_recursion():
    # single bus, linear deadband: gap contracts by (1 - dt*X) while above band
    X = np.array([[0.1]])
    dt = 0.1

    def deadband(v):
        return -np.maximum(v - 1.05, 0) + np.maximum(0.95 - v, 0)

    traj = rollout(deadband, X, np.array([1.09]), np.zeros(1), T=50, dt=dt,
                   cp=CP, bounds=BOUNDS1)
    gap = 0.04
    for t in range(51):
        assert traj.v[t, 0] - 1.05 == pytest.approx(gap, abs=1e-9)
        gap *= (1 - dt * 0.1)


def test_rollout_diverges_and_flags():
    X = np.array([[0.1]])

    def runaway(v):
        return 100.0 * (v - 1.0)  # positive feedback

    traj = rollout(runaway, X, np.array([1.06]), np.zeros(1), T=500, dt=0.1,
                   cp=CP, bounds=BOUNDS1)
    assert traj.diverged
    assert traj.horizon < 500
    assert recovery_time(traj, BOUNDS1) is None


def test_rollout_discount_accumulation():
    X = np.array([[0.1]])
    traj = rollout(zero_policy, X, np.array([1.06]), np.zeros(1), T=3, dt=0.1,
                   cp=CP, bounds=BOUNDS1)
    c = 100 * 0.01 ** 2
    expect = c * (1 + 0.99 + 0.99 ** 2)
    assert traj.discounted_cost == pytest.approx(expect)


# ---------------------------------------------------------------------------
# recovery time
# ---------------------------------------------------------------------------

def synth_traj(v_values):
    from gridvolt.dynamics import Trajectory
    v = np.asarray(v_values, dtype=float).reshape(-1, 1)
    T = len(v) - 1
    return Trajectory(t=np.arange(T + 1) * 0.1, v=v, q=np.zeros_like(v),
                      u=np.zeros((T, 1)), stage_costs=np.zeros(T), dt=0.1,
                      discounted_cost=0.0)


def test_recovery_in_band_from_start():
    traj = synth_traj([1.0] * 10)
    assert recovery_time(traj, BOUNDS1) == 0


def test_recovery_never():
    traj = synth_traj([1.2] * 10)
    assert recovery_time(traj, BOUNDS1) is None


def test_recovery_enters_at_seven():
    vals = [1.08] * 7 + [1.0] * 5
    traj = synth_traj(vals)
    assert recovery_time(traj, BOUNDS1) == 7


def test_recovery_requires_persistence():
    vals = [1.08] * 3 + [1.0] * 3 + [1.08] * 2 + [1.0] * 4
    traj = synth_traj(vals)
    assert recovery_time(traj, BOUNDS1) == 8


def test_recovery_tolerance():
    vals = [1.08] * 4 + [1.0505] * 6  # within 1e-3 of the band edge
    traj = synth_traj(vals)
    assert recovery_time(traj, BOUNDS1, tol=1e-3) == 4
    assert recovery_time(traj, BOUNDS1, tol=1e-4) is None


# ---------------------------------------------------------------------------
# trace replay
# ---------------------------------------------------------------------------

def test_env_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text(
        "t,bus_id,v_env\n"
        "0,1,1.06\n0,2,1.00\n"
        "1,1,1.07\n"
        "2,2,0.94\n"
    )
    times, series = load_env_trace_csv(path, n=2)
    np.testing.assert_array_equal(times, [0.0, 1.0, 2.0])
    np.testing.assert_allclose(series,
                               [[1.06, 1.00], [1.07, 1.00], [1.07, 0.94]])


def test_rollout_trace_follows_disturbance(tmp_path):
    X = np.array([[0.1, 0.05], [0.05, 0.2]])
    series = np.array([[1.06, 1.0], [1.0, 1.0], [1.0, 0.93]])
    traj = rollout_trace(zero_policy, X, series, np.zeros(2), dt=0.1,
                         cp=CP, bounds=BOUNDS2)
    np.testing.assert_array_equal(traj.v, series)
