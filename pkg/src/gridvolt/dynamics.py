"""Closed-loop voltage dynamics: integrator, costs, scenarios, rollouts."""

import csv
import json
from dataclasses import dataclass

import numpy as np

DEFAULT_DT = 0.1
BLOWUP_BOUND = 10.0


class DivergenceError(RuntimeError):
    """Raised when the integrator is driven by non-finite inputs."""


@dataclass(frozen=True)
class CostParams:
    """Stage-cost weights: deviation weight, action weight, per-step discount."""

    eta1: float = 100.0
    eta2: float = 50.0
    gamma: float = 0.99

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0 or (self.eta1 == 0 and self.eta2 == 0):
            raise ValueError("eta1, eta2 must be nonnegative and not both zero")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class GridState:
    """Reactive injections q, resulting voltages v, and exogenous v_env.

    v is always recomputed as X q + v_env; it is never mutated independently,
    so v - X q stays equal to v_env bit for bit along a trajectory.
    """

    q: np.ndarray
    v: np.ndarray
    v_env: np.ndarray

    @classmethod
    def from_env(cls, X, v_env, q0=None):
        v_env = np.asarray(v_env, dtype=float)
        q = np.zeros_like(v_env) if q0 is None else np.asarray(q0, dtype=float)
        return cls(q=q, v=X @ q + v_env, v_env=v_env)


def step(state, u, dt, X):
    """One forward-Euler step: the action is the rate of change of q."""
    u = np.asarray(u, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if u.shape != state.q.shape:
        raise ValueError(f"action shape {u.shape} does not match state "
                         f"{state.q.shape}")
    if not np.all(np.isfinite(u)):
        raise DivergenceError("non-finite control input; the policy driving "
                              "this trajectory has diverged")
    q_next = state.q + dt * u
    return GridState(q=q_next, v=X @ q_next + state.v_env, v_env=state.v_env)


def band_violation(v, bounds):
    """Signed per-bus violation: positive above the band, negative below."""
    lo, hi = bounds
    return np.maximum(v - hi, 0.0) + np.minimum(v - lo, 0.0)


def dist_to_band(v, bounds):
    """Euclidean distance from v to the box of acceptable voltages."""
    return float(np.linalg.norm(band_violation(v, bounds)))


def stage_cost(v, u, bounds, cp):
    """Quadratic cost on band violation plus quadratic cost on the action."""
    dev = band_violation(v, bounds)
    return float(cp.eta1 * dev @ dev + cp.eta2 * np.dot(u, u))


@dataclass(frozen=True)
class ScenarioConfig:
    """Disturbance sampler settings for one scenario kind.

    ``kind`` is 'high', 'low' or 'mixed'. Violating buses are a uniformly
    chosen nonempty subset; for 'mixed' at least one bus is pushed over and
    one under the band. Remaining buses stay near nominal. ``seed`` is used
    when no generator is passed to ``sample_scenario``.
    """

    kind: str
    n: int
    high_range: tuple = (1.05, 1.10)
    low_range: tuple = (0.90, 0.95)
    ambient_range: tuple = (0.98, 1.02)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("high", "low", "mixed"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "mixed" and self.n < 2:
            raise ValueError("mixed scenarios need at least two buses")


def sample_scenario(cfg, rng=None):
    """Draw (v_env, q0) for one disturbance scenario. q0 defaults to zero."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    v_env = rng.uniform(*cfg.ambient_range, size=n)
    k = int(rng.integers(1, n + 1))
    chosen = rng.choice(n, size=k, replace=False)
    if cfg.kind == "high":
        v_env[chosen] = rng.uniform(*cfg.high_range, size=k)
    elif cfg.kind == "low":
        v_env[chosen] = rng.uniform(*cfg.low_range, size=k)
    else:
        if k == 1:
            extra = rng.choice(np.setdiff1d(np.arange(n), chosen), size=1)
            chosen = np.concatenate([chosen, extra])
            k = 2
        high = np.zeros(k, dtype=bool)
        high[rng.random(k) < 0.5] = True
        high[0] = True
        high[-1] = False
        v_env[chosen[high]] = rng.uniform(*cfg.high_range, size=int(high.sum()))
        v_env[chosen[~high]] = rng.uniform(*cfg.low_range, size=int((~high).sum()))
    return v_env, np.zeros(n)


def make_suite(n, count, seed, kinds=("high", "low", "mixed")):
    """Seeded list of (v_env, q0, label) disturbance scenarios, kinds cycled."""
    rng = np.random.default_rng(seed)
    suite = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        cfg = ScenarioConfig(kind=kind, n=n)
        v_env, q0 = sample_scenario(cfg, rng)
        suite.append((v_env, q0, f"{kind}-{i}"))
    return suite


def save_scenarios(suite, path):
    data = [{"v_env": list(map(float, v_env)), "q0": list(map(float, q0)),
             "label": label} for v_env, q0, label in suite]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)


def load_scenarios(path):
    with open(path) as fh:
        data = json.load(fh)
    return [(np.array(d["v_env"], dtype=float), np.array(d["q0"], dtype=float),
             d.get("label", f"scenario-{i}")) for i, d in enumerate(data)]


def load_env_trace_csv(path, n):
    """Read a disturbance replay trace with columns t, bus_id, v_env.

    Returns (times, v_env array of shape (T, n)). Missing (t, bus) entries
    hold the previous value of that bus; the first row must cover all buses.
    """
    cells = {}
    times = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["t"])
            bus = int(row["bus_id"])
            if not 1 <= bus <= n:
                raise ValueError(f"bus_id {bus} outside 1..{n}")
            if t not in cells:
                cells[t] = {}
                times.append(t)
            cells[t][bus] = float(row["v_env"])
    if not times:
        raise ValueError(f"no rows in trace file {path}")
    times.sort()
    if len(cells[times[0]]) != n:
        raise ValueError("first time step must define v_env for every bus")
    out = np.zeros((len(times), n))
    prev = None
    for i, t in enumerate(times):
        row = np.array(prev) if prev is not None else np.zeros(n)
        for bus, val in cells[t].items():
            row[bus - 1] = val
        out[i] = row
        prev = row
    return np.array(times), out


@dataclass
class Trajectory:
    """Closed-loop record: T+1 states, T actions, per-step stage costs."""

    t: np.ndarray
    v: np.ndarray
    q: np.ndarray
    u: np.ndarray
    stage_costs: np.ndarray
    dt: float
    discounted_cost: float
    diverged: bool = False

    @property
    def horizon(self):
        return len(self.u)


def rollout(policy, X, v_env, q0, T, dt, cp, bounds, blowup=BLOWUP_BOUND):
    """Roll the closed loop forward T steps with u(t) = policy(v(t)).

    No exploration noise. If any voltage magnitude exceeds ``blowup`` the
    trajectory is truncated and flagged as diverged.
    """
    if T < 1:
        raise ValueError("horizon must be at least 1")
    state = GridState.from_env(X, v_env, q0)
    n = len(state.q)
    vs = [state.v.copy()]
    qs = [state.q.copy()]
    us = []
    costs = []
    total = 0.0
    diverged = False
    for t in range(T):
        if np.max(np.abs(state.v)) > blowup:
            diverged = True
            break
        u = np.asarray(policy(state.v), dtype=float)
        c = stage_cost(state.v, u, bounds, cp)
        try:
            state = step(state, u, dt, X)
        except DivergenceError:
            diverged = True
            break
        us.append(u)
        costs.append(c)
        total += (cp.gamma ** t) * c
        vs.append(state.v.copy())
        qs.append(state.q.copy())
    steps = len(us)
    return Trajectory(
        t=np.arange(steps + 1) * dt,
        v=np.array(vs).reshape(steps + 1, n),
        q=np.array(qs).reshape(steps + 1, n),
        u=np.array(us).reshape(steps, n),
        stage_costs=np.array(costs),
        dt=dt,
        discounted_cost=total,
        diverged=diverged,
    )


def rollout_trace(policy, X, v_env_series, q0, dt, cp, bounds,
                  blowup=BLOWUP_BOUND):
    """Replay an exogenous disturbance trace, one v_env row per step."""
    v_env_series = np.asarray(v_env_series, dtype=float)
    T = len(v_env_series) - 1
    if T < 1:
        raise ValueError("trace must cover at least two time steps")
    state = GridState.from_env(X, v_env_series[0], q0)
    vs = [state.v.copy()]
    qs = [state.q.copy()]
    us = []
    costs = []
    total = 0.0
    diverged = False
    for t in range(T):
        if np.max(np.abs(state.v)) > blowup:
            diverged = True
            break
        u = np.asarray(policy(state.v), dtype=float)
        c = stage_cost(state.v, u, bounds, cp)
        try:
            state = step(state, u, dt, X)
        except DivergenceError:
            diverged = True
            break
        state = GridState(q=state.q, v=X @ state.q + v_env_series[t + 1],
                          v_env=v_env_series[t + 1])
        us.append(u)
        costs.append(c)
        total += (cp.gamma ** t) * c
        vs.append(state.v.copy())
        qs.append(state.q.copy())
    steps = len(us)
    n = len(state.q)
    return Trajectory(
        t=np.arange(steps + 1) * dt,
        v=np.array(vs).reshape(steps + 1, n),
        q=np.array(qs).reshape(steps + 1, n),
        u=np.array(us).reshape(steps, n),
        stage_costs=np.array(costs),
        dt=dt,
        discounted_cost=total,
        diverged=diverged,
    )


def recovery_time(traj, bounds, tol=1e-3):
    """First step after which every later voltage stays within ``tol`` of the
    band. Returns None when the trajectory never settles (including diverged
    trajectories that were cut short).
    """
    if len(traj.v) == 0:
        raise ValueError("empty trajectory")
    if traj.diverged:
        return None
    inside = np.array([dist_to_band(v, bounds) <= tol for v in traj.v])
    if not inside[-1]:
        return None
    # walk back from the end to the first step of the final in-band run
    t = len(inside) - 1
    while t > 0 and inside[t - 1]:
        t -= 1
    return int(t)
