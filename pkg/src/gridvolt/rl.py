"""From-scratch deterministic actor-critic training for voltage control.

Plain-numpy feedforward critics learned by temporal difference, slowly
tracking target copies, a FIFO replay buffer, Gaussian exploration noise,
and two actor families: the constrained monotone deadband controller
(updated through its reparameterization, so every iterate stays a certified
stabilizer) and an unconstrained multilayer perceptron baseline.
"""

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import DivergenceError, GridState, step
from .policy import (
    MonotonePolicy,
    RawPolicyParams,
    constrain,
    policy_eval_bus,
    policy_param_grad,
    sample_raw_params,
)
from .util import fmt


class TrainingDiverged(RuntimeError):
    """Raised when an update produces a non-finite loss."""


# ---------------------------------------------------------------------------
# feedforward networks
# ---------------------------------------------------------------------------

class FeedForwardNet:
    """Affine layers with ReLU hidden activations and a linear output."""

    def __init__(self, weights, biases):
        self.weights = weights
        self.biases = biases

    @classmethod
    def create(cls, sizes, rng):
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    def copy(self):
        return FeedForwardNet([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases])

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]


def net_eval(net, x):
    """Forward pass; accepts (m, d_in) batches or a single (d_in,) vector."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.weights[0].shape[0]:
        raise ValueError(f"input width {h.shape[1]} does not match network "
                         f"input {net.weights[0].shape[0]}")
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def net_backprop(net, x, upstream):
    """Reverse-mode pass. Returns (parameter grads, input grad).

    ``upstream`` holds d(objective)/d(output) per sample; parameter grads are
    summed over the batch, the input grad keeps its per-sample shape.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    upstream = np.asarray(upstream, dtype=float)
    if upstream.ndim == 1:
        upstream = upstream[None, :] if single else upstream[:, None]
    last = len(net.weights) - 1
    acts = [h]
    pre = []
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if k < last else z)
    grads = [None] * len(net.weights)
    delta = upstream
    for k in range(last, -1, -1):
        if k < last:
            delta = delta * (pre[k] > 0.0)
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        delta = delta @ net.weights[k].T
    return grads, (delta[0] if single else delta)


def sgd_step(net, grads, lr):
    for (w, b), (dw, db) in zip(zip(net.weights, net.biases), grads):
        w -= lr * dw
        b -= lr * db


def sgd_ascent(net, grads, lr):
    for (w, b), (dw, db) in zip(zip(net.weights, net.biases), grads):
        w += lr * dw
        b += lr * db


def soft_update(target, source, tau):
    """target <- (1 - tau) * target + tau * source, elementwise."""
    if isinstance(target, RawPolicyParams):
        for name in ("slope_pos", "decr_pos", "slope_neg", "decr_neg"):
            t = getattr(target, name)
            t *= (1.0 - tau)
            t += tau * getattr(source, name)
        return
    for tw, sw in zip(target.weights, source.weights):
        tw *= (1.0 - tau)
        tw += tau * sw
    for tb, sb in zip(target.biases, source.biases):
        tb *= (1.0 - tau)
        tb += tau * sb


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    """One interaction: voltages, applied actions, per-bus rewards, successor."""

    v: np.ndarray
    u: np.ndarray
    r: np.ndarray
    v_next: np.ndarray

    def __post_init__(self):
        for name in ("v", "u", "r", "v_next"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite transition field {name}")


class ReplayBuffer:
    """FIFO ring of transitions with seeded uniform sampling."""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._items = []
        self._head = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def push(self, transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._head] = transition
            self._head = (self._head + 1) % self.capacity

    def snapshot(self):
        """Items oldest-first (test hook for the eviction contract)."""
        return self._items[self._head:] + self._items[:self._head]

    def sample(self, batch_size):
        if batch_size > len(self._items):
            raise ValueError(f"cannot sample {batch_size} transitions from a "
                             f"buffer holding {len(self._items)}")
        idx = self._rng.integers(0, len(self._items), size=batch_size)
        v = np.stack([self._items[i].v for i in idx])
        u = np.stack([self._items[i].u for i in idx])
        r = np.stack([self._items[i].r for i in idx])
        v_next = np.stack([self._items[i].v_next for i in idx])
        return v, u, r, v_next


# ---------------------------------------------------------------------------
# configuration and environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 2e-4
    noise_std: float = 0.05
    noise_clip_sigmas: float = 3.0
    batch_size: int = 256
    tau: float = 1e-2
    episodes: int = 200
    episode_len: int = 30
    updates_per_episode: int = 30
    buffer_capacity: int = 1_000_000
    seed: int = 0
    agent_scope: str = "local"          # 'local' per-bus agents or 'joint'
    critic_hidden: tuple = (100, 100)
    actor_hidden: tuple = (100, 100)    # unconstrained baseline actor
    actor_units: int = 16               # ramp units per side, monotone actor
    eps: float = 1e-3
    init_gain: tuple = (22.0, 26.0)
    record_timing: bool = False

    def __post_init__(self):
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch size cannot exceed buffer capacity")
        if self.agent_scope not in ("local", "joint"):
            raise ValueError(f"unknown agent scope {self.agent_scope!r}")

    def to_dict(self):
        out = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            out[name] = list(val) if isinstance(val, tuple) else val
        return out


@dataclass(frozen=True)
class VoltEnv:
    """Training environment: sensitivity matrix, band, cost, and scenarios."""

    X: np.ndarray
    v_lower: np.ndarray
    v_upper: np.ndarray
    cp: object
    dt: float = 0.1
    kinds: tuple = ("high", "low", "mixed")
    blowup: float = 10.0

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def bounds(self):
        return self.v_lower, self.v_upper

    def sample_start(self, rng):
        from .dynamics import ScenarioConfig, sample_scenario
        kind = self.kinds[int(rng.integers(0, len(self.kinds)))]
        return sample_scenario(ScenarioConfig(kind=kind, n=self.n), rng)

    def per_bus_reward(self, v, u):
        lo, hi = self.bounds
        dev = np.maximum(v - hi, 0.0) + np.minimum(v - lo, 0.0)
        return -(self.cp.eta1 * dev ** 2 + self.cp.eta2 * u ** 2)


# ---------------------------------------------------------------------------
# update rules
# ---------------------------------------------------------------------------

def critic_update(critic, critic_target, target_policy_eval, batch, cfg):
    """One SGD step on the squared temporal-difference error.

    ``batch`` is (s, u, r, s_next) with 2-d arrays; the bootstrap target
    r + gamma * Q_target(s', policy_target(s')) is held fixed. Returns the
    pre-step loss.
    """
    s, u, r, s_next = batch
    u_next = target_policy_eval(s_next)
    q_next = net_eval(critic_target, np.hstack([s_next, u_next]))
    y = r + cfg.gamma * q_next
    x = np.hstack([s, u])
    q = net_eval(critic, x)
    err = q - y
    loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise TrainingDiverged("temporal-difference loss is not finite")
    upstream = 2.0 * err / len(err)
    grads, _ = net_backprop(critic, x, upstream)
    sgd_step(critic, grads, cfg.critic_lr)
    return loss


def q_action_grad(critic, s, u):
    """Critic value and its gradient with respect to the action block.

    The action occupies the trailing columns of the critic input.
    """
    x = np.hstack([s, u])
    q = net_eval(critic, x)
    _, input_grad = net_backprop(critic, x, np.ones_like(q))
    return q, input_grad[:, s.shape[1]:]


def stable_actor_update(raw, band, eps, bus, v_batch, dq_du, lr):
    """Ascend the critic through the constraint map for one bus's parameters.

    Updates ``raw`` in place and returns the applied gradient norm.
    """
    grads = policy_param_grad(raw, band, eps, bus, v_batch)
    m = len(v_batch)
    total = 0.0
    for name, g in zip(("slope_pos", "decr_pos", "slope_neg", "decr_neg"),
                       grads):
        mean_g = (dq_du[:, None] * g).sum(axis=0) / m
        getattr(raw, name)[bus] += lr * mean_g
        total += float(mean_g @ mean_g)
    return np.sqrt(total)


def net_actor_update(actor, v_batch, dq_du, lr):
    """Deterministic policy-gradient ascent for the unconstrained actor."""
    m = len(v_batch)
    grads, _ = net_backprop(actor, v_batch, dq_du / m)
    sgd_ascent(actor, grads, lr)
    total = sum(float((dw ** 2).sum() + (db ** 2).sum()) for dw, db in grads)
    return np.sqrt(total)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

NET_CHECKPOINT_VERSION = 1


def save_net_policy(path, nets, joint, band, meta=None):
    """Persist the unconstrained perceptron policy (one net per agent)."""
    import json
    data = {
        "format_version": NET_CHECKPOINT_VERSION,
        "kind": "mlp",
        "joint": bool(joint),
        "band": {"v_lower": list(map(float, band[0])),
                 "v_upper": list(map(float, band[1]))},
        "nets": [{"weights": [w.tolist() for w in net.weights],
                  "biases": [b.tolist() for b in net.biases]}
                 for net in nets],
    }
    if meta:
        data["meta"] = meta
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_net_policy(path):
    """Load an unconstrained policy saved by ``save_net_policy``."""
    import json
    with open(path) as fh:
        data = json.load(fh)
    if data.get("kind") != "mlp" or \
            data.get("format_version") != NET_CHECKPOINT_VERSION:
        raise ValueError(f"not an mlp policy checkpoint: {path}")
    nets = [FeedForwardNet([np.array(w) for w in entry["weights"]],
                           [np.array(b) for b in entry["biases"]])
            for entry in data["nets"]]
    band = (np.array(data["band"]["v_lower"], dtype=float),
            np.array(data["band"]["v_upper"], dtype=float))
    return _NetPolicy(nets, data["joint"]), band


@dataclass
class TrainResult:
    policy: object
    log: list
    config: TrainConfig
    actor_kind: str
    raw: RawPolicyParams = None
    init_raw: RawPolicyParams = None
    actor_nets: list = None
    critics: list = None
    band: tuple = None
    diverged_episodes: int = 0


class _NetPolicy:
    """Vector policy backed by per-bus (or one joint) perceptrons."""

    def __init__(self, nets, joint):
        self.nets = nets
        self.joint = joint

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.joint:
            return net_eval(self.nets[0], v)
        return np.array([net_eval(net, v[i:i + 1])[0]
                         for i, net in enumerate(self.nets)])


def _log_row(episode, ret, td_mean, grad_norm, wall_ms):
    return {"episode": episode, "return": ret, "td_loss_mean": td_mean,
            "grad_norms": grad_norm, "wall_ms": wall_ms}


def write_training_log(log, path):
    with open(path, "w") as fh:
        fh.write("episode,return,td_loss_mean,grad_norms,wall_ms\n")
        for row in log:
            fh.write(f"{row['episode']},{fmt(row['return'])},"
                     f"{fmt(row['td_loss_mean'])},{fmt(row['grad_norms'])},"
                     f"{fmt(row['wall_ms'])}\n")


def train(env, cfg, actor_kind="stable", episode_callback=None):
    """Run episodic training and return the final greedy policy plus a log.

    Per episode: draw a disturbance scenario, roll the noisy policy for
    ``episode_len`` steps storing per-bus transitions, then run batched
    critic/actor updates with soft target tracking. Deterministic under
    ``cfg.seed``.
    """
    if actor_kind not in ("stable", "unconstrained"):
        raise ValueError(f"unknown actor kind {actor_kind!r}")
    n = env.n
    joint = cfg.agent_scope == "joint"
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(seeds[0])
    scen_rng = np.random.default_rng(seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    buffer = ReplayBuffer(cfg.buffer_capacity, seed=seeds[3])
    band = env.bounds

    # agents: index set is buses for local scope, the whole feeder for joint
    agent_dims = [n] if joint else [1] * n
    critics, critic_targets = [], []
    for dim in agent_dims:
        critic = FeedForwardNet.create([2 * dim, *cfg.critic_hidden, 1],
                                       init_rng)
        critics.append(critic)
        critic_targets.append(critic.copy())

    raw = target_raw = init_raw = None
    actor_nets = actor_targets = None
    if actor_kind == "stable":
        raw = sample_raw_params(n, cfg.actor_units, init_rng,
                                gain_range=cfg.init_gain, eps=cfg.eps)
        target_raw = raw.copy()
        init_raw = raw.copy()

        def greedy(v):
            return MonotonePolicy.from_raw(raw, band, cfg.eps)(v)
    else:
        actor_nets = [FeedForwardNet.create([dim, *cfg.actor_hidden, dim],
                                            init_rng) for dim in agent_dims]
        actor_targets = [net.copy() for net in actor_nets]

        def greedy(v):
            return _NetPolicy(actor_nets, joint)(v)

    log = []
    diverged_episodes = 0
    clip = cfg.noise_clip_sigmas * cfg.noise_std

    for episode in range(cfg.episodes):
        t0 = time.perf_counter()
        v_env, q0 = env.sample_start(scen_rng)
        state = GridState.from_env(env.X, v_env, q0)
        ep_return = 0.0
        diverged = False
        for t in range(cfg.episode_len):
            if np.max(np.abs(state.v)) > env.blowup:
                diverged = True
                break
            u = greedy(state.v) + np.clip(
                noise_rng.normal(0.0, cfg.noise_std, size=n), -clip, clip)
            r_vec = env.per_bus_reward(state.v, u)
            try:
                nxt = step(state, u, env.dt, env.X)
            except DivergenceError:
                diverged = True
                break
            buffer.push(Transition(v=state.v, u=u, r=r_vec, v_next=nxt.v))
            ep_return += (cfg.gamma ** t) * float(r_vec.sum())
            state = nxt
        if diverged:
            diverged_episodes += 1

        td_losses = []
        grad_norms = []
        if len(buffer) >= cfg.batch_size:
            for _ in range(cfg.updates_per_episode):
                v_b, u_b, r_b, vn_b = buffer.sample(cfg.batch_size)
                for i, critic in enumerate(critics):
                    if joint:
                        s, a = v_b, u_b
                        r = r_b.sum(axis=1, keepdims=True)
                        s_next = vn_b
                    else:
                        s, a = v_b[:, i:i + 1], u_b[:, i:i + 1]
                        r = r_b[:, i:i + 1]
                        s_next = vn_b[:, i:i + 1]

                    if actor_kind == "stable":
                        if joint:
                            def tgt_eval(sn):
                                return MonotonePolicy.from_raw(
                                    target_raw, band, cfg.eps)(sn)
                        else:
                            tgt_params = constrain(target_raw, band, cfg.eps)

                            def tgt_eval(sn, _i=i, _p=tgt_params):
                                return policy_eval_bus(
                                    _p, _i, sn[:, 0])[:, None]
                    else:
                        def tgt_eval(sn, _net=actor_targets[i]):
                            return net_eval(_net, sn)

                    loss = critic_update(critic, critic_targets[i], tgt_eval,
                                         (s, a, r, s_next), cfg)
                    td_losses.append(loss)

                    if actor_kind == "stable":
                        if joint:
                            u_cur = MonotonePolicy.from_raw(raw, band,
                                                            cfg.eps)(v_b)
                            _, dq = q_action_grad(critic, v_b, u_cur)
                            gnorm = 0.0
                            for bus in range(n):
                                gnorm += stable_actor_update(
                                    raw, band, cfg.eps, bus, v_b[:, bus],
                                    dq[:, bus], cfg.actor_lr) ** 2
                            grad_norms.append(np.sqrt(gnorm))
                        else:
                            params = constrain(raw, band, cfg.eps)
                            u_cur = policy_eval_bus(params, i, s[:, 0])[:, None]
                            _, dq = q_action_grad(critic, s, u_cur)
                            grad_norms.append(stable_actor_update(
                                raw, band, cfg.eps, i, s[:, 0], dq[:, 0],
                                cfg.actor_lr))
                    else:
                        u_cur = net_eval(actor_nets[i], s)
                        _, dq = q_action_grad(critic, s, u_cur)
                        grad_norms.append(net_actor_update(
                            actor_nets[i], s, dq, cfg.actor_lr))
                        soft_update(actor_targets[i], actor_nets[i], cfg.tau)
                    soft_update(critic_targets[i], critic, cfg.tau)
                if actor_kind == "stable":
                    soft_update(target_raw, raw, cfg.tau)

        wall = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else 0.0
        log.append(_log_row(episode, ep_return,
                            float(np.mean(td_losses)) if td_losses else 0.0,
                            float(np.mean(grad_norms)) if grad_norms else 0.0,
                            wall))
        if episode_callback is not None:
            episode_callback(episode, raw if actor_kind == "stable"
                             else actor_nets)

    if actor_kind == "stable":
        policy = MonotonePolicy.from_raw(raw, band, cfg.eps)
    else:
        policy = _NetPolicy(actor_nets, joint)
    return TrainResult(policy=policy, log=log, config=cfg,
                       actor_kind=actor_kind, raw=raw, init_raw=init_raw,
                       actor_nets=actor_nets, critics=critics, band=band,
                       diverged_episodes=diverged_episodes)
