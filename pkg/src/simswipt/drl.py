"""Markov environment over the hardened closed forms plus numpy MADDPG.

The environment applies a joint metasurface/mode/power action, rebuilds the
cascade statistics, and scores the step with a min-max normalized blend of
the sum harvested-energy increment and the total cascade Frobenius norm,
minus a flat penalty whenever an information receiver misses its rate floor.
Training is off-policy deterministic actor-critic with a centralized critic:
per-AP actors (decentralized execution) or one joint actor (centralized
execution), all networks hand-rolled dense layers on numpy.

Network files use a flat binary layout: magic bytes b"SWNN", a version byte,
one little-endian uint32 output-activation code, one uint32 layer count,
then per layer two uint32 (rows, cols) followed by the row-major float64
weight matrix and the float64 bias row.
"""

from dataclasses import dataclass, field

import numpy as np

from . import channel as _channel
from . import performance as _performance


# --- dense networks ---

_ACTIVATIONS = ("linear", "relu", "unit")
_MAGIC = b"SWNN"
_VERSION = 1


class Mlp:
    """Fully connected net with ReLU hidden layers and a pluggable head.

    out_activation: "linear", "relu", or "unit" (symmetric saturating tanh
    mapped onto [0, 1], used by actors so raw actions live on the unit box).
    """

    def __init__(self, sizes, out_activation, rng):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if out_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {out_activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.out_activation = out_activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, x, cache=None):
        """Batch forward pass; x is (batch, in_dim) or (in_dim,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        if cache is not None:
            cache.append(h)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.out_activation == "relu":
                h = np.maximum(z, 0.0)
            elif self.out_activation == "unit":
                h = 0.5 * (np.tanh(z) + 1.0)
            else:
                h = z
            if cache is not None:
                cache.append(h)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite network output")
        return h

    def backward(self, cache, grad_out):
        """Gradients of sum(grad_out * output) w.r.t. params and input.

        cache comes from forward(..., cache=[]); returns (weight grads,
        bias grads, input grad), each matching the parameter shapes.
        """
        grad = np.atleast_2d(np.asarray(grad_out, dtype=float))
        g_w = [None] * len(self.weights)
        g_b = [None] * len(self.biases)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_out = cache[i + 1]
            if i < last or self.out_activation == "relu":
                grad = grad * (h_out > 0.0)
            elif self.out_activation == "unit":
                t = 2.0 * h_out - 1.0
                grad = grad * 0.5 * (1.0 - t * t)
            h_in = cache[i]
            g_w[i] = h_in.T @ grad
            g_b[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return g_w, g_b, grad

    def apply_gradients(self, g_w, g_b, lr, clip=0.5):
        """Clipped gradient-descent step; returns the pre-clip norm."""
        total = 0.0
        for gw, gb in zip(g_w, g_b):
            total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
        norm = np.sqrt(total)
        scale = 1.0 if norm <= clip else clip / norm
        for w, b, gw, gb in zip(self.weights, self.biases, g_w, g_b):
            w -= lr * scale * gw
            b -= lr * scale * gb
        return norm

    def clone(self):
        twin = Mlp.__new__(Mlp)
        twin.sizes = self.sizes
        twin.out_activation = self.out_activation
        twin.weights = [w.copy() for w in self.weights]
        twin.biases = [b.copy() for b in self.biases]
        return twin

    def soft_update_from(self, source, coeff):
        """Move every parameter a fraction coeff toward the source net."""
        for w, sw in zip(self.weights, source.weights):
            w += coeff * (sw - w)
        for b, sb in zip(self.biases, source.biases):
            b += coeff * (sb - b)


def save_net(net, path):
    """Serialize an Mlp to the documented flat binary layout."""
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(bytes([_VERSION]))
        out_code = _ACTIVATIONS.index(net.out_activation)
        np.array([out_code, len(net.weights)], dtype="<u4").tofile(handle)
        for w, b in zip(net.weights, net.biases):
            np.array(w.shape, dtype="<u4").tofile(handle)
            np.ascontiguousarray(w, dtype="<f8").tofile(handle)
            np.ascontiguousarray(b, dtype="<f8").tofile(handle)


def load_net(path):
    """Inverse of save_net."""
    with open(path, "rb") as handle:
        if handle.read(4) != _MAGIC:
            raise ValueError("not a network file (bad magic)")
        version = handle.read(1)[0]
        if version != _VERSION:
            raise ValueError(f"unsupported network file version {version}")
        out_code, count = np.fromfile(handle, dtype="<u4", count=2)
        weights, biases, sizes = [], [], None
        for _ in range(int(count)):
            rows, cols = np.fromfile(handle, dtype="<u4", count=2)
            w = np.fromfile(handle, dtype="<f8", count=rows * cols)
            w = w.reshape(int(rows), int(cols))
            b = np.fromfile(handle, dtype="<f8", count=int(cols))
            weights.append(w)
            biases.append(b)
            if sizes is None:
                sizes = [int(rows)]
            sizes.append(int(cols))
    net = Mlp.__new__(Mlp)
    net.sizes = tuple(sizes)
    net.out_activation = _ACTIVATIONS[int(out_code)]
    net.weights = weights
    net.biases = biases
    return net


# --- actions ---


@dataclass(frozen=True)
class ActionLayout:
    """Slicing of one agent's raw action vector."""

    num_ir: int
    num_er: int
    num_layers: int
    num_elements: int

    @property
    def dim(self):
        k = self.num_ir + self.num_er
        return 1 + k + self.num_layers * self.num_elements


@dataclass(frozen=True)
class NormalizedAction:
    """One AP's applied action: binary mode, unit power splits, phases."""

    mode: float
    power_ir: np.ndarray
    power_er: np.ndarray
    theta: np.ndarray


def _softmax_exact(logits):
    """Softmax whose float sum is exactly one (last entry closes the gap)."""
    shifted = np.asarray(logits, dtype=float) - np.max(logits)
    weights = np.exp(shifted)
    out = weights / weights.sum()
    out[-1] = 1.0 - out[:-1].sum()
    return out


def normalize_action(raw, layout):
    """Map a unit-box raw vector to the applied action.

    Mode steps at one half, each power head is softmax-normalized onto the
    simplex (sum exactly one in floats), phases scale onto [0, 2*pi].
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (layout.dim,):
        raise ValueError(f"raw action must have shape ({layout.dim},)")
    k_i, k_e = layout.num_ir, layout.num_er
    mode = 1.0 if raw[0] >= 0.5 else 0.0
    power_ir = _softmax_exact(raw[1:1 + k_i])
    power_er = _softmax_exact(raw[1 + k_i:1 + k_i + k_e])
    theta = 2.0 * np.pi * raw[1 + k_i + k_e:].reshape(
        layout.num_layers, layout.num_elements)
    return NormalizedAction(mode=mode, power_ir=power_ir,
                            power_er=power_er, theta=theta)


# --- reward ---


@dataclass
class RewardTracker:
    """Running min-max scaler for the two reward ingredients.

    Normalizes the sum-HE increment and the total cascade Frobenius norm to
    [0, 1] against the extrema seen so far; a degenerate range (below 1e-12)
    maps to the neutral 0.5 so the first step never looks extreme.
    """

    lam_tradeoff: float = 0.5
    lam_se: float = 1.0
    d_min: float = field(default=np.inf)
    d_max: float = field(default=-np.inf)
    q_min: float = field(default=np.inf)
    q_max: float = field(default=-np.inf)

    def __post_init__(self):
        if not 0.0 <= self.lam_tradeoff <= 1.0:
            raise ValueError("trade-off weight must sit in [0, 1]")
        if self.lam_se < 0.0:
            raise ValueError("rate-miss penalty must be nonnegative")

    def reset(self):
        self.d_min, self.d_max = np.inf, -np.inf
        self.q_min, self.q_max = np.inf, -np.inf

    @staticmethod
    def _scale(value, lo, hi):
        if hi - lo < 1e-12:
            return 0.5
        return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))

    def update(self, delta_he, q_frob):
        """Expand the extrema, then return the normalized pair."""
        self.d_min = min(self.d_min, float(delta_he))
        self.d_max = max(self.d_max, float(delta_he))
        self.q_min = min(self.q_min, float(q_frob))
        self.q_max = max(self.q_max, float(q_frob))
        return (self._scale(delta_he, self.d_min, self.d_max),
                self._scale(q_frob, self.q_min, self.q_max))


def compute_reward(delta_he, q_frob, tracker, violation):
    """Blend the normalized ingredients and subtract the rate-miss penalty.

    violation is a float in [0, 1]: zero for clean steps, one for a flat
    miss, a fraction for the per-receiver proportional variant.
    """
    d_norm, q_norm = tracker.update(delta_he, q_frob)
    blended = tracker.lam_tradeoff * d_norm + (1.0 - tracker.lam_tradeoff) * q_norm
    return float(blended - tracker.lam_se * violation)


# --- environment ---


class SwiptEnv:
    """Fixed-topology environment driving the closed-form evaluators.

    Each agent observes [previous sum-HE, its large-scale gain row] and
    acts with a raw unit-box vector covering mode, both power heads, and
    its metasurface phases.  The step applies the normalized joint action,
    rebuilds the cascades and their statistics, and scores the outcome.
    Only the applied power head counts: an information AP's energy split is
    ignored and vice versa.
    """

    def __init__(self, stack, links, plan, num_ir, params,
                 lam_tradeoff=0.5, lam_se=1.0, penalty="flat"):
        if penalty not in ("flat", "per-ir"):
            raise ValueError(f"unknown penalty mode {penalty!r}")
        self.stack = stack
        self.links = links
        self.plan = plan
        self.num_aps = len(links)
        self.num_ir = num_ir
        self.num_er = plan.num_receivers - num_ir
        self.params = params
        self.penalty = penalty
        self.layout = ActionLayout(
            num_ir=self.num_ir, num_er=self.num_er,
            num_layers=stack.geometry.num_layers,
            num_elements=stack.geometry.num_elements)
        self.beta = np.array([[link.beta for link in row] for row in links])
        self.obs_dim = 1 + self.num_ir + self.num_er
        self.tracker = RewardTracker(lam_tradeoff=lam_tradeoff, lam_se=lam_se)
        self._prev_sum_he = 0.0

    def observation(self):
        obs = np.empty((self.num_aps, self.obs_dim))
        obs[:, 0] = self._prev_sum_he
        obs[:, 1:] = self.beta
        return obs

    def reset(self, rng=None):
        """Clear the trackers and the sum-HE memory; deterministic."""
        del rng
        self._prev_sum_he = 0.0
        self.tracker.reset()
        return self.observation()

    def evaluate(self, actions):
        """Closed-form outcome of a joint action, independent of history."""
        if len(actions) != self.num_aps:
            raise ValueError("one action per AP required")
        f = []
        q_frob = 0.0
        modes = np.empty(self.num_aps)
        power_ir = np.zeros((self.num_aps, self.num_ir))
        power_er = np.zeros((self.num_aps, self.num_er))
        for m, act in enumerate(actions):
            fm, _ = _channel.sim_cascade(self.stack, act.theta)
            f.append(fm)
            q_frob += float(np.linalg.norm(fm))
            modes[m] = act.mode
            if act.mode >= 0.5:
                power_ir[m] = act.power_ir
            else:
                power_er[m] = act.power_er
        f = np.asarray(f)
        stats = _performance.build_stats(f, self.links, self.plan,
                                         self.num_ir, self.params)
        decision = _performance.ResourceDecision(
            modes=modes, power_ir=power_ir, power_er=power_er)
        sinr = _performance.sinr_closed_form(decision, stats, self.params)
        se = _performance.se_from_sinr(sinr, self.params)
        q_block = _performance.q_closed_form(decision, stats, self.params)
        he = _performance.nleh(q_block, self.params)
        return se, he, q_frob, decision

    def _violation(self, se):
        floor = self.params.qos_se
        if floor is None or self.num_ir == 0:
            return 0.0
        missed = np.count_nonzero(se < floor)
        if missed == 0:
            return 0.0
        if self.penalty == "flat":
            return 1.0
        return missed / self.num_ir

    def step(self, actions):
        """Apply a normalized joint action; returns (obs, reward, diag)."""
        se, he, q_frob, decision = self.evaluate(actions)
        decision.check_feasible()
        sum_he = float(he.sum())
        delta_he = sum_he - self._prev_sum_he
        violation = self._violation(se)
        reward = compute_reward(delta_he, q_frob, self.tracker, violation)
        self._prev_sum_he = sum_he
        diag = {
            "se": se,
            "he": he,
            "sum_he": sum_he,
            "delta_he": delta_he,
            "q_frob": q_frob,
            "violation": violation,
            "modes": decision.modes.copy(),
        }
        return self.observation(), reward, diag


# --- replay and training ---


class ReplayBuffer:
    """Flat ring buffer for (obs, action, reward, next obs) tuples."""

    def __init__(self, capacity, obs_dim, act_dim):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.rew = np.zeros(self.capacity)
        self.nxt = np.zeros((self.capacity, obs_dim))
        self.size = 0
        self._head = 0

    def add(self, obs, act, rew, nxt):
        i = self._head
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.nxt[i] = nxt
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch, rng):
        idx = rng.integers(0, self.size, batch)
        return self.obs[idx], self.act[idx], self.rew[idx], self.nxt[idx]


@dataclass(frozen=True)
class DrlConfig:
    """Training hyperparameters with desk-scale defaults."""

    hidden: tuple = (128, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 5e-3
    discount: float = 0.99
    soft_coeff: float = 1e-4
    noise_scale: float = 0.3
    noise_decay: float = 1e-4
    noise_floor: float = 0.02
    batch_size: int = 128
    replay_capacity: int = 20000
    warmup: int = 200
    grad_clip: float = 0.5
    critic_optimism: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must sit in [0, 1)")
        if self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("replay must hold at least one batch")


class TrainingDiverged(RuntimeError):
    """Raised when the reward goes non-finite or the critic loss blows up."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainResult:
    """Trained networks plus the per-episode accumulated reward curve."""

    actors: list
    critic: "Mlp"
    episode_rewards: np.ndarray
    noise_trace: np.ndarray


def _joint_raw(actors, obs):
    return np.concatenate([
        actors[m].forward(obs[m])[0] for m in range(len(actors))
    ])


def _train_common(env, episodes, steps, config, seed, centralized):
    rng = np.random.default_rng(seed)
    m_ap = env.num_aps
    act_dim = env.layout.dim
    obs_flat = m_ap * env.obs_dim
    joint_act = m_ap * act_dim
    if centralized:
        actors = [Mlp((obs_flat, *config.hidden, joint_act), "unit", rng)]
    else:
        actors = [Mlp((env.obs_dim, *config.hidden, act_dim), "unit", rng)
                  for _ in range(m_ap)]
    critic = Mlp((obs_flat + joint_act, *config.hidden, 1), "relu", rng)
    # The rectified value head starts in its active region everywhere;
    # with penalty-heavy early rewards a zero bias lets the head pin itself
    # below zero on every sample, after which no gradient reaches the
    # actors and the policy freezes at its initialization.
    critic.biases[-1][:] = config.critic_optimism
    targets = [a.clone() for a in actors]
    critic_target = critic.clone()
    buffer = ReplayBuffer(config.replay_capacity, obs_flat, joint_act)
    curve = np.zeros(episodes)
    noise_trace = np.zeros(episodes)

    def policy_raw(obs):
        if centralized:
            return actors[0].forward(obs.ravel())[0]
        return _joint_raw(actors, obs)

    def target_raw_batch(obs_batch):
        if centralized:
            return targets[0].forward(obs_batch)
        cols = []
        for m in range(m_ap):
            sl = obs_batch[:, m * env.obs_dim:(m + 1) * env.obs_dim]
            cols.append(targets[m].forward(sl))
        return np.concatenate(cols, axis=1)

    for episode in range(episodes):
        sigma = max(config.noise_floor,
                    config.noise_scale - config.noise_decay * episode)
        noise_trace[episode] = sigma
        obs = env.reset()
        total = 0.0
        for _ in range(steps):
            # Exploration is a Gaussian jitter around the policy plus, at
            # the same scheduled rate, full uniform redraws.  The redraws
            # matter: the rate-floor penalty is a step, so the critic only
            # keeps a slope across the feasibility boundary while replay
            # keeps receiving samples from both sides of it.
            if buffer.size < config.warmup or rng.uniform() < sigma:
                raw = rng.uniform(0.0, 1.0, joint_act)
            else:
                raw = policy_raw(obs)
                raw = np.clip(raw + rng.normal(0.0, sigma, raw.shape),
                              0.0, 1.0)
            actions = [normalize_action(raw[m * act_dim:(m + 1) * act_dim],
                                        env.layout) for m in range(m_ap)]
            nxt, reward, _ = env.step(actions)
            if not np.isfinite(reward):
                raise TrainingDiverged("non-finite reward", {
                    "episode": episode, "reward": reward, "raw": raw})
            buffer.add(obs.ravel(), raw, reward, nxt.ravel())
            total += reward
            obs = nxt
            if buffer.size >= max(config.batch_size, config.warmup):
                _update_step(env, actors, targets, critic, critic_target,
                             buffer, config, rng, centralized, episode)
        curve[episode] = total
    return TrainResult(actors=actors, critic=critic, episode_rewards=curve,
                       noise_trace=noise_trace)


def _update_step(env, actors, targets, critic, critic_target, buffer,
                 config, rng, centralized, episode):
    m_ap = env.num_aps
    act_dim = env.layout.dim
    obs_b, act_b, rew_b, nxt_b = buffer.sample(config.batch_size, rng)

    if centralized:
        nxt_raw = targets[0].forward(nxt_b)
    else:
        cols = []
        for m in range(m_ap):
            sl = nxt_b[:, m * env.obs_dim:(m + 1) * env.obs_dim]
            cols.append(targets[m].forward(sl))
        nxt_raw = np.concatenate(cols, axis=1)
    q_next = critic_target.forward(np.concatenate([nxt_b, nxt_raw], axis=1))
    y = rew_b[:, None] + config.discount * q_next

    cache = []
    q_pred = critic.forward(np.concatenate([obs_b, act_b], axis=1), cache)
    err = q_pred - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss) or loss > 1e6:
        raise TrainingDiverged("critic loss diverged", {
            "episode": episode, "loss": loss})
    g_w, g_b, _ = critic.backward(cache, 2.0 * err / err.shape[0])
    critic.apply_gradients(g_w, g_b, config.critic_lr, config.grad_clip)

    # deterministic policy gradient: ascend the critic through each actor
    if centralized:
        a_cache = []
        raw = actors[0].forward(obs_b, a_cache)
        c_cache = []
        critic.forward(np.concatenate([obs_b, raw], axis=1), c_cache)
        _, _, g_in = critic.backward(
            c_cache, np.full((obs_b.shape[0], 1), 1.0 / obs_b.shape[0]))
        g_raw = g_in[:, obs_b.shape[1]:]
        g_w, g_b, _ = actors[0].backward(a_cache, -g_raw)
        actors[0].apply_gradients(g_w, g_b, config.actor_lr, config.grad_clip)
    else:
        raws = []
        caches = []
        for m in range(m_ap):
            sl = obs_b[:, m * env.obs_dim:(m + 1) * env.obs_dim]
            cache_m = []
            raws.append(actors[m].forward(sl, cache_m))
            caches.append(cache_m)
        joint = np.concatenate(raws, axis=1)
        c_cache = []
        critic.forward(np.concatenate([obs_b, joint], axis=1), c_cache)
        _, _, g_in = critic.backward(
            c_cache, np.full((obs_b.shape[0], 1), 1.0 / obs_b.shape[0]))
        g_joint = g_in[:, obs_b.shape[1]:]
        for m in range(m_ap):
            g_raw = g_joint[:, m * act_dim:(m + 1) * act_dim]
            g_w, g_b, _ = actors[m].backward(caches[m], -g_raw)
            actors[m].apply_gradients(g_w, g_b, config.actor_lr,
                                      config.grad_clip)

    for net, tgt in zip(actors, targets):
        tgt.soft_update_from(net, config.soft_coeff)
    critic_target.soft_update_from(critic, config.soft_coeff)


def ctde_train(env, episodes, steps, config=None, seed=0):
    """Per-AP actors with one centralized critic (decentralized execution)."""
    return _train_common(env, episodes, steps, config or DrlConfig(), seed,
                         centralized=False)


def ctce_train(env, episodes, steps, config=None, seed=0):
    """Single joint actor over the concatenated observations."""
    return _train_common(env, episodes, steps, config or DrlConfig(), seed,
                         centralized=True)


def random_policy_curve(env, episodes, steps, seed=0):
    """Accumulated reward of uniform raw actions, the baseline policy."""
    rng = np.random.default_rng(seed)
    m_ap = env.num_aps
    act_dim = env.layout.dim
    curve = np.zeros(episodes)
    for episode in range(episodes):
        env.reset()
        total = 0.0
        for _ in range(steps):
            raw = rng.uniform(0.0, 1.0, m_ap * act_dim)
            actions = [normalize_action(raw[m * act_dim:(m + 1) * act_dim],
                                        env.layout) for m in range(m_ap)]
            _, reward, _ = env.step(actions)
            total += reward
        curve[episode] = total
    return curve


def write_curve_csv(curve, path):
    """Per-episode accumulated reward as CSV rows (episode, reward)."""
    import csv

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["episode", "reward"])
        for i, value in enumerate(np.asarray(curve, dtype=float)):
            writer.writerow([i, repr(float(value))])
