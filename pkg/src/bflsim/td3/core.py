"""Twin-critic delayed actor-critic learner on top of :mod:`.mlp`."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .._rng import seed_sequence
from .mlp import MLP, flatten, unflatten


@dataclass(frozen=True)
class Td3Hyper:
    gamma: float = 0.99
    eta_a: float = 5e-6
    eta_c: float = 1e-3
    kappa: float = 5e-3
    update_every: int = 2
    explore_steps: int = 512
    noise_std: float = 0.1
    target_noise_std: float = 0.2
    noise_clip: float = 0.5
    buffer_capacity: int = 100_000
    batch_size: int = 128
    max_steps: int = 5000
    hidden: tuple = (64, 64)
    optimizer: str = "adam"
    normalize_rewards: bool = True
    clip_rewards: bool = True
    budget_capped_power: bool = True
    logit_bound: float | None = 3.0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.explore_steps < 1:
            raise ValueError("batch_size, buffer_capacity and explore_steps must be positive")
        if self.max_steps < self.explore_steps:
            raise ValueError("max_steps must cover the exploration phase")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def as_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- optimizers -----------------------------------------------------------
class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        return [(W - self.lr * gW, b - self.lr * gb) for (W, b), (gW, gb) in zip(params, grads)]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        flat_g = [g for pair in grads for g in pair]
        if self.m is None:
            self.m = [np.zeros_like(g) for g in flat_g]
            self.v = [np.zeros_like(g) for g in flat_g]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for i, p in enumerate(q for pair in params for q in pair):
            g = flat_g[i]
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return list(zip(out[0::2], out[1::2]))


def make_optimizer(kind, lr):
    return Adam(lr) if kind == "adam" else SGD(lr)


# -- replay ---------------------------------------------------------------
class ReplayBuffer:
    """Ring buffer of transitions.

    ``sample`` draws without replacement once ``size >= batch``, with
    replacement before that.
    """

    def __init__(self, capacity, state_dim, action_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, state_dim))
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s_next):
        vals = (np.asarray(s, float), np.asarray(a, float), float(r), np.asarray(s_next, float))
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ValueError("transition must be finite")
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s_next[i] = vals
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch, rng):
        if self.size == 0:
            raise ValueError("empty buffer")
        idx = rng.choice(self.size, size=batch, replace=self.size < batch)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx]

    def ordered(self):
        """Stored transitions from oldest to newest."""
        idx = (np.arange(self.size) + (self._next if self.size == self.capacity else 0)) % self.capacity
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx]


# -- state preprocessing --------------------------------------------------
@dataclass
class StateScaler:
    """log10 on channel gains (every entry after the first), then standardization."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @staticmethod
    def _log(states):
        x = np.array(states, dtype=float, ndmin=2)
        x[:, 1:] = np.log10(np.maximum(x[:, 1:], 1e-300))
        return x

    def fit(self, states):
        x = self._log(states)
        self.mean = x.mean(axis=0)
        self.std = np.maximum(x.std(axis=0), 1e-8)
        return self

    def transform(self, states):
        if self.mean.size == 0:
            raise ValueError("scaler is not fitted")
        return (self._log(states) - self.mean) / self.std


# -- update rules ---------------------------------------------------------
def _critic_input(s, a):
    return np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=-1)


def td_target(r, s_next, target_actor: MLP, target_critics, gamma, sigma2, c, rng):
    """``r + gamma * min_i Q_i'(s', pi'(s') + clipped noise)``; noise is pre-squash."""
    s_next = np.atleast_2d(s_next)
    z = target_actor.preactivation(s_next)
    if sigma2 > 0:
        z = z + np.clip(rng.normal(0.0, sigma2, size=z.shape), -c, c)
    a_next = target_actor.squash(z)
    x = _critic_input(s_next, a_next)
    q = np.minimum.reduce([critic(x)[:, 0] for critic in target_critics])
    return np.asarray(r, dtype=float) + gamma * q


def critic_loss(critic: MLP, s, a, y):
    return float(np.mean((critic(_critic_input(s, a))[:, 0] - y) ** 2))


def critic_update(critics, batch, targets, eta_c, optimizers=None):
    """One descent step per critic on mean squared TD error. Returns the critics."""
    s, a = batch[0], batch[1]
    x = _critic_input(s, a)
    y = np.asarray(targets, dtype=float)
    for i, critic in enumerate(critics):
        q = critic(x)[:, 0]
        upstream = (2.0 / len(y)) * (q - y)[:, None]
        grads, _ = critic.gradient(x, upstream)
        opt = optimizers[i] if optimizers is not None else SGD(eta_c)
        critic.params = opt.step(critic.params, grads)
    return critics


def actor_objective(actor: MLP, critic: MLP, s):
    s = np.atleast_2d(s)
    return float(np.mean(critic(_critic_input(s, actor(s)))[:, 0]))


def actor_update(actor: MLP, critic1: MLP, batch, eta_a, optimizer=None):
    """Ascend mean Q1(s, pi(s)) through the critic's action input."""
    s = np.atleast_2d(batch[0])
    a = actor(s)
    x = _critic_input(s, a)
    upstream = np.full((len(s), 1), -1.0 / len(s))
    _, dx = critic1.gradient(x, upstream)
    grads, _ = actor.gradient(s, dx[:, s.shape[1]:])
    opt = optimizer if optimizer is not None else SGD(eta_a)
    actor.params = opt.step(actor.params, grads)
    return actor


def target_update(online: MLP, target: MLP, kappa):
    target.params = [(kappa * W + (1 - kappa) * Wt, kappa * b + (1 - kappa) * bt)
                     for (W, b), (Wt, bt) in zip(online.params, target.params)]
    return target


# -- training loop --------------------------------------------------------
@dataclass
class TrainResult:
    actor: MLP
    scaler: StateScaler
    rewards: np.ndarray
    critics: list
    feasible: np.ndarray
    target_actor: MLP | None = None


def smoothed(rewards, window=200):
    """Trailing mean over at most ``window`` most recent entries."""
    r = np.asarray(rewards, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(r)])
    i = np.arange(1, len(r) + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


class _Tracker:
    """Episode bookkeeping: resets the env every ``episode_rounds`` steps."""

    def __init__(self, env, seeds):
        self.env, self.seeds = env, seeds
        self.obs = env.reset(seeds.spawn(1)[0])
        self.steps_in_episode = 0

    def step(self, action):
        obs, reward, info = self.env.step(self.env.decode(action))
        s = self.obs
        self.steps_in_episode += 1
        if info["truncated"]:
            self.obs = self.env.reset(self.seeds.spawn(1)[0])
            self.steps_in_episode = 0
        else:
            self.obs = obs
        return s, reward, obs, info


def budget_power_cap(scenario):
    """Largest per-node power fraction for which one round alone stays within ``p_bar``."""
    return min(1.0, scenario.p_bar / (scenario.n_nodes * scenario.p_cap))


def train(env, hyper: Td3Hyper = Td3Hyper(), seed=0, callback=None) -> TrainResult:
    """Run ``hyper.max_steps`` environment steps, the first ``explore_steps`` of them random.

    The random policy squashes standard-normal pre-activations. The state
    scaler and reward normalization are fitted on the exploration data
    and frozen afterwards.
    """
    sc = env.scenario
    ss = seed_sequence(seed)
    init_ss, noise_ss, sample_ss, env_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    noise_rng = np.random.default_rng(noise_ss)
    sample_rng = np.random.default_rng(sample_ss)
    sd, ad = sc.state_dim, sc.action_dim
    actor = MLP([sd, *hyper.hidden, ad], "actor", init_rng, bound=hyper.logit_bound,
                power_cap=budget_power_cap(sc) if hyper.budget_capped_power else 1.0)
    critics = [MLP([sd + ad, *hyper.hidden, 1], "linear", init_rng) for _ in range(2)]
    actor_t = actor.copy()
    critics_t = [c.copy() for c in critics]
    opt_a = make_optimizer(hyper.optimizer, hyper.eta_a)
    opt_c = [make_optimizer(hyper.optimizer, hyper.eta_c) for _ in critics]
    buffer = ReplayBuffer(hyper.buffer_capacity, sd, ad)
    tracker = _Tracker(env, env_ss)
    rewards = np.zeros(hyper.max_steps)
    feasible = np.zeros(hyper.max_steps, dtype=bool)

    for t in range(hyper.explore_steps):
        a = actor.squash(noise_rng.standard_normal(ad))
        s, r, s_next, info = tracker.step(a)
        buffer.add(s, a, r, s_next)
        rewards[t], feasible[t] = r, info["feasible"]

    scaler = StateScaler().fit(buffer.ordered()[0])
    r_floor = env.r_p if hyper.clip_rewards else -np.inf
    r_all = np.maximum(buffer.ordered()[2], r_floor)
    r_shift, r_scale = (r_all.mean(), max(r_all.std(), 1e-12)) if hyper.normalize_rewards else (0.0, 1.0)

    for t in range(hyper.explore_steps, hyper.max_steps):
        s_scaled = scaler.transform(tracker.obs)
        noise = noise_rng.normal(0.0, hyper.noise_std, size=(1, ad))
        a = actor(s_scaled, pre_noise=noise)[0]
        s, r, s_next, info = tracker.step(a)
        buffer.add(s, a, r, s_next)
        rewards[t], feasible[t] = r, info["feasible"]

        bs, ba, br, bs_next = buffer.sample(hyper.batch_size, sample_rng)
        bs, bs_next = scaler.transform(bs), scaler.transform(bs_next)
        y = td_target((np.maximum(br, r_floor) - r_shift) / r_scale, bs_next, actor_t, critics_t, hyper.gamma,
                      hyper.target_noise_std, hyper.noise_clip, noise_rng)
        critic_update(critics, (bs, ba), y, hyper.eta_c, opt_c)
        if (t - hyper.explore_steps + 1) % hyper.update_every == 0:
            actor_update(actor, critics[0], (bs,), hyper.eta_a, opt_a)
            target_update(actor, actor_t, hyper.kappa)
            for c, c_t in zip(critics, critics_t):
                target_update(c, c_t, hyper.kappa)
        if callback is not None:
            callback(t, actor, scaler)
    return TrainResult(actor, scaler, rewards, critics, feasible, actor_t)


# -- checkpoint -----------------------------------------------------------
MAGIC = b"BFLACTR\0"
CHECKPOINT_VERSION = 1


def encode_actor(actor: MLP, scaler: StateScaler) -> bytes:
    """Little-endian: magic, version, layer count, layer widths, logit bound
    (0 = none), power cap, scaler mean and std, then each layer's weight
    matrix (row-major) followed by its bias."""
    sizes = actor.sizes
    return b"".join([
        MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
        struct.pack("<dd", actor.bound or 0.0, actor.power_cap),
        np.asarray(scaler.mean, "<f8").tobytes(),
        np.asarray(scaler.std, "<f8").tobytes(),
        flatten(actor.params).astype("<f8").tobytes(),
    ])


def save_actor(path, actor: MLP, scaler: StateScaler):
    with open(path, "wb") as fh:
        fh.write(encode_actor(actor, scaler))


def load_actor(path):
    with open(path, "rb") as fh:
        return decode_actor(fh.read())


def decode_actor(data: bytes):
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not an actor checkpoint")
    pos = len(MAGIC)
    version, n = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 8
    sizes = list(struct.unpack_from(f"<{n}I", data, pos))
    pos += 4 * n
    bound, power_cap = struct.unpack_from("<dd", data, pos)
    pos += 16
    body = np.frombuffer(data, dtype="<f8", offset=pos)
    d = sizes[0]
    scaler = StateScaler(body[:d].copy(), body[d:2 * d].copy())
    params = unflatten(body[2 * d:], sizes)
    return MLP(sizes, "actor", params=params, bound=bound or None, power_cap=power_cap), scaler
