"""Baseline bandwidth/power allocation policies.

Every policy exposes ``allocate(env) -> AllocationAction`` and the usual
estimator plumbing (``get_params``/``set_params``, ``fit``). ``reset(seed)``
re-seeds any internal randomness so realizations can be paired across
policies.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .env import AllocationAction, BflEnv, _bandwidth_within


def average_alloc(m: int, k: int, b_max: float, p_bar: float) -> AllocationAction:
    """Equal bandwidth share and ``p_bar/(M+K)`` power for every node."""
    n = m + k
    return AllocationAction(_bandwidth_within(np.full(n, 1.0 / n), b_max), np.full(n, p_bar / n))


def random_alloc(m: int, k: int, b_max: float, p_cap: float, rng: np.random.Generator) -> AllocationAction:
    b, p = _random_batch(m + k, 1, b_max, p_cap, rng)
    return AllocationAction(b[0], p[0])


def _random_batch(n, size, b_max, p_cap, rng):
    shares = rng.dirichlet(np.ones(n), size=size)
    return _bandwidth_within(shares, b_max), rng.uniform(0.0, p_cap, size=(size, n))


def monte_carlo_alloc(env: BflEnv, n_samples: int, rng: np.random.Generator,
                      chunk: int = 4096) -> AllocationAction:
    """Best of ``n_samples`` candidates on the current round.

    Candidate 0 is the average allocation, the rest are random. Infeasible
    candidates (power budget, infinite latency) lose to any feasible one.
    """
    if n_samples < 1:
        raise ValueError("need at least one candidate")
    sc = env.scenario
    avg = average_alloc(sc.m, sc.k, sc.b_max, sc.p_bar)
    best_b, best_p = avg.bandwidth, avg.power
    lat, ok = env.evaluate(best_b[None, :], best_p[None, :])
    best_key = (not ok[0], lat[0])
    remaining = n_samples - 1
    while remaining > 0:
        size = min(chunk, remaining)
        b, p = _random_batch(sc.n_nodes, size, sc.b_max, sc.p_cap, rng)
        lat, ok = env.evaluate(b, p)
        # feasible first, then lowest latency; argmin keeps the first on ties
        key = np.where(ok, lat, np.inf)
        i = int(np.argmin(key)) if np.any(ok) else int(np.argmin(lat))
        cand = (not ok[i], lat[i])
        if cand < best_key:
            best_key, best_b, best_p = cand, b[i], p[i]
        remaining -= size
    return AllocationAction(best_b, best_p)


class AllocationPolicy(BaseEstimator):
    def fit(self, env=None, y=None):
        return self

    def reset(self, seed=None):
        return self

    def allocate(self, env: BflEnv) -> AllocationAction:
        raise NotImplementedError


class AveragePolicy(AllocationPolicy):
    name = "average"

    def __init__(self):
        pass

    def allocate(self, env):
        sc = env.scenario
        return average_alloc(sc.m, sc.k, sc.b_max, sc.p_bar)


class RandomPolicy(AllocationPolicy):
    name = "random"

    def __init__(self, random_state=None):
        self.random_state = random_state

    def reset(self, seed=None):
        self.rng_ = np.random.default_rng(self.random_state if seed is None else seed)
        return self

    def allocate(self, env):
        if not hasattr(self, "rng_"):
            self.reset()
        sc = env.scenario
        return random_alloc(sc.m, sc.k, sc.b_max, sc.p_cap, self.rng_)


class MonteCarloPolicy(AllocationPolicy):
    name = "monte_carlo"

    def __init__(self, n_samples=10_000, random_state=None):
        self.n_samples = n_samples
        self.random_state = random_state

    def reset(self, seed=None):
        self.rng_ = np.random.default_rng(self.random_state if seed is None else seed)
        return self

    def allocate(self, env):
        if not hasattr(self, "rng_"):
            self.reset()
        return monte_carlo_alloc(env, int(self.n_samples), self.rng_)


def run_episode(env: BflEnv, policy, seed=None, rounds: int | None = None) -> dict:
    """Play one episode; returns mean latency, rewards and the violation count."""
    env.reset(seed)
    policy.reset(seed)
    rounds = env.scenario.episode_rounds if rounds is None else rounds
    latencies, rewards, violations = [], [], 0
    for _ in range(rounds):
        action = policy.allocate(env)
        _, reward, info = env.step(action)
        latencies.append(float(info["latency"].total))
        rewards.append(reward)
        violations += not info["feasible"]
    return {
        "mean_latency": float(np.mean(latencies)),
        "latencies": latencies,
        "rewards": rewards,
        "violations": violations,
    }
