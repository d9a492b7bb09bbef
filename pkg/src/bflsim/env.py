"""One B-FL round per decision step: state, action decoding, reward, power budget.

State and raw-action vectors use a primary-first layout: servers are listed
starting at the round's primary and wrapping around, then devices in index
order. Decoded :class:`AllocationAction` objects use global node order
(servers ``0..M-1`` then devices).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import seed_sequence
from .channel import (ChannelParams, FadingState, round_average_gains, sample_topology, Topology,
                      dbm_to_watt)
from .consensus import rotate_primary
from .latency import (ComputeParams, MessageSizes, communication_latencies, computation_latencies,
                      fault_bound, round_latency)

# slack for the bandwidth sum and the running power average; equal-share
# allocations sit exactly on both budgets, so summation order must not matter
BUDGET_RTOL = 1e-12


def bandwidth_feasible(bandwidth, b_max):
    """Row-wise ``sum(bandwidth) <= b_max`` up to ``BUDGET_RTOL``."""
    return np.sum(bandwidth, axis=-1) <= b_max * (1 + BUDGET_RTOL)


@dataclass(frozen=True)
class AllocationAction:
    bandwidth: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bandwidth, dtype=float)
        p = np.asarray(self.power, dtype=float)
        if b.shape != p.shape or b.ndim != 1:
            raise ValueError("bandwidth and power must be matching vectors")
        if np.any(b < 0) or np.any(p < 0):
            raise ValueError("allocation must be non-negative")
        object.__setattr__(self, "bandwidth", b)
        object.__setattr__(self, "power", p)

    @property
    def dim(self) -> int:
        return 2 * len(self.bandwidth)


@dataclass(frozen=True)
class MdpState:
    cumulative_latency: float
    device_primary_gains: np.ndarray
    server_pair_gains: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.cumulative_latency], self.device_primary_gains,
                               self.server_pair_gains])

    def __array__(self, dtype=None, copy=None):
        arr = self.to_array()
        return arr if dtype is None else arr.astype(dtype)


@dataclass(frozen=True)
class RewardConfig:
    r_p: float
    p_bar: float


class BudgetTracker:
    """Running average of total transmit power, compensated summation."""

    def __init__(self):
        self.rounds_elapsed = 0
        self.power_sum = 0.0
        self._comp = 0.0

    def _added(self, value):
        y = value - self._comp
        t = self.power_sum + y
        return t, (t - self.power_sum) - y

    def add(self, total_power: float):
        self.power_sum, self._comp = self._added(float(total_power))
        self.rounds_elapsed += 1

    def average(self) -> float:
        if self.rounds_elapsed == 0:
            return 0.0
        return self.power_sum / self.rounds_elapsed

    def average_with(self, total_power):
        """Running average if a round with ``total_power`` were added (vectorized)."""
        return (self.power_sum - self._comp + np.asarray(total_power, dtype=float)) / (self.rounds_elapsed + 1)

    def satisfied(self, p_bar: float) -> bool:
        return self.rounds_elapsed == 0 or self.average() <= p_bar * (1 + BUDGET_RTOL)


def _bandwidth_within(shares, b_max):
    # both the exact sum and numpy's pairwise sum must stay within b_max
    b = np.asarray(shares, dtype=float) * b_max
    if b.ndim == 1:
        while math.fsum(b) > b_max or b.sum() > b_max:
            b = np.nextafter(b, 0.0)
        return b
    over = b.sum(axis=-1) > b_max
    while np.any(over):
        b[over] = np.nextafter(b[over], 0.0)
        over = b.sum(axis=-1) > b_max
    return b


def primary_first_order(m: int, k: int, primary: int) -> np.ndarray:
    """Global node index at each slot of the primary-first layout."""
    order = np.arange(m + k)
    order[:m] = (primary + order[:m]) % m
    return order


def decode_action(raw, m: int, k: int, b_max: float, p_cap: float, primary: int = 0) -> AllocationAction:
    """Map actor output (shares then power fractions, primary-first) to an allocation.

    Shares are clipped at 0 and renormalized (uniform if all zero); power
    fractions are clipped to [0, 1]. The bandwidth sum never exceeds ``b_max``.
    """
    raw = np.asarray(raw, dtype=float)
    n = m + k
    if raw.shape != (2 * n,) or not np.all(np.isfinite(raw)):
        raise ValueError(f"raw action must be {2 * n} finite reals")
    shares = np.maximum(raw[:n], 0.0)
    total = shares.sum()
    shares = np.full(n, 1.0 / n) if not total > 0 or not np.isfinite(total) else shares / total
    frac = np.minimum(np.maximum(raw[n:], 0.0), 1.0)
    order = primary_first_order(m, k, primary)
    b = np.empty(n)
    p = np.empty(n)
    # fsum is order independent, so the permuted vector keeps the bound
    b[order] = _bandwidth_within(shares, b_max)
    p[order] = frac * p_cap
    return AllocationAction(b, p)


def encode_action(action: AllocationAction, m: int, k: int, b_max: float, p_cap: float,
                  primary: int = 0) -> np.ndarray:
    """Inverse of :func:`decode_action` up to renormalization."""
    order = primary_first_order(m, k, primary)
    return np.concatenate([action.bandwidth[order] / b_max, action.power[order] / p_cap])


@dataclass
class Scenario:
    m: int = 4
    k: int = 10
    radius: float = 100.0
    channel: ChannelParams = field(default_factory=ChannelParams)
    compute: ComputeParams = field(default_factory=ComputeParams)
    tx_size: float = 1.0e6
    msg_size: float = 1.0e4
    b_max: float = 1.0e8
    p_cap: float = float(dbm_to_watt(24.0))
    p_bar: float | None = None
    r_p: float | None = None
    episode_rounds: int = 200
    redraw_positions: bool = True

    def __post_init__(self):
        fault_bound(self.m)
        if self.k < 1:
            raise ValueError("need at least one device")
        if self.p_bar is None:
            self.p_bar = 0.5 * (self.m + self.k) * self.p_cap

    @property
    def n_nodes(self) -> int:
        return self.m + self.k

    @property
    def sizes(self) -> MessageSizes:
        return MessageSizes.for_devices(self.k, self.tx_size, self.msg_size)

    @property
    def state_dim(self) -> int:
        return self.k + self.m * (self.m - 1) + 1

    @property
    def action_dim(self) -> int:
        return 2 * (self.m + self.k)


class BflEnv:
    """Wireless B-FL round environment.

    ``reset`` returns the first observation; ``step`` prices the current
    round under an allocation, then moves the channel to the next round.
    Episodes last ``scenario.episode_rounds`` steps (``info["truncated"]``).
    Positions are redrawn from the reset seed when ``redraw_positions`` is
    set, otherwise fixed by the constructor seed.
    """

    def __init__(self, scenario: Scenario, seed=0):
        self.scenario = scenario
        self._seeds = seed_sequence(seed)
        self._topology_seed, self._episode_seeds = self._seeds.spawn(2)
        self.topology = sample_topology(scenario.m, scenario.k, scenario.radius,
                                        np.random.default_rng(self._topology_seed))
        self.reset()

    # -- episode handling -------------------------------------------------
    def reset(self, seed=None) -> np.ndarray:
        sc = self.scenario
        if seed is None:
            seed = self._episode_seeds.spawn(1)[0]
        seed = seed_sequence(seed)
        topo_seed, fading_seed = seed.spawn(2)
        if sc.redraw_positions:
            self.topology = sample_topology(sc.m, sc.k, sc.radius, np.random.default_rng(topo_seed))
        self.round = 0
        self.cumulative_latency = 0.0
        self.tracker = BudgetTracker()
        fading = FadingState.initial(len(self.topology.links), sc.channel.rho, fading_seed)
        self.gains, self.fading = round_average_gains(self.topology, sc.channel, fading)
        if sc.r_p is None:
            avg = self.average_action()
            self.r_p = -10.0 * float(self.latency(avg).total)
        else:
            self.r_p = float(sc.r_p)
        return self.observe().to_array()

    @property
    def primary(self) -> int:
        return rotate_primary(self.round, self.scenario.m)

    @property
    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.r_p, self.scenario.p_bar)

    def average_action(self) -> AllocationAction:
        sc = self.scenario
        n = sc.n_nodes
        return AllocationAction(_bandwidth_within(np.full(n, 1.0 / n), sc.b_max),
                                np.full(n, sc.p_bar / n))

    def observe(self) -> MdpState:
        sc = self.scenario
        h = self.gains.h
        p = self.primary
        servers = (p + np.arange(sc.m)) % sc.m
        dev = h[sc.m + np.arange(sc.k), p]
        off = ~np.eye(sc.m, dtype=bool)
        pairs = h[np.ix_(servers, servers)][off]
        return MdpState(self.cumulative_latency, dev.copy(), pairs.copy())

    def decode(self, raw) -> AllocationAction:
        sc = self.scenario
        return decode_action(raw, sc.m, sc.k, sc.b_max, sc.p_cap, self.primary)

    # -- pricing ----------------------------------------------------------
    def latency(self, action: AllocationAction):
        sc = self.scenario
        return round_latency(action.bandwidth, action.power, self.gains.h, sc.sizes, sc.compute,
                             self.primary, sc.channel.n0, sc.m)

    def evaluate(self, bandwidth, power):
        """Round latency and feasibility of candidate allocations, without side effects.

        ``bandwidth`` and ``power`` are ``(C, M+K)`` arrays in global order.
        """
        sc = self.scenario
        comm = communication_latencies(bandwidth, power, self.gains.h, sc.sizes, self.primary,
                                       sc.channel.n0, sc.m)
        comp = computation_latencies(sc.compute, sc.m, sc.k, self.primary)
        total = comm.total + comp.total
        feasible = bandwidth_feasible(bandwidth, sc.b_max) & \
                   (self.tracker.average_with(np.sum(power, axis=-1)) <= sc.p_bar * (1 + BUDGET_RTOL)) & \
                   np.isfinite(total)
        return total, feasible

    def step(self, action: AllocationAction):
        """Returns ``(next_observation, reward, info)``."""
        sc = self.scenario
        if not isinstance(action, AllocationAction):
            action = self.decode(action)
        breakdown = self.latency(action)
        total = float(breakdown.total)
        self.tracker.add(math.fsum(action.power))
        bandwidth_ok = bool(bandwidth_feasible(action.bandwidth, sc.b_max))
        power_ok = self.tracker.satisfied(sc.p_bar)
        feasible = bandwidth_ok and power_ok and math.isfinite(total)
        reward = -total if feasible else self.r_p
        # a starved link (zero rate) would make the state infinite; charge the penalty latency instead
        self.cumulative_latency += total if math.isfinite(total) else -self.r_p
        self.round += 1
        self.gains, self.fading = round_average_gains(self.topology, sc.channel, self.fading)
        info = {
            "latency": breakdown,
            "feasible": feasible,
            "power_average": self.tracker.average(),
            "truncated": self.round >= sc.episode_rounds,
        }
        return self.observe().to_array(), reward, info


def episode_reset(env: BflEnv, seed=None) -> np.ndarray:
    return env.reset(seed)


def observe(env: BflEnv) -> MdpState:
    return env.observe()


__all__ = [
    "AllocationAction", "MdpState", "RewardConfig", "BudgetTracker", "Scenario", "BflEnv",
    "decode_action", "encode_action", "primary_first_order", "episode_reset", "observe",
    "Topology",
]
