"""Wireless link model for the edge network.

Nodes are indexed globally: servers ``0..M-1`` followed by devices
``M..M+K-1``. Only server-server and device-server links carry traffic, so
fading is simulated for those unordered pairs only (links are reciprocal).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import j0 as _scipy_j0


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def dbm_per_hz_to_watt_per_hz(dbm_per_hz):
    return dbm_to_watt(dbm_per_hz)


@dataclass(frozen=True)
class ChannelParams:
    alpha: float = 2.5
    fd: float = 5.0
    t0: float = 0.01
    n0: float = float(dbm_per_hz_to_watt_per_hz(-174.0))
    slots_per_round: int = 100

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.fd >= 0:
            raise ValueError("fd must be non-negative")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if not self.n0 > 0:
            raise ValueError("n0 must be positive")
        if int(self.slots_per_round) < 1:
            raise ValueError("slots_per_round must be >= 1")

    @property
    def rho(self) -> float:
        """Slot-to-slot correlation of the small-scale coefficient."""
        return float(bessel_j0(2.0 * np.pi * self.fd * self.t0))


@dataclass(frozen=True)
class Topology:
    server_positions: np.ndarray
    device_positions: np.ndarray
    radius: float = 100.0

    def __post_init__(self):
        servers = np.atleast_2d(np.asarray(self.server_positions, dtype=float))
        devices = np.atleast_2d(np.asarray(self.device_positions, dtype=float))
        object.__setattr__(self, "server_positions", servers)
        object.__setattr__(self, "device_positions", devices)
        pos = self.positions
        if pos.shape[1] != 2:
            raise ValueError("positions must be 2-D coordinates")
        if np.any(np.hypot(pos[:, 0], pos[:, 1]) > self.radius * (1 + 1e-12)):
            raise ValueError("node outside the cell radius")
        if np.any(self.link_distances <= 0):
            raise ValueError("colocated nodes on a link")

    @property
    def m(self) -> int:
        return len(self.server_positions)

    @property
    def k(self) -> int:
        return len(self.device_positions)

    @property
    def n_nodes(self) -> int:
        return self.m + self.k

    @property
    def positions(self) -> np.ndarray:
        return np.vstack([self.server_positions, self.device_positions])

    @property
    def links(self) -> np.ndarray:
        """Unordered (i, j) node pairs with i < j that carry traffic."""
        return _link_pairs(self.m, self.k)

    @property
    def link_distances(self) -> np.ndarray:
        pos = self.positions
        i, j = self.links.T
        return np.hypot(*(pos[i] - pos[j]).T)


def _link_pairs(m: int, k: int) -> np.ndarray:
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    pairs += [(s, m + d) for d in range(k) for s in range(m)]
    return np.asarray(pairs, dtype=int).reshape(-1, 2)


def sample_topology(m: int, k: int, radius: float, rng: np.random.Generator) -> Topology:
    """Draw node positions uniformly in the disc."""
    n = m + k
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pos = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    return Topology(pos[:m], pos[m:], radius)


@dataclass(frozen=True)
class FadingState:
    """Small-scale coefficients of every link plus the RNG stream that drives them.

    ``rng`` is never mutated in place by the functions of this module; each
    advance works on a copy so a state can be replayed.
    """

    g: np.ndarray
    rho: float
    rng: np.random.Generator = field(repr=False)

    @classmethod
    def initial(cls, n_links: int, rho: float, seed) -> "FadingState":
        rng = np.random.default_rng(seed)
        g = _complex_normal(rng, (n_links,))
        return cls(g=g, rho=float(rho), rng=rng)


@dataclass(frozen=True)
class LinkGains:
    """Per-round average power gain as a symmetric node-by-node matrix.

    Entries for pairs that carry no traffic (device-device, diagonal) are 0.
    """

    h: np.ndarray

    def __post_init__(self):
        if np.any(self.h < 0):
            raise ValueError("gains must be non-negative")


def _copy_rng(rng: np.random.Generator) -> np.random.Generator:
    bitgen = type(rng.bit_generator)()
    bitgen.state = rng.bit_generator.state
    return np.random.Generator(bitgen)


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    # unit variance: real and imaginary parts each N(0, 1/2)
    z = rng.standard_normal(tuple(shape) + (2,)) * np.sqrt(0.5)
    return z[..., 0] + 1j * z[..., 1]


def path_loss(distance, alpha):
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise ValueError("distance must be positive")
    out = distance ** (-float(alpha))
    return float(out) if out.ndim == 0 else out


def bessel_j0(x):
    """Zeroth-order Bessel function of the first kind."""
    out = _scipy_j0(np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def advance_fading(state: FadingState, innovations=None) -> FadingState:
    """One Gauss-Markov step for every link."""
    rng = _copy_rng(state.rng)
    eps = _complex_normal(rng, state.g.shape) if innovations is None else np.asarray(innovations)
    g = state.rho * state.g + np.sqrt(1.0 - state.rho**2) * eps
    return FadingState(g=g, rho=state.rho, rng=rng)


def fading_trajectory(state: FadingState, n_steps: int, innovations=None):
    """Run ``n_steps`` slots; returns the (n_steps, n_links) coefficient path and the end state.

    Innovations are drawn as one block, which consumes the stream exactly
    like ``n_steps`` calls to :func:`advance_fading`.
    """
    rng = _copy_rng(state.rng)
    if innovations is None:
        eps = _complex_normal(rng, (n_steps,) + state.g.shape)
    else:
        eps = np.asarray(innovations, dtype=complex).reshape((n_steps,) + state.g.shape)
    rho = state.rho
    scale = np.sqrt(1.0 - rho**2)
    # AR(1) filter: g[s] = rho*g[s-1] + scale*eps[s], seeded with g[-1] = state.g
    path, _ = lfilter([scale], [1.0, -rho], eps, axis=0, zi=(rho * state.g)[None, :])
    return path, FadingState(g=path[-1].copy(), rho=rho, rng=rng)


def round_average_gains(topology: Topology, params: ChannelParams, state: FadingState,
                        innovations=None):
    """Advance ``slots_per_round`` slots and average ``zeta * |g|^2`` per link."""
    n_slots = int(params.slots_per_round)
    path, new_state = fading_trajectory(state, n_slots, innovations)
    zeta = path_loss(topology.link_distances, params.alpha)
    mean_gain = zeta * np.mean(np.abs(path) ** 2, axis=0)
    n = topology.n_nodes
    h = np.zeros((n, n))
    i, j = topology.links.T
    h[i, j] = mean_gain
    h[j, i] = mean_gain
    return LinkGains(h), new_state


def transmission_rate(b, p, h, n0):
    """Shannon rate ``b*log2(1 + h*p/(b*n0))``; zero bandwidth gives zero rate."""
    b = np.asarray(b, dtype=float)
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(b < 0) or np.any(p < 0) or np.any(h < 0):
        raise ValueError("bandwidth, power and gain must be non-negative")
    b_safe = np.where(b > 0, b, 1.0)
    rate = np.where(b > 0, b_safe * np.log2(1.0 + h * p / (b_safe * n0)), 0.0)
    return float(rate) if rate.ndim == 0 else rate


def packet_latency(size, rate):
    size = np.asarray(size, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(size < 0):
        raise ValueError("packet size must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(size == 0, 0.0, np.where(rate > 0, size / np.where(rate > 0, rate, 1.0), np.inf))
    return float(out) if out.ndim == 0 else out


__all__ = [
    "ChannelParams", "Topology", "FadingState", "LinkGains", "sample_topology",
    "path_loss", "bessel_j0", "advance_fading", "fading_trajectory",
    "round_average_gains", "transmission_rate", "packet_latency", "dbm_to_watt",
    "dbm_per_hz_to_watt_per_hz",
]
