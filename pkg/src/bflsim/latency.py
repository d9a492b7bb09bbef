"""Closed-form latency of one B-FL round.

Every step is a synchronized barrier, so a step costs the slowest
participant. Communication uses the sender's own band and power; a
broadcast is one transmission whose latency is the worst receiver.

All communication functions accept allocations with leading batch
dimensions, which the Monte-Carlo allocator relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .channel import packet_latency, transmission_rate


def fault_bound(m: int) -> int:
    """``f`` such that ``m == 3f + 1``."""
    m = int(m)
    if m < 4 or (m - 1) % 3:
        raise ValueError(f"server count must be 3f+1 with f >= 1, got {m}")
    return (m - 1) // 3


@dataclass(frozen=True)
class ComputeParams:
    f_server: np.ndarray | float = 2.4e9
    f_device: np.ndarray | float = 1.0e9
    rho_sig: float = 1.0e6
    sigma_agg: float = 1.0e7
    delta_sample: float = 1.0e6
    batch_size: np.ndarray | float = 128

    def __post_init__(self):
        for f in fields(self):
            if np.any(np.asarray(getattr(self, f.name), dtype=float) <= 0):
                raise ValueError(f"{f.name} must be strictly positive")


@dataclass(frozen=True)
class MessageSizes:
    tx_size: float
    block_size: float
    msg_size: float

    @classmethod
    def for_devices(cls, k: int, tx_size: float = 1.0e6, msg_size: float = 1.0e4):
        """Block carries K local-model transactions plus the global one."""
        return cls(tx_size=tx_size, block_size=(k + 1) * tx_size, msg_size=msg_size)


@dataclass(frozen=True)
class CommLatency:
    up: np.ndarray | float
    preprepare: np.ndarray | float
    prepare: np.ndarray | float
    commit: np.ndarray | float
    reply: np.ndarray | float
    download: np.ndarray | float

    @property
    def total(self):
        return self.up + self.preprepare + self.prepare + self.commit + self.reply + self.download


@dataclass(frozen=True)
class CompLatency:
    train: float
    up: float
    agg: float
    preprepare: float
    prepare: float
    commit: float
    reply: float

    @property
    def total(self):
        return self.train + self.up + self.agg + self.preprepare + self.prepare + self.commit + self.reply


@dataclass(frozen=True)
class LatencyBreakdown:
    comm: CommLatency
    comp: CompLatency
    total: np.ndarray | float

    def as_dict(self) -> dict:
        out = {f"comm_{f.name}": getattr(self.comm, f.name) for f in fields(self.comm)}
        out.update({f"comp_{f.name}": getattr(self.comp, f.name) for f in fields(self.comp)})
        out["total"] = self.total
        return out


def _per_node(value, n):
    return np.broadcast_to(np.asarray(value, dtype=float), (n,))


def computation_latencies(params: ComputeParams, m: int, k: int, primary: int = 0) -> CompLatency:
    f = fault_bound(m)
    if k < 1:
        raise ValueError("need at least one device")
    f_srv = _per_node(params.f_server, m)
    f_dev = _per_node(params.f_device, k)
    batch = _per_node(params.batch_size, k)
    rho, sigma = params.rho_sig, params.sigma_agg
    validators = np.arange(m) != primary

    train = np.max(batch * params.delta_sample / f_dev)
    up = np.max(rho / f_dev)
    agg = (k * rho + sigma) / f_srv[primary]
    preprepare = np.max((rho + (k + 1) * rho + sigma) / f_srv[validators])
    delta_prepare = np.where(validators, rho + 2 * f * rho, 2 * f * rho)
    prepare = np.max(delta_prepare / f_srv)
    commit = np.max((rho + 2 * f * rho) / f_srv)
    delta_reply = np.where(validators, rho, 2 * f * rho)
    reply = np.max(delta_reply / f_srv)
    return CompLatency(*(float(x) for x in (train, up, agg, preprepare, prepare, commit, reply)))


def communication_latencies(bandwidth, power, h, sizes: MessageSizes, primary: int, n0: float,
                            m: int) -> CommLatency:
    """Per-step communication latency.

    ``bandwidth`` and ``power`` have shape ``(..., M+K)`` in global node
    order; ``h`` is the ``(M+K, M+K)`` gain matrix of the round.
    """
    b = np.asarray(bandwidth, dtype=float)
    p = np.asarray(power, dtype=float)
    h = np.asarray(h, dtype=float)
    n = h.shape[0]
    if b.shape[-1] != n or p.shape[-1] != n:
        raise ValueError("allocation does not match the node count")
    k = n - m
    servers = np.arange(m)
    devices = np.arange(m, n)
    validators = servers[servers != primary]

    def rate(sender, receiver):
        # sender/receiver index arrays broadcast against each other
        return transmission_rate(b[..., sender], p[..., sender], h[sender, receiver], n0)

    # devices -> primary and primary -> devices
    r_up = rate(devices, np.full(k, primary))
    r_down = rate(np.full(k, primary), devices)
    # server -> server, shape (..., M, M) with [..., x, y] = rate x -> y
    r_ss = rate(servers[:, None], servers[None, :])
    off_diag = ~np.eye(m, dtype=bool)

    up = np.max(packet_latency(sizes.tx_size, r_up), axis=-1)
    preprepare = np.max(packet_latency(sizes.block_size, r_ss[..., primary, validators]), axis=-1)
    t_ss = packet_latency(sizes.msg_size, r_ss)
    t_ss = np.where(off_diag, t_ss, 0.0)
    prepare = np.max(t_ss[..., validators, :], axis=(-2, -1))
    commit = np.max(t_ss, axis=(-2, -1))
    reply = np.max(t_ss[..., validators, primary], axis=-1)
    download = np.max(packet_latency(sizes.tx_size, r_down), axis=-1)
    out = [up, preprepare, prepare, commit, reply, download]
    if b.ndim == 1:
        out = [float(x) for x in out]
    return CommLatency(*out)


def total_round_latency(comm: CommLatency, comp: CompLatency):
    return comm.total + comp.total


def round_latency(bandwidth, power, h, sizes: MessageSizes, compute: ComputeParams, primary: int,
                  n0: float, m: int) -> LatencyBreakdown:
    k = np.asarray(h).shape[0] - m
    comm = communication_latencies(bandwidth, power, h, sizes, primary, n0, m)
    comp = computation_latencies(compute, m, k, primary)
    return LatencyBreakdown(comm=comm, comp=comp, total=total_round_latency(comm, comp))
