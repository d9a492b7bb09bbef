"""Scenario configuration: YAML in, validated models out, SI units inside.

Power-like fields named ``*_dbm`` are converted to watts when the config is
parsed; nothing downstream sees dBm.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .channel import ChannelParams, dbm_per_hz_to_watt_per_hz, dbm_to_watt
from .consensus import ServerBehavior
from .env import Scenario
from .latency import ComputeParams, fault_bound
from .td3.core import Td3Hyper


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TopologyConfig(_Strict):
    m: int = 4
    k: int = 10
    radius: float = Field(100.0, gt=0)

    @field_validator("m")
    @classmethod
    def _m_is_3f_plus_1(cls, v):
        fault_bound(v)
        return v

    @field_validator("k")
    @classmethod
    def _k_positive(cls, v):
        if v < 1:
            raise ValueError("need at least one device")
        return v


class ChannelConfig(_Strict):
    path_loss_exponent: float = Field(2.5, gt=0)
    doppler_hz: float = Field(5.0, ge=0)
    slot_s: float = Field(0.01, gt=0)
    noise_dbm_per_hz: float = -174.0
    slots_per_round: int = Field(100, ge=1)

    def build(self) -> ChannelParams:
        return ChannelParams(alpha=self.path_loss_exponent, fd=self.doppler_hz, t0=self.slot_s,
                             n0=float(dbm_per_hz_to_watt_per_hz(self.noise_dbm_per_hz)),
                             slots_per_round=self.slots_per_round)


class ComputeConfig(_Strict):
    server_hz: float = Field(2.4e9, gt=0)
    device_hz: float = Field(1.0e9, gt=0)
    signature_cycles: float = Field(1.0e6, ge=0)
    aggregation_cycles: float = Field(1.0e7, ge=0)
    cycles_per_sample: float = Field(1.0e6, ge=0)
    batch_size: int = Field(128, ge=1)

    def build(self) -> ComputeParams:
        return ComputeParams(self.server_hz, self.device_hz, self.signature_cycles,
                             self.aggregation_cycles, self.cycles_per_sample, self.batch_size)


class MessageConfig(_Strict):
    tx_size_bits: float = Field(1.0e6, gt=0)
    msg_size_bits: float = Field(1.0e4, gt=0)


class BudgetConfig(_Strict):
    b_max_hz: float = Field(1.0e8, gt=0)
    p_cap_dbm: float = 24.0
    # None -> half of every node transmitting at p_cap
    p_bar_w: Optional[float] = Field(None, gt=0)
    penalty: Optional[float] = None

    @property
    def p_cap_w(self) -> float:
        return float(dbm_to_watt(self.p_cap_dbm))


class AttackConfig(_Strict):
    malicious_fractions: list[float] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    server_behaviors: Optional[list[ServerBehavior]] = None
    max_faulty_servers: int = Field(2, ge=0)

    @field_validator("malicious_fractions")
    @classmethod
    def _fractions(cls, v):
        if not v or any(not 0 <= f <= 1 for f in v):
            raise ValueError("fractions must lie in [0, 1]")
        return v


class LearningConfig(_Strict):
    """Synthetic federated task used by the robustness experiment."""

    dim: int = Field(500, ge=1)
    samples_per_device: int = Field(200, ge=1)
    separation: float = Field(4.5, gt=0)
    test_size: int = Field(2000, ge=1)
    rounds: int = Field(100, ge=1)
    learning_rate: float = Field(0.01, gt=0)
    batch_size: int = Field(32, ge=1)
    local_epochs: int = Field(1, ge=1)
    repeats: int = Field(1, ge=1)


class ConsensusRunConfig(_Strict):
    rounds: int = Field(8, ge=1)
    model_dim: int = Field(8, ge=1)


class Td3Config(_Strict):
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
    hidden: list[int] = [64, 64]
    optimizer: str = "adam"

    def build(self) -> Td3Hyper:
        return Td3Hyper(**self.model_dump())


class SweepConfig(_Strict):
    bandwidth_mhz: list[float] = [20.0, 40.0, 60.0, 80.0, 100.0]
    power_dbm: list[float] = [14.0, 16.0, 18.0, 20.0, 22.0, 24.0]
    devices: list[int] = [10, 20, 40]
    policies: list[str] = ["random", "average", "monte_carlo", "td3"]
    monte_carlo_samples: int = Field(10_000, ge=1)

    @field_validator("policies")
    @classmethod
    def _known(cls, v):
        bad = set(v) - {"random", "average", "monte_carlo", "td3"}
        if bad:
            raise ValueError(f"unknown policies {sorted(bad)}")
        return v


class ScenarioConfig(_Strict):
    topology: TopologyConfig = TopologyConfig()
    channel: ChannelConfig = ChannelConfig()
    compute: ComputeConfig = ComputeConfig()
    messages: MessageConfig = MessageConfig()
    budgets: BudgetConfig = BudgetConfig()
    attack: AttackConfig = AttackConfig()
    learning: LearningConfig = LearningConfig()
    consensus: ConsensusRunConfig = ConsensusRunConfig()
    td3: Td3Config = Td3Config()
    sweep: SweepConfig = SweepConfig()
    episode_rounds: int = Field(200, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    realizations: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _behaviors_match_m(self):
        sb = self.attack.server_behaviors
        if sb is not None and len(sb) != self.topology.m:
            raise ValueError("attack.server_behaviors needs one entry per server")
        return self

    def scenario(self, **overrides) -> Scenario:
        """Environment scenario; ``overrides`` replace individual Scenario fields."""
        kw = dict(
            m=self.topology.m, k=self.topology.k, radius=self.topology.radius,
            channel=self.channel.build(), compute=self.compute.build(),
            tx_size=self.messages.tx_size_bits, msg_size=self.messages.msg_size_bits,
            b_max=self.budgets.b_max_hz, p_cap=self.budgets.p_cap_w, p_bar=self.budgets.p_bar_w,
            r_p=self.budgets.penalty, episode_rounds=self.episode_rounds,
        )
        kw.update(overrides)
        return Scenario(**kw)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


def _format(err: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors())


def parse_config(data: dict | None, **overrides) -> ScenarioConfig:
    data = dict(data or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: str | Path | None, **overrides) -> ScenarioConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("<root>: config must be a mapping")
    return parse_config(data, **overrides)
