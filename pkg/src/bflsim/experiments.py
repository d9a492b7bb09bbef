"""Experiment drivers behind the CLI.

Each driver takes a validated :class:`ScenarioConfig`, writes its outputs
into a directory and returns the written file names. Every run also leaves
a ``manifest.json`` (resolved config, command, package version, output
hashes) that :func:`replay` can re-execute.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import multi_krum
from .allocator import AveragePolicy, MonteCarloPolicy, RandomPolicy, run_episode
from .channel import dbm_to_watt
from .config import ScenarioConfig, parse_config
from .consensus import PbftNetwork, ServerBehavior, Transaction
from .env import BflEnv
from .fltrain import TrainConfig, make_synthetic_task, run_federated
from .td3.core import encode_actor
from .td3.estimator import TD3Allocator, reward_trace_rows

MANIFEST = "manifest.json"
SWEEPS = ("bandwidth", "power", "devices")


def _seed_stream(seed, *key):
    """Child seed that depends only on the root seed and ``key``."""
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _write(out: Path, name: str, data) -> str:
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8")
    else:
        path.write_bytes(data)
    return name


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: ScenarioConfig, outputs, extra=None) -> Path:
    manifest = {
        "command": command,
        "config": config.model_dump(mode="json"),
        "version": __version__,
        "outputs": {name: _sha256(out / name) for name in sorted(outputs)},
    }
    if extra:
        manifest["arguments"] = extra
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# -- robustness ------------------------------------------------------------
ROBUSTNESS_HEADER = ("malicious_pct", "aggregator", "repeat", "n_attackers", "final_accuracy", "final_loss")


def run_robustness(config: ScenarioConfig):
    """Final accuracy of fedavg and multi-Krum over the malicious-fraction grid.

    Multi-Krum assumes as many Byzantine devices as there are attackers,
    capped at ``K - 3`` so the rule stays defined.
    """
    lc, k = config.learning, config.topology.k
    train_cfg = TrainConfig(lc.learning_rate, lc.batch_size, lc.local_epochs, lc.rounds)
    rows = []
    for rep in range(lc.repeats):
        shards, test = make_synthetic_task(k, lc.samples_per_device, lc.dim,
                                           _seed_stream(config.seed, 1, rep), lc.separation, lc.test_size)
        for frac in config.attack.malicious_fractions:
            n_att = int(round(frac * k))
            krum_f = min(n_att, max(k - 3, 0))
            for agg in ("fedavg", "multi_krum"):
                _, hist = run_federated(shards, test, train_cfg, agg, n_att, krum_f=krum_f,
                                        seed=_seed_stream(config.seed, 2, rep))
                _, loss, acc, _ = hist[-1]
                rows.append((100.0 * frac, agg, rep, n_att, acc, loss))
    return rows


# -- consensus -------------------------------------------------------------
CONSENSUS_HEADER = ("assignment", "n_faulty", "rounds", "committed", "view_changes", "stalls",
                    "first_view_change_round", "safety_violations", "chains_valid")
BEHAVIOR_CODES = {ServerBehavior.HONEST: "H", ServerBehavior.TAMPER_GLOBAL: "T",
                  ServerBehavior.SILENT: "S", ServerBehavior.EQUIVOCATE: "E"}


def behavior_assignments(m, max_faulty):
    """All behavior tuples with at most ``max_faulty`` non-honest servers, in a fixed order."""
    kinds = list(ServerBehavior)
    out = []
    for combo in itertools.product(kinds, repeat=m):
        if sum(b != ServerBehavior.HONEST for b in combo) <= max_faulty:
            out.append(combo)
    return out


def simulate_consensus(behaviors, rounds, k, model_dim, seed, krum_f=0):
    """Run ``rounds`` PBFT rounds with fresh random local models each round."""
    recompute = lambda X: multi_krum(X, krum_f)[1]  # noqa: E731
    net = PbftNetwork(behaviors, recompute)
    rng = np.random.default_rng(seed)
    m = len(behaviors)
    for r in range(rounds):
        txs = [Transaction.sign(rng.standard_normal(model_dim), m + d) for d in range(k)]
        net.run_round(r, txs)
    return net


def run_consensus_faults(config: ScenarioConfig):
    """Outcome table over behavior assignments plus a JSONL ledger export."""
    m, k = config.topology.m, config.topology.k
    cc = config.consensus
    if config.attack.server_behaviors is not None:
        assignments = [tuple(config.attack.server_behaviors)]
    else:
        assignments = behavior_assignments(m, config.attack.max_faulty_servers)
    krum_f = max(0, min(k - 3, int(round(max(config.attack.malicious_fractions) * k))))
    rows, ledger_lines = [], []
    for behaviors in assignments:
        net = simulate_consensus(behaviors, cc.rounds, k, cc.model_dim, _seed_stream(config.seed, 3),
                                 krum_f)
        code = "".join(BEHAVIOR_CODES[b] for b in net.behaviors)
        recs = net.records
        vc_rounds = [r.round_index for r in recs if r.view_changes > 0]
        rows.append((code, m - len(net.honest), len(recs), sum(r.outcome == "committed" for r in recs),
                     sum(r.view_changes for r in recs), sum(r.outcome == "stall" for r in recs),
                     vc_rounds[0] if vc_rounds else -1, net.safety_violations(), net.chains_valid()))
        if net.honest:
            server = net.honest[0]
            for line in net.ledgers[server].to_jsonl().splitlines():
                block = json.loads(line)
                ledger_lines.append(json.dumps({"assignment": code, "server": server, **block},
                                               sort_keys=True, separators=(",", ":")))
    return rows, "".join(line + "\n" for line in ledger_lines)


# -- allocation sweeps ------------------------------------------------------
SWEEP_HEADER = ("sweep", "value", "policy", "mean_latency", "std_latency", "violations", "realizations")


def sweep_scenarios(config: ScenarioConfig, sweep: str):
    sc = config.sweep
    if sweep == "bandwidth":
        return [(v, config.scenario(b_max=v * 1e6)) for v in sc.bandwidth_mhz]
    if sweep == "power":
        # the long-term budget tracks the cap unless pinned in the config
        return [(v, config.scenario(p_cap=float(dbm_to_watt(v)), p_bar=config.budgets.p_bar_w))
                for v in sc.power_dbm]
    if sweep == "devices":
        return [(v, config.scenario(k=int(v))) for v in sc.devices]
    raise ValueError(f"unknown sweep {sweep!r}; expected one of {SWEEPS}")


def make_policy(name, config: ScenarioConfig, scenario=None, seed=None):
    """Policy object; ``td3`` is trained on ``scenario`` here."""
    if name == "average":
        return AveragePolicy()
    if name == "random":
        return RandomPolicy()
    if name == "monte_carlo":
        return MonteCarloPolicy(n_samples=config.sweep.monte_carlo_samples)
    if name == "td3":
        state = _seed_stream(config.seed if seed is None else seed, 4).generate_state(1)[0]
        est = TD3Allocator.from_hyper(config.td3.build(), random_state=int(state))
        return est.fit(BflEnv(scenario, _seed_stream(config.seed, 5)))
    raise ValueError(f"unknown policy {name!r}")


def evaluate_policies(scenario, policies: dict, realizations, seed):
    """Mean episode latency per policy; realization ``r`` uses the same seed for every policy."""
    env = BflEnv(scenario, _seed_stream(seed, 6))
    out = {}
    for name, pol in policies.items():
        lat, viol = [], 0
        for r in range(realizations):
            ep = run_episode(env, pol, seed=_seed_stream(seed, 7, r))
            lat.append(ep["mean_latency"])
            viol += ep["violations"]
        out[name] = (float(np.mean(lat)), float(np.std(lat)), viol)
    return out


def run_latency_sweep(config: ScenarioConfig, sweep: str):
    rows = []
    for value, scenario in sweep_scenarios(config, sweep):
        policies = {name: make_policy(name, config, scenario) for name in config.sweep.policies}
        res = evaluate_policies(scenario, policies, config.realizations, config.seed)
        for name in config.sweep.policies:
            mean, std, viol = res[name]
            rows.append((sweep, float(value), name, mean, std, viol, config.realizations))
    return rows


# -- training ---------------------------------------------------------------
def train_allocator(config: ScenarioConfig):
    """Train the learned allocator on the configured scenario.

    Returns ``(estimator, checkpoint_bytes, trace_csv)``.
    """
    scenario = config.scenario()
    est = make_policy("td3", config, scenario)
    blob = encode_actor(est.actor_, est.scaler_)
    trace = _csv_text(("step", "reward", "smoothed_reward"), reward_trace_rows(est.reward_trace_))
    return est, blob, trace


# -- command entry points -----------------------------------------------------
def execute(command: str, config: ScenarioConfig, out, arguments=None) -> list:
    """Run one command into ``out`` and write its manifest. Returns output names."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    arguments = dict(arguments or {})
    written = []
    if command == "robustness":
        written.append(_write(out, "robustness.csv", _csv_text(ROBUSTNESS_HEADER, run_robustness(config))))
    elif command == "consensus":
        rows, ledger = run_consensus_faults(config)
        written.append(_write(out, "consensus.csv", _csv_text(CONSENSUS_HEADER, rows)))
        written.append(_write(out, "ledger.jsonl", ledger))
    elif command == "sweep":
        kinds = arguments.get("sweeps") or list(SWEEPS)
        arguments["sweeps"] = list(kinds)
        for kind in kinds:
            written.append(_write(out, f"sweep_{kind}.csv",
                                  _csv_text(SWEEP_HEADER, run_latency_sweep(config, kind))))
    elif command == "train":
        _, blob, trace = train_allocator(config)
        written.append(_write(out, "actor.bin", blob))
        written.append(_write(out, "reward_trace.csv", trace))
    else:
        raise ValueError(f"unknown command {command!r}")
    write_manifest(out, command, config, written, arguments or None)
    return written


def replay(manifest_path, out) -> dict:
    """Re-run a manifest into ``out``; returns ``{output: matches}``."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    config = parse_config(manifest["config"])
    execute(manifest["command"], config, out, manifest.get("arguments"))
    out = Path(out)
    return {name: (out / name).exists() and _sha256(out / name) == digest
            for name, digest in sorted(manifest["outputs"].items())}
