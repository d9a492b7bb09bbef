"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the run summary prints.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from bflsim.allocator import AveragePolicy, MonteCarloPolicy, RandomPolicy, run_episode
from bflsim.channel import ChannelParams, FadingState, fading_trajectory
from bflsim.cli import main as cli_main
from bflsim.config import ScenarioConfig, parse_config
from bflsim.consensus import ServerBehavior, verify_chain
from bflsim.env import BflEnv, Scenario, decode_action
from bflsim.experiments import (behavior_assignments, evaluate_policies, make_policy, run_robustness,
                                simulate_consensus, sweep_scenarios)
from bflsim.fltrain import local_gradient, local_loss
from bflsim.latency import ComputeParams, MessageSizes, round_latency
from bflsim.td3.core import actor_update
from bflsim.td3.estimator import reward_trace_rows
from bflsim.td3.mlp import MLP, flatten, unflatten

from conftest import record
from oracles import (bessel_j0_series, central_difference, event_timeline_latency,
                     relative_error)

H, T, S, E = (ServerBehavior.HONEST, ServerBehavior.TAMPER_GLOBAL, ServerBehavior.SILENT,
              ServerBehavior.EQUIVOCATE)


# 1 -------------------------------------------------------------------------
def test_byzantine_device_robustness_pattern():
    t0 = time.perf_counter()
    details, ok = [], True
    for seed in range(5):
        cfg = parse_config({"seed": seed, "attack": {"malicious_fractions": [0.0, 0.4, 0.5]}})
        rows = run_robustness(cfg)
        acc = {(r[0], r[1]): r[4] for r in rows}
        clean = acc[(0.0, "fedavg")]
        krum40 = acc[(40.0, "multi_krum")]
        avg50 = acc[(50.0, "fedavg")]
        good = abs(krum40 - clean) <= 0.02 and avg50 <= 0.6
        ok &= good
        details.append(f"seed {seed}: fedavg@0={clean:.4f} krum@40={krum40:.4f} fedavg@50={avg50:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    assert record(1, "multi-Krum robust to 4 attackers, fedavg collapses at 5", ok,
                  "; ".join(details) + f"; {elapsed:.1f}s"), details


# 2 -------------------------------------------------------------------------
def test_pbft_safety_and_liveness():
    t0 = time.perf_counter()
    problems = []
    for behaviors in behavior_assignments(4, 1):
        net = simulate_consensus(behaviors, rounds=8, k=5, model_dim=4, seed=11)
        if net.safety_violations():
            problems.append(f"{behaviors}: safety")
        for rec in net.records:
            if rec.outcome != "committed" or rec.view_changes > 2:
                problems.append(f"{behaviors}: round {rec.round_index} {rec.outcome}/{rec.view_changes}")
        if not all(verify_chain(net.ledgers[s]) for s in net.honest):
            problems.append(f"{behaviors}: chain")
    stalled = []
    for i in range(1, 4):
        for j in range(i + 1, 4):
            behaviors = [H] * 4
            behaviors[i] = behaviors[j] = E
            net = simulate_consensus(behaviors, rounds=8, k=5, model_dim=4, seed=11)
            if not net.chains_valid():
                problems.append(f"{behaviors}: chain")
            if any(r.outcome == "stall" for r in net.records):
                stalled.append("".join(b.value[0] for b in behaviors))
    elapsed = time.perf_counter() - t0
    ok = not problems and bool(stalled) and elapsed < 30
    assert record(2, "PBFT commits with at most one faulty server, stalls with two equivocators", ok,
                  f"{len(behavior_assignments(4, 1))} assignments, stalls in {stalled}, "
                  f"{len(problems)} problems, {elapsed:.1f}s"), problems


# 3 -------------------------------------------------------------------------
def _random_latency_case(rng):
    m = int(rng.choice([4, 7]))
    k = int(rng.integers(1, 13))
    n = m + k
    h = np.zeros((n, n))
    gains = 10 ** rng.uniform(-9, -3, size=(n, n))
    h[:m, :] = gains[:m, :]
    h[:, :m] = gains[:, :m]
    h = np.triu(h, 1)
    h = h + h.T
    f_server = rng.uniform(1e9, 4e9, size=m)
    f_device = rng.uniform(5e8, 2e9, size=k)
    batch = rng.integers(16, 256, size=k).astype(float)
    compute = ComputeParams(f_server, f_device, rng.uniform(1e5, 1e7), rng.uniform(1e6, 1e8),
                            rng.uniform(1e5, 1e7), batch)
    tx = rng.uniform(1e5, 1e7)
    sizes = MessageSizes.for_devices(k, tx, rng.uniform(1e3, 1e5))
    b = rng.dirichlet(np.ones(n)) * rng.uniform(1e7, 2e8)
    p = rng.uniform(1e-3, 0.3, size=n)
    n0 = 10 ** rng.uniform(-21, -17)
    primary = int(rng.integers(m))
    return dict(b=b, p=p, h=h, sizes=sizes, compute=compute, primary=primary, n0=n0, m=m, k=k,
                f_server=f_server, f_device=f_device, batch=batch)


def test_latency_matches_event_timeline():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        c = _random_latency_case(rng)
        closed = round_latency(c["b"], c["p"], c["h"], c["sizes"], c["compute"], c["primary"], c["n0"],
                               c["m"]).as_dict()
        cp = c["compute"]
        ref = event_timeline_latency(c["b"].tolist(), c["p"].tolist(), c["h"].tolist(), c["m"], c["k"],
                                     c["primary"], c["n0"], c["sizes"].tx_size, c["sizes"].block_size,
                                     c["sizes"].msg_size, c["f_server"].tolist(), c["f_device"].tolist(),
                                     cp.rho_sig, cp.sigma_agg, cp.delta_sample, c["batch"].tolist())
        assert set(closed) == set(ref)
        for key, val in ref.items():
            worst = max(worst, abs(closed[key] - val) / abs(val))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    assert record(3, "closed-form latency equals the event-timeline simulation", ok,
                  f"worst relative gap {worst:.2e}, {elapsed:.2f}s")


# 4 -------------------------------------------------------------------------
def test_fading_lag1_correlation():
    t0 = time.perf_counter()
    expected = bessel_j0_series(2 * math.pi * 5 * 0.01)
    params = ChannelParams()
    state = FadingState.initial(1, params.rho, 7)
    path, _ = fading_trajectory(state, 1_000_000)
    g = path[:, 0]
    corr = float(np.mean((g[1:] * np.conj(g[:-1])).real))
    elapsed = time.perf_counter() - t0
    ok = abs(corr - expected) <= 0.01 and elapsed < 10
    assert record(4, "fading lag-1 correlation matches J0(2*pi*fd*T0)", ok,
                  f"empirical {corr:.6f} vs {expected:.6f}, {elapsed:.2f}s")


# 5 -------------------------------------------------------------------------
def _net(rng, sizes, head="linear", bound=None, power_cap=1.0):
    params = [(rng.normal(0, 0.7, (a, b)), rng.normal(0, 0.3, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return MLP(sizes, head, params=params, bound=bound, power_cap=power_cap)


def test_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    errs = {"logistic": 0.0, "critic": 0.0, "actor": 0.0, "actor_through_critic": 0.0}
    for _ in range(100):
        # logistic loss
        X = rng.normal(size=(20, 6))
        y = (rng.uniform(size=20) < 0.5).astype(float)
        w = rng.normal(size=7)
        errs["logistic"] = max(errs["logistic"], relative_error(
            local_gradient(w, X, y), central_difference(lambda v: local_loss(v, X, y), w)))

        # critic layers and input, then actor layers and input
        for kind in ("critic", "actor"):
            if kind == "critic":
                net = _net(rng, [5, 8, 8, 1])
            else:
                net = _net(rng, [5, 8, 8, 6], "actor", bound=float(rng.uniform(1, 4)),
                           power_cap=float(rng.uniform(0.2, 1)))
            x = rng.normal(size=(3, 5))
            up = rng.normal(size=(3, net.sizes[-1]))
            grads, gx = net.gradient(x, up)
            sizes = net.sizes

            def f_params(v, net=net, x=x, up=up, sizes=sizes):
                return float(np.sum(MLP(sizes, net.head, params=unflatten(v, sizes), bound=net.bound,
                                        power_cap=net.power_cap)(x) * up))

            e1 = relative_error(flatten(grads), central_difference(f_params, flatten(net.params)))
            e2 = relative_error(gx, central_difference(lambda v, net=net, up=up: float(np.sum(net(v) * up)), x))
            errs[kind] = max(errs[kind], e1, e2)

        # actor ascent step through critic 1's action input
        actor = _net(rng, [4, 8, 8, 6], "actor", bound=3.0, power_cap=0.5)
        critic = _net(rng, [10, 8, 8, 1])
        s = rng.normal(size=(4, 4))
        before = flatten(actor.params)
        step = actor.copy()
        actor_update(step, critic, (s,), 1.0)
        analytic = flatten(step.params) - before  # SGD with unit rate moves by +grad of mean Q

        def objective(v):
            a = MLP(actor.sizes, "actor", params=unflatten(v, actor.sizes), bound=3.0, power_cap=0.5)
            return float(np.mean(critic(np.hstack([s, a(s)]))[:, 0]))

        errs["actor_through_critic"] = max(errs["actor_through_critic"],
                                           relative_error(analytic, central_difference(objective, before)))
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-4 and elapsed < 30
    assert record(5, "analytic gradients match central differences", ok,
                  ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s"), errs


# 6 -------------------------------------------------------------------------
@pytest.mark.slow
def test_allocation_ordering():
    t0 = time.perf_counter()
    config = ScenarioConfig()
    scenario = config.scenario()
    td3 = make_policy("td3", config, scenario)
    train_s = time.perf_counter() - t0
    policies = {"td3": td3, "average": AveragePolicy(), "random": RandomPolicy(),
                "monte_carlo": MonteCarloPolicy(n_samples=10_000)}
    res = evaluate_policies(scenario, policies, 50, config.seed)
    elapsed = time.perf_counter() - t0
    lat = {k: v[0] for k, v in res.items()}
    ok = (lat["td3"] <= lat["average"] and lat["td3"] <= lat["random"]
          and lat["td3"] <= 1.1 * lat["monte_carlo"] and elapsed < 900)
    detail = ", ".join(f"{k} {v[0]:.4f}s ({v[2]} violations)" for k, v in res.items())
    assert record(6, "td3 beats average and random, within 10% of Monte-Carlo", ok,
                  f"{detail}; td3/mc {lat['td3'] / lat['monte_carlo']:.3f}; train {train_s:.0f}s, "
                  f"total {elapsed:.0f}s"), lat


# 7 -------------------------------------------------------------------------
def _average_curve(config, sweep):
    out = []
    for value, scenario in sweep_scenarios(config, sweep):
        res = evaluate_policies(scenario, {"average": AveragePolicy()}, 50, config.seed)
        out.append((value, res["average"][0]))
    return out


@pytest.mark.slow
def test_average_allocation_trends():
    t0 = time.perf_counter()
    config = ScenarioConfig()
    bw = _average_curve(config, "bandwidth")
    pw = _average_curve(config, "power")
    dev = _average_curve(config, "devices")
    dec = lambda c: all(b[1] < a[1] for a, b in zip(c, c[1:]))  # noqa: E731
    inc = lambda c: all(b[1] > a[1] for a, b in zip(c, c[1:]))  # noqa: E731
    elapsed = time.perf_counter() - t0
    ok = dec(bw) and dec(pw) and inc(dev) and elapsed < 300
    fmt = lambda c: " ".join(f"{v:g}:{l:.4f}" for v, l in c)  # noqa: E731
    assert record(7, "average-allocation latency trends in bandwidth, power and device count", ok,
                  f"MHz [{fmt(bw)}] dBm [{fmt(pw)}] K [{fmt(dev)}], {elapsed:.0f}s")


# 8 -------------------------------------------------------------------------
def test_constraint_enforcement(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    m, k, b_max, p_cap = 4, 10, 1e8, 0.251
    raws = rng.normal(size=(100_000, 2 * (m + k))) * 10.0 ** rng.integers(-3, 4, size=(100_000, 1))
    decoded = [decode_action(raw, m, k, b_max, p_cap, primary=i % m) for i, raw in enumerate(raws)]
    B = np.array([a.bandwidth for a in decoded])
    P = np.array([a.power for a in decoded])
    over = sum(math.fsum(row) > b_max for row in B)
    bad = int(over + np.any(B < 0, axis=1).sum() + np.any((P < 0) | (P > p_cap), axis=1).sum())

    # full power every round: the running average exceeds p_bar from round 1
    env = BflEnv(Scenario(), seed=3)

    class FullPower(AveragePolicy):
        def allocate(self, env):
            a = super().allocate(env)
            return type(a)(a.bandwidth, np.full_like(a.power, env.scenario.p_cap))

    ep = run_episode(env, FullPower(), seed=4, rounds=20)
    rows = reward_trace_rows(ep["rewards"])
    penalties = sum(r[1] == env.r_p for r in rows)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and penalties == 20 and ep["violations"] == 20 and elapsed < 5
    assert record(8, "decoded actions respect the bandwidth budget, budget breach pays r_p", ok,
                  f"{bad} bad decodes of 1e5, {penalties}/20 penalty rows, {elapsed:.2f}s")


# 9 -------------------------------------------------------------------------
SMALL = """\
seed: 3
realizations: 2
episode_rounds: 10
topology: {m: 4, k: 4}
attack: {malicious_fractions: [0.0, 0.5]}
learning: {dim: 20, samples_per_device: 40, test_size: 200, rounds: 5}
consensus: {rounds: 3, model_dim: 3}
td3: {max_steps: 300, explore_steps: 100, batch_size: 32}
sweep:
  bandwidth_mhz: [50, 100]
  power_dbm: [20, 24]
  devices: [4, 6]
  monte_carlo_samples: 50
"""


def test_cli_replay_is_byte_identical(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "small.yaml"
    cfg.write_text(SMALL)
    verdicts = {}
    for command in ("robustness", "consensus", "sweep", "train"):
        out = tmp_path / command
        assert cli_main([command, "--config", str(cfg), "--out", str(out)]) == 0
        code = cli_main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / f"{command}_re")])
        files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
        same = all((out / f).read_bytes() == (tmp_path / f"{command}_re" / f).read_bytes() for f in files)
        verdicts[command] = code == 0 and same and bool(files)
    elapsed = time.perf_counter() - t0
    assert record(9, "every subcommand replays byte-identical from its manifest", all(verdicts.values()),
                  f"{verdicts}, {elapsed:.1f}s"), verdicts
