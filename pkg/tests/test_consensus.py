import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bflsim.aggregation import multi_krum
from bflsim.consensus import (Block, ChainError, Ledger, Outcome, PbftNetwork, ServerBehavior,
                              Transaction, append_block, quorum, rotate_primary, run_pbft_round,
                              verify_chain)
from bflsim.experiments import simulate_consensus

H, T, S, E = (ServerBehavior.HONEST, ServerBehavior.TAMPER_GLOBAL, ServerBehavior.SILENT,
              ServerBehavior.EQUIVOCATE)


def recompute(X):
    return multi_krum(X, 1)[1]


def txs(rng, k=5, dim=3, m=4):
    return [Transaction.sign(rng.normal(size=dim), m + d) for d in range(k)]


def test_rotate_primary_and_quorum():
    assert rotate_primary(0, 4) == 0
    assert rotate_primary(5, 4) == 1
    assert all(rotate_primary(4 * j, 4) == 0 for j in range(10))
    assert [quorum(m) for m in (4, 7, 10)] == [2, 4, 6]
    with pytest.raises(ValueError):
        quorum(5)


def test_all_honest_round_commits():
    ledgers = [Ledger.with_genesis() for _ in range(4)]
    out = run_pbft_round(ledgers, txs(np.random.default_rng(0)), 0, [H] * 4, recompute)
    assert out.kind == Outcome.COMMITTED
    assert {l.tip.digest for l in ledgers} == {out.block.digest}
    assert all(len(l) == 2 for l in ledgers)


def test_tampering_primary_triggers_view_change():
    ledgers = [Ledger.with_genesis() for _ in range(4)]
    out = run_pbft_round(ledgers, txs(np.random.default_rng(0)), 0, [T, H, H, H], recompute)
    assert out.kind == Outcome.VIEW_CHANGE
    assert out.next_primary == 1
    assert all(len(ledgers[s]) == 1 for s in (1, 2, 3))


def test_one_silent_validator_still_commits():
    ledgers = [Ledger.with_genesis() for _ in range(4)]
    out = run_pbft_round(ledgers, txs(np.random.default_rng(0)), 0, [H, H, S, H], recompute)
    assert out.kind == Outcome.COMMITTED
    assert set(out.committed) == {0, 1, 3}


def test_network_all_honest_fifty_rounds():
    net = simulate_consensus([H] * 4, rounds=50, k=4, model_dim=3, seed=1)
    assert all(r.outcome == "committed" and r.view_changes == 0 for r in net.records)
    assert net.chains_valid() and net.safety_violations() == 0
    assert len(net.ledgers[0]) == 51


def test_malicious_primary_at_round_three_gives_one_view_change():
    net = simulate_consensus([H, H, H, T], rounds=6, k=4, model_dim=3, seed=1)
    vc = [(r.round_index, r.view_changes) for r in net.records if r.view_changes]
    assert vc == [(3, 1)]
    assert all(r.outcome == "committed" for r in net.records)


def test_two_equivocating_validators_stall():
    net = simulate_consensus([H, E, E, H], rounds=4, k=4, model_dim=3, seed=1)
    assert any(r.outcome == "stall" for r in net.records)
    assert net.safety_violations() == 0
    assert net.chains_valid()


def test_ledger_append_rules():
    ledger = Ledger.with_genesis()
    tx = Transaction.sign([1.0], 4)
    block = Block.create(1, ledger.tip.digest, [tx], 0)
    append_block(ledger, block)
    assert len(ledger) == 2
    with pytest.raises(ChainError):
        append_block(ledger, Block.create(2, "f" * 64, [tx], 0))
    with pytest.raises(ChainError):
        append_block(ledger, Block.create(5, ledger.tip.digest, [tx], 0))


def _three_block_chain():
    rng = np.random.default_rng(3)
    ledger = Ledger.with_genesis()
    for h in range(1, 4):
        ledger.append(Block.create(h, ledger.tip.digest, txs(rng, k=2, dim=2), h % 4))
    return ledger


def test_verify_chain_examples():
    assert verify_chain(Ledger())
    assert verify_chain(Ledger.with_genesis())
    assert verify_chain(_three_block_chain())


def test_every_single_bit_flip_is_detected():
    ledger = _three_block_chain()
    for b_idx in range(1, len(ledger)):
        block = ledger[b_idx]
        for t_idx, tx in enumerate(block.transactions):
            raw = bytearray(np.asarray(tx.payload, "<f8").tobytes())
            for bit in range(len(raw) * 8):
                flipped = bytearray(raw)
                flipped[bit // 8] ^= 1 << (bit % 8)
                payload = np.frombuffer(bytes(flipped), "<f8")
                bad_tx = Transaction(payload, tx.signer, tx.digest)
                bad_txs = list(block.transactions)
                bad_txs[t_idx] = bad_tx
                blocks = list(ledger.blocks)
                blocks[b_idx] = Block(block.height, block.prev_digest, tuple(bad_txs), block.proposer,
                                      block.digest)
                assert not verify_chain(Ledger(blocks))


def test_ledger_jsonl_is_deterministic():
    a = simulate_consensus([H, S, H, H], rounds=5, k=3, model_dim=2, seed=8)
    b = simulate_consensus([H, S, H, H], rounds=5, k=3, model_dim=2, seed=8)
    assert a.ledgers[0].to_jsonl() == b.ledgers[0].to_jsonl()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(list(ServerBehavior)), min_size=4, max_size=4), st.integers(0, 1000))
def test_honest_ledgers_never_fork(behaviors, seed):
    net = simulate_consensus(behaviors, rounds=4, k=4, model_dim=2, seed=seed)
    assert net.safety_violations() == 0
    assert net.chains_valid()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.sampled_from([T, S, E]), st.integers(0, 1000))
def test_single_fault_always_commits(pos, kind, seed):
    behaviors = [H] * 4
    behaviors[pos] = kind
    net = simulate_consensus(behaviors, rounds=5, k=4, model_dim=2, seed=seed)
    assert all(r.outcome == "committed" and r.view_changes <= 2 for r in net.records)


def test_network_rejects_bad_size():
    with pytest.raises(ValueError):
        PbftNetwork([H] * 5, recompute)
