"""PBFT among the edge servers plus the hash-linked block ledger.

Message passing runs in-process and phase by phase; there is no clock here
(the latency module prices time). Signatures are modeled by content digests.

Quorum rules follow classic PBFT with ``m = 3f + 1`` servers:

* a server is *prepared* once it holds a valid block and ``2f`` matching
  PREPARE messages from validators (its own included);
* a prepared server *commits* once it receives ``2f`` matching COMMIT
  messages from other servers;
* an honest server that missed the block but sees ``2f`` matching COMMITs
  from others fetches and validates the block from a committed peer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .aggregation import model_digest
from .latency import fault_bound

GENESIS_PREV = "0" * 64


class ServerBehavior(str, Enum):
    HONEST = "honest"
    TAMPER_GLOBAL = "tamper_global"
    SILENT = "silent"
    EQUIVOCATE = "equivocate"


@dataclass(frozen=True)
class ConsensusConfig:
    m: int

    def __post_init__(self):
        fault_bound(self.m)

    @property
    def f_srv(self) -> int:
        return fault_bound(self.m)


@dataclass(frozen=True, eq=False)
class Transaction:
    payload: np.ndarray
    signer: int
    digest: str

    @classmethod
    def sign(cls, payload, signer: int) -> "Transaction":
        payload = np.array(payload, dtype=float)
        payload.setflags(write=False)
        return cls(payload, int(signer), model_digest(payload, signer))

    def verify(self) -> bool:
        return model_digest(self.payload, self.signer) == self.digest


def block_digest(height: int, prev_digest: str, tx_digests: Sequence[str], proposer: int) -> str:
    body = json.dumps([int(height), prev_digest, list(tx_digests), int(proposer)], separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class Block:
    height: int
    prev_digest: str
    transactions: tuple
    proposer: int
    digest: str

    @classmethod
    def create(cls, height, prev_digest, transactions, proposer) -> "Block":
        txs = tuple(transactions)
        return cls(int(height), prev_digest, txs, int(proposer),
                   block_digest(height, prev_digest, [t.digest for t in txs], proposer))

    @classmethod
    def genesis(cls) -> "Block":
        return cls.create(0, GENESIS_PREV, (), -1)

    @property
    def local_transactions(self):
        return self.transactions[:-1]

    @property
    def global_transaction(self):
        return self.transactions[-1]

    def recompute_digest(self) -> str:
        return block_digest(self.height, self.prev_digest, [t.digest for t in self.transactions],
                            self.proposer)


class ChainError(ValueError):
    """Block does not extend the ledger tip."""


class Ledger:
    def __init__(self, blocks=None):
        self.blocks: list[Block] = list(blocks or [])

    @classmethod
    def with_genesis(cls) -> "Ledger":
        return cls([Block.genesis()])

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    @property
    def tip(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    def append(self, block: Block) -> "Ledger":
        return append_block(self, block)

    def to_jsonl(self) -> str:
        lines = []
        for b in self.blocks:
            lines.append(json.dumps({
                "height": b.height,
                "digest": b.digest,
                "prev_digest": b.prev_digest,
                "proposer": b.proposer,
                "signers": [t.signer for t in b.transactions],
                "tx_digests": [t.digest for t in b.transactions],
            }, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)


def append_block(ledger: Ledger, block: Block) -> Ledger:
    tip = ledger.tip
    if tip is not None:
        if block.prev_digest != tip.digest:
            raise ChainError("prev_digest does not match the ledger tip")
        if block.height != tip.height + 1:
            raise ChainError("height does not follow the ledger tip")
    if block.recompute_digest() != block.digest:
        raise ChainError("block digest does not match its content")
    ledger.blocks.append(block)
    return ledger


def verify_chain(ledger) -> bool:
    prev = None
    for block in ledger:
        if not all(t.verify() for t in block.transactions):
            return False
        if block.recompute_digest() != block.digest:
            return False
        if prev is not None and (block.prev_digest != prev.digest or block.height != prev.height + 1):
            return False
        prev = block
    return True


def rotate_primary(round_index: int, m: int) -> int:
    return int(round_index) % int(m)


def quorum(m: int) -> int:
    return 2 * fault_bound(m)


def _forged(digest: str, sender: int) -> str:
    return hashlib.sha256(f"forged:{sender}:{digest}".encode()).hexdigest()


def build_block(tip: Block, local_txs, proposer: int, recompute: Callable, tamper: bool = False) -> Block:
    """Aggregate the local models and pack them with the global model."""
    aggregate = np.asarray(recompute(np.vstack([t.payload for t in local_txs])), dtype=float)
    if tamper:
        aggregate = aggregate + 1.0
    global_tx = Transaction.sign(aggregate, proposer)
    return Block.create(tip.height + 1, tip.digest, list(local_txs) + [global_tx], proposer)


def validate_block(block: Block | None, tip: Block, recompute: Callable) -> bool:
    """What an honest validator checks before sending PREPARE."""
    if block is None or tip is None:
        return False
    if block.prev_digest != tip.digest or block.height != tip.height + 1:
        return False
    if block.recompute_digest() != block.digest:
        return False
    if not block.transactions or not all(t.verify() for t in block.transactions):
        return False
    if block.global_transaction.signer != block.proposer:
        return False
    local = np.vstack([t.payload for t in block.local_transactions])
    expected = np.asarray(recompute(local), dtype=float)
    got = block.global_transaction.payload
    return expected.shape == got.shape and bool(np.array_equal(expected, got))


class Outcome(str, Enum):
    COMMITTED = "committed"
    VIEW_CHANGE = "view_change"
    PARTIAL = "partial"


@dataclass
class PbftOutcome:
    kind: Outcome
    primary: int
    next_primary: int | None
    block: Block | None
    committed: list = field(default_factory=list)
    prepared: list = field(default_factory=list)


def _send(sender: int, behavior: ServerBehavior, digest: str, recipients) -> dict:
    """Messages a server emits in one phase: recipient -> digest."""
    if behavior == ServerBehavior.SILENT:
        return {}
    if behavior == ServerBehavior.TAMPER_GLOBAL:
        return {r: _forged(digest, sender) for r in recipients}
    if behavior == ServerBehavior.EQUIVOCATE:
        return {r: (digest if r % 2 == 0 else _forged(digest, sender)) for r in recipients}
    return {r: digest for r in recipients}


def run_pbft_round(ledgers: Sequence[Ledger], local_txs, primary: int, behaviors, recompute: Callable,
                   round_index: int = 0) -> PbftOutcome:
    """One PBFT view with ``primary`` proposing; honest ledgers grow on commit.

    ``recompute`` is the aggregation rule validators re-run on the local
    models. A non-honest server's ledger follows the honest chain so it can
    still build on the right tip when it becomes primary.
    """
    behaviors = [ServerBehavior(b) for b in behaviors]
    m = len(behaviors)
    f = fault_bound(m)
    q = 2 * f
    honest = [s for s in range(m) if behaviors[s] == ServerBehavior.HONEST]
    servers = range(m)
    validators = [s for s in servers if s != primary]
    next_primary = rotate_primary(round_index + 1, m)
    p_beh = behaviors[primary]
    tip = ledgers[primary].tip

    # pre-prepare
    honest_block = build_block(tip, local_txs, primary, recompute)
    bad = build_block(tip, local_txs, primary, recompute, tamper=True)
    if p_beh == ServerBehavior.HONEST:
        received = {v: honest_block for v in validators}
        received[primary] = honest_block
    elif p_beh == ServerBehavior.TAMPER_GLOBAL:
        received = {v: bad for v in validators}
        received[primary] = bad
    elif p_beh == ServerBehavior.EQUIVOCATE:
        received = {v: (honest_block if v % 2 == 0 else bad) for v in validators}
        received[primary] = honest_block
    else:
        received = {s: None for s in servers}

    accepted = {}
    for s in servers:
        block = received[s]
        if behaviors[s] == ServerBehavior.HONEST and s != primary:
            accepted[s] = validate_block(block, ledgers[s].tip, recompute)
        else:
            accepted[s] = block is not None

    # prepare: validators that hold a block broadcast its digest
    inbox = {s: {} for s in servers}
    for v in validators:
        if not accepted[v]:
            continue
        for r, d in _send(v, behaviors[v], received[v].digest, servers).items():
            inbox[r][v] = d
    prepared = []
    for s in servers:
        if accepted[s] and sum(1 for d in inbox[s].values() if d == received[s].digest) >= q:
            prepared.append(s)

    # commit: prepared servers broadcast to the others
    inbox = {s: {} for s in servers}
    for s in prepared:
        others = [r for r in servers if r != s]
        for r, d in _send(s, behaviors[s], received[s].digest, others).items():
            inbox[r][s] = d
    committed = [s for s in prepared
                 if sum(1 for d in inbox[s].values() if d == received[s].digest) >= q]

    honest_committed = [s for s in committed if s in honest]
    if not honest_committed:
        return PbftOutcome(Outcome.VIEW_CHANGE, primary, next_primary, None, [], prepared)

    block = received[honest_committed[0]]
    # stragglers with a commit certificate fetch and validate the block
    final = set(honest_committed)
    for s in honest:
        if s in final:
            continue
        votes = sum(1 for d in inbox[s].values() if d == block.digest)
        if votes >= q and validate_block(block, ledgers[s].tip, recompute):
            final.add(s)
    for s in sorted(final):
        append_block(ledgers[s], block)
    if len(final) == len(honest):
        for s in servers:
            if s not in final and ledgers[s].tip.digest == block.prev_digest:
                append_block(ledgers[s], block)
        return PbftOutcome(Outcome.COMMITTED, primary, None, block, sorted(final), prepared)
    return PbftOutcome(Outcome.PARTIAL, primary, next_primary, block, sorted(final), prepared)


@dataclass
class RoundRecord:
    round_index: int
    outcome: str
    view_changes: int
    primaries: list
    height: int | None


class PbftNetwork:
    """M servers running PBFT round after round with rotating primaries.

    A failed view hands the round to the next server in rotation; a round
    that exhausts ``max_view_changes`` (or splits the honest servers) is a
    stall and later rounds stall too.
    """

    def __init__(self, behaviors, recompute: Callable, max_view_changes: int | None = None):
        self.behaviors = [ServerBehavior(b) for b in behaviors]
        self.config = ConsensusConfig(len(self.behaviors))
        self.recompute = recompute
        self.max_view_changes = self.config.m - 1 if max_view_changes is None else max_view_changes
        self.ledgers = [Ledger.with_genesis() for _ in self.behaviors]
        self.records: list[RoundRecord] = []
        self.halted = False

    @property
    def m(self) -> int:
        return self.config.m

    @property
    def honest(self) -> list:
        return [s for s, b in enumerate(self.behaviors) if b == ServerBehavior.HONEST]

    def run_round(self, round_index: int, local_txs) -> RoundRecord:
        primaries = []
        if self.halted:
            rec = RoundRecord(round_index, "stall", 0, primaries, None)
            self.records.append(rec)
            return rec
        for view in range(self.max_view_changes + 1):
            primary = rotate_primary(round_index + view, self.m)
            primaries.append(primary)
            out = run_pbft_round(self.ledgers, local_txs, primary, self.behaviors, self.recompute,
                                 round_index + view)
            if out.kind == Outcome.COMMITTED:
                rec = RoundRecord(round_index, "committed", view, primaries, out.block.height)
                break
            if out.kind == Outcome.PARTIAL:
                self.halted = True
                rec = RoundRecord(round_index, "stall", view, primaries, None)
                break
        else:
            self.halted = True
            rec = RoundRecord(round_index, "stall", self.max_view_changes, primaries, None)
        self.records.append(rec)
        return rec

    def safety_violations(self) -> int:
        """Heights at which two honest ledgers hold different blocks."""
        bad = 0
        honest = [self.ledgers[s] for s in self.honest]
        height = max((len(l) for l in honest), default=0)
        for h in range(height):
            digests = {l[h].digest for l in honest if len(l) > h}
            bad += len(digests) > 1
        return bad

    def chains_valid(self) -> bool:
        return all(verify_chain(self.ledgers[s]) for s in self.honest)
