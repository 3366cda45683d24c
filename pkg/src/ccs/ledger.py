"""Simulated multi-node, append-only, hash-chained ledger with quorum commit.

The network is a set of in-process nodes. A transaction is first proposed:
every node independently executes the deterministic business logic against its
own state snapshot and returns a signed digest of the resulting read/write
set. It commits only if enough endorsements carry the same digest, so a
minority of cheating nodes cannot change what gets written. Commits append
one block per transaction to a hash chain; replaying the chain from genesis
reproduces the exact world state.

Fault injection (drop, corrupt-digest, delay) exists so tests can demonstrate
the tolerance claim instead of assuming it. A delayed endorsement misses the
commit window, which in this synchronous simulation is equivalent to a drop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
import threading
from typing import Callable, Iterable, Optional, Sequence

from . import crypto
from .crypto import Digest, KeyPair, Signature, ZERO_DIGEST
from .encoding import MalformedInputError, encode_value
from .policy import CertificationPolicy
from .records import (
    ActorRecord,
    canonical_bytes,
    canonical_serialize,
    deserialize,
    register_record,
)

TX_TYPES = (
    "createCSR",
    "endorseCSR",
    "issueCertificate",
    "registerUser",
    "registerRAMember",
    "policyUpdate",
)

TX_SIGN_DOMAIN = b"ccs:tx:v1:"
TX_ID_DOMAIN = b"ccs:tx-id:v1:"
NODE_ENDORSE_DOMAIN = b"ccs:node-endorse:v1:"
BLOCK_DOMAIN = b"ccs:block:v1:"

FAULT_DROP = "drop"
FAULT_CORRUPT_DIGEST = "corrupt-digest"
FAULT_DELAY = "delay"
FAULT_MODES = (FAULT_DROP, FAULT_CORRUPT_DIGEST, FAULT_DELAY)


class LedgerError(Exception):
    """Base error for this module."""


class QuorumNotReachedError(LedgerError):
    """Not enough matching endorsements to commit."""


class StaleReadError(LedgerError):
    """World state changed between proposal and commit; re-propose."""

    def __init__(self, key: str):
        self.key = key
        super().__init__(f"stale read on {key!r}; re-propose the transaction")


class CommitError(LedgerError):
    """Commit preconditions violated (bad endorsements, missing write set)."""


class ChainFileError(LedgerError):
    """A persisted chain file does not parse. Carries the failing block index."""

    def __init__(self, block_index: int, message: str):
        self.block_index = block_index
        super().__init__(f"chain file broken at block {block_index}: {message}")


class ChainVerificationError(LedgerError):
    def __init__(self, height: int):
        self.height = height
        super().__init__(f"chain verification failed at height {height}")


class ReplayError(LedgerError):
    """Re-execution of a committed transaction diverged from the chain."""


# ---------------------------------------------------------------------------
# Wire types
# ---------------------------------------------------------------------------


@register_record
@dataclass(frozen=True)
class Transaction:
    tx_id: str
    tx_type: str
    payload: bytes
    client_signature: Signature
    submitted_at: datetime


@register_record
@dataclass(frozen=True)
class NodeEndorsement:
    node_id: str
    tx_id: str
    readwrite_set_digest: Digest
    node_signature: Signature


@register_record
@dataclass(frozen=True)
class CommittedTransaction:
    transaction: Transaction
    endorsements: tuple[NodeEndorsement, ...]


@register_record
@dataclass(frozen=True)
class LedgerBlock:
    height: int
    prev_hash: Digest
    transactions: tuple[CommittedTransaction, ...]
    block_hash: Digest


@register_record
@dataclass(frozen=True)
class GenesisRecord:
    """Trust anchors installed by the first transaction: the admin identity,
    the CA identity, and the initial certification policy."""

    admin: ActorRecord
    ca: ActorRecord
    policy: CertificationPolicy


@dataclass(frozen=True)
class EndorsementQuorumPolicy:
    total_nodes: int
    required_matching: int

    def __post_init__(self) -> None:
        if self.total_nodes < 1:
            raise ValueError("total_nodes must be positive")
        if not (1 <= self.required_matching <= self.total_nodes):
            raise ValueError("required_matching must be in [1, total_nodes]")
        if self.required_matching < self.total_nodes // 2 + 1:
            raise ValueError("required_matching must be a strict majority")


@register_record
@dataclass(frozen=True)
class StateEntry:
    record: object
    version: int


def tx_signing_message(tx_type: str, payload: bytes, submitted_at: datetime) -> bytes:
    return TX_SIGN_DOMAIN + encode_value(
        {"payload": payload, "submitted_at": submitted_at, "tx_type": tx_type}
    )


def compute_tx_id(tx_type: str, payload: bytes, client_key_id: str) -> str:
    digest = crypto.hash_bytes(
        TX_ID_DOMAIN
        + encode_value(
            {"client_key_id": client_key_id, "payload": payload, "tx_type": tx_type}
        )
    )
    return digest.hex


def make_transaction(
    tx_type: str, payload: bytes, client_key: KeyPair, submitted_at: datetime
) -> Transaction:
    """Client-side transaction assembly and signing."""
    if tx_type not in TX_TYPES:
        raise ValueError(f"unknown transaction type {tx_type!r}")
    signature = crypto.sign(
        client_key.private_key, tx_signing_message(tx_type, payload, submitted_at)
    )
    return Transaction(
        tx_id=compute_tx_id(tx_type, payload, client_key.key_id),
        tx_type=tx_type,
        payload=payload,
        client_signature=signature,
        submitted_at=submitted_at,
    )


def verify_transaction_signature(tx: Transaction, public_key: bytes) -> bool:
    if tx.client_signature.signer_key_id != crypto.fingerprint(public_key):
        return False
    return crypto.verify(
        public_key,
        tx_signing_message(tx.tx_type, tx.payload, tx.submitted_at),
        tx.client_signature,
    )


def node_endorsement_message(node_id: str, tx_id: str, digest: Digest) -> bytes:
    return NODE_ENDORSE_DOMAIN + encode_value(
        {"digest": digest.bytes, "node_id": node_id, "tx_id": tx_id}
    )


def compute_block_hash(
    height: int, prev_hash: Digest, transactions: tuple[CommittedTransaction, ...]
) -> Digest:
    body = canonical_bytes(
        {"height": height, "prev_hash": prev_hash.bytes, "transactions": list(transactions)}
    )
    return crypto.hash_bytes(BLOCK_DOMAIN + body)


def make_genesis_transaction(
    admin_key: KeyPair,
    ca_public_key: bytes,
    policy: CertificationPolicy,
    submitted_at: datetime,
) -> Transaction:
    """The self-certifying first transaction: its signer becomes the admin."""
    genesis = GenesisRecord(
        admin=ActorRecord(actor_id="admin", role="admin", public_key=admin_key.public_key),
        ca=ActorRecord(actor_id="ca", role="ca", public_key=ca_public_key),
        policy=policy,
    )
    return make_transaction("policyUpdate", canonical_serialize(genesis), admin_key, submitted_at)


# ---------------------------------------------------------------------------
# World state
# ---------------------------------------------------------------------------


class WorldState:
    """Key-value view of all committed records, with per-key write versions.

    Versions carry the block height of the last write and exist for optimistic
    concurrency: proposals remember what they read, commit rejects if any of
    it changed. Absent keys have version -1, as does the height of an empty
    ledger.
    """

    def __init__(self) -> None:
        self._entries: dict[str, StateEntry] = {}
        self.last_block_height: int = -1

    def get(self, key: str):
        entry = self._entries.get(key)
        return entry.record if entry is not None else None

    def version_of(self, key: str) -> int:
        entry = self._entries.get(key)
        return entry.version if entry is not None else -1

    def put(self, key: str, record, version: int) -> None:
        self._entries[key] = StateEntry(record=record, version=version)

    def keys(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for key in self.keys():
            yield key, self._entries[key].record

    def copy(self) -> "WorldState":
        twin = WorldState()
        twin._entries = dict(self._entries)
        twin.last_block_height = self.last_block_height
        return twin

    def apply_writes(self, writes: Iterable[tuple[str, bytes]], height: int) -> None:
        for key, value_bytes in writes:
            self.put(key, deserialize(value_bytes), version=height)
        self.last_block_height = height

    def canonical_form(self) -> bytes:
        """One byte string per distinct state; used for equality across nodes."""
        return canonical_bytes(
            {
                "entries": dict(self._entries),
                "last_block_height": self.last_block_height,
            }
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, WorldState)
            and self._entries == other._entries
            and self.last_block_height == other.last_block_height
        )


# ---------------------------------------------------------------------------
# Simulated nodes and network
# ---------------------------------------------------------------------------


@dataclass
class SimNode:
    """One chaincode-running node with its own replica of the world state."""

    node_id: str
    keypair: KeyPair
    state: WorldState = field(default_factory=WorldState)
    fault: Optional[str] = None

    def endorse(self, tx: Transaction, rw_digest: Digest) -> NodeEndorsement:
        digest = rw_digest
        if self.fault == FAULT_CORRUPT_DIGEST:
            corrupted = bytes([digest.bytes[0] ^ 0xFF]) + digest.bytes[1:]
            digest = Digest(corrupted)
        signature = crypto.sign(
            self.keypair.private_key,
            node_endorsement_message(self.node_id, tx.tx_id, digest),
        )
        return NodeEndorsement(
            node_id=self.node_id,
            tx_id=tx.tx_id,
            readwrite_set_digest=digest,
            node_signature=signature,
        )


def default_node_seed(index: int) -> bytes:
    return crypto.hash_bytes(b"ccs:node-seed:%d" % index).bytes


class LedgerNetwork:
    """The endorsement network plus the (trusted-for-ordering-only) sequencer.

    The sequencer assigns block heights and nothing else; content safety comes
    entirely from the endorsement quorum. Commit is serialized; proposals are
    pure reads of node snapshots and may run concurrently.
    """

    def __init__(
        self,
        nodes: Sequence[SimNode],
        quorum: EndorsementQuorumPolicy,
        chain_path: str | Path | None = None,
    ):
        if len(nodes) != quorum.total_nodes:
            raise ValueError("quorum total_nodes must match the node count")
        ids = [node.node_id for node in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        self._nodes = list(nodes)
        self._quorum = quorum
        self._state = WorldState()
        self._blocks: list[LedgerBlock] = []
        self._proposal_cache: dict[str, dict[str, object]] = {}
        self._chain_path = Path(chain_path) if chain_path is not None else None
        self._lock = threading.RLock()

    @classmethod
    def create(
        cls,
        node_count: int = 4,
        required_matching: int = 3,
        node_seeds: Sequence[bytes] | None = None,
        faults: dict[int, str] | None = None,
        chain_path: str | Path | None = None,
    ) -> "LedgerNetwork":
        seeds = list(node_seeds) if node_seeds is not None else [
            default_node_seed(i) for i in range(node_count)
        ]
        if len(seeds) != node_count:
            raise ValueError("need one seed per node")
        nodes = []
        for i, seed in enumerate(seeds):
            fault = (faults or {}).get(i)
            if fault is not None and fault not in FAULT_MODES:
                raise ValueError(f"unknown fault mode {fault!r}")
            nodes.append(SimNode(node_id=f"node{i}", keypair=crypto.keygen(seed), fault=fault))
        quorum = EndorsementQuorumPolicy(total_nodes=node_count, required_matching=required_matching)
        return cls(nodes, quorum, chain_path=chain_path)

    # -- properties ---------------------------------------------------------

    @property
    def quorum(self) -> EndorsementQuorumPolicy:
        return self._quorum

    @property
    def nodes(self) -> tuple[SimNode, ...]:
        return tuple(self._nodes)

    @property
    def blocks(self) -> tuple[LedgerBlock, ...]:
        return tuple(self._blocks)

    @property
    def state(self) -> WorldState:
        return self._state

    def node_public_keys(self) -> dict[str, bytes]:
        return {node.node_id: node.keypair.public_key for node in self._nodes}

    # -- transaction flow ---------------------------------------------------

    def propose(self, tx: Transaction) -> list[NodeEndorsement]:
        """Ask every node to execute and endorse. Honest nodes over identical
        snapshots produce identical digests; injected faults show up as missing
        or divergent endorsements. Raises ChaincodeRejection when a quorum of
        nodes rejects for the same reason."""
        from .chaincode import ChaincodeRejection, execute, readwrite_set_digest

        endorsements: list[NodeEndorsement] = []
        rejections: dict[str, int] = {}
        first_rejection: dict[str, ChaincodeRejection] = {}
        for node in self._nodes:
            if node.fault in (FAULT_DROP, FAULT_DELAY):
                continue
            try:
                rw_set = execute(tx, node.state)
            except ChaincodeRejection as rejection:
                rejections[rejection.reason] = rejections.get(rejection.reason, 0) + 1
                first_rejection.setdefault(rejection.reason, rejection)
                continue
            digest = readwrite_set_digest(rw_set)
            cache = self._proposal_cache.setdefault(tx.tx_id, {})
            cache[digest.hex] = rw_set
            endorsements.append(node.endorse(tx, digest))
        for reason, count in rejections.items():
            if count >= self._quorum.required_matching:
                raise first_rejection[reason]
        return endorsements

    def commit(
        self,
        tx: Transaction,
        endorsements: Sequence[NodeEndorsement],
        quorum_policy: EndorsementQuorumPolicy | None = None,
    ) -> LedgerBlock:
        """Append a block if enough endorsements agree on one digest."""
        from .chaincode import readwrite_set_digest

        quorum = quorum_policy or self._quorum
        node_keys = self.node_public_keys()
        with self._lock:
            valid: list[NodeEndorsement] = []
            seen: set[str] = set()
            for endorsement in endorsements:
                if endorsement.node_id in seen or endorsement.node_id not in node_keys:
                    continue
                if endorsement.tx_id != tx.tx_id:
                    continue
                message = node_endorsement_message(
                    endorsement.node_id, endorsement.tx_id, endorsement.readwrite_set_digest
                )
                if not crypto.verify(
                    node_keys[endorsement.node_id], message, endorsement.node_signature
                ):
                    continue
                seen.add(endorsement.node_id)
                valid.append(endorsement)

            by_digest: dict[str, int] = {}
            for endorsement in valid:
                key = endorsement.readwrite_set_digest.hex
                by_digest[key] = by_digest.get(key, 0) + 1
            winner = next(
                (d for d, count in by_digest.items() if count >= quorum.required_matching),
                None,
            )
            if winner is None:
                raise QuorumNotReachedError(
                    f"needed {quorum.required_matching} matching endorsements, "
                    f"best group has {max(by_digest.values(), default=0)}"
                )

            rw_set = self._proposal_cache.get(tx.tx_id, {}).get(winner)
            if rw_set is None or readwrite_set_digest(rw_set).hex != winner:
                raise CommitError("no verifiable write set for the winning digest")

            for key, version in rw_set.reads:
                if self._state.version_of(key) != version:
                    raise StaleReadError(key)

            height = len(self._blocks)
            prev_hash = self._blocks[-1].block_hash if self._blocks else ZERO_DIGEST
            committed = CommittedTransaction(
                transaction=tx,
                endorsements=tuple(sorted(valid, key=lambda e: e.node_id)),
            )
            block = LedgerBlock(
                height=height,
                prev_hash=prev_hash,
                transactions=(committed,),
                block_hash=compute_block_hash(height, prev_hash, (committed,)),
            )
            self._blocks.append(block)
            if self._chain_path is not None:
                append_block_to_file(self._chain_path, block)
            self._state.apply_writes(rw_set.writes, height)
            for node in self._nodes:
                node.state.apply_writes(rw_set.writes, height)
            self._proposal_cache.pop(tx.tx_id, None)
            return block

    def submit(self, tx: Transaction) -> LedgerBlock:
        """Propose and commit in one serialized step."""
        with self._lock:
            endorsements = self.propose(tx)
            return self.commit(tx, endorsements)

    def query_state(self, key: str):
        """Current committed record for a key, or None. Never sees uncommitted
        proposal effects: proposals only read snapshots, they write nothing."""
        with self._lock:
            return self._state.get(key)

    def verify(self) -> Optional[int]:
        return verify_chain(self._blocks)

    def chain_bytes(self) -> bytes:
        return b"".join(_frame_block(block) for block in self._blocks)

    @classmethod
    def bootstrap(
        cls,
        genesis_tx: Transaction,
        node_count: int = 4,
        required_matching: int = 3,
        node_seeds: Sequence[bytes] | None = None,
        faults: dict[int, str] | None = None,
        chain_path: str | Path | None = None,
    ) -> "LedgerNetwork":
        network = cls.create(
            node_count=node_count,
            required_matching=required_matching,
            node_seeds=node_seeds,
            faults=faults,
            chain_path=chain_path,
        )
        network.submit(genesis_tx)
        return network


# ---------------------------------------------------------------------------
# Chain verification, replay, persistence
# ---------------------------------------------------------------------------


def verify_chain(blocks: Sequence[LedgerBlock]) -> Optional[int]:
    """None when every hash link and block hash recomputes; otherwise the
    height of the first block that does not."""
    prev_hash = ZERO_DIGEST
    for expected_height, block in enumerate(blocks):
        if block.height != expected_height:
            return expected_height
        if block.prev_hash.bytes != prev_hash.bytes:
            return expected_height
        recomputed = compute_block_hash(block.height, block.prev_hash, block.transactions)
        if recomputed.bytes != block.block_hash.bytes:
            return expected_height
        prev_hash = block.block_hash
    return None


def replay_state(
    blocks: Sequence[LedgerBlock],
    execute: Callable | None = None,
) -> WorldState:
    """Rebuild the world state by re-executing every committed transaction.

    Execution is deterministic, so the result equals the live state that
    produced the chain. Each re-executed write set is checked against the
    digest the endorsement quorum agreed on at commit time.
    """
    if execute is None:
        from .chaincode import execute as execute_chaincode

        execute = execute_chaincode
    from .chaincode import readwrite_set_digest

    bad = verify_chain(blocks)
    if bad is not None:
        raise ChainVerificationError(bad)
    state = WorldState()
    for block in blocks:
        for committed in block.transactions:
            rw_set = execute(committed.transaction, state)
            recomputed = readwrite_set_digest(rw_set).hex
            digests: dict[str, int] = {}
            for endorsement in committed.endorsements:
                key = endorsement.readwrite_set_digest.hex
                digests[key] = digests.get(key, 0) + 1
            majority = max(digests, key=digests.get) if digests else None
            if majority != recomputed:
                raise ReplayError(
                    f"block {block.height}: re-executed digest does not match endorsements"
                )
            state.apply_writes(rw_set.writes, block.height)
    return state


def _frame_block(block: LedgerBlock) -> bytes:
    body = canonical_serialize(block)
    return b"%d:" % len(body) + body


def append_block_to_file(path: Path, block: LedgerBlock) -> None:
    with open(path, "ab") as handle:
        handle.write(_frame_block(block))


def write_chain_file(blocks: Sequence[LedgerBlock], path: str | Path) -> None:
    with open(path, "wb") as handle:
        for block in blocks:
            handle.write(_frame_block(block))


def load_chain_file(path: str | Path) -> list[LedgerBlock]:
    """Parse a persisted chain. Any framing or decoding damage raises
    ChainFileError with the index of the block it was found in."""
    data = Path(path).read_bytes()
    blocks: list[LedgerBlock] = []
    pos = 0
    while pos < len(data):
        index = len(blocks)
        sep = data.find(b":", pos)
        if sep < 0:
            raise ChainFileError(index, "missing length prefix")
        prefix = data[pos:sep]
        if not prefix.isdigit() or (prefix.startswith(b"0") and prefix != b"0"):
            raise ChainFileError(index, f"bad length prefix {prefix!r}")
        length = int(prefix)
        start, end = sep + 1, sep + 1 + length
        if end > len(data):
            raise ChainFileError(index, "truncated block body")
        try:
            record = deserialize(data[start:end])
        except MalformedInputError as exc:
            raise ChainFileError(index, str(exc)) from exc
        if not isinstance(record, LedgerBlock):
            raise ChainFileError(index, f"expected a block, got {type(record).__name__}")
        blocks.append(record)
        pos = end
    return blocks


def verify_chain_file(path: str | Path) -> Optional[int]:
    """File-level integrity check: parse failures and hash failures both map
    to the height of the first damaged block."""
    try:
        blocks = load_chain_file(path)
    except ChainFileError as exc:
        return exc.block_index
    return verify_chain(blocks)
