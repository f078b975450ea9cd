"""Hash-chained credit ledger.

Blocks carry ordered credit operations, are hashed over a canonical byte
encoding, signed by their proposer, and finalized by majority vote of the
currently online peers.  Balances are kept as (free, staked) microcredit
pairs; replaying a chain from genesis reproduces the state exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

ZERO_HASH = "0" * 64


class OpKind(str, Enum):
    GENESIS_GRANT = "genesis_grant"
    STAKE_LOCK = "stake_lock"
    STAKE_RELEASE = "stake_release"
    OFFLOAD_PAYMENT = "offload_payment"
    DUEL_WIN_REWARD = "duel_win_reward"
    DUEL_PENALTY = "duel_penalty"
    JUDGE_REWARD = "judge_reward"


# Wire tags are part of the canonical encoding; never reorder.
_KIND_TAG = {kind: tag for tag, kind in enumerate(OpKind)}
_TAG_KIND = {tag: kind for kind, tag in _KIND_TAG.items()}

_NEEDS_FROM = {OpKind.STAKE_LOCK, OpKind.STAKE_RELEASE, OpKind.OFFLOAD_PAYMENT,
               OpKind.DUEL_PENALTY}
_NEEDS_TO = {OpKind.GENESIS_GRANT, OpKind.OFFLOAD_PAYMENT, OpKind.DUEL_WIN_REWARD,
             OpKind.JUDGE_REWARD}


class LedgerError(Exception):
    pass


class EmptyBlockError(LedgerError):
    pass


class UnknownKeyError(LedgerError):
    pass


class TamperError(LedgerError):
    def __init__(self, height: int, result: "ValidationResult"):
        super().__init__(f"chain invalid at height {height}: {result.code}")
        self.height = height
        self.result = result


@dataclass(frozen=True)
class CreditOperation:
    """One credit-movement record inside a block."""

    kind: OpKind
    amount: int  # microcredits, >= 0
    from_node: Optional[str] = None
    to_node: Optional[str] = None
    request_id: Optional[str] = None
    duel_id: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.amount, int) or self.amount < 0:
            raise ValueError(f"operation amount must be a non-negative int, got {self.amount!r}")
        if (self.from_node is not None) != (self.kind in _NEEDS_FROM):
            raise ValueError(f"{self.kind.value}: bad 'from' field {self.from_node!r}")
        if (self.to_node is not None) != (self.kind in _NEEDS_TO):
            raise ValueError(f"{self.kind.value}: bad 'to' field {self.to_node!r}")


@dataclass(frozen=True)
class CreditBlock:
    block_id: str  # sha256 hex of the canonical body
    parent_id: str
    timestamp_ms: int
    operations: tuple[CreditOperation, ...]
    proposer: str
    signature: bytes


def _pack_str(out: bytearray, value: str) -> None:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("identifier too long for canonical encoding")
    out += struct.pack("<H", len(raw))
    out += raw


def encode_block_body(parent_id: str, timestamp_ms: int, proposer: str,
                      operations: Sequence[CreditOperation]) -> bytes:
    """Canonical byte layout hashed into the block id.

    Field order: parent, timestamp, proposer, op count, then each op as
    kind tag + presence flags + amount + the present identifiers, all
    little-endian with length-prefixed strings.
    """
    out = bytearray()
    out += bytes.fromhex(parent_id)
    out += struct.pack("<q", timestamp_ms)
    _pack_str(out, proposer)
    out += struct.pack("<I", len(operations))
    for op in operations:
        flags = ((op.from_node is not None)
                 | (op.to_node is not None) << 1
                 | (op.request_id is not None) << 2
                 | (op.duel_id is not None) << 3)
        out += struct.pack("<BBQ", _KIND_TAG[op.kind], flags, op.amount)
        for value in (op.from_node, op.to_node, op.request_id, op.duel_id):
            if value is not None:
                _pack_str(out, value)
    return bytes(out)


def block_hash(parent_id: str, timestamp_ms: int, proposer: str,
               operations: Sequence[CreditOperation]) -> str:
    return hashlib.sha256(encode_block_body(parent_id, timestamp_ms, proposer, operations)).hexdigest()


class KeyRing:
    """Default signature scheme: deterministic keyed hash per node.

    sign = sha256(secret || block_id bytes).  Verification looks the
    secret up by node id, so the ring doubles as the peer key registry.
    Any object with the same register/key_of/verify surface can be
    plugged in instead.
    """

    def __init__(self, network_secret: bytes = b"stakemesh"):
        self._network_secret = network_secret
        self._secrets: dict[str, bytes] = {}

    def register(self, node_id: str) -> bytes:
        secret = hashlib.sha256(self._network_secret + b"/" + node_id.encode("utf-8")).digest()
        self._secrets[node_id] = secret
        return secret

    def key_of(self, node_id: str) -> bytes:
        try:
            return self._secrets[node_id]
        except KeyError:
            raise UnknownKeyError(f"no signing key registered for {node_id!r}") from None

    @staticmethod
    def sign(secret: bytes, block_id: str) -> bytes:
        return hashlib.sha256(secret + bytes.fromhex(block_id)).digest()

    def verify(self, node_id: str, block_id: str, signature: bytes) -> bool:
        secret = self._secrets.get(node_id)
        if secret is None:
            return False
        return self.sign(secret, block_id) == signature


@dataclass(frozen=True)
class LedgerState:
    """Replayed chain state: balances plus the supply counters."""

    balances: Mapping[str, tuple[int, int]] = field(default_factory=dict)  # node -> (free, staked)
    head: str = ZERO_HASH
    height: int = 0
    supply_genesis: int = 0
    supply_minted: int = 0
    supply_burned: int = 0

    def free(self, node: str) -> int:
        return self.balances.get(node, (0, 0))[0]

    def staked(self, node: str) -> int:
        return self.balances.get(node, (0, 0))[1]


def balance_of(state: LedgerState, node: str) -> tuple[int, int]:
    """(free, staked) microcredits; unknown nodes hold (0, 0)."""
    return state.balances.get(node, (0, 0))


def check_supply(state: LedgerState) -> bool:
    total = sum(f + s for f, s in state.balances.values())
    return total == state.supply_genesis + state.supply_minted - state.supply_burned


def propose_block(ops: Sequence[CreditOperation], proposer: str, signing_key: bytes,
                  parent: str, timestamp_ms: int, keyring: KeyRing) -> CreditBlock:
    """Build, hash, and sign a block. The signing key must be the proposer's."""
    if not ops:
        raise EmptyBlockError("a block must carry at least one operation")
    if keyring.key_of(proposer) != signing_key:
        raise UnknownKeyError(f"signing key does not belong to {proposer!r}")
    block_id = block_hash(parent, timestamp_ms, proposer, ops)
    signature = keyring.sign(signing_key, block_id)
    return CreditBlock(block_id=block_id, parent_id=parent, timestamp_ms=timestamp_ms,
                       operations=tuple(ops), proposer=proposer, signature=signature)


@dataclass(frozen=True)
class ValidationResult:
    accepted: bool
    code: Optional[str] = None  # bad_parent | bad_hash | bad_signature | overdraft
    node: Optional[str] = None
    op_index: Optional[int] = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = ValidationResult(True)


def _apply_op(balances: dict[str, list[int]], op: CreditOperation) -> tuple[Optional[str], int, int, int]:
    """Mutate balances; returns (overdrawn-node | None, d_genesis, d_minted, d_burned)."""
    def cell(node: str) -> list[int]:
        return balances.setdefault(node, [0, 0])

    k = op.kind
    if k is OpKind.GENESIS_GRANT:
        cell(op.to_node)[0] += op.amount
        return None, op.amount, 0, 0
    if k is OpKind.STAKE_LOCK:
        c = cell(op.from_node)
        if c[0] < op.amount:
            return op.from_node, 0, 0, 0
        c[0] -= op.amount
        c[1] += op.amount
        return None, 0, 0, 0
    if k is OpKind.STAKE_RELEASE:
        c = cell(op.from_node)
        if c[1] < op.amount:
            return op.from_node, 0, 0, 0
        c[1] -= op.amount
        c[0] += op.amount
        return None, 0, 0, 0
    if k is OpKind.OFFLOAD_PAYMENT:
        c = cell(op.from_node)
        if c[0] < op.amount:
            return op.from_node, 0, 0, 0
        c[0] -= op.amount
        cell(op.to_node)[0] += op.amount
        return None, 0, 0, 0
    if k in (OpKind.DUEL_WIN_REWARD, OpKind.JUDGE_REWARD):
        cell(op.to_node)[0] += op.amount
        return None, 0, op.amount, 0
    if k is OpKind.DUEL_PENALTY:
        c = cell(op.from_node)
        burn = min(op.amount, c[1])  # penalties are clamped to the available stake
        c[1] -= burn
        return None, 0, 0, burn
    raise AssertionError(f"unhandled op kind {k}")


def validate_block(block: CreditBlock, state: LedgerState, keyring: KeyRing) -> ValidationResult:
    """Accept iff parent matches, hash recomputes, signature verifies, and no
    sequential op application overdrafts a free or staked balance."""
    if block.parent_id != state.head:
        return ValidationResult(False, "bad_parent")
    if block_hash(block.parent_id, block.timestamp_ms, block.proposer, block.operations) != block.block_id:
        return ValidationResult(False, "bad_hash")
    if not keyring.verify(block.proposer, block.block_id, block.signature):
        return ValidationResult(False, "bad_signature")
    scratch = {node: list(pair) for node, pair in state.balances.items()}
    for index, op in enumerate(block.operations):
        overdrawn, *_ = _apply_op(scratch, op)
        if overdrawn is not None:
            return ValidationResult(False, "overdraft", node=overdrawn, op_index=index)
    return ACCEPT


def apply_block(state: LedgerState, block: CreditBlock) -> LedgerState:
    """State transition for a validated block (precondition: validate accepted)."""
    balances = {node: list(pair) for node, pair in state.balances.items()}
    genesis = minted = burned = 0
    for op in block.operations:
        overdrawn, d_gen, d_mint, d_burn = _apply_op(balances, op)
        if overdrawn is not None:
            raise LedgerError(f"apply_block on unvalidated block: overdraft by {overdrawn}")
        genesis += d_gen
        minted += d_mint
        burned += d_burn
    return LedgerState(
        balances={node: (pair[0], pair[1]) for node, pair in balances.items()},
        head=block.block_id,
        height=state.height + 1,
        supply_genesis=state.supply_genesis + genesis,
        supply_minted=state.supply_minted + minted,
        supply_burned=state.supply_burned + burned,
    )


def finalize(block: CreditBlock, votes: Mapping[str, bool], n_peers: int,
             peers: Optional[Iterable[str]] = None) -> bool:
    """Majority finalization: accepted iff accepts >= floor(n/2)+1.

    Votes from voters outside `peers` (when given) are ignored.  A network
    of zero online peers self-finalizes.
    """
    if n_peers <= 0:
        return True
    known = set(peers) if peers is not None else None
    accepts = sum(1 for voter, vote in votes.items()
                  if vote and (known is None or voter in known))
    return accepts >= n_peers // 2 + 1


def replay_chain(blocks: Iterable[CreditBlock], keyring: KeyRing) -> LedgerState:
    """Replay from genesis, re-validating every block; raises TamperError."""
    state = LedgerState()
    for height, block in enumerate(blocks):
        result = validate_block(block, state, keyring)
        if not result:
            raise TamperError(height, result)
        state = apply_block(state, block)
    return state


class Chain:
    """A single serialized chain plus its replayed state."""

    def __init__(self, keyring: KeyRing):
        self.keyring = keyring
        self.blocks: list[CreditBlock] = []
        self.state = LedgerState()

    def append(self, ops: Sequence[CreditOperation], proposer: str, timestamp_ms: int) -> CreditBlock:
        block = propose_block(ops, proposer, self.keyring.key_of(proposer),
                              self.state.head, timestamp_ms, self.keyring)
        result = validate_block(block, self.state, self.keyring)
        if not result:
            raise LedgerError(f"refusing invalid block: {result.code}")
        self.state = apply_block(self.state, block)
        self.blocks.append(block)
        return block


# --- JSONL export/import ---------------------------------------------------
#
# One block per line; field order mirrors the canonical encoding so the file
# round-trips bit-exactly.

def op_to_json(op: CreditOperation) -> dict:
    record: dict = {"kind": op.kind.value, "amount": op.amount}
    if op.from_node is not None:
        record["from"] = op.from_node
    if op.to_node is not None:
        record["to"] = op.to_node
    if op.request_id is not None:
        record["request_id"] = op.request_id
    if op.duel_id is not None:
        record["duel_id"] = op.duel_id
    return record


def op_from_json(record: Mapping) -> CreditOperation:
    return CreditOperation(
        kind=OpKind(record["kind"]),
        amount=record["amount"],
        from_node=record.get("from"),
        to_node=record.get("to"),
        request_id=record.get("request_id"),
        duel_id=record.get("duel_id"),
    )


def block_to_json(block: CreditBlock) -> dict:
    return {
        "block_id": block.block_id,
        "parent_id": block.parent_id,
        "timestamp": block.timestamp_ms,
        "operations": [op_to_json(op) for op in block.operations],
        "proposer": block.proposer,
        "signature": block.signature.hex(),
    }


def block_from_json(record: Mapping) -> CreditBlock:
    return CreditBlock(
        block_id=record["block_id"],
        parent_id=record["parent_id"],
        timestamp_ms=record["timestamp"],
        operations=tuple(op_from_json(op) for op in record["operations"]),
        proposer=record["proposer"],
        signature=bytes.fromhex(record["signature"]),
    )


def write_chain(path, blocks: Sequence[CreditBlock]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for block in blocks:
            fh.write(json.dumps(block_to_json(block), separators=(",", ":")) + "\n")


def read_chain(path) -> list[CreditBlock]:
    import json

    blocks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                blocks.append(block_from_json(json.loads(line)))
    return blocks
