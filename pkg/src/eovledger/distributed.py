"""Agreement on transactions that span several sparse peers of one organization.

Each peer checks the part of a transaction that touches its own contracts and
broadcasts a per-contract verdict. A transaction is valid once every invoked
contract has reported valid, and invalid as soon as any one reports invalid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .encoding import Reader, Writer
from .model import TxRef, TxValidity

log = logging.getLogger(__name__)


class VerdictBufferFull(RuntimeError):
    pass


@dataclass(frozen=True)
class ContractVerdict:
    ref: TxRef
    contract: str
    code: TxValidity
    from_peer: str

    @property
    def valid(self) -> bool:
        return self.code == TxValidity.VALID

    def encode(self) -> bytes:
        return (Writer().u64(self.ref.block).u32(self.ref.tx).text(self.contract)
                .u8(int(self.code)).text(self.from_peer).getvalue())

    @classmethod
    def decode(cls, data: bytes) -> "ContractVerdict":
        r = Reader(data)
        v = cls(TxRef(r.u64(), r.u32()), r.text(), TxValidity(r.u8()), r.text())
        r.expect_end()
        return v

    def __str__(self):
        word = "valid" if self.valid else "invalid"
        return f"{self.from_peer}: T{self.ref.block}.{self.ref.tx} {self.contract}-{word}"


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    verdict: ContractVerdict


@dataclass
class PendingDistributedTx:
    ref: TxRef
    required: frozenset
    received: dict = field(default_factory=dict)
    local_decision: Optional[TxValidity] = None

    def merge(self, v: ContractVerdict) -> Optional[TxValidity]:
        """Add a verdict; return the final validity once it is known."""
        if not v.valid:
            return v.code
        if v.contract in self.required:
            self.received.setdefault(v.contract, v)
        if all(c in self.received for c in self.required):
            return TxValidity.VALID
        return None

    @property
    def awaiting(self) -> set:
        return set(self.required) - set(self.received)


class DistributedCoordinator:
    """Per-peer verdict bookkeeping. Callers hold the peer's lock."""

    def __init__(self, peer_id, scope, routes: dict, buffer_capacity: int = 10_000):
        self.peer_id = peer_id
        self.scope = frozenset(scope) if scope is not None else None
        self.routes = {p: frozenset(c) for p, c in routes.items()}
        self.buffer_capacity = buffer_capacity
        self.pending: dict = {}
        self.finalized: dict = {}
        self._buffer: dict = {}
        self.outbox: list = []
        self.sent = 0

    def is_distributed(self, tx) -> bool:
        return self.scope is not None and not self.scope.issuperset(tx.invoked_contracts)

    def recipients(self, tx) -> list:
        invoked = set(tx.invoked_contracts)
        return sorted(p for p, cs in self.routes.items()
                      if p != self.peer_id and not cs.isdisjoint(invoked))

    def register(self, ref, tx) -> Optional[TxValidity]:
        """Track a newly extracted distributed transaction; buffered verdicts are merged."""
        p = PendingDistributedTx(ref, frozenset(tx.invoked_contracts))
        self.pending[ref] = p
        final = None
        for v in self._buffer.pop(ref, ()):
            final = p.merge(v) or final
            if final is not None and final != TxValidity.VALID:
                break
        # a VALID outcome needs our own verdict, which cannot be in the buffer
        return final if final != TxValidity.VALID else None

    def emit_local_verdict(self, ref, tx, code: TxValidity) -> Optional[TxValidity]:
        """Record our verdict for every local contract of `tx` and broadcast it."""
        p = self.pending[ref]
        p.local_decision = code
        final = None
        for contract in tx.invoked_contracts:
            if contract not in self.scope:
                continue
            v = ContractVerdict(ref, contract, code, self.peer_id)
            self._broadcast(tx, v)
            final = p.merge(v) if final is None else final
        return final

    def broadcast_invalid(self, ref, tx, code=TxValidity.INVALID_SERIALIZABILITY):
        contract = min(c for c in tx.invoked_contracts if c in self.scope)
        self._broadcast(tx, ContractVerdict(ref, contract, code, self.peer_id))

    def _broadcast(self, tx, v):
        for dst in self.recipients(tx):
            self.outbox.append(Message(self.peer_id, dst, v))
            self.sent += 1

    def on_verdict(self, v: ContractVerdict, received_height: int):
        """Merge a remote verdict. Returns ("final", validity), ("buffered", None) or (None, None)."""
        p = self.pending.get(v.ref)
        if p is None:
            if v.ref in self.finalized or v.ref.block <= received_height:
                return None, None  # late message for a finished transaction
            n = sum(len(b) for b in self._buffer.values())
            if n >= self.buffer_capacity:
                raise VerdictBufferFull(f"{self.peer_id}: {n} verdicts buffered")
            self._buffer.setdefault(v.ref, []).append(v)
            return "buffered", None
        final = p.merge(v)
        if final is not None and (final != TxValidity.VALID or p.local_decision is not None):
            return "final", final
        return None, None

    def finalize(self, ref, validity):
        self.pending.pop(ref, None)
        self.finalized[ref] = validity

    def forget_before(self, block_number):
        """Drop finalized entries for blocks that can no longer receive verdicts."""
        for ref in [r for r in self.finalized if r.block < block_number]:
            del self.finalized[ref]

    def take_outbox(self) -> list:
        out, self.outbox = self.outbox, []
        return out

    @property
    def buffered(self) -> int:
        return sum(len(b) for b in self._buffer.values())
