"""Transaction-selection filters and sparse blocks.

A sparse block carries only the transactions a peer's filter selects, but
keeps the full vector of transaction ids. Since the ids are the Merkle leaves
of the block hash, a peer can recompute the root (and hence the hash chain)
from the ids alone and check each shipped transaction against its leaf.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .encoding import DecodeError, Reader, Writer
from .merkle import EmptyLeaves, merkle_root
from .model import Block, Transaction, block_hash, decode_tx, encode_tx

__all__ = [
    "EmptyLeaves", "Filter", "SparseBlock", "SparseCheck", "DuplicateTracker",
    "merkle_root", "make_sparse", "verify_sparse", "check_duplicates", "selects",
]


@dataclass(frozen=True)
class Filter:
    peer_id: str
    contracts: Optional[frozenset]  # None: full peer (universal filter)

    def __post_init__(self):
        if self.contracts is not None:
            object.__setattr__(self, "contracts", frozenset(self.contracts))
            if not self.contracts:
                raise ValueError("a sparse peer's filter cannot be empty")

    @classmethod
    def full(cls, peer_id: str) -> "Filter":
        return cls(peer_id, None)

    @property
    def is_full(self) -> bool:
        return self.contracts is None

    def admits(self, tx: Transaction) -> bool:
        return selects(self.contracts, tx)


def selects(contracts, tx: Transaction) -> bool:
    # A multi-contract transaction is selected if any one of its contracts is in the filter.
    return contracts is None or not contracts.isdisjoint(tx.invoked_contracts)


@dataclass(frozen=True)
class SparseBlock:
    number: int
    prev_hash: bytes
    merkle_root: bytes
    block_hash: bytes
    applied_filter: Filter
    merkle_leaves: tuple
    included: tuple  # ((original index, Transaction), ...)

    @property
    def all_tx_ids(self) -> tuple:
        return self.merkle_leaves

    @property
    def tx_count(self) -> int:
        return len(self.merkle_leaves)

    @property
    def tx_ids(self) -> list:
        return list(self.merkle_leaves)

    def indexed_txs(self):
        return list(self.included)

    def tx_at(self, index: int) -> Optional[Transaction]:
        for i, tx in self.included:
            if i == index:
                return tx
        return None

    def encode(self) -> bytes:
        w = Writer().u64(self.number).raw(self.prev_hash).raw(self.merkle_root).raw(self.block_hash)
        w.text(self.applied_filter.peer_id)
        contracts = self.applied_filter.contracts
        if contracts is None:
            w.u8(0)
        else:
            w.u8(1).u32(len(contracts))
            for c in sorted(contracts):
                w.text(c)
        w.u32(len(self.merkle_leaves))
        for leaf in self.merkle_leaves:
            w.raw(leaf)
        w.u32(len(self.included))
        for i, tx in self.included:
            w.u32(i).blob(encode_tx(tx))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SparseBlock":
        r = Reader(data)
        number, prev, root, bh = r.u64(), r.raw(32), r.raw(32), r.raw(32)
        peer_id = r.text()
        contracts = frozenset(r.text() for _ in range(r.u32())) if r.flag() else None
        try:
            flt = Filter(peer_id, contracts)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        leaves = tuple(r.raw(32) for _ in range(r.u32()))
        included = tuple((r.u32(), decode_tx(r.blob())) for _ in range(r.u32()))
        r.expect_end()
        return cls(number, prev, root, bh, flt, leaves, included)


def make_sparse(block: Block, flt: Filter) -> SparseBlock:
    included = tuple((i, tx) for i, tx in enumerate(block.txs) if flt.admits(tx))
    return SparseBlock(block.number, block.prev_hash, block.merkle_root, block.block_hash,
                       flt, tuple(block.tx_ids), included)


class SparseCheck(enum.Enum):
    OK = "ok"
    PREV_HASH_MISMATCH = "prev-hash-mismatch"
    ROOT_MISMATCH = "root-mismatch"
    BLOCK_HASH_MISMATCH = "block-hash-mismatch"
    LEAF_MISMATCH = "leaf-mismatch"
    BAD_INDEX = "bad-index"
    FILTER_MISMATCH = "filter-mismatch"

    def __bool__(self):
        return self is SparseCheck.OK


def verify_sparse(sb: SparseBlock, expected_prev_hash: bytes) -> SparseCheck:
    """Check a sparse block against the hash chain; the result is truthy only when it passes."""
    if sb.prev_hash != expected_prev_hash:
        return SparseCheck.PREV_HASH_MISMATCH
    if not sb.merkle_leaves or merkle_root(sb.merkle_leaves) != sb.merkle_root:
        return SparseCheck.ROOT_MISMATCH
    if block_hash(sb.number, sb.prev_hash, sb.merkle_root) != sb.block_hash:
        return SparseCheck.BLOCK_HASH_MISMATCH
    last = -1
    for i, tx in sb.included:
        if not last < i < len(sb.merkle_leaves):
            return SparseCheck.BAD_INDEX
        if tx.tx_id != sb.merkle_leaves[i]:
            return SparseCheck.LEAF_MISMATCH
        if not sb.applied_filter.admits(tx):
            return SparseCheck.FILTER_MISMATCH
        last = i
    return SparseCheck.OK


class DuplicateTracker:
    """Exact set of every transaction id seen so far."""

    def __init__(self, ids=()):
        self.ids = set(ids)

    def __len__(self):
        return len(self.ids)

    def __contains__(self, tx_id):
        return tx_id in self.ids

    def check(self, all_tx_ids) -> set:
        return check_duplicates(all_tx_ids, self.ids)


def check_duplicates(all_tx_ids, recent_ids: set) -> set:
    dups = set()
    for i, tx_id in enumerate(all_tx_ids):
        if tx_id in recent_ids:
            dups.add(i)
        else:
            recent_ids.add(tx_id)
    return dups
