"""Ledger vocabulary: keys, versions, read-write sets, transactions and blocks.

Everything here is immutable once built. Canonical bytes are produced with
:mod:`eovledger.encoding` (length-prefixed fields in declaration order,
fixed-width big-endian integers) and all digests are SHA-256.
"""

from __future__ import annotations

import enum
import hmac
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .encoding import DecodeError, Reader, Writer, sha256
from .merkle import merkle_root

POLICY_NS = "_policy"
ZERO_HASH = bytes(32)


class StateKey(NamedTuple):
    contract: str
    key: bytes

    def __repr__(self):
        try:
            k = self.key.decode("ascii")
        except UnicodeDecodeError:
            k = self.key.hex()
        return f"{self.contract}/{k}"


class Version(NamedTuple):
    """(block number, transaction index); tuple order is the version order."""

    block: int
    tx: int

    def __repr__(self):
        return f"({self.block},{self.tx})"


# A transaction is referred to by its position, which is also the version it writes.
TxRef = Version


def owner(key: StateKey) -> str:
    """Contract that a state belongs to; policy states belong to the contract they govern."""
    if key.contract == POLICY_NS:
        return key.key.decode("utf-8")
    return key.contract


def policy_key(contract: str) -> StateKey:
    return StateKey(POLICY_NS, contract.encode("utf-8"))


class ReadEntry(NamedTuple):
    key: StateKey
    version: Optional[Version]


class WriteEntry(NamedTuple):
    key: StateKey
    value: bytes = b""
    is_delete: bool = False


@dataclass(frozen=True)
class RangeQueryInfo:
    contract: str
    start_key: bytes
    end_key: Optional[bytes]  # None means unbounded
    observed_reads: tuple = ()

    def __post_init__(self):
        if not self.contract:
            raise ValueError("range query needs a contract")
        if self.end_key is not None and not self.start_key < self.end_key:
            raise ValueError("range query start must be below end")
        keys = [r.key for r in self.observed_reads]
        if keys != sorted(set(keys)):
            raise ValueError("observed reads must be sorted and distinct")
        for k in keys:
            if not self.covers(k):
                raise ValueError(f"observed key {k!r} outside range")

    def covers(self, key: StateKey) -> bool:
        return (
            key.contract == self.contract
            and key.key >= self.start_key
            and (self.end_key is None or key.key < self.end_key)
        )


class Endorsement(NamedTuple):
    org: str
    signature: bytes


class TxValidity(enum.IntEnum):
    VALID = 0
    INVALID_SERIALIZABILITY = 1
    INVALID_ENDORSEMENT = 2
    INVALID_DUPLICATE = 3
    NOT_VALIDATED = 4
    DEFERRED = 5

    @property
    def is_valid(self) -> bool:
        return self is TxValidity.VALID

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    TxValidity.VALID: "V",
    TxValidity.INVALID_SERIALIZABILITY: "I",
    TxValidity.INVALID_ENDORSEMENT: "E",
    TxValidity.INVALID_DUPLICATE: "D",
    TxValidity.NOT_VALIDATED: "-",
    TxValidity.DEFERRED: "?",
}


# -- canonical encoding of the pieces -------------------------------------------------

def _put_key(w: Writer, k: StateKey) -> None:
    w.text(k.contract).blob(k.key)


def _get_key(r: Reader) -> StateKey:
    return StateKey(r.text(), r.blob())


def _put_opt_version(w: Writer, v: Optional[Version]) -> None:
    if v is None:
        w.u8(0)
    else:
        w.u8(1).u64(v.block).u32(v.tx)


def _get_opt_version(r: Reader) -> Optional[Version]:
    return Version(r.u64(), r.u32()) if r.flag() else None


def _put_read(w: Writer, e: ReadEntry) -> None:
    _put_key(w, e.key)
    _put_opt_version(w, e.version)


def _get_read(r: Reader) -> ReadEntry:
    return ReadEntry(_get_key(r), _get_opt_version(r))


def _put_range(w: Writer, q: RangeQueryInfo) -> None:
    w.text(q.contract).blob(q.start_key)
    if q.end_key is None:
        w.u8(0)
    else:
        w.u8(1).blob(q.end_key)
    w.u32(len(q.observed_reads))
    for e in q.observed_reads:
        _put_read(w, e)


def _get_range(r: Reader) -> RangeQueryInfo:
    contract, start = r.text(), r.blob()
    end = r.blob() if r.flag() else None
    reads = tuple(_get_read(r) for _ in range(r.u32()))
    return RangeQueryInfo(contract, start, end, reads)


# -- transactions ----------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    nonce: bytes
    invoked_contracts: tuple
    read_set: tuple = ()
    write_set: tuple = ()
    range_queries: tuple = ()
    endorsements: tuple = ()
    tx_id: bytes = field(default=b"", compare=False, repr=False)

    def __post_init__(self):
        if not self.invoked_contracts:
            raise ValueError("transaction must invoke at least one contract")
        touched = {owner(e.key) for e in self.read_set}
        touched |= {owner(e.key) for e in self.write_set}
        touched |= {q.contract for q in self.range_queries}
        if touched != set(self.invoked_contracts):
            raise ValueError(
                f"invoked contracts {sorted(self.invoked_contracts)} do not match "
                f"touched contracts {sorted(touched)}"
            )
        keys = [e.key for e in self.write_set]
        if len(keys) != len(set(keys)):
            raise ValueError("write set has more than one entry for a key")
        for e in self.write_set:
            if e.is_delete and e.value:
                raise ValueError("delete entries carry no value")
        object.__setattr__(self, "tx_id", sha256(encode_tx(self)))

    @classmethod
    def build(cls, nonce, reads=(), writes=(), ranges=(), endorsements=()) -> "Transaction":
        """Assemble a transaction in canonical order (entries grouped by contract, then key)."""
        def order(e):
            return (owner(e.key), e.key)

        reads = tuple(sorted(reads, key=order))
        writes = tuple(sorted(writes, key=order))
        ranges = tuple(sorted(ranges, key=lambda q: (q.contract, q.start_key, q.end_key or b"")))
        invoked = {owner(e.key) for e in reads} | {owner(e.key) for e in writes}
        invoked |= {q.contract for q in ranges}
        if isinstance(nonce, str):
            nonce = nonce.encode("utf-8")
        return cls(nonce, tuple(sorted(invoked)), reads, writes, ranges, tuple(endorsements))

    def with_endorsements(self, endorsements) -> "Transaction":
        return Transaction(self.nonce, self.invoked_contracts, self.read_set, self.write_set,
                           self.range_queries, tuple(endorsements))

    def response_bytes(self) -> bytes:
        """The bytes endorsers sign: everything except the endorsements themselves."""
        return encode_tx_body(self)

    def writes_for(self, contracts) -> list:
        if contracts is None:
            return list(self.write_set)
        return [e for e in self.write_set if owner(e.key) in contracts]

    @property
    def short_id(self) -> str:
        return self.tx_id[:4].hex()


def encode_tx_body(tx: Transaction) -> bytes:
    w = Writer().blob(tx.nonce)
    w.u32(len(tx.invoked_contracts))
    for c in tx.invoked_contracts:
        w.text(c)
    w.u32(len(tx.read_set))
    for e in tx.read_set:
        _put_read(w, e)
    w.u32(len(tx.write_set))
    for e in tx.write_set:
        _put_key(w, e.key)
        w.u8(int(e.is_delete)).blob(e.value)
    w.u32(len(tx.range_queries))
    for q in tx.range_queries:
        _put_range(w, q)
    return w.getvalue()


def encode_tx(tx: Transaction) -> bytes:
    w = Writer().raw(encode_tx_body(tx))
    w.u32(len(tx.endorsements))
    for e in tx.endorsements:
        w.text(e.org).blob(e.signature)
    return w.getvalue()


def _read_tx(r: Reader) -> Transaction:
    nonce = r.blob()
    invoked = tuple(r.text() for _ in range(r.u32()))
    reads = tuple(_get_read(r) for _ in range(r.u32()))
    writes = []
    for _ in range(r.u32()):
        k = _get_key(r)
        is_delete = r.flag()
        writes.append(WriteEntry(k, r.blob(), is_delete))
    ranges = tuple(_get_range(r) for _ in range(r.u32()))
    ends = tuple(Endorsement(r.text(), r.blob()) for _ in range(r.u32()))
    return Transaction(nonce, invoked, reads, tuple(writes), ranges, ends)


def decode_tx(data: bytes) -> Transaction:
    r = Reader(data)
    try:
        tx = _read_tx(r)
    except ValueError as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(str(exc)) from exc
    r.expect_end()
    return tx


def compute_tx_id(tx: Transaction) -> bytes:
    return sha256(encode_tx(tx))


# -- endorsement -----------------------------------------------------------------------

@dataclass(frozen=True)
class EndorsementPolicy:
    contract: str
    required_orgs: frozenset
    threshold: int

    def __post_init__(self):
        object.__setattr__(self, "required_orgs", frozenset(self.required_orgs))
        if not 1 <= self.threshold <= len(self.required_orgs):
            raise ValueError("threshold must be between 1 and the number of required orgs")

    def encode(self) -> bytes:
        w = Writer().text(self.contract).u32(len(self.required_orgs))
        for org in sorted(self.required_orgs):
            w.text(org)
        return w.u32(self.threshold).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "EndorsementPolicy":
        r = Reader(data)
        contract = r.text()
        orgs = [r.text() for _ in range(r.u32())]
        policy = cls(contract, frozenset(orgs), r.u32())
        r.expect_end()
        return policy


class KeyRing:
    """Per-organization secrets; endorsements are HMAC-SHA256 over the response bytes."""

    def __init__(self, secrets: dict):
        self._secrets = dict(secrets)

    @classmethod
    def for_orgs(cls, orgs, seed: int = 0) -> "KeyRing":
        return cls({o: sha256(f"org-secret/{seed}/{o}".encode()) for o in orgs})

    @property
    def orgs(self):
        return sorted(self._secrets)

    def sign(self, org: str, payload: bytes) -> bytes:
        return hmac.new(self._secrets[org], payload, "sha256").digest()

    def verify(self, org: str, payload: bytes, signature: bytes) -> bool:
        secret = self._secrets.get(org)
        if secret is None:
            return False
        return hmac.compare_digest(hmac.new(secret, payload, "sha256").digest(), signature)

    def endorse(self, tx: Transaction, orgs) -> Transaction:
        payload = tx.response_bytes()
        return tx.with_endorsements(Endorsement(o, self.sign(o, payload)) for o in orgs)


# -- blocks ----------------------------------------------------------------------------

class EmptyBlock(ValueError):
    pass


def block_hash(number: int, prev_hash: bytes, root: bytes) -> bytes:
    return sha256(Writer().u64(number).raw(prev_hash).raw(root).getvalue())


@dataclass(frozen=True)
class Block:
    number: int
    prev_hash: bytes
    merkle_root: bytes
    block_hash: bytes
    txs: tuple

    def indexed_txs(self):
        return list(enumerate(self.txs))

    @property
    def tx_count(self) -> int:
        return len(self.txs)

    @property
    def tx_ids(self) -> list:
        return [t.tx_id for t in self.txs]

    def tx_at(self, index: int) -> Optional[Transaction]:
        return self.txs[index]

    def encode(self) -> bytes:
        w = Writer().u64(self.number).raw(self.prev_hash).raw(self.merkle_root).raw(self.block_hash)
        w.u32(len(self.txs))
        for tx in self.txs:
            w.blob(encode_tx(tx))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        number, prev, root, bh = r.u64(), r.raw(32), r.raw(32), r.raw(32)
        txs = tuple(decode_tx(r.blob()) for _ in range(r.u32()))
        r.expect_end()
        return cls(number, prev, root, bh, txs)

    def verify(self, expected_prev_hash: Optional[bytes] = None) -> bool:
        if expected_prev_hash is not None and self.prev_hash != expected_prev_hash:
            return False
        if not self.txs or merkle_root(self.tx_ids) != self.merkle_root:
            return False
        return block_hash(self.number, self.prev_hash, self.merkle_root) == self.block_hash


def seal_block(number: int, prev_hash: bytes, txs) -> Block:
    txs = tuple(txs)
    if not txs:
        raise EmptyBlock(f"block {number} has no transactions")
    root = merkle_root([t.tx_id for t in txs])
    return Block(number, prev_hash, root, block_hash(number, prev_hash, root), txs)
