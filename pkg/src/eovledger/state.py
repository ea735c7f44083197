"""Committed state, uncommitted dirty state, block store and history.

Validators read through the dirty buffer into the state DB, so a block can be
validated before its predecessors are committed. The block store is the
source of truth: replaying it reproduces the state DB exactly.
"""

from __future__ import annotations

import heapq
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from sortedcontainers import SortedDict

from .encoding import Reader, Writer, sha256
from .model import Block, StateKey, TxRef, TxValidity, Version, WriteEntry, owner
from .sparse import SparseBlock

log = logging.getLogger(__name__)


class NonContiguousBlock(ValueError):
    pass


def _range_bounds(contract, start, end):
    lo = StateKey(contract, start)
    hi = StateKey(contract, end) if end is not None else StateKey(contract + "\x00", b"")
    return lo, hi


class StateDB:
    """Ordered map StateKey -> (value, version)."""

    def __init__(self):
        self._map = SortedDict()

    def get(self, key):
        return self._map.get(key)

    def put(self, key, value: bytes, version: Version):
        self._map[key] = (value, version)

    def delete(self, key):
        self._map.pop(key, None)

    def scan(self, contract, start, end):
        lo, hi = _range_bounds(contract, start, end)
        for key in self._map.irange(lo, hi, inclusive=(True, False)):
            value, version = self._map[key]
            yield key, value, version

    def keys_in(self, contract, start=b"", end=None):
        lo, hi = _range_bounds(contract, start, end)
        return self._map.irange(lo, hi, inclusive=(True, False))

    def items(self):
        return [(k, v, ver) for k, (v, ver) in self._map.items()]

    def restricted(self, contracts) -> dict:
        return {k: e for k, e in self._map.items() if owner(k) in contracts}

    def __len__(self):
        return len(self._map)

    def __contains__(self, key):
        return key in self._map

    def size_bytes(self) -> int:
        return sum(len(k.contract) + len(k.key) + len(v) + 12 for k, (v, _) in self._map.items())

    def digest(self) -> bytes:
        return state_digest(self.items())


def state_digest(entries) -> bytes:
    """SHA-256 over (contract, key, version, value) records sorted by key."""
    w = Writer()
    for key, value, version in sorted(entries):
        w.text(key.contract).blob(key.key).u64(version.block).u32(version.tx).blob(value)
    return sha256(w.getvalue())


class DirtyEntry(NamedTuple):
    version: Version
    value: bytes
    is_delete: bool


class DirtyStateBuffer:
    """Writes of validated but uncommitted transactions, kept as a version list per key."""

    def __init__(self):
        self._map = SortedDict()
        self._by_tx: dict = {}
        self._by_block: dict = {}

    def apply(self, ref: TxRef, writes):
        keys = []
        for w in writes:
            versions = self._map.setdefault(w.key, [])
            entry = DirtyEntry(Version(*ref), b"" if w.is_delete else w.value, w.is_delete)
            pos = len(versions)
            while pos and versions[pos - 1].version >= entry.version:
                if versions[pos - 1].version == entry.version:
                    raise ValueError(f"{ref} already applied to dirty state for {w.key!r}")
                pos -= 1
            versions.insert(pos, entry)
            keys.append(w.key)
        if keys:
            self._by_tx.setdefault(ref, []).extend(keys)
            self._by_block.setdefault(ref.block, set()).add(ref)

    def latest(self, key) -> Optional[DirtyEntry]:
        versions = self._map.get(key)
        return versions[-1] if versions else None

    def versions(self, key) -> list:
        return list(self._map.get(key, ()))

    def keys_in(self, contract, start, end):
        lo, hi = _range_bounds(contract, start, end)
        return self._map.irange(lo, hi, inclusive=(True, False))

    def has_tx(self, ref) -> bool:
        return ref in self._by_tx

    def entries_of(self, ref) -> list:
        out = []
        for key in self._by_tx.get(ref, ()):
            for e in self._map[key]:
                if e.version == ref:
                    out.append((key, e))
        return out

    def purge_tx(self, ref):
        for key in self._by_tx.pop(ref, ()):
            versions = [e for e in self._map[key] if e.version != ref]
            if versions:
                self._map[key] = versions
            else:
                del self._map[key]
        refs = self._by_block.get(ref.block)
        if refs is not None:
            refs.discard(ref)
            if not refs:
                del self._by_block[ref.block]

    def purge_block(self, number: int, keep=()):
        for ref in sorted(self._by_block.get(number, ())):
            if ref not in keep:
                self.purge_tx(ref)

    def keys_of_block(self, number) -> set:
        return {k for ref in self._by_block.get(number, ()) for k in self._by_tx[ref]}

    def blocks(self) -> set:
        return set(self._by_block)

    def snapshot(self) -> dict:
        """{key: latest entry}, the view the validators see."""
        return {k: v[-1] for k, v in self._map.items()}

    def __len__(self):
        return len(self._map)


@dataclass
class StoredBlock:
    block: object  # Block or SparseBlock
    flags: list


@dataclass
class DeferredRecord:
    ref: TxRef
    block_number: int
    dependents: set = field(default_factory=set)


_REC_BLOCK, _REC_FLAG, _REC_DEFERRED, _REC_SEED = 1, 2, 3, 4


class BlockStore:
    """Append-only chain of blocks with per-transaction validity flags.

    File layout: a sequence of records ``u8 type, u32 length, payload``.
    A block record holds ``u8 kind (0 full, 1 sparse), blob block-bytes,
    blob flags (one byte per transaction)``. Later flag changes (deferred
    transactions getting their final verdict) are appended as flag-update
    records ``u64 block, u32 index, u8 flag``; deferred records are
    ``u64 block, u32 index, u32 n, n x (u64 block, u32 index)``. Initial
    (seed) state is kept as ``text contract, blob key, u64 block, u32 tx,
    blob value`` records so the store alone can rebuild the state DB.
    """

    def __init__(self, path=None, base_height: int = 0, fsync: bool = False):
        self.base_height = base_height
        self.records: list = []
        self.seed: list = []
        self.deferred: dict = {}
        self.bytes_written = 0
        self.block_bytes = 0
        self._path = path
        self._fsync = fsync
        self._fh = open(path, "ab") if path is not None else None

    @property
    def height(self) -> int:
        return self.base_height + len(self.records)

    def _write(self, rtype, payload: bytes):
        rec = Writer().u8(rtype).blob(payload).getvalue()
        self.bytes_written += len(rec)
        if self._fh is not None:
            self._fh.write(rec)
            self._fh.flush()
            if self._fsync:
                os.fsync(self._fh.fileno())

    def append(self, block, flags):
        if block.number != self.height + 1:
            raise NonContiguousBlock(f"expected block {self.height + 1}, got {block.number}")
        flags = [TxValidity(f) for f in flags]
        if len(flags) != block.tx_count:
            raise ValueError("one validity flag per transaction is required")
        raw = block.encode()
        self.block_bytes += len(raw)
        kind = 1 if isinstance(block, SparseBlock) else 0
        self._write(_REC_BLOCK, Writer().u8(kind).blob(raw).blob(bytes(flags)).getvalue())
        self.records.append(StoredBlock(block, flags))

    def add_seed(self, key, value, version):
        self.seed.append((key, value, Version(*version)))
        self._write(_REC_SEED, Writer().text(key.contract).blob(key.key).u64(version[0])
                    .u32(version[1]).blob(value).getvalue())

    def get(self, number: int) -> StoredBlock:
        idx = number - self.base_height - 1
        if not 0 <= idx < len(self.records):
            raise KeyError(f"block {number} not in store")
        return self.records[idx]

    def __contains__(self, number):
        return self.base_height < number <= self.height

    def tx(self, number: int, index: int):
        return self.get(number).block.tx_at(index)

    def flag(self, ref) -> TxValidity:
        return self.get(ref.block).flags[ref.tx]

    def set_flag(self, ref, validity):
        self.get(ref.block).flags[ref.tx] = TxValidity(validity)
        self._write(_REC_FLAG, Writer().u64(ref.block).u32(ref.tx).u8(int(validity)).getvalue())
        if validity != TxValidity.DEFERRED:
            self.deferred.pop(ref, None)

    def add_deferred(self, record: DeferredRecord):
        self.deferred[record.ref] = record
        w = Writer().u64(record.ref.block).u32(record.ref.tx).u32(len(record.dependents))
        for d in sorted(record.dependents):
            w.u64(d.block).u32(d.tx)
        self._write(_REC_DEFERRED, w.getvalue())

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @classmethod
    def load(cls, path, base_height: int = 0) -> "BlockStore":
        store = cls(None, base_height)
        with open(path, "rb") as fh:
            data = fh.read()
        r = Reader(data)
        while r.remaining:
            rtype, payload = r.u8(), Reader(r.blob())
            if rtype == _REC_BLOCK:
                kind = payload.u8()
                raw = payload.blob()
                block = SparseBlock.decode(raw) if kind else Block.decode(raw)
                flags = [TxValidity(b) for b in payload.blob()]
                store.records.append(StoredBlock(block, flags))
                store.block_bytes += len(raw)
            elif rtype == _REC_FLAG:
                ref = TxRef(payload.u64(), payload.u32())
                v = TxValidity(payload.u8())
                store.get(ref.block).flags[ref.tx] = v
                if v != TxValidity.DEFERRED:
                    store.deferred.pop(ref, None)
            elif rtype == _REC_DEFERRED:
                ref = TxRef(payload.u64(), payload.u32())
                deps = {TxRef(payload.u64(), payload.u32()) for _ in range(payload.u32())}
                if store.flag(ref) == TxValidity.DEFERRED:
                    store.deferred[ref] = DeferredRecord(ref, ref.block, deps)
            elif rtype == _REC_SEED:
                key = StateKey(payload.text(), payload.blob())
                version = Version(payload.u64(), payload.u32())
                store.seed.append((key, payload.blob(), version))
            else:
                raise ValueError(f"unknown block store record type {rtype}")
        store.bytes_written = len(data)
        return store

    def __iter__(self):
        return iter(self.records)


class HistoryRecord(NamedTuple):
    key: StateKey
    version: Version
    is_delete: bool


class StateEngine:
    """State DB + dirty buffer + block store + history for one peer.

    `scope` restricts which contracts' states this peer keeps (sparse peers).
    """

    def __init__(self, scope=None, block_store: Optional[BlockStore] = None):
        self.scope = None if scope is None else frozenset(scope)
        self.state = StateDB()
        self.dirty = DirtyStateBuffer()
        self.blocks = block_store if block_store is not None else BlockStore()
        self.history: list = []
        self.lock = threading.RLock()
        self.listeners: list = []
        self._applied_deferred: set = set()

    @property
    def height(self) -> int:
        return self.blocks.height

    def seed(self, entries):
        """Load (key, value, version) entries straight into the state DB."""
        with self.lock:
            for key, value, version in entries:
                if self.scope is not None and owner(key) not in self.scope:
                    continue
                self.state.put(key, value, Version(*version))
                self.blocks.add_seed(key, value, version)

    def read_through(self, key):
        with self.lock:
            e = self.dirty.latest(key)
            if e is not None:
                return None if e.is_delete else (e.value, e.version)
            return self.state.get(key)

    def range_through(self, contract, start, end) -> list:
        with self.lock:
            keys = heapq.merge(self.state.keys_in(contract, start, end),
                               self.dirty.keys_in(contract, start, end))
            out, prev = [], None
            for key in keys:
                if key == prev:
                    continue
                prev = key
                hit = self.read_through(key)
                if hit is not None:
                    out.append((key, hit[0], hit[1]))
            return out

    def apply_dirty(self, ref, writes):
        with self.lock:
            self.dirty.apply(TxRef(*ref), list(writes))

    def apply_validated(self, ref, tx) -> str:
        """Apply a valid transaction's in-scope writes where readers will find them."""
        with self.lock:
            writes = tx.writes_for(self.scope)
            if ref.block > self.height:
                self.dirty.apply(ref, writes)
                return "dirty"
            # its block was already committed with the transaction deferred
            self._apply_state(ref, writes)
            self._applied_deferred.add(ref)
            return "state"

    def _apply_state(self, ref, writes):
        version = Version(*ref)
        for w in writes:
            if w.is_delete:
                self.state.delete(w.key)
            else:
                self.state.put(w.key, w.value, version)
            self.history.append(HistoryRecord(w.key, version, w.is_delete))

    def commit_block(self, block, flags):
        flags = [TxValidity(f) for f in flags]
        with self.lock:
            if block.number != self.height + 1:
                raise NonContiguousBlock(f"expected block {self.height + 1}, got {block.number}")
            for i, flag in enumerate(flags):
                ref = TxRef(block.number, i)
                if flag == TxValidity.VALID:
                    self._apply_state(ref, block.tx_at(i).writes_for(self.scope))
                elif flag == TxValidity.DEFERRED and self.dirty.has_tx(ref):
                    # validated writes already visible in dirty state must not vanish
                    writes = [_as_write(k, e) for k, e in self.dirty.entries_of(ref)]
                    self._apply_state(ref, writes)
                    self._applied_deferred.add(ref)
            self.dirty.purge_block(block.number)
            self.blocks.append(block, flags)
            for listener in self.listeners:
                listener.on_commit(self, block, flags)

    def resolve_deferred(self, ref, validity, tx):
        with self.lock:
            validity = TxValidity(validity)
            self.blocks.set_flag(ref, validity)
            if validity == TxValidity.VALID and ref not in self._applied_deferred:
                self._apply_state(ref, tx.writes_for(self.scope))
            self._applied_deferred.discard(ref)
            for listener in self.listeners:
                listener.on_resolve(self, ref, validity)

    def digest(self) -> bytes:
        with self.lock:
            return self.state.digest()

    def dump_state(self) -> list:
        """(contract, key-hex, block, tx, value-digest) lines sorted by key."""
        with self.lock:
            return [
                f"{k.contract}\t{k.key.hex()}\t{ver.block}\t{ver.tx}\t{sha256(v).hex()}"
                for k, v, ver in self.state.items()
            ]


def _as_write(key, entry: DirtyEntry):
    return WriteEntry(key, entry.value, entry.is_delete)


def replay(store: BlockStore, scope=None, upto: Optional[int] = None) -> StateDB:
    """Rebuild a state DB from the stored seed, blocks and their (final) validity flags.

    Without `scope`, a store of sparse blocks is replayed under the filter the
    blocks were built for.
    """
    if scope is None:
        scope = next((rec.block.applied_filter.contracts for rec in store
                      if isinstance(rec.block, SparseBlock)), None)
    scope = None if scope is None else frozenset(scope)
    db = StateDB()
    for key, value, version in store.seed:
        if scope is None or owner(key) in scope:
            db.put(key, value, version)
    for rec in store:
        if upto is not None and rec.block.number > upto:
            break
        for i, flag in enumerate(rec.flags):
            if flag != TxValidity.VALID:
                continue
            for w in rec.block.tx_at(i).writes_for(scope):
                if w.is_delete:
                    db.delete(w.key)
                else:
                    db.put(w.key, w.value, Version(rec.block.number, i))
    return db
