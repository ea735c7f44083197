"""Per-contract state snapshots for bringing up a new peer without replaying the chain.

Committed writes are indexed by (contract, block, tx). A snapshot as of block B
takes each key's last write in [0, B]; the value comes straight from the state
DB when that write is still the live version, and otherwise from the writing
transaction's write-set in the block store.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

from sortedcontainers import SortedDict

from .encoding import Reader, Writer, sha256
from .model import StateKey, TxValidity, Version, owner
from .sparse import DuplicateTracker, Filter

log = logging.getLogger(__name__)


class FutureBlock(ValueError):
    pass


class FilterNotCovered(ValueError):
    pass


class ManifestCorrupt(ValueError):
    pass


class Modification(NamedTuple):
    key: StateKey
    is_delete: bool
    is_deferred: bool


_SEED_BLOCK = 0


class ModificationIndex:
    """(contract, block, tx) -> [Modification]; kept up to date as a commit listener."""

    def __init__(self):
        self._map = SortedDict()
        self._by_ref: dict = {}  # deferred (block, tx) -> index keys awaiting resolution

    def attach(self, engine) -> "ModificationIndex":
        with engine.lock:
            self.record_seed(engine.blocks.seed, engine.scope)
            for rec in engine.blocks:
                self.record_modifications(rec.block, rec.flags, engine.scope)
            engine.listeners.append(self)
        return self

    def record_seed(self, entries, scope=None):
        for key, _, version in entries:
            c = owner(key)
            if scope is None or c in scope:
                self._map.setdefault((c, version.block, version.tx), []).append(
                    Modification(key, False, False))

    def record_modifications(self, block, flags, scope=None):
        for i, flag in enumerate(flags):
            if flag not in (TxValidity.VALID, TxValidity.DEFERRED):
                continue
            deferred = flag == TxValidity.DEFERRED
            for w in block.tx_at(i).writes_for(scope):
                k = (owner(w.key), block.number, i)
                self._map.setdefault(k, []).append(Modification(w.key, w.is_delete, deferred))
                if deferred:
                    self._by_ref.setdefault((block.number, i), set()).add(k)

    # commit listener protocol
    def on_commit(self, engine, block, flags):
        self.record_modifications(block, flags, engine.scope)

    def on_resolve(self, engine, ref, validity):
        for k in self._by_ref.pop((ref.block, ref.tx), ()):
            if validity == TxValidity.VALID:
                self._map[k] = [m._replace(is_deferred=False) for m in self._map[k]]
            else:
                del self._map[k]

    def scan(self, contract, upto_block: int, reverse=False):
        """Entries of `contract` from blocks 0..upto_block in (block, tx) order."""
        keys = self._map.irange((contract, 0, 0), (contract, upto_block + 1, 0),
                                inclusive=(True, False), reverse=reverse)
        for k in keys:
            yield Version(k[1], k[2]), self._map[k]

    def get(self, contract, block, tx):
        return self._map.get((contract, block, tx))

    def __len__(self):
        return len(self._map)

    def items(self):
        return list(self._map.items())


@dataclass
class SnapshotManifest:
    contract: str
    as_of: int
    entries: list  # [(StateKey, value, Version)] sorted by key

    def __post_init__(self):
        keys = [e[0] for e in self.entries]
        if keys != sorted(set(keys)):
            raise ValueError("manifest keys must be distinct and sorted")
        for _, _, v in self.entries:
            if v.block > self.as_of:
                raise ValueError(f"entry version {v} is after block {self.as_of}")

    def _body(self) -> bytes:
        w = Writer()
        for key, value, version in self.entries:
            w.text(key.contract).blob(key.key).u64(version.block).u32(version.tx).blob(value)
        return w.getvalue()

    def encode(self) -> bytes:
        """Header (contract, asOfBlock, count, body digest), then sorted entry records."""
        body = self._body()
        head = Writer().text(self.contract).u64(self.as_of).u32(len(self.entries)).raw(sha256(body))
        return head.getvalue() + body

    @classmethod
    def decode(cls, data: bytes) -> "SnapshotManifest":
        r = Reader(data)
        contract, as_of, count, digest = r.text(), r.u64(), r.u32(), r.raw(32)
        body_start = len(data) - r.remaining
        if sha256(data[body_start:]) != digest:
            raise ManifestCorrupt("manifest body digest mismatch")
        entries = []
        for _ in range(count):
            key = StateKey(r.text(), r.blob())
            version = Version(r.u64(), r.u32())
            entries.append((key, r.blob(), version))
        r.expect_end()
        return cls(contract, as_of, entries)

    @property
    def size_bytes(self) -> int:
        return len(self.encode())


def _written_value(engine, key, version) -> bytes:
    if version.block == _SEED_BLOCK:
        for k, value, v in engine.blocks.seed:
            if k == key and v == version:
                return value
        raise LookupError(f"seed entry {key!r} {version} missing")
    tx = engine.blocks.tx(version.block, version.tx)
    for w in tx.write_set:
        if w.key == key:
            return w.value
    raise LookupError(f"{key!r} not in write-set of {version}")


def recover_value(engine, index: ModificationIndex, key: StateKey, as_of: int):
    """Value and version of `key` as of block `as_of`, read from the block store."""
    for version, mods in index.scan(owner(key), as_of, reverse=True):
        for m in mods:
            if m.key == key and not m.is_deferred:
                if m.is_delete:
                    return None
                return _written_value(engine, key, version), version
    return None


def extract_snapshot(engine, index: ModificationIndex, contract: str, as_of: int) -> SnapshotManifest:
    with engine.lock:
        if as_of > engine.height:
            raise FutureBlock(f"block {as_of} is beyond height {engine.height}")
        last: dict = {}
        for version, mods in index.scan(contract, as_of):
            for m in mods:
                if not m.is_deferred:
                    last[m.key] = (version, m.is_delete)
        entries = []
        for key in sorted(last):
            version, deleted = last[key]
            if deleted:
                continue
            live = engine.state.get(key)
            if live is not None and live[1] == version:
                entries.append((key, live[0], version))
            else:
                entries.append((key, _written_value(engine, key, version), version))
        return SnapshotManifest(contract, as_of, entries)


@dataclass
class JoinReport:
    state_bytes: int
    id_bytes: int
    from_height: int

    @property
    def total_bytes(self) -> int:
        return self.state_bytes + self.id_bytes


def join_sparse_peer(new_peer, manifests, from_height: int, last_hash: bytes,
                     seen_tx_ids=(), contracts=None) -> JoinReport:
    """Seed `new_peer` from manifests and make it accept blocks after `from_height`.

    `contracts` lists every contract in use; needed only when the new peer is a
    full peer, whose filter has no explicit contract list.
    """
    covered = {m.contract for m in manifests}
    wanted = new_peer.scope if new_peer.scope is not None else contracts
    if wanted is None:
        raise FilterNotCovered("a full peer needs the list of contracts to cover")
    missing = set(wanted) - covered
    if missing:
        raise FilterNotCovered(f"no manifest for {sorted(missing)}")
    for m in manifests:
        if m.as_of != from_height:
            raise ValueError(f"manifest for {m.contract} is as of {m.as_of}, not {from_height}")
    state_bytes = 0
    for m in manifests:
        if m.contract in wanted:
            new_peer.seed(m.entries)
            state_bytes += m.size_bytes
    ids = set(seen_tx_ids)
    new_peer.dups = DuplicateTracker(ids)
    new_peer.start_at(from_height, last_hash)
    return JoinReport(state_bytes, 32 * len(ids), from_height)


def shrink_filter(peer, contracts) -> None:
    """Narrow an idle peer's filter and drop the state it no longer owns."""
    contracts = frozenset(contracts)
    with peer.lock:
        if peer.scope is not None and not contracts <= peer.scope:
            raise ValueError("a filter can only be shrunk")
        if not peer.idle():
            raise RuntimeError("shrink the filter only when the peer has nothing in flight")
        peer.filter = Filter(peer.peer_id, contracts)
        peer.scope = contracts
        peer.graph.scope = contracts
        peer.engine.scope = contracts
        peer.dist.scope = contracts
        for key in [k for k, _, _ in peer.engine.state.items() if owner(k) not in contracts]:
            peer.engine.state.delete(key)
