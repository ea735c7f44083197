"""Waiting-transactions dependency graph.

Nodes are transactions that have been ordered but not yet validated. An edge
always points from a later transaction to an earlier one, so the graph is
acyclic by construction. A node with no out-edges may be validated right away.

Read versions decide whether a dependency is a *fate* dependency. A reader
that saw a version older than an in-graph writer's cannot survive that
writer being valid (RW / PR / EP_RW). A reader that already saw the writer's
effect (it was endorsed on a peer that had validated the writer) only needs
ordering; such edges are labelled RF and never propagate invalidity.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Optional

from sortedcontainers import SortedDict, SortedList

from .model import POLICY_NS, StateKey, TxRef, TxValidity, owner, policy_key


class DependencyKind(enum.Enum):
    RW = "rw"
    WR = "wr"
    WW = "ww"
    PR = "pr"
    EP_RW = "ep-rw"
    EP_WR = "ep-wr"
    EP_WW = "ep-ww"
    RF = "rf"


FATE_KINDS = frozenset({DependencyKind.RW, DependencyKind.PR, DependencyKind.EP_RW})

# Version placeholder for an implicit endorsement-policy read (the transaction
# invokes a contract but did not record which policy version it was endorsed under).
UNKNOWN = "unknown-version"


class OutOfOrderBlock(ValueError):
    pass


class UnknownTx(KeyError):
    pass


@dataclass
class TxNode:
    ref: TxRef
    tx: object
    reads: dict
    writes: dict
    ranges: list
    out_edges: dict = field(default_factory=dict)
    in_edges: dict = field(default_factory=dict)
    dispatched: bool = False


@dataclass
class KeyAccess:
    readers: set = field(default_factory=set)
    writers: SortedList = field(default_factory=SortedList)


class KeyAccessIndex:
    """Ordered map from state key to the in-graph transactions that read and write it."""

    def __init__(self):
        self._map = SortedDict()

    def get(self, key: StateKey) -> Optional[KeyAccess]:
        return self._map.get(key)

    def _entry(self, key):
        acc = self._map.get(key)
        if acc is None:
            acc = self._map[key] = KeyAccess()
        return acc

    def add_reader(self, key, ref):
        self._entry(key).readers.add(ref)

    def add_writer(self, key, ref):
        self._entry(key).writers.add(ref)

    def remove(self, key, ref):
        acc = self._map.get(key)
        if acc is None:
            return
        acc.readers.discard(ref)
        acc.writers.discard(ref)
        if not acc.readers and not acc.writers:
            del self._map[key]

    def scan(self, contract: str, start: bytes, end: Optional[bytes]):
        """Yield (key, KeyAccess) for keys of `contract` in [start, end) in key order."""
        lo = StateKey(contract, start)
        hi = StateKey(contract, end) if end is not None else StateKey(contract + "\x00", b"")
        for key in self._map.irange(lo, hi, inclusive=(True, False)):
            yield key, self._map[key]

    def as_dict(self) -> dict:
        return {k: (set(a.readers), list(a.writers)) for k, a in self._map.items()}

    def __len__(self):
        return len(self._map)


def _kind(key: StateKey, data_kind: DependencyKind, policy_kind: DependencyKind):
    return policy_kind if key.contract == POLICY_NS else data_kind


def is_stale(read_version, writer: TxRef, writer_deletes: bool, writer_is_last: bool) -> bool:
    """True when `writer` being valid guarantees the read no longer matches state."""
    if read_version == UNKNOWN:
        return False
    if read_version is not None:
        return read_version < writer
    # Read saw "absent": only a surviving (re)creation by the last writer contradicts it.
    return not writer_deletes and writer_is_last


def access_summary(tx, scope=None, implicit_policy_reads=True):
    """Reads, writes and range queries of `tx` restricted to contracts in `scope`."""
    def ok(contract):
        return scope is None or contract in scope

    reads = {e.key: e.version for e in tx.read_set if ok(owner(e.key))}
    if implicit_policy_reads:
        for c in tx.invoked_contracts:
            if ok(c):
                reads.setdefault(policy_key(c), UNKNOWN)
    writes = {e.key: e.is_delete for e in tx.write_set if ok(owner(e.key))}
    ranges = [q for q in tx.range_queries if ok(q.contract)]
    return reads, writes, ranges


class DependencyGraph:
    def __init__(self, scope=None, implicit_policy_reads=True):
        self.scope = None if scope is None else frozenset(scope)
        self.implicit_policy_reads = implicit_policy_reads
        self.nodes: dict = {}
        self.index = KeyAccessIndex()
        self._ranges: dict = {}  # contract -> {ref: [RangeQueryInfo]}
        self._eligible = SortedList()
        self.last_block = 0
        self.lock = threading.RLock()

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, ref):
        return ref in self.nodes

    def node(self, ref) -> TxNode:
        try:
            return self.nodes[ref]
        except KeyError:
            raise UnknownTx(ref) from None

    # -- extraction ------------------------------------------------------------------

    def add_block(self, block, filter=None, skip=()) -> int:
        """Add the admitted transactions of `block`; returns how many nodes were created.

        `block` may be a full or sparse block. `filter` (a set of contracts)
        defaults to the graph's scope; `skip` lists indices that must not enter
        the graph (e.g. duplicates).
        """
        with self.lock:
            if block.number <= self.last_block:
                raise OutOfOrderBlock(f"block {block.number} after {self.last_block}")
            scope = self.scope if filter is None else frozenset(filter)
            added = 0
            for i, tx in block.indexed_txs():
                if i in skip:
                    continue
                if scope is not None and scope.isdisjoint(tx.invoked_contracts):
                    continue
                self._add(TxRef(block.number, i), tx, scope)
                added += 1
            self.last_block = block.number
            return added

    def _link(self, src: TxNode, dst_ref: TxRef, kind: DependencyKind):
        src.out_edges.setdefault(dst_ref, set()).add(kind)
        self.nodes[dst_ref].in_edges.setdefault(src.ref, set()).add(kind)

    def _add(self, ref, tx, scope):
        reads, writes, ranges = access_summary(tx, scope, self.implicit_policy_reads)
        node = TxNode(ref, tx, reads, writes, ranges)
        self.nodes[ref] = node
        K = DependencyKind

        for key, version in reads.items():
            acc = self.index.get(key)
            if acc is None or not acc.writers:
                continue
            last = acc.writers[-1]
            for w in acc.writers:
                stale = is_stale(version, w, self.nodes[w].writes[key], w == last)
                self._link(node, w, _kind(key, K.RW, K.EP_RW) if stale else K.RF)

        for key in writes:
            acc = self.index.get(key)
            if acc is not None:
                for w in acc.writers:
                    self._link(node, w, _kind(key, K.WW, K.EP_WW))
                for r in acc.readers:
                    self._link(node, r, _kind(key, K.WR, K.EP_WR))
            # an earlier range query over this key must be validated before the key changes
            for r, queries in self._ranges.get(key.contract, {}).items():
                if any(q.covers(key) for q in queries):
                    self._link(node, r, K.WR)

        for q in ranges:
            observed = {e.key: e.version for e in q.observed_reads}
            for key, acc in self.index.scan(q.contract, q.start_key, q.end_key):
                if not acc.writers:
                    continue
                last = acc.writers[-1]
                version = observed.get(key)
                for w in acc.writers:
                    stale = is_stale(version, w, self.nodes[w].writes[key], w == last)
                    self._link(node, w, K.PR if stale else K.RF)

        for key in reads:
            self.index.add_reader(key, ref)
        for key in writes:
            self.index.add_writer(key, ref)
        for q in ranges:
            self._ranges.setdefault(q.contract, {}).setdefault(ref, []).append(q)
        if not node.out_edges:
            self._eligible.add(ref)

    # -- scheduling --------------------------------------------------------------------

    def get_next_transaction(self) -> Optional[TxRef]:
        """Oldest node with no out-edges that has not been handed out yet."""
        with self.lock:
            if not self._eligible:
                return None
            ref = self._eligible.pop(0)
            self.nodes[ref].dispatched = True
            return ref

    def peek_eligible(self) -> list:
        with self.lock:
            return list(self._eligible)

    def remove_from_graph(self, ref, is_valid: bool) -> list:
        """Remove `ref`; if it was valid, drop its fate dependents as invalid.

        Returns the fate-invalidated transactions as (ref, validity) pairs.
        Invalidity does not propagate further: an invalid transaction has no
        effect, so its own dependents merely lose the edge.
        """
        with self.lock:
            node = self.nodes.pop(ref, None)
            if node is None:
                raise UnknownTx(ref)
            self._eligible.discard(ref)
            for dst in node.out_edges:
                self.nodes[dst].in_edges.pop(ref, None)
            victims = []
            for src_ref, kinds in node.in_edges.items():
                src = self.nodes[src_ref]
                del src.out_edges[ref]
                if is_valid and not kinds.isdisjoint(FATE_KINDS):
                    victims.append(src_ref)
                elif not src.out_edges and not src.dispatched:
                    self._eligible.add(src_ref)
            self._unindex(node)
            out = []
            for v in sorted(victims):
                self.remove_from_graph(v, False)
                out.append((v, TxValidity.INVALID_SERIALIZABILITY))
            return out

    def _unindex(self, node):
        for key in node.reads:
            self.index.remove(key, node.ref)
        for key in node.writes:
            self.index.remove(key, node.ref)
        for q in node.ranges:
            per = self._ranges.get(q.contract)
            if per is not None:
                per.pop(node.ref, None)
                if not per:
                    del self._ranges[q.contract]

    def find_range_writers(self, contract, start_key, end_key) -> set:
        with self.lock:
            found = set()
            for _, acc in self.index.scan(contract, start_key, end_key):
                found.update(acc.writers)
            return found

    def depends_on_any(self, ref, targets) -> bool:
        with self.lock:
            node = self.nodes.get(ref)
            return node is not None and any(t in targets for t in node.out_edges)

    # -- inspection --------------------------------------------------------------------

    def edges(self) -> dict:
        """{(dependent, dependee): frozenset(kinds)} for all current edges."""
        with self.lock:
            return {
                (n.ref, dst): frozenset(kinds)
                for n in self.nodes.values()
                for dst, kinds in n.out_edges.items()
            }

    def dump(self) -> str:
        """Text adjacency list, one line per node, used by golden tests."""
        def fmt(r):
            return f"{r.block}.{r.tx}"

        lines = []
        with self.lock:
            for ref in sorted(self.nodes):
                n = self.nodes[ref]
                deps = ", ".join(
                    f"{fmt(d)}[{','.join(sorted(k.value for k in n.out_edges[d]))}]"
                    for d in sorted(n.out_edges)
                )
                lines.append(f"{fmt(ref)} -> {deps}" if deps else fmt(ref))
        return "\n".join(lines)
