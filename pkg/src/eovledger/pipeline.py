"""Pipelined validation and commit for one peer.

:class:`Peer` is a synchronous state machine; runtimes decide when its steps
run. The threaded runtime (:class:`ThreadedPipeline`) gives it real worker,
committer, extractor and messenger threads. The simulator in
:mod:`eovledger.sim` drives the same methods in virtual time.

Step order for one transaction: endorsement check, serializability check,
apply the write-set to dirty state, remove from the dependency graph, record
the result. The committer pops results block by block. In deferred mode a
transaction still waiting on another peer's verdict is committed as DEFERRED
and resolved later; in strawman mode the committer waits for it.
"""

from __future__ import annotations

import csv
import io
import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .depgraph import DependencyGraph, OutOfOrderBlock
from .distributed import DistributedCoordinator
from .model import POLICY_NS, ZERO_HASH, TxRef, TxValidity, owner
from .sparse import DuplicateTracker, Filter, SparseBlock, selects, verify_sparse
from .state import DeferredRecord, StateEngine
from .validation import UnknownPolicy, validate_endorsement, validate_serializability

log = logging.getLogger(__name__)


class PipelineShutdown(RuntimeError):
    pass


class BlockRejected(ValueError):
    pass


class DuplicateResult(ValueError):
    pass


class ResultMap:
    """txRef -> TxValidity with blocking pop."""

    def __init__(self):
        self._results: dict = {}
        self._cv = threading.Condition()
        self._closed = False

    def add(self, ref, validity):
        with self._cv:
            if ref in self._results:
                raise DuplicateResult(f"result for {ref} already present")
            self._results[ref] = TxValidity(validity)
            self._cv.notify_all()

    def peek(self, ref) -> Optional[TxValidity]:
        with self._cv:
            return self._results.get(ref)

    def take(self, ref) -> Optional[TxValidity]:
        with self._cv:
            return self._results.pop(ref, None)

    def pop(self, ref, timeout: Optional[float] = None) -> TxValidity:
        """Block until the result for `ref` is present, then remove and return it."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while ref not in self._results:
                if self._closed:
                    raise PipelineShutdown(f"stopped while waiting for {ref}")
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise TimeoutError(f"no result for {ref}")
                self._cv.wait(left)
            return self._results.pop(ref)

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self):
        with self._cv:
            return len(self._results)


@dataclass
class PipelineConfig:
    worker_count: int = 4
    block_queue_capacity: int = 16
    endorsement_verify_cost: float = 0.0  # seconds per signature
    commit_cost_per_write: float = 0.0  # seconds per applied write
    commit_cost_per_block: float = 0.0
    deferred: bool = True  # False runs the blocking (strawman) protocol
    verify_blocks: bool = True
    verdict_buffer_capacity: int = 1600

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be at least 1")
        if self.block_queue_capacity < 1:
            raise ValueError("block_queue_capacity must be at least 1")
        if min(self.endorsement_verify_cost, self.commit_cost_per_write,
               self.commit_cost_per_block) < 0:
            raise ValueError("costs cannot be negative")


def theoretical_max_tps(block_size: int, v_ms, c_ms) -> int:
    """|B| * 1000 / (V + C), floored, computed exactly (V and C in milliseconds)."""
    total = Fraction(str(v_ms)) + Fraction(str(c_ms))
    if total <= 0:
        raise ValueError("V + C must be positive")
    return int(Fraction(block_size * 1000) / total)


@dataclass
class BlockTiming:
    number: int
    tx_count: int
    admitted: int
    received_at: float
    first_dispatch: Optional[float] = None
    last_result: Optional[float] = None
    commit_start: Optional[float] = None
    commit_end: Optional[float] = None

    @property
    def validation_time(self) -> float:
        if self.first_dispatch is None or self.last_result is None:
            return 0.0
        return max(0.0, self.last_result - self.first_dispatch)

    @property
    def commit_time(self) -> float:
        if self.commit_start is None or self.commit_end is None:
            return 0.0
        return self.commit_end - self.commit_start


CSV_HEADER = ("time", "committedTps", "validTps", "queueLen", "V_ms", "C_ms", "theoreticalMaxTps")


class PeerMetrics:
    def __init__(self, peer_id: str, clock=time.perf_counter):
        self.peer_id = peer_id
        self.clock = clock
        self.started = clock()
        self.blocks: dict = {}
        self.committed_tx_count = 0  # transactions this peer validated and committed
        self.block_tx_count = 0  # all transactions in committed blocks
        self.valid_tx_count = 0
        self.deferred_count = 0
        self.resolved_count = 0
        self.stall_time = 0.0
        self.queue_length = 0
        self.rows: list = []

    def block_received(self, number, tx_count, admitted):
        self.blocks[number] = BlockTiming(number, tx_count, admitted, self.clock())

    def dispatched(self, ref):
        t = self.blocks.get(ref.block)
        if t is not None and t.first_dispatch is None:
            t.first_dispatch = self.clock()

    def result(self, ref):
        t = self.blocks.get(ref.block)
        if t is not None:
            t.last_result = self.clock()

    def commit_started(self, number):
        self.blocks[number].commit_start = self.clock()

    def commit_finished(self, number, flags, queue_length):
        now = self.clock()
        t = self.blocks[number]
        t.commit_end = now
        self.block_tx_count += len(flags)
        self.committed_tx_count += sum(f != TxValidity.NOT_VALIDATED for f in flags)
        self.valid_tx_count += sum(f == TxValidity.VALID for f in flags)
        self.deferred_count += sum(f == TxValidity.DEFERRED for f in flags)
        self.queue_length = queue_length
        elapsed = max(now - self.started, 1e-9)
        v_ms, c_ms = t.validation_time * 1000, t.commit_time * 1000
        tmax = theoretical_max_tps(t.tx_count, round(v_ms, 3), round(c_ms, 3)) if v_ms + c_ms > 0 else 0
        self.rows.append((round(now - self.started, 6), round(self.committed_tx_count / elapsed, 3),
                          round(self.valid_tx_count / elapsed, 3), queue_length,
                          round(v_ms, 3), round(c_ms, 3), tmax))

    def resolved(self, validity):
        self.resolved_count += 1
        if validity == TxValidity.VALID:
            self.valid_tx_count += 1

    def overlap_observed(self) -> bool:
        """True if some block's validation started before the previous block's commit ended."""
        for n, t in self.blocks.items():
            prev = self.blocks.get(n - 1)
            if (prev is not None and prev.commit_end is not None
                    and t.first_dispatch is not None and t.first_dispatch < prev.commit_end):
                return True
        return False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()


@dataclass
class CommitTicket:
    block: object
    flags: list
    deferred: list
    write_count: int
    started: float = 0.0

    @property
    def number(self):
        return self.block.number


@dataclass
class TraceEvent:
    kind: str  # valid, invalid, deferred, resolved, commit
    ref: object
    validity: Optional[TxValidity] = None


class Peer:
    """One peer's validation and commit state. All methods are thread-safe."""

    def __init__(self, peer_id: str, keyring, *, filter: Optional[Filter] = None,
                 config: Optional[PipelineConfig] = None, routes: Optional[dict] = None,
                 clock=time.perf_counter, block_store=None, sleep=time.sleep):
        self.peer_id = peer_id
        self.keyring = keyring
        self.filter = filter if filter is not None else Filter.full(peer_id)
        self.scope = self.filter.contracts
        self.config = config if config is not None else PipelineConfig()
        self.clock = clock
        self.sleep = sleep
        self.graph = DependencyGraph(self.scope)
        self.engine = StateEngine(self.scope, block_store)
        self.results = ResultMap()
        self.dups = DuplicateTracker()
        if routes is None:
            routes = {peer_id: self.scope or ()}
        self.dist = DistributedCoordinator(peer_id, self.scope, routes,
                                           self.config.verdict_buffer_capacity)
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)
        self.pending_blocks: deque = deque()
        self.received_height = 0
        self.last_hash = ZERO_HASH
        self.metrics = PeerMetrics(peer_id, clock)
        self.trace: list = []
        self.stalled_on_distributed = False
        self._ticket: Optional[CommitTicket] = None
        self._late: list = []

    # -- setup -------------------------------------------------------------------------

    def seed(self, entries):
        self.engine.seed(entries)

    def start_at(self, height: int, last_hash: bytes):
        """Begin receiving at `height + 1` (a peer that joined from a snapshot)."""
        with self.lock:
            self.received_height = height
            self.last_hash = last_hash
            self.graph.last_block = height
            self.engine.blocks.base_height = height

    # -- ingress -----------------------------------------------------------------------

    def receive(self, block):
        with self.lock:
            n = block.number
            if n != self.received_height + 1:
                raise OutOfOrderBlock(f"{self.peer_id}: expected block {self.received_height + 1}, got {n}")
            if self.config.verify_blocks:
                self._verify(block)
            dups = self.dups.check(block.tx_ids)
            admitted = {i for i, tx in block.indexed_txs() if selects(self.scope, tx)}
            for i in range(block.tx_count):
                if i not in admitted:
                    self.results.add(TxRef(n, i), TxValidity.NOT_VALIDATED)
                elif i in dups:
                    self.results.add(TxRef(n, i), TxValidity.INVALID_DUPLICATE)
            self.graph.add_block(block, skip=dups)
            self.pending_blocks.append(block)
            self.received_height = n
            self.last_hash = block.block_hash
            self.metrics.block_received(n, block.tx_count, len(admitted - dups))
            for i in sorted(admitted - dups):
                tx = block.tx_at(i)
                if self.dist.is_distributed(tx):
                    final = self.dist.register(TxRef(n, i), tx)
                    if final is not None:
                        self._finish(TxRef(n, i), final)
            self.changed.notify_all()

    def _verify(self, block):
        if isinstance(block, SparseBlock):
            check = verify_sparse(block, self.last_hash)
            if not check:
                raise BlockRejected(f"{self.peer_id}: block {block.number}: {check.value}")
            if block.applied_filter.contracts != self.scope:
                raise BlockRejected(f"{self.peer_id}: block {block.number} built for another filter")
        elif not block.verify(self.last_hash):
            raise BlockRejected(f"{self.peer_id}: block {block.number} fails hash chain check")

    # -- validation --------------------------------------------------------------------

    def next_transaction(self) -> Optional[TxRef]:
        with self.lock:
            return self.graph.get_next_transaction()

    def process(self, ref) -> Optional[TxValidity]:
        """Validate a dispatched transaction. Returns the local decision."""
        with self.lock:
            node = self.graph.nodes.get(ref)
            if node is None:
                return None
            tx = node.tx
            self.metrics.dispatched(ref)
        try:
            endorsed = validate_endorsement(tx, self.engine, self.keyring, self.scope,
                                            self.config.endorsement_verify_cost, self.sleep)
        except UnknownPolicy:
            endorsed = False
        with self.lock:
            if ref not in self.graph:
                return None  # finalized invalid by a remote verdict meanwhile
            if not endorsed:
                code = TxValidity.INVALID_ENDORSEMENT
            elif not validate_serializability(tx, self.engine, self.scope):
                code = TxValidity.INVALID_SERIALIZABILITY
            else:
                code = TxValidity.VALID
            if self.dist.is_distributed(tx):
                final = self.dist.emit_local_verdict(ref, tx, code)
                if final is not None:
                    self._finish(ref, final)
                self.changed.notify_all()
            else:
                self._finish(ref, code)
            return code

    def on_verdict(self, verdict):
        with self.lock:
            kind, final = self.dist.on_verdict(verdict, self.received_height)
            if kind == "final":
                self._finish(verdict.ref, final)

    def _finish(self, ref, validity):
        tx = self.graph.node(ref).tx
        if validity == TxValidity.VALID:
            self.engine.apply_validated(ref, tx)
        victims = self.graph.remove_from_graph(ref, validity == TxValidity.VALID)
        if ref in self.dist.pending:
            self.dist.finalize(ref, validity)
        self._record(ref, validity)
        for v, code in victims:
            if v in self.dist.pending:
                self.dist.broadcast_invalid(v, self._tx(v), code)
                self.dist.finalize(v, code)
            self._record(v, code)
        self.changed.notify_all()

    def _record(self, ref, validity):
        self.metrics.result(ref)
        if self._ticket is not None and ref.block == self._ticket.number:
            self._late.append((ref, validity))
        elif ref.block <= self.engine.height:
            self.engine.resolve_deferred(ref, validity, self._tx(ref))
            self.metrics.resolved(validity)
            self.trace.append(TraceEvent("resolved", ref, validity))
        else:
            self.results.add(ref, validity)
            self.trace.append(TraceEvent("result", ref, validity))

    def _tx(self, ref):
        if self.pending_blocks and ref.block >= self.pending_blocks[0].number:
            return self.pending_blocks[ref.block - self.pending_blocks[0].number].tx_at(ref.tx)
        return self.engine.blocks.tx(ref.block, ref.tx)

    # -- commit ------------------------------------------------------------------------

    def _waits_on_distributed(self, ref) -> bool:
        """Is `ref` blocked only by remote verdicts?

        True if it is a distributed transaction whose local decision is made,
        or if it (transitively) depends on one in the graph. A transaction
        that is merely not validated yet is not blocked on anyone remote.
        """
        seen, todo = set(), [ref]
        while todo:
            r = todo.pop()
            if r in seen or r not in self.graph:
                continue
            seen.add(r)
            pending = self.dist.pending.get(r)
            if pending is not None and pending.local_decision is not None:
                return True
            todo.extend(self.graph.nodes[r].out_edges)
        return False

    def _dependents(self, ref) -> set:
        seen, todo = set(), [ref]
        while todo:
            r = todo.pop()
            node = self.graph.nodes.get(r)
            if node is None:
                continue
            for src in node.in_edges:
                if src not in seen:
                    seen.add(src)
                    todo.append(src)
        return seen

    def begin_commit(self) -> Optional[CommitTicket]:
        """Collect flags for the oldest uncommitted block, or return None if it must wait."""
        with self.lock:
            if self._ticket is not None or not self.pending_blocks:
                return None
            block = self.pending_blocks[0]
            flags = []
            for i in range(block.tx_count):
                ref = TxRef(block.number, i)
                r = self.results.peek(ref)
                if r is not None:
                    flags.append(r)
                    continue
                waits = self._waits_on_distributed(ref)
                if waits and self.config.deferred:
                    flags.append(TxValidity.DEFERRED)
                    continue
                self.stalled_on_distributed = waits
                return None
            self.stalled_on_distributed = False
            for i in range(block.tx_count):
                self.results.take(TxRef(block.number, i))
            deferred = [TxRef(block.number, i) for i, f in enumerate(flags) if f == TxValidity.DEFERRED]
            writes = sum(len(block.tx_at(i).writes_for(self.scope))
                         for i, f in enumerate(flags) if f == TxValidity.VALID)
            self._ticket = CommitTicket(block, flags, deferred, writes, self.clock())
            self.metrics.commit_started(block.number)
            return self._ticket

    def commit_cost(self, ticket) -> float:
        return self.config.commit_cost_per_block + self.config.commit_cost_per_write * ticket.write_count

    def finish_commit(self, ticket):
        with self.lock:
            assert ticket is self._ticket
            self.engine.commit_block(ticket.block, ticket.flags)
            for ref in ticket.deferred:
                self.engine.blocks.add_deferred(DeferredRecord(ref, ref.block, self._dependents(ref)))
                self.trace.append(TraceEvent("deferred", ref, TxValidity.DEFERRED))
            self.pending_blocks.popleft()
            self._ticket = None
            late, self._late = self._late, []
            for ref, validity in late:
                self.engine.resolve_deferred(ref, validity, ticket.block.tx_at(ref.tx))
                self.metrics.resolved(validity)
                self.trace.append(TraceEvent("resolved", ref, validity))
            self.metrics.commit_finished(ticket.number, ticket.flags, len(self.pending_blocks))
            self.trace.append(TraceEvent("commit", ticket.number))
            self.changed.notify_all()

    def commit_ready_blocks(self) -> int:
        """Commit every block that can be committed right now (no cost applied)."""
        n = 0
        while (t := self.begin_commit()) is not None:
            self.finish_commit(t)
            n += 1
        return n

    # -- inspection --------------------------------------------------------------------

    def take_outbox(self) -> list:
        with self.lock:
            return self.dist.take_outbox()

    @property
    def height(self) -> int:
        return self.engine.height

    def idle(self) -> bool:
        """No uncommitted blocks and no unresolved deferred transactions."""
        with self.lock:
            return not self.pending_blocks and not self.engine.blocks.deferred and not len(self.graph)

    def validity_flags(self) -> dict:
        """{ref: final flag} over every stored block."""
        with self.lock:
            return {TxRef(rec.block.number, i): f
                    for rec in self.engine.blocks for i, f in enumerate(rec.flags)}


class ThreadBus:
    """In-process message delivery between threaded pipelines."""

    def __init__(self):
        self.pipelines: dict = {}
        self.delivered = 0

    def send(self, msg):
        self.pipelines[msg.dst].inbox.put(msg.verdict)
        self.delivered += 1


class ThreadedPipeline:
    """Runs a :class:`Peer` with an extractor, `worker_count` workers, a committer and a messenger."""

    POLL = 0.05

    def __init__(self, peer: Peer, bus: Optional[ThreadBus] = None):
        self.peer = peer
        self.bus = bus
        if bus is not None:
            bus.pipelines[peer.peer_id] = self
        self.blocks: queue.Queue = queue.Queue(peer.config.block_queue_capacity)
        self.inbox: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._threads: list = []
        self.submitted = 0
        self.errors: list = []

    def start(self):
        cfg = self.peer.config
        targets = [("extractor", self._extractor), ("committer", self._committer),
                   ("messenger", self._messenger)]
        targets += [(f"worker-{i}", self._worker) for i in range(cfg.worker_count)]
        for name, fn in targets:
            t = threading.Thread(target=self._guard(fn), name=f"{self.peer.peer_id}-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _guard(self, fn):
        def run():
            try:
                fn()
            except Exception as exc:  # surfaced by wait()
                log.exception("pipeline thread failed")
                self.errors.append(exc)
                self._stop.set()
                with self.peer.changed:
                    self.peer.changed.notify_all()
        return run

    def submit(self, block, timeout: Optional[float] = None):
        """Hand a block to the peer; blocks while the queue is full."""
        self.blocks.put(block, timeout=timeout)
        self.submitted += 1

    def _flush(self):
        if self.bus is None:
            return
        for msg in self.peer.take_outbox():
            self.bus.send(msg)

    def _extractor(self):
        while not self._stop.is_set():
            try:
                block = self.blocks.get(timeout=self.POLL)
            except queue.Empty:
                continue
            self.peer.receive(block)
            self._flush()

    def _messenger(self):
        while not self._stop.is_set():
            try:
                verdict = self.inbox.get(timeout=self.POLL)
            except queue.Empty:
                continue
            self.peer.on_verdict(verdict)
            self._flush()

    def _worker(self):
        peer = self.peer
        while not self._stop.is_set():
            with peer.changed:
                ref = peer.next_transaction()
                if ref is None:
                    peer.changed.wait(self.POLL)
                    continue
            peer.process(ref)
            self._flush()

    def _committer(self):
        peer = self.peer
        while not self._stop.is_set():
            with peer.changed:
                ticket = peer.begin_commit()
                if ticket is None:
                    t0 = time.perf_counter()
                    peer.changed.wait(self.POLL)
                    if peer.stalled_on_distributed:
                        peer.metrics.stall_time += time.perf_counter() - t0
                    continue
            cost = peer.commit_cost(ticket)
            if cost > 0:
                time.sleep(cost)
            peer.finish_commit(ticket)

    def wait_committed(self, height: int, timeout: float = 60.0):
        deadline = time.monotonic() + timeout
        with self.peer.changed:
            while self.peer.height < height:
                if self.errors:
                    raise self.errors[0]
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"{self.peer.peer_id} stuck at height {self.peer.height}")
                self.peer.changed.wait(min(left, self.POLL))

    def wait_idle(self, timeout: float = 60.0):
        deadline = time.monotonic() + timeout
        while not (self.peer.idle() and self.blocks.empty() and self.inbox.empty()):
            if self.errors:
                raise self.errors[0]
            if time.monotonic() > deadline:
                raise TimeoutError(f"{self.peer.peer_id} did not become idle")
            time.sleep(0.005)

    def stop(self):
        self._stop.set()
        with self.peer.changed:
            self.peer.changed.notify_all()
        self.peer.results.close()
        for t in self._threads:
            t.join(timeout=2)
        if self.errors:
            raise self.errors[0]


class VanillaPeer:
    """Block-at-a-time baseline: parallel endorsement checks, then serial
    version checks and commit, with no overlap between blocks."""

    def __init__(self, peer_id: str, keyring, config: Optional[PipelineConfig] = None,
                 clock=time.perf_counter):
        self.peer_id = peer_id
        self.keyring = keyring
        self.config = config if config is not None else PipelineConfig()
        self.engine = StateEngine()
        self.dups = DuplicateTracker()
        self.metrics = PeerMetrics(peer_id, clock)
        self.clock = clock
        self._pool = ThreadPoolExecutor(self.config.worker_count)

    def seed(self, entries):
        self.engine.seed(entries)

    def _endorsed(self, tx):
        try:
            return validate_endorsement(tx, self.engine, self.keyring, None,
                                        self.config.endorsement_verify_cost, time.sleep)
        except UnknownPolicy:
            return False

    def process_block(self, block) -> list:
        n = block.number
        self.metrics.block_received(n, block.tx_count, block.tx_count)
        t = self.metrics.blocks[n]
        t.first_dispatch = self.clock()
        dups = self.dups.check(block.tx_ids)
        endorsed = list(self._pool.map(self._endorsed, block.txs))
        flags, writes = [], 0
        changed_policies = set()
        for i, tx in enumerate(block.txs):
            ref = TxRef(n, i)
            if i not in dups and not changed_policies.isdisjoint(tx.invoked_contracts):
                # a valid policy update earlier in this block: the precheck used the old policy
                endorsed[i] = self._endorsed(tx)
            if i in dups:
                flags.append(TxValidity.INVALID_DUPLICATE)
            elif not endorsed[i]:
                flags.append(TxValidity.INVALID_ENDORSEMENT)
            elif not validate_serializability(tx, self.engine):
                flags.append(TxValidity.INVALID_SERIALIZABILITY)
            else:
                flags.append(TxValidity.VALID)
                self.engine.apply_dirty(ref, tx.write_set)
                writes += len(tx.write_set)
                changed_policies.update(owner(w.key) for w in tx.write_set if w.key.contract == POLICY_NS)
        t.last_result = self.clock()
        self.metrics.commit_started(n)
        cost = self.config.commit_cost_per_block + self.config.commit_cost_per_write * writes
        if cost > 0:
            time.sleep(cost)
        self.engine.commit_block(block, flags)
        self.metrics.commit_finished(n, flags, 0)
        return flags

    def close(self):
        self._pool.shutdown()
