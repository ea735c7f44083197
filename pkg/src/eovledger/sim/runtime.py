"""Virtual-time execution of several peers.

A single event loop interleaves every peer's workers, committer, block
ingress and message delivery. Durations come from a cost model with seeded
jitter, so a run is reproducible from its seed while still exploring
different worker interleavings.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..model import ZERO_HASH, seal_block
from ..sparse import Filter, make_sparse

log = logging.getLogger(__name__)


class SimStuck(RuntimeError):
    pass


class EventLoop:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.events = 0

    def clock(self) -> float:
        return self.now

    def at(self, when: float, fn, *args):
        heapq.heappush(self._heap, (max(when, self.now), next(self._seq), fn, args))

    def after(self, delay: float, fn, *args):
        self.at(self.now + delay, fn, *args)

    def run(self, until: Optional[float] = None, max_events: int = 50_000_000):
        while self._heap:
            when, _, fn, args = self._heap[0]
            if until is not None and when > until:
                self.now = until
                return
            heapq.heappop(self._heap)
            self.now = when
            fn(*args)
            self.events += 1
            if self.events > max_events:
                raise SimStuck("event budget exhausted")

    @property
    def pending(self) -> int:
        return len(self._heap)


@dataclass
class CostModel:
    """Durations in seconds of virtual time."""

    validate_base: float = 0.0002
    per_signature: float = 0.0003
    commit_per_block: float = 0.002
    commit_per_write: float = 0.0002
    latency: float = 0.001
    latency_jitter: float = 0.0
    jitter: float = 0.0  # relative, uniform in [1 - jitter, 1 + jitter]

    def scale(self, rng) -> float:
        return 1.0 + rng.uniform(-self.jitter, self.jitter) if self.jitter else 1.0


class Orderer:
    """Cuts submitted transactions into blocks and sends each peer a full or sparse copy."""

    def __init__(self, block_size: int, sparse: bool = False):
        if block_size < 1:
            raise ValueError("block size must be positive")
        self.block_size = block_size
        self.sparse = sparse
        self.pending: deque = deque()
        self.filters: dict = {}
        self.bytes_sent: dict = {}
        self.number = 0
        self.prev_hash = ZERO_HASH
        self.blocks: list = []

    def register(self, flt: Filter):
        self.filters[flt.peer_id] = flt
        self.bytes_sent.setdefault(flt.peer_id, 0)

    def submit(self, tx):
        self.pending.append(tx)

    def cut(self, flush: bool = False) -> list:
        out = []
        while len(self.pending) >= self.block_size or (flush and self.pending):
            n = min(self.block_size, len(self.pending))
            txs = [self.pending.popleft() for _ in range(n)]
            out.append(self.add_block(seal_block(self.number + 1, self.prev_hash, txs)))
        return out

    def add_block(self, block):
        """Accept an already sealed block (pre-generated streams)."""
        if block.number != self.number + 1 or block.prev_hash != self.prev_hash:
            raise ValueError("block does not extend the chain")
        self.number = block.number
        self.prev_hash = block.block_hash
        self.blocks.append(block)
        return block

    def payload_for(self, peer_id, block):
        flt = self.filters[peer_id]
        payload = make_sparse(block, flt) if self.sparse and not flt.is_full else block
        self.bytes_sent[peer_id] += len(payload.encode())
        return payload


class SimBus:
    """Point-to-point delivery with latency; per-link FIFO."""

    def __init__(self, loop: EventLoop, costs: CostModel, rng):
        self.loop, self.costs, self.rng = loop, costs, rng
        self.handlers: dict = {}
        self._last: dict = {}
        self.log: list = []  # (send time, Message)

    def send(self, msg):
        delay = self.costs.latency + (self.rng.uniform(0, self.costs.latency_jitter)
                                      if self.costs.latency_jitter else 0.0)
        link = (msg.src, msg.dst)
        when = max(self.loop.now + delay, self._last.get(link, 0.0))
        self._last[link] = when
        self.log.append((self.loop.now, msg))
        self.loop.at(when, self.handlers[msg.dst], msg.verdict)


class SimPeer:
    """Drives one :class:`Peer` inside the event loop."""

    def __init__(self, sim, peer, workers: int, speed: float = 1.0):
        self.sim, self.peer, self.speed = sim, peer, speed
        self.free = workers
        self.committing = False
        self._stall_since: Optional[float] = None
        self.stall_time = 0.0
        self.validation_busy = 0.0

    def _flush(self):
        for msg in self.peer.take_outbox():
            self.sim.bus.send(msg)

    def on_block(self, block):
        self.peer.receive(block)
        self._flush()
        self.pump()

    def on_verdict(self, verdict):
        self.peer.on_verdict(verdict)
        self._flush()
        self.pump()

    def _tx_cost(self, ref) -> float:
        tx = self.peer.graph.nodes[ref].tx
        c = self.sim.costs
        scope = self.peer.scope
        share = 1.0 if scope is None else (
            sum(x in scope for x in tx.invoked_contracts) / len(tx.invoked_contracts))
        cost = (c.validate_base + c.per_signature * len(tx.endorsements) * share)
        return cost * self.speed * c.scale(self.sim.rng)

    def pump(self):
        loop = self.sim.loop
        while self.free > 0:
            ref = self.peer.next_transaction()
            if ref is None:
                break
            self.free -= 1
            self.peer.metrics.dispatched(ref)
            cost = self._tx_cost(ref)
            self.validation_busy += cost
            loop.after(cost, self._complete, ref)
        if not self.committing:
            ticket = self.peer.begin_commit()
            if ticket is None:
                if self.peer.stalled_on_distributed and self._stall_since is None:
                    self._stall_since = loop.now
                return
            if self._stall_since is not None:
                self.stall_time += loop.now - self._stall_since
                self._stall_since = None
            self.committing = True
            c = self.sim.costs
            cost = (c.commit_per_block + c.commit_per_write * ticket.write_count) * self.speed
            loop.after(cost * c.scale(self.sim.rng), self._committed, ticket)

    def _complete(self, ref):
        self.peer.process(ref)
        self.free += 1
        self._flush()
        self.pump()

    def _committed(self, ticket):
        self.peer.finish_commit(ticket)
        self.committing = False
        self.peer.metrics.stall_time = self.stall_time
        self.pump()


class SimRuntime:
    def __init__(self, costs: Optional[CostModel] = None, seed: int = 0):
        self.loop = EventLoop()
        self.costs = costs or CostModel()
        self.rng = random.Random(seed)
        self.bus = SimBus(self.loop, self.costs, self.rng)
        self.peers: dict = {}

    def add_peer(self, peer, workers: int, speed: float = 1.0) -> SimPeer:
        peer.clock = self.loop.clock
        peer.metrics.clock = self.loop.clock
        peer.metrics.started = self.loop.now
        peer.sleep = None
        sp = SimPeer(self, peer, workers, speed)
        self.peers[peer.peer_id] = sp
        self.bus.handlers[peer.peer_id] = sp.on_verdict
        return sp

    def deliver(self, peer_id, block, at: Optional[float] = None):
        self.loop.at(self.loop.now if at is None else at, self.peers[peer_id].on_block, block)

    def run(self, until: Optional[float] = None):
        self.loop.run(until)
        if until is None:
            stuck = [p for p, sp in self.peers.items() if not sp.peer.idle()]
            if stuck:
                raise SimStuck(f"peers not idle after the run: {stuck}")
