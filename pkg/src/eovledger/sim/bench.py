"""Wall-clock benchmarks and the scale-up byte comparison.

Validation and commit costs are modeled as sleeps (signature checks and
state-DB writes), so worker threads overlap the way they would on separate
cores even on a single-core machine; the Python bookkeeping around them runs
for real.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

from ..model import KeyRing, TxValidity
from ..pipeline import Peer, PipelineConfig, ThreadBus, ThreadedPipeline, VanillaPeer
from ..snapshot import ModificationIndex, extract_snapshot, join_sparse_peer
from ..sparse import Filter
from ..state import state_digest
from .runtime import Orderer, SimRuntime
from .scenario import ORGS, ScenarioConfig, make_generator

log = logging.getLogger(__name__)


@dataclass
class BenchRun:
    mode: str
    seconds: float
    transactions: int
    overlap: bool = False
    per_peer_work: dict = field(default_factory=dict)  # peer id -> transactions validated and committed

    @property
    def tps(self) -> float:
        return self.transactions / self.seconds if self.seconds else 0.0


@dataclass
class Comparison:
    subject: list  # BenchRun per repetition
    baseline: list

    @property
    def speedup(self) -> float:
        return statistics.median(r.tps for r in self.subject) / statistics.median(r.tps for r in self.baseline)


def _pipeline_config(cfg: ScenarioConfig, workers=None) -> PipelineConfig:
    return PipelineConfig(worker_count=workers or cfg.worker_count,
                          block_queue_capacity=max(16, cfg.block_count),
                          endorsement_verify_cost=cfg.per_signature,
                          commit_cost_per_block=cfg.commit_per_block,
                          commit_cost_per_write=cfg.commit_per_write,
                          deferred=cfg.protocol == "deferred")


def make_stream(cfg: ScenarioConfig):
    keyring = KeyRing.for_orgs(ORGS, seed=cfg.seed)
    gen = make_generator(cfg, keyring)
    return keyring, gen, gen.stream(cfg.block_count, cfg.block_size)


def run_pipelined(cfg: ScenarioConfig, keyring, seed_entries, blocks, timeout=600.0) -> BenchRun:
    peer = Peer("pipelined", keyring, config=_pipeline_config(cfg))
    peer.seed(seed_entries)
    pipe = ThreadedPipeline(peer).start()
    t0 = time.perf_counter()
    peer.metrics.started = t0
    try:
        for b in blocks:
            pipe.submit(b)
        pipe.wait_committed(blocks[-1].number, timeout)
    finally:
        elapsed = time.perf_counter() - t0
        pipe.stop()
    return BenchRun("pipelined", elapsed, sum(b.tx_count for b in blocks),
                    peer.metrics.overlap_observed(), {peer.peer_id: peer.metrics.committed_tx_count})


def run_serial(cfg: ScenarioConfig, keyring, seed_entries, blocks) -> BenchRun:
    peer = VanillaPeer("serial", keyring, _pipeline_config(cfg))
    peer.seed(seed_entries)
    t0 = time.perf_counter()
    try:
        for b in blocks:
            peer.process_block(b)
    finally:
        elapsed = time.perf_counter() - t0
        peer.close()
    return BenchRun("serial", elapsed, sum(b.tx_count for b in blocks), False,
                    {peer.peer_id: peer.metrics.committed_tx_count})


def run_org(cfg: ScenarioConfig, keyring, seed_entries, blocks, sparse: bool, timeout=600.0) -> BenchRun:
    """All peers of one org, threaded; timed until every peer has committed every block.

    With `sparse`, peers use the config's disjoint filters and receive sparse
    blocks; otherwise the same number of full peers each process everything.
    """
    routes = cfg.filters(0) if sparse else {f"o0p{i}": None for i in range(cfg.peers_per_org)}
    bus = ThreadBus()
    orderer = Orderer(cfg.block_size, sparse=sparse and cfg.sparse_blocks)
    pipes = []
    dist_routes = {k: v for k, v in routes.items() if v is not None} or None
    for pid, contracts in routes.items():
        flt = Filter(pid, contracts)
        peer = Peer(pid, keyring, filter=flt, config=_pipeline_config(cfg), routes=dist_routes)
        peer.seed(seed_entries)
        orderer.register(flt)
        pipes.append(ThreadedPipeline(peer, bus))
    payloads = []
    for b in blocks:
        orderer.add_block(b)
        payloads.append([orderer.payload_for(p.peer.peer_id, b) for p in pipes])
    for p in pipes:
        p.start()
    t0 = time.perf_counter()
    try:
        for per_peer in payloads:
            for p, payload in zip(pipes, per_peer):
                p.submit(payload)
        for p in pipes:
            p.wait_committed(blocks[-1].number, timeout)
        for p in pipes:
            p.wait_idle(timeout)
    finally:
        elapsed = time.perf_counter() - t0
        for p in pipes:
            p.stop()
    work = {p.peer.peer_id: p.peer.metrics.committed_tx_count for p in pipes}
    return BenchRun("sparse" if sparse else "replicated", elapsed, sum(b.tx_count for b in blocks),
                    all(p.peer.metrics.overlap_observed() for p in pipes), work)


def compare_pipelined(cfg: ScenarioConfig, repeats: int = 3) -> Comparison:
    keyring, gen, blocks = make_stream(cfg)
    subject, baseline = [], []
    for _ in range(repeats):
        baseline.append(run_serial(cfg, keyring, gen.seed_entries, blocks))
        subject.append(run_pipelined(cfg, keyring, gen.seed_entries, blocks))
    return Comparison(subject, baseline)


def compare_sparse(cfg: ScenarioConfig, repeats: int = 1) -> Comparison:
    keyring, gen, blocks = make_stream(cfg)
    subject, baseline = [], []
    for _ in range(repeats):
        baseline.append(run_org(cfg, keyring, gen.seed_entries, blocks, sparse=False))
        subject.append(run_org(cfg, keyring, gen.seed_entries, blocks, sparse=True))
    return Comparison(subject, baseline)


# -- scale-up: snapshot join vs replaying the chain -------------------------------------

@dataclass
class ScaleUpReport:
    join_height: int
    snapshot_bytes: int  # manifests plus the seen transaction ids
    replay_bytes: int  # blocks 1..join_height as shipped to the joiner
    store_bytes: int  # source peer's block store at the join height
    state_bytes: int  # source peer's StateDB at the join height
    bitmaps_match: bool
    digests_match: bool

    @property
    def ratio(self) -> float:
        return self.replay_bytes / self.snapshot_bytes if self.snapshot_bytes else float("inf")


def scale_up(cfg: ScenarioConfig, join_height: int, joiner_contracts=None) -> ScaleUpReport:
    """Bring up a peer at `join_height` from snapshots of a full peer and
    compare it with a peer of the same filter that saw every block."""
    keyring, gen, blocks = make_stream(cfg)
    if not 0 < join_height < len(blocks):
        raise ValueError("join height must fall inside the stream")
    contracts = frozenset(joiner_contracts or cfg.contracts)
    pconf = PipelineConfig(worker_count=cfg.worker_count)
    rt = SimRuntime(cfg.costs(), seed=cfg.seed)
    orderer = Orderer(cfg.block_size, sparse=cfg.sparse_blocks)

    source = Peer("source", keyring, config=pconf)
    source.seed(gen.seed_entries)
    index = ModificationIndex().attach(source.engine)
    present = Peer("present", keyring, filter=Filter("present", contracts), config=pconf)
    present.seed(gen.seed_entries)
    joiner = Peer("joiner", keyring, filter=Filter("joiner", contracts), config=pconf)
    for p in (source, present, joiner):
        orderer.register(p.filter)
    rt.add_peer(source, cfg.worker_count)
    rt.add_peer(present, cfg.worker_count)

    replay_bytes = 0
    for b in blocks[:join_height]:
        orderer.add_block(b)
        for p in (source, present):
            rt.deliver(p.peer_id, orderer.payload_for(p.peer_id, b))
        replay_bytes += len(orderer.payload_for("joiner", b).encode())
    rt.run()

    state_bytes = source.engine.state.size_bytes()
    store_bytes = sum(len(rec.block.encode()) for rec in source.engine.blocks)
    manifests = [extract_snapshot(source.engine, index, c, join_height) for c in sorted(contracts)]
    tip = blocks[join_height - 1]
    report = join_sparse_peer(joiner, manifests, join_height, tip.block_hash,
                              seen_tx_ids=source.dups.ids)
    rt.add_peer(joiner, cfg.worker_count)
    for b in blocks[join_height:]:
        orderer.add_block(b)
        for p in (source, present, joiner):
            rt.deliver(p.peer_id, orderer.payload_for(p.peer_id, b))
    rt.run()

    later = {r: f for r, f in present.validity_flags().items() if r.block > join_height}
    joined = joiner.validity_flags()
    return ScaleUpReport(
        join_height, report.total_bytes, replay_bytes,
        store_bytes, state_bytes,
        later == joined and all(f != TxValidity.DEFERRED for f in later.values()),
        state_digest(present.engine.state.items()) == state_digest(joiner.engine.state.items()))

