"""Small hand-built scenarios with known outcomes, plus a lockstep driver.

The lockstep driver runs peers in rounds: every idle worker takes the next
eligible transaction, all of them complete in worker order, and only then
are the messages sent during the round delivered. This makes the worker
assignments and message rounds reproducible step by step.

Version labels: a key's seed version is "v1" and every later valid write
bumps the label, so a key created by a transaction starts at "v1".
"""

from __future__ import annotations

from dataclasses import dataclass

from ..depgraph import DependencyKind
from ..model import (EndorsementPolicy, KeyRing, RangeQueryInfo, ReadEntry, StateKey,
                     Transaction, TxRef, TxValidity, Version, WriteEntry, policy_key, seal_block,
                     ZERO_HASH)
from ..pipeline import Peer, PipelineConfig
from ..snapshot import ModificationIndex, extract_snapshot
from ..sparse import Filter, make_sparse

ORG = "org1"


def _k(contract, name):
    return StateKey(contract, name.encode())


def keyring() -> KeyRing:
    return KeyRing.for_orgs([ORG], seed=7)


def _policy_seed(contracts):
    return [(policy_key(c), EndorsementPolicy(c, frozenset([ORG]), 1).encode()) for c in contracts]


def _seed(entries) -> list:
    return [(k, v, Version(0, i)) for i, (k, v) in enumerate(entries)]


def _tx(ring, nonce, reads=(), writes=(), ranges=()):
    tx = Transaction.build(nonce, reads, writes, ranges)
    return ring.endorse(tx, [ORG])


class LockstepDriver:
    def __init__(self, peers, workers: int):
        self.peers = list(peers)
        self.workers = workers
        self.by_id = {p.peer_id: p for p in self.peers}
        self.rounds: list = []  # per round: {peer_id: [refs taken]}
        self.messages: list = []  # per round: [Message]

    def step(self, before_delivery=None) -> bool:
        """One round. Returns False when nothing happened.

        `before_delivery()` is called after the round's transactions were
        processed and before its messages are delivered."""
        taken = {}
        for p in self.peers:
            refs = []
            while len(refs) < self.workers:
                ref = p.next_transaction()
                if ref is None:
                    break
                refs.append(ref)
            taken[p.peer_id] = refs
        for p in self.peers:
            for ref in taken[p.peer_id]:
                p.process(ref)
        sent = [m for p in self.peers for m in p.take_outbox()]
        self.rounds.append(taken)
        self.messages.append(sent)
        if before_delivery is not None and (any(taken.values()) or sent):
            before_delivery()
        for m in sent:
            self.by_id[m.dst].on_verdict(m.verdict)
        return any(taken.values()) or bool(sent)

    def run(self, max_rounds: int = 100, before_delivery=None):
        for _ in range(max_rounds):
            if not self.step(before_delivery):
                self.rounds.pop()
                self.messages.pop()
                return
        raise RuntimeError("lockstep driver did not settle")


def label_state(peer, labels) -> list:
    """Committed state as sorted (key, label) pairs."""
    return sorted((k.key.decode(), labels[(k, ver)]) for k, _, ver in peer.engine.state.items()
                  if k.contract != "_policy")


def label_dirty(peer, labels) -> list:
    return sorted((k.key.decode(), labels[(k, e.version)])
                  for k, e in peer.engine.dirty.snapshot().items() if not e.is_delete)


def version_labels(seed, writes) -> dict:
    """{(key, version): "vN"} from seed entries and (key, version) valid writes in order."""
    counts, out = {}, {}
    for key, _, ver in seed:
        counts[key] = 1
        out[(key, ver)] = "v1"
    for key, ver in sorted(writes, key=lambda kv: kv[1]):
        counts[key] = counts.get(key, 0) + 1
        out[(key, ver)] = f"v{counts[key]}"
    return out


# -- dependency extraction and pipelined validation (two blocks, six transactions) -------

@dataclass
class PipelineFixture:
    ring: KeyRing
    seed: list
    blocks: list
    names: dict  # TxRef -> "T1".."T6"

    def ref(self, name) -> TxRef:
        return {v: k for k, v in self.names.items()}[name]


def pipeline_fixture() -> PipelineFixture:
    ring = keyring()
    c = "kv"
    k = {i: _k(c, f"k{i}") for i in range(1, 8)}
    seed = _seed(_policy_seed([c]) + [(k[1], b"v1"), (k[4], b"v1"), (k[6], b"v1")])
    ver = {key: v for key, _, v in seed}
    t1 = _tx(ring, "T1", [ReadEntry(k[6], ver[k[6]])], [WriteEntry(k[1], b"v2")])
    t2 = _tx(ring, "T2", [ReadEntry(k[1], ver[k[1]])], [WriteEntry(k[6], b"v2")])
    t3 = _tx(ring, "T3", (), [WriteEntry(k[6], b"v2'")])
    t4 = _tx(ring, "T4", (), [WriteEntry(k[5], b"v1")])
    # range k2..k5 inclusive, endorsed when k4 existed and k5 did not
    rq = RangeQueryInfo(c, b"k2", b"k5\x00", (ReadEntry(k[4], ver[k[4]]),))
    t5 = _tx(ring, "T5", (), [WriteEntry(k[7], b"v2")], [rq])
    t6 = _tx(ring, "T6", [ReadEntry(k[4], ver[k[4]])], [WriteEntry(k[4], b"v2")])
    b1 = seal_block(1, ZERO_HASH, [t1, t2, t3, t4])
    b2 = seal_block(2, b1.block_hash, [t5, t6])
    names = {TxRef(1, 0): "T1", TxRef(1, 1): "T2", TxRef(1, 2): "T3", TxRef(1, 3): "T4",
             TxRef(2, 0): "T5", TxRef(2, 1): "T6"}
    return PipelineFixture(ring, seed, [b1, b2], names)


K = DependencyKind
NARRATED_EDGES = {
    ("T2", "T1"): {K.RW, K.WR},
    ("T3", "T2"): {K.WW},
    ("T5", "T4"): {K.PR},
    ("T6", "T5"): {K.WR},
}
RULE_DERIVED_EXTRA = {("T3", "T1"): {K.WR}}


def named_edges(graph, names) -> dict:
    return {(names[a], names[b]): set(kinds) for (a, b), kinds in graph.edges().items()}


def run_pipeline_fixture(workers: int = 3) -> dict:
    """Replay both blocks on one peer and capture each row of the schedule."""
    fx = pipeline_fixture()
    peer = Peer("P", fx.ring, config=PipelineConfig(worker_count=workers))
    peer.seed(fx.seed)
    for b in fx.blocks:
        peer.receive(b)
    edges = named_edges(peer.graph, fx.names)
    driver = LockstepDriver([peer], workers)
    rows = []
    valid_writes = []

    def labels():
        return version_labels(fx.seed, valid_writes)

    while driver.step():
        taken = [fx.names[r] for r in driver.rounds[-1]["P"]]
        results = {fx.names[e.ref]: e.validity.short for e in peer.trace if e.kind == "result"}
        for e in peer.trace:
            if e.kind == "result" and e.validity == TxValidity.VALID:
                tx = fx.blocks[e.ref.block - 1].tx_at(e.ref.tx)
                for w in tx.write_set:
                    if (w.key, e.ref) not in valid_writes:
                        valid_writes.append((w.key, e.ref))
        rows.append({"workers": taken, "dirty": label_dirty(peer, labels()),
                     "state": label_state(peer, labels()), "results": results,
                     "graph": sorted(fx.names[r] for r in peer.graph.nodes),
                     "edges": named_edges(peer.graph, fx.names)})
    commits = []
    for _ in fx.blocks:
        t = peer.begin_commit()
        peer.finish_commit(t)
        commits.append({"dirty": label_dirty(peer, labels()), "state": label_state(peer, labels())})
    flags = {fx.names[r]: f.short for r, f in peer.validity_flags().items()}
    return {"edges": edges, "rows": rows, "commits": commits, "flags": flags, "peer": peer,
            "fixture": fx}


# -- distributed validation across three sparse peers -----------------------------------

@dataclass
class DistributedFixture:
    ring: KeyRing
    seeds: dict  # peer id -> seed entries
    block: object
    filters: dict
    names: dict


def distributed_fixture() -> DistributedFixture:
    ring = keyring()
    s1, s2, s3 = "S1", "S2", "S3"
    k4, k7 = _k(s1, "k4"), _k(s1, "k7")
    k3, k5 = _k(s2, "k3"), _k(s2, "k5")
    k6 = _k(s3, "k6")
    entries = _policy_seed([s1, s2, s3]) + [(k4, b"v1"), (k7, b"v1"), (k3, b"v1"), (k5, b"v1"),
                                           (k6, b"v1")]
    seed = _seed(entries)
    ver = {k: v for k, _, v in seed}
    t1 = _tx(ring, "T1", [ReadEntry(k7, ver[k7])], [WriteEntry(k7, b"v2")])
    t2 = _tx(ring, "T2", [ReadEntry(k3, ver[k3])], [WriteEntry(k4, b"v2")])
    t3 = _tx(ring, "T3", [ReadEntry(k4, ver[k4]), ReadEntry(k5, ver[k5]), ReadEntry(k6, ver[k6])],
             [WriteEntry(k4, b"v2'"), WriteEntry(k3, b"v2"), WriteEntry(k6, b"v2")])
    block = seal_block(1, ZERO_HASH, [t1, t2, t3])
    filters = {"P1": {s1}, "P2": {s2}, "P3": {s3}}
    names = {TxRef(1, 0): "T1", TxRef(1, 1): "T2", TxRef(1, 2): "T3"}
    return DistributedFixture(ring, {p: seed for p in filters}, block, filters, names)


def build_org(fx, config=None):
    peers = []
    for pid, contracts in fx.filters.items():
        p = Peer(pid, fx.ring, filter=Filter(pid, contracts), routes=fx.filters,
                 config=config or PipelineConfig(worker_count=2))
        p.seed(fx.seeds[pid])
        peers.append(p)
    return peers


def run_distributed_fixture(sparse_blocks: bool = True) -> dict:
    fx = distributed_fixture()
    peers = build_org(fx)
    for p in peers:
        p.receive(make_sparse(fx.block, p.filter) if sparse_blocks else fx.block)
    driver = LockstepDriver(peers, workers=2)
    snapshots = []

    def snapshot(workers=True):
        snap = {}
        for p in peers:
            results = {}
            for e in p.trace:
                if e.kind == "result" and e.validity != TxValidity.NOT_VALIDATED:
                    results[fx.names[e.ref]] = e.validity.short
            snap[p.peer_id] = {
                "workers": [fx.names[r] for r in driver.rounds[-1][p.peer_id]] if workers else [],
                "dirty": sorted((k.key.decode(), e.value.decode())
                                for k, e in p.engine.dirty.snapshot().items()),
                "results": results,
                "waiting": {fx.names[r]: sorted(d.awaiting) for r, d in p.dist.pending.items()
                            if d.local_decision is not None},
            }
        snapshots.append(snap)

    driver.run(before_delivery=snapshot)
    snapshot(workers=False)
    messages = [[(m.src, m.dst, fx.names[m.verdict.ref], m.verdict.contract, m.verdict.valid)
                 for m in rnd] for rnd in driver.messages]
    for p in peers:
        p.commit_ready_blocks()
    org = {}
    for p in peers:
        for ref, f in p.validity_flags().items():
            if f != TxValidity.NOT_VALIDATED:
                org.setdefault(fx.names[ref], set()).add(f == TxValidity.VALID)
    return {"rows": snapshots, "messages": messages, "org": org, "peers": peers, "fixture": fx}


# -- snapshot as of an older block ------------------------------------------------------

def snapshot_fixture():
    """Blocks 1-3 create k1, k2, k3; block 4 deletes k1 and overwrites k2."""
    ring = keyring()
    c = "S1"
    k1, k2, k3 = _k(c, "k1"), _k(c, "k2"), _k(c, "k3")
    seed = _seed(_policy_seed([c]))
    peer = Peer("full", ring)
    peer.seed(seed)
    index = ModificationIndex().attach(peer.engine)
    blocks, prev = [], ZERO_HASH
    plan = [
        [_tx(ring, "b1", [ReadEntry(k1, None)], [WriteEntry(k1, b"v1")])],
        [_tx(ring, "b2", [ReadEntry(k2, None)], [WriteEntry(k2, b"v1")])],
        [_tx(ring, "b3", [ReadEntry(k3, None)], [WriteEntry(k3, b"v1")])],
        None,
    ]
    for n, txs in enumerate(plan, start=1):
        if txs is None:
            v1 = peer.engine.read_through(k1)[1]
            v2 = peer.engine.read_through(k2)[1]
            txs = [_tx(ring, "b4-del", [ReadEntry(k1, v1)], [WriteEntry(k1, b"", True)]),
                   _tx(ring, "b4-upd", [ReadEntry(k2, v2)], [WriteEntry(k2, b"v2")])]
        block = seal_block(n, prev, txs)
        prev = block.block_hash
        blocks.append(block)
        peer.receive(block)
        while (ref := peer.next_transaction()) is not None:
            peer.process(ref)
        peer.commit_ready_blocks()
    return peer, index, blocks


# -- expected outcomes ------------------------------------------------------------------

PIPELINE_ROWS = [
    {"workers": ["T1", "T4"], "dirty": [("k1", "v2"), ("k5", "v1")],
     "state": [("k1", "v1"), ("k4", "v1"), ("k6", "v1")],
     "valid": {"T1", "T4"}, "invalid": {"T2", "T5"}, "graph": ["T3", "T6"], "edges": {}},
    {"workers": ["T3", "T6"], "dirty": [("k1", "v2"), ("k4", "v2"), ("k5", "v1"), ("k6", "v2")],
     "state": [("k1", "v1"), ("k4", "v1"), ("k6", "v1")],
     "valid": {"T1", "T4", "T3", "T6"}, "invalid": {"T2", "T5"}, "graph": [], "edges": {}},
]
PIPELINE_COMMITS = [
    {"dirty": [("k4", "v2")], "state": [("k1", "v2"), ("k4", "v1"), ("k5", "v1"), ("k6", "v2")]},
    {"dirty": [], "state": [("k1", "v2"), ("k4", "v2"), ("k5", "v1"), ("k6", "v2")]},
]
PIPELINE_FLAGS = {"T1": "V", "T2": "I", "T3": "V", "T4": "V", "T5": "I", "T6": "V"}

# (src, dst, tx, contract, valid) per round, in send order
DISTRIBUTED_MESSAGES = [
    [("P1", "P2", "T2", "S1", True), ("P2", "P1", "T2", "S2", True),
     ("P3", "P1", "T3", "S3", True), ("P3", "P2", "T3", "S3", True)],
    [("P1", "P2", "T3", "S1", False), ("P1", "P3", "T3", "S1", False),
     ("P2", "P1", "T3", "S2", True), ("P2", "P3", "T3", "S2", True)],
]
DISTRIBUTED_ROWS = [
    {"P1": {"workers": ["T1", "T2"], "dirty": [("k7", "v2")], "valid": {"T1"}, "invalid": set(),
            "waiting": {"T2": ["S2"]}},
     "P2": {"workers": ["T2"], "dirty": [], "valid": set(), "invalid": set(),
            "waiting": {"T2": ["S1"]}},
     "P3": {"workers": ["T3"], "dirty": [], "valid": set(), "invalid": set(),
            "waiting": {"T3": ["S1", "S2"]}}},
    {"P1": {"workers": [], "dirty": [("k4", "v2"), ("k7", "v2")], "valid": {"T1", "T2"},
            "invalid": {"T3"}, "waiting": {}},
     "P2": {"workers": ["T3"], "dirty": [], "valid": {"T2"}, "invalid": set(),
            "waiting": {"T3": ["S1"]}},
     "P3": {"workers": [], "dirty": [], "valid": set(), "invalid": set(),
            "waiting": {"T3": ["S1", "S2"]}}},
    {"P1": {"workers": [], "dirty": [("k4", "v2"), ("k7", "v2")], "valid": {"T1", "T2"},
            "invalid": {"T3"}, "waiting": {}},
     "P2": {"workers": [], "dirty": [], "valid": {"T2"}, "invalid": {"T3"}, "waiting": {}},
     "P3": {"workers": [], "dirty": [], "valid": set(), "invalid": {"T3"}, "waiting": {}}},
]
DISTRIBUTED_ORG = {"T1": True, "T2": True, "T3": False}

SNAPSHOT_AT = {1: {"k1": b"v1"}, 2: {"k1": b"v1", "k2": b"v1"},
               3: {"k1": b"v1", "k2": b"v1", "k3": b"v1"}, 4: {"k2": b"v2", "k3": b"v1"}}


def split_results(results: dict) -> tuple:
    valid = {t for t, r in results.items() if r == "V"}
    return valid, {t for t, r in results.items() if r != "V"}


def pipeline_matches(out: dict) -> bool:
    if out["edges"] != {**NARRATED_EDGES, **RULE_DERIVED_EXTRA}:
        return False
    if len(out["rows"]) != len(PIPELINE_ROWS):
        return False
    for got, want in zip(out["rows"], PIPELINE_ROWS):
        valid, invalid = split_results(got["results"])
        if (got["workers"], got["dirty"], got["state"], got["graph"], got["edges"]) != (
                want["workers"], want["dirty"], want["state"], want["graph"], want["edges"]):
            return False
        if (valid, invalid) != (want["valid"], want["invalid"]):
            return False
    return out["commits"] == PIPELINE_COMMITS and out["flags"] == PIPELINE_FLAGS


def distributed_matches(out: dict) -> bool:
    if out["messages"] != DISTRIBUTED_MESSAGES or len(out["rows"]) != len(DISTRIBUTED_ROWS):
        return False
    for got, want in zip(out["rows"], DISTRIBUTED_ROWS):
        for pid, w in want.items():
            g = got[pid]
            valid, invalid = split_results(g["results"])
            if (g["workers"], g["dirty"], g["waiting"], valid, invalid) != (
                    w["workers"], w["dirty"], w["waiting"], w["valid"], w["invalid"]):
                return False
    return out["org"] == {t: {v} for t, v in DISTRIBUTED_ORG.items()}


def snapshot_values(peer, index, as_of: int, contract: str = "S1") -> dict:
    m = extract_snapshot(peer.engine, index, contract, as_of)
    return {k.key.decode(): v for k, v, _ in m.entries if k.contract == contract}


def golden_checks() -> list:
    """[(name, passed)] for every hand-built scenario."""
    out = run_pipeline_fixture()
    checks = [("dependency edges", out["edges"] == {**NARRATED_EDGES, **RULE_DERIVED_EXTRA}),
              ("pipelined schedule, dirty state and commits", pipeline_matches(out))]
    dist = run_distributed_fixture()
    checks.append(("distributed verdict exchange", distributed_matches(dist)))
    peer, index, _ = snapshot_fixture()
    checks.append(("snapshots as of each block",
                   all(snapshot_values(peer, index, b) == want for b, want in SNAPSHOT_AT.items())))
    return checks
