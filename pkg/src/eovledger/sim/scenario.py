"""Scenario configuration and multi-org runs in virtual time.

A config is a flat text file of ``key = value`` lines. Every org sees the same
block stream; within an org the peers' filters split the contracts, and
cross-peer transactions are finalized by exchanging per-contract verdicts.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from ..model import KeyRing, TxValidity, owner
from ..pipeline import Peer, PipelineConfig
from ..sparse import Filter
from ..state import BlockStore, state_digest
from .generator import StreamGenerator
from .oracle import serial_oracle
from .runtime import CostModel, Orderer, SimRuntime
from .workloads import ContractWorkload, MixedWorkload

log = logging.getLogger(__name__)

ORGS = ("orgA", "orgB", "orgC")


class ConfigInvalid(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ScenarioConfig:
    org_count: int = 1
    peers_per_org: int = 1
    filters_per_peer: int = 0  # contracts per peer filter; 0 means full peers
    contracts: tuple = ("c0", "c1", "c2", "c3")
    block_size: int = 100
    workload: str = "smallbank"  # smallbank | ycsb | mixed
    zipf_s: float = 0.5
    account_count: int = 1000
    value_size_bytes: int = 1024
    tx_rate: float = 2000.0  # transactions per virtual second offered to the orderer
    block_count: int = 20
    worker_count: int = 4
    seed: int = 0
    sparse_blocks: bool = True
    cross_contract_fraction: float = 0.0
    cross_contract_fan_out: int = 2
    protocol: str = "deferred"  # deferred | strawman
    endorsement_lag: int = 0  # blocks between the endorser's view and the tip
    duplicate_rate: float = 0.0
    bad_endorsement_rate: float = 0.0
    peer_speeds: tuple = (1.0,)  # cost multipliers, cycled over an org's peers
    validate_base: float = 0.0002
    per_signature: float = 0.0003
    commit_per_block: float = 0.002
    commit_per_write: float = 0.0002
    latency: float = 0.001
    latency_jitter: float = 0.0
    jitter: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(ok, name, msg):
            if not ok:
                raise ConfigInvalid(name, msg)

        need(self.org_count >= 1, "org_count", "must be at least 1")
        need(self.peers_per_org >= 1, "peers_per_org", "must be at least 1")
        need(len(self.contracts) >= 1, "contracts", "must name at least one contract")
        need(len(set(self.contracts)) == len(self.contracts), "contracts", "names must be unique")
        need(0 <= self.filters_per_peer <= len(self.contracts), "filters_per_peer",
             f"must be between 0 and {len(self.contracts)}")
        need(self.filters_per_peer == 0
             or self.filters_per_peer * self.peers_per_org >= len(self.contracts),
             "filters_per_peer", "filters of an org's peers do not cover every contract")
        need(self.block_size >= 1, "block_size", "must be at least 1")
        need(self.workload in ("smallbank", "ycsb", "mixed"), "workload",
             "must be smallbank, ycsb or mixed")
        need(self.zipf_s >= 0, "zipf_s", "must be non-negative")
        need(self.account_count >= 2, "account_count", "must be at least 2")
        need(self.value_size_bytes >= 1, "value_size_bytes", "must be positive")
        need(self.tx_rate > 0, "tx_rate", "must be positive")
        need(self.block_count >= 1, "block_count", "must be at least 1")
        need(self.worker_count >= 1, "worker_count", "must be at least 1")
        need(0 <= self.cross_contract_fraction <= 1, "cross_contract_fraction", "must be in [0, 1]")
        need(2 <= self.cross_contract_fan_out <= len(self.contracts) or self.cross_contract_fraction == 0,
             "cross_contract_fan_out", "must be between 2 and the number of contracts")
        need(self.protocol in ("deferred", "strawman"), "protocol", "must be deferred or strawman")
        need(self.endorsement_lag >= 0, "endorsement_lag", "must be non-negative")
        need(0 <= self.duplicate_rate < 1, "duplicate_rate", "must be in [0, 1)")
        need(0 <= self.bad_endorsement_rate < 1, "bad_endorsement_rate", "must be in [0, 1)")
        need(len(self.peer_speeds) >= 1 and all(s > 0 for s in self.peer_speeds),
             "peer_speeds", "must be positive numbers")
        for name in ("validate_base", "per_signature", "commit_per_block", "commit_per_write",
                     "latency", "latency_jitter"):
            need(getattr(self, name) >= 0, name, "must be non-negative")
        need(0 <= self.jitter < 1, "jitter", "must be in [0, 1)")

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigInvalid(f"line {lineno}", "expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigInvalid(key, "unknown field")
            if key in values:
                raise ConfigInvalid(key, "given twice")
            values[key] = _parse(key, value, cls.__dataclass_fields__[key].default)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def costs(self) -> CostModel:
        return CostModel(self.validate_base, self.per_signature, self.commit_per_block,
                         self.commit_per_write, self.latency, self.latency_jitter, self.jitter)

    def filters(self, org: int) -> dict:
        """{peer id: contracts} for one org; consecutive contract groups, wrapping around."""
        out = {}
        n = len(self.contracts)
        for p in range(self.peers_per_org):
            pid = f"o{org}p{p}"
            if self.filters_per_peer == 0:
                out[pid] = None
            else:
                start = p * self.filters_per_peer
                out[pid] = frozenset(self.contracts[(start + i) % n] for i in range(self.filters_per_peer))
        return out


def _parse(key, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [s.strip() for s in value.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        return value
    except ValueError:
        raise ConfigInvalid(key, f"cannot parse {value!r}") from None


def make_workload(cfg: ScenarioConfig):
    if cfg.workload == "mixed":
        if len(cfg.contracts) < 2:
            raise ConfigInvalid("contracts", "the mixed workload needs two contracts")
        return MixedWorkload(cfg.contracts[0], cfg.contracts[1], accounts=min(cfg.account_count, 64),
                             value_size=min(cfg.value_size_bytes, 64), orgs=ORGS)
    return ContractWorkload(tuple(cfg.contracts), cfg.workload, cfg.account_count, cfg.zipf_s,
                            cfg.value_size_bytes, cfg.cross_contract_fraction,
                            cfg.cross_contract_fan_out if cfg.cross_contract_fraction else 1)


def make_generator(cfg: ScenarioConfig, keyring):
    lags = tuple(range(cfg.endorsement_lag + 1)) if cfg.endorsement_lag else (0,)
    return StreamGenerator(make_workload(cfg), keyring, seed=cfg.seed, lags=lags,
                           dup_rate=cfg.duplicate_rate,
                           bad_endorsement_rate=cfg.bad_endorsement_rate)


@dataclass
class PeerReport:
    peer_id: str
    org: int
    contracts: Optional[frozenset]
    speed: float
    committed_tx_count: int
    block_tx_count: int
    valid_tx_count: int
    deferred_count: int
    stall_time: float
    validation_busy: float
    bytes_received: int
    digest: bytes
    overlap: bool
    csv: str


@dataclass
class OrgReport:
    org: int
    flags: dict  # TxRef -> org-level TxValidity
    valid: int
    invalid: int
    deferred: int  # distinct transactions deferred at some peer
    digest: bytes  # per-contract union of the peers' state
    consistent: bool  # peers agreed on every shared transaction


@dataclass
class RunReport:
    config: ScenarioConfig
    issued: int
    duration: float  # virtual seconds until the last peer finished
    peers: list = field(default_factory=list)
    orgs: list = field(default_factory=list)
    oracle_digest: bytes = b""
    oracle_flags: dict = field(default_factory=dict)

    def bitmap(self, org: int = 0) -> dict:
        return {r: f == TxValidity.VALID for r, f in self.orgs[org].flags.items()}

    @property
    def oracle_bitmap(self) -> dict:
        return {r: f == TxValidity.VALID for r, f in self.oracle_flags.items()}

    @property
    def matches_oracle(self) -> bool:
        return all(o.digest == self.oracle_digest and self.bitmap(o.org) == self.oracle_bitmap
                   for o in self.orgs)

    @property
    def deferral_rate(self) -> float:
        return self.orgs[0].deferred / self.issued if self.issued else 0.0

    @property
    def stall_time(self) -> float:
        return max(p.stall_time for p in self.peers)

    @property
    def org_tps(self) -> float:
        return self.issued / self.duration if self.duration else 0.0

    def summary(self) -> str:
        lines = [f"issued {self.issued} transactions in {self.duration:.6f}s virtual "
                 f"({self.org_tps:.1f} tps per org)",
                 f"oracle digest {self.oracle_digest.hex()}  match={self.matches_oracle}"]
        for o in self.orgs:
            lines.append(f"org {o.org}: valid={o.valid} invalid={o.invalid} deferred={o.deferred} "
                         f"consistent={o.consistent} digest={o.digest.hex()}")
        for p in self.peers:
            scope = "*" if p.contracts is None else ",".join(sorted(p.contracts))
            lines.append(f"  {p.peer_id} [{scope}] committed={p.committed_tx_count} "
                         f"valid={p.valid_tx_count} deferred={p.deferred_count} "
                         f"stall={p.stall_time:.6f}s bytes={p.bytes_received}")
        return "\n".join(lines) + "\n"


def _org_flags(peers) -> tuple:
    flags: dict = {}
    consistent = True
    for p in peers:
        for ref, f in p.validity_flags().items():
            if f == TxValidity.NOT_VALIDATED:
                continue
            prev = flags.get(ref)
            if prev is None:
                flags[ref] = f
            elif (prev == TxValidity.VALID) != (f == TxValidity.VALID):
                consistent = False
                flags[ref] = TxValidity.INVALID_SERIALIZABILITY
    return flags, consistent


def org_state(peers) -> list:
    """Per-contract union of the peers' committed state."""
    merged = {}
    for p in peers:
        for key, value, version in p.engine.state.items():
            if p.scope is None or owner(key) in p.scope:
                merged[key] = (key, value, version)
    return list(merged.values())


def run_scenario(cfg: ScenarioConfig, keyring=None, blocks=None, generator=None,
                 store_dir=None) -> RunReport:
    """Generate the block stream (unless given) and run every org over it in virtual time.

    With `store_dir`, each peer appends its block store to ``<store_dir>/<peer>.blk``.
    """
    keyring = keyring or KeyRing.for_orgs(ORGS, seed=cfg.seed)
    gen = generator or make_generator(cfg, keyring)
    if blocks is None:
        blocks = gen.stream(cfg.block_count, cfg.block_size)
    oracle = serial_oracle(blocks, keyring, gen.seed_entries)

    rt = SimRuntime(cfg.costs(), seed=cfg.seed)
    orderer = Orderer(cfg.block_size, sparse=cfg.sparse_blocks)
    pconf = PipelineConfig(worker_count=cfg.worker_count, deferred=cfg.protocol == "deferred")
    orgs = []
    for o in range(cfg.org_count):
        routes = cfg.filters(o)
        peers = []
        for i, (pid, contracts) in enumerate(routes.items()):
            flt = Filter(pid, contracts)
            store = None
            if store_dir:
                path = os.path.join(store_dir, f"{pid}.blk")
                open(path, "wb").close()  # a fresh chain per run
                store = BlockStore(path)
            peer = Peer(pid, keyring, filter=flt, config=pconf, block_store=store,
                        routes={k: v for k, v in routes.items() if v is not None} or None)
            peer.seed(gen.seed_entries)
            rt.add_peer(peer, cfg.worker_count, cfg.peer_speeds[i % len(cfg.peer_speeds)])
            orderer.register(flt)
            peers.append(peer)
        orgs.append(peers)

    interval = cfg.block_size / cfg.tx_rate
    for n, block in enumerate(blocks):
        orderer.add_block(block)
        for peers in orgs:
            for peer in peers:
                rt.deliver(peer.peer_id, orderer.payload_for(peer.peer_id, block), at=n * interval)
    try:
        rt.run()
    finally:
        for peers in orgs:
            for peer in peers:
                peer.engine.blocks.close()

    report = RunReport(cfg, sum(b.tx_count for b in blocks), rt.loop.now,
                       oracle_digest=oracle.digest, oracle_flags=oracle.flags)
    for o, peers in enumerate(orgs):
        flags, consistent = _org_flags(peers)
        deferred = {e.ref for p in peers for e in p.trace if e.kind == "deferred"}
        counts = Counter(f == TxValidity.VALID for f in flags.values())
        report.orgs.append(OrgReport(o, flags, counts[True], counts[False], len(deferred),
                                     state_digest(org_state(peers)), consistent))
        for p in peers:
            sp = rt.peers[p.peer_id]
            m = p.metrics
            report.peers.append(PeerReport(
                p.peer_id, o, p.scope, sp.speed, m.committed_tx_count, m.block_tx_count,
                m.valid_tx_count, m.deferred_count, sp.stall_time, sp.validation_busy,
                orderer.bytes_sent[p.peer_id], p.engine.digest(), m.overlap_observed(),
                m.to_csv()))
    log.info("scenario seed=%d: %d txs, %.4fs virtual", cfg.seed, report.issued, report.duration)
    return report
