import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import ORGS, mixed_stream
from eovledger.model import ZERO_HASH, KeyRing, StateKey, Version
from eovledger.pipeline import Peer, PipelineConfig
from eovledger.sim.fixtures import SNAPSHOT_AT, snapshot_fixture, snapshot_values
from eovledger.sim.generator import StreamGenerator
from eovledger.sim.oracle import serial_oracle
from eovledger.sim.runtime import Orderer, SimRuntime
from eovledger.sim.workloads import ContractWorkload
from eovledger.snapshot import (FilterNotCovered, FutureBlock, ManifestCorrupt, ModificationIndex,
                                SnapshotManifest, extract_snapshot, join_sparse_peer, recover_value,
                                shrink_filter)
from eovledger.sparse import Filter
from eovledger.state import replay


def k(name):
    return StateKey("S1", name.encode())


def test_fixture_modification_records():
    peer, index, blocks = snapshot_fixture()
    records = [(c, b, t, [(m.key, m.is_delete) for m in mods])
               for (c, b, t), mods in index.items() if b > 0]
    assert records == [
        ("S1", 1, 0, [(k("k1"), False)]),
        ("S1", 2, 0, [(k("k2"), False)]),
        ("S1", 3, 0, [(k("k3"), False)]),
        ("S1", 4, 0, [(k("k1"), True)]),
        ("S1", 4, 1, [(k("k2"), False)]),
    ]


def test_fixture_snapshots_per_block():
    peer, index, _ = snapshot_fixture()
    for b, want in SNAPSHOT_AT.items():
        assert snapshot_values(peer, index, b) == want
    assert recover_value(peer.engine, index, k("k2"), 3) == (b"v1", Version(2, 0))
    assert recover_value(peer.engine, index, k("k1"), 4) is None
    assert recover_value(peer.engine, index, k("k2"), 4) == (b"v2", Version(4, 1))


def test_snapshot_beyond_height():
    peer, index, _ = snapshot_fixture()
    with pytest.raises(FutureBlock):
        extract_snapshot(peer.engine, index, "S1", 5)


def test_manifest_codec_and_corruption():
    peer, index, _ = snapshot_fixture()
    m = extract_snapshot(peer.engine, index, "S1", 3)
    data = m.encode()
    assert SnapshotManifest.decode(data) == m
    bad = bytearray(data)
    bad[-1] ^= 1
    with pytest.raises(ManifestCorrupt):
        SnapshotManifest.decode(bytes(bad))


def test_manifest_invariants():
    with pytest.raises(ValueError):
        SnapshotManifest("S1", 2, [(k("b"), b"", Version(1, 0)), (k("a"), b"", Version(1, 0))])
    with pytest.raises(ValueError):
        SnapshotManifest("S1", 2, [(k("a"), b"", Version(3, 0))])


def test_unused_contract_gives_empty_manifest():
    peer, index, _ = snapshot_fixture()
    assert extract_snapshot(peer.engine, index, "nobody", 4).entries == []


def full_peer_run(seed, block_count=12, block_size=10):
    gen, blocks = mixed_stream(seed, block_count=block_count, block_size=block_size)
    peer = Peer("full", gen.keyring, config=PipelineConfig(worker_count=4))
    peer.seed(gen.seed_entries)
    index = ModificationIndex().attach(peer.engine)
    rt = SimRuntime(seed=seed)
    rt.add_peer(peer, 4)
    for b in blocks:
        rt.deliver(peer.peer_id, b)
    rt.run()
    return gen, blocks, peer, index


def snapshot_equals_replay(peer, index, contract, as_of) -> bool:
    m = extract_snapshot(peer.engine, index, contract, as_of)
    want = replay(peer.engine.blocks, scope={contract}, upto=as_of).items()
    return m.entries == want


@settings(max_examples=10)
@given(st.integers(0, 10**6))
def test_snapshot_equals_replay(seed):
    gen, blocks, peer, index = full_peer_run(seed)
    rng = random.Random(seed)
    for _ in range(8):
        assert snapshot_equals_replay(peer, index, rng.choice(["bank", "kv"]),
                                      rng.randint(0, len(blocks)))


def test_index_attached_late_sees_history():
    gen, blocks, peer, index = full_peer_run(5)
    late = ModificationIndex().attach(peer.engine)
    assert late.items() == index.items()


def test_snapshot_matches_serial_state():
    gen, blocks, peer, index = full_peer_run(6)
    oracle = serial_oracle(blocks[:7], gen.keyring, gen.seed_entries)
    m = extract_snapshot(peer.engine, index, "kv", 7)
    assert {e[0]: (e[1], e[2]) for e in m.entries} == {
        key: entry for key, entry in oracle.state.items()
        if key.contract == "kv" or key.key == b"kv" and key.contract == "_policy"}


def test_join_matches_always_present_peer():
    # single-contract traffic: a lone sparse peer has nobody to exchange verdicts with
    ring = KeyRing.for_orgs(ORGS, seed=8)
    workload = ContractWorkload(("kv", "bank"), kind="ycsb", accounts=40, value_size=32)
    gen = StreamGenerator(workload, ring, seed=8, lags=(0, 1))
    blocks = gen.stream(12, 10)
    source = Peer("source", gen.keyring)
    source.seed(gen.seed_entries)
    index = ModificationIndex().attach(source.engine)
    present = Peer("present", gen.keyring, filter=Filter("present", {"kv"}))
    present.seed(gen.seed_entries)
    joiner = Peer("joiner", gen.keyring, filter=Filter("joiner", {"kv"}))
    orderer = Orderer(10, sparse=True)
    rt = SimRuntime(seed=8)
    for p in (source, present, joiner):
        orderer.register(p.filter)
    rt.add_peer(source, 4)
    rt.add_peer(present, 4)
    join_at = 6
    for b in blocks[:join_at]:
        orderer.add_block(b)
        for p in (source, present):
            rt.deliver(p.peer_id, orderer.payload_for(p.peer_id, b))
    rt.run()
    report = join_sparse_peer(joiner, [extract_snapshot(source.engine, index, "kv", join_at)],
                              join_at, blocks[join_at - 1].block_hash, source.dups.ids)
    assert report.id_bytes == 32 * len(source.dups.ids)
    rt.add_peer(joiner, 4)
    for b in blocks[join_at:]:
        orderer.add_block(b)
        for p in (source, present, joiner):
            rt.deliver(p.peer_id, orderer.payload_for(p.peer_id, b))
    rt.run()
    later = {r: f for r, f in present.validity_flags().items() if r.block > join_at}
    assert joiner.validity_flags() == later
    assert joiner.engine.digest() == present.engine.digest()


def test_join_needs_manifests_for_the_whole_filter():
    peer, index, _ = snapshot_fixture()
    joiner = Peer("j", peer.keyring, filter=Filter("j", {"S1", "S2"}))
    with pytest.raises(FilterNotCovered):
        join_sparse_peer(joiner, [extract_snapshot(peer.engine, index, "S1", 4)], 4, ZERO_HASH)
    full = Peer("f", peer.keyring)
    with pytest.raises(FilterNotCovered):
        join_sparse_peer(full, [], 4, ZERO_HASH)


def test_shrink_filter_drops_foreign_state():
    gen, blocks, peer, index = full_peer_run(9, block_count=4)
    assert peer.idle()
    shrink_filter(peer, {"kv"})
    assert {key.contract for key, _, _ in peer.engine.state.items()} <= {"kv", "_policy"}
    assert all(key.key == b"kv" for key, _, _ in peer.engine.state.items() if key.contract == "_policy")
    with pytest.raises(ValueError):
        shrink_filter(peer, {"kv", "bank"})
