import pytest

from conftest import key, make_tx, policy_entry, put, read
from eovledger.model import Endorsement, RangeQueryInfo, ReadEntry, TxRef, Version
from eovledger.sim.fixtures import distributed_fixture, pipeline_fixture
from eovledger.state import StateEngine
from eovledger.validation import (UnknownPolicy, read_policy, validate_endorsement,
                                  validate_serializability)


def engine(*entries):
    e = StateEngine()
    e.seed(entries)
    return e


def test_threshold_two_of_two(ring):
    e = engine(policy_entry("c0", ("orgA", "orgB"), 2))
    tx = make_tx(None, "n", (), [put(key("c0", "a"))])
    assert validate_endorsement(ring.endorse(tx, ["orgA", "orgB"]), e, ring)
    assert not validate_endorsement(ring.endorse(tx, ["orgA"]), e, ring)
    # an org outside the policy does not count
    assert not validate_endorsement(ring.endorse(tx, ["orgA", "orgC"]), e, ring)


def test_forged_or_repeated_signatures_do_not_count(ring):
    e = engine(policy_entry("c0", ("orgA", "orgB"), 2))
    tx = ring.endorse(make_tx(None, "n", (), [put(key("c0", "a"))]), ["orgA"])
    sig = tx.endorsements[0].signature
    assert not validate_endorsement(tx.with_endorsements([Endorsement("orgA", sig)] * 2), e, ring)
    forged = tx.with_endorsements([Endorsement("orgA", sig), Endorsement("orgB", sig)])
    assert not validate_endorsement(forged, e, ring)


def test_every_invoked_contract_needs_its_policy(ring):
    e = engine(policy_entry("c0", ("orgA",)), policy_entry("c1", ("orgB",), version=Version(0, 1)))
    tx = make_tx(None, "n", (), [put(key("c0", "a")), put(key("c1", "a"))])
    assert not validate_endorsement(ring.endorse(tx, ["orgA"]), e, ring)
    assert validate_endorsement(ring.endorse(tx, ["orgA", "orgB"]), e, ring)
    # a peer scoped to c0 checks only c0's policy
    assert validate_endorsement(ring.endorse(tx, ["orgA"]), e, ring, scope={"c0"})


def test_missing_policy(ring):
    tx = ring.endorse(make_tx(None, "n", (), [put(key("c9", "a"))]), ["orgA"])
    with pytest.raises(UnknownPolicy):
        validate_endorsement(tx, engine(), ring)
    with pytest.raises(UnknownPolicy):
        read_policy(engine(), "c9")


def test_verify_cost_is_charged_per_distinct_signature(ring):
    e = engine(policy_entry("c0", ("orgA", "orgB"), 2))
    tx = ring.endorse(make_tx(None, "n", (), [put(key("c0", "a"))]), ["orgA", "orgB"])
    slept = []
    assert validate_endorsement(tx, e, ring, verify_cost=0.5, sleep=slept.append)
    assert slept == [0.5, 0.5]


def test_point_reads():
    k = key("c0", "k")
    e = engine((k, b"v", Version(0, 3)))
    assert validate_serializability(make_tx(None, "a", [read(k, Version(0, 3))]), e)
    assert not validate_serializability(make_tx(None, "b", [read(k, Version(0, 2))]), e)
    assert not validate_serializability(make_tx(None, "c", [read(k, None)]), e)
    assert validate_serializability(make_tx(None, "d", [read(key("c0", "absent"), None)]), e)


def test_phantom_in_range_query_is_detected():
    """The fixture's range k2..k5 saw only k4; once k5 exists the query is stale."""
    fx = pipeline_fixture()
    e = engine(*fx.seed)
    t4 = fx.blocks[0].tx_at(3)
    t5 = fx.blocks[1].tx_at(0)
    assert validate_serializability(t5, e)
    e.apply_dirty(TxRef(1, 3), t4.write_set)
    assert not validate_serializability(t5, e)


def test_range_query_detects_deleted_and_updated_keys():
    ks = [key("c0", f"k{i}") for i in range(3)]
    e = engine(*[(k, b"v", Version(0, i)) for i, k in enumerate(ks)])
    observed = tuple(ReadEntry(k, Version(0, i)) for i, k in enumerate(ks))
    tx = make_tx(None, "r", (), [put(key("c0", "z"))], [RangeQueryInfo("c0", b"k", b"l", observed)])
    assert validate_serializability(tx, e)
    e.apply_dirty(TxRef(1, 0), [put(ks[1], b"w")])
    assert not validate_serializability(tx, e)


def test_distributed_fixture_occ_per_peer():
    """T3 read k4 before T2 rewrote it: the S1 peer rejects it, the others accept their parts."""
    fx = distributed_fixture()
    t2, t3 = fx.block.tx_at(1), fx.block.tx_at(2)
    seeds = fx.seeds["P1"]
    verdicts = {}
    for pid, contracts in fx.filters.items():
        e = StateEngine(scope=contracts)
        e.seed(seeds)
        e.apply_dirty(TxRef(1, 1), t2.writes_for(contracts))
        verdicts[pid] = validate_serializability(t3, e, scope=contracts)
    assert verdicts == {"P1": False, "P2": True, "P3": True}
