import math
import random
from collections import Counter

import pytest

from eovledger.model import StateKey, Version
from eovledger.sim.generator import versioned
from eovledger.sim.oracle import DictView
from eovledger.sim.workloads import (SMALLBANK_OPS, ContractWorkload, TxBuilder, ZipfSampler,
                                     checking, savings, smallbank_op, smallbank_seed, smallbank_tx,
                                     ycsb_seed, ycsb_tx)


def view_of(entries):
    return DictView({k: (v, ver) for k, v, ver in versioned(entries)})


def test_zipf_uniform_when_exponent_is_zero():
    z = ZipfSampler(10, 0.0)
    assert all(p == pytest.approx(0.1) for p in z.probabilities)


def test_zipf_probabilities_follow_the_power_law():
    z = ZipfSampler(100, 1.5)
    h = math.fsum(1 / r ** 1.5 for r in range(1, 101))
    assert z.probabilities[0] == pytest.approx(1 / h)
    assert z.probabilities[9] == pytest.approx(10 ** -1.5 / h)
    assert all(a > b for a, b in zip(z.probabilities, z.probabilities[1:]))


def test_zipf_top_ranks_within_five_percent():
    n, s, draws = 1000, 0.5, 1_000_000
    z = ZipfSampler(n, s)
    rng = random.Random(0)
    counts = Counter(z.sample(rng) for _ in range(draws))
    h = math.fsum(1 / r ** s for r in range(1, n + 1))
    for rank in range(10):
        expected = draws / (rank + 1) ** s / h
        assert abs(counts[rank] - expected) <= 0.05 * expected


def test_zipf_sample_distinct():
    z = ZipfSampler(5, 1.5)
    rng = random.Random(1)
    for _ in range(100):
        picked = z.sample_distinct(rng, 3)
        assert len(set(picked)) == 3 and all(0 <= r < 5 for r in picked)


def test_zipf_rejects_bad_parameters():
    with pytest.raises(ValueError):
        ZipfSampler(0, 1.0)
    with pytest.raises(ValueError):
        ZipfSampler(10, -1.0)


def shape(tx):
    reads = tuple(sorted(e.key.key[:1] for e in tx.read_set))
    writes = tuple(sorted(e.key.key[:1] for e in tx.write_set))
    return reads, writes


SHAPES = {
    "balance": ((b"c", b"s"), ()),
    "deposit_checking": ((b"c",), (b"c",)),
    "transact_savings": ((b"s",), (b"s",)),
    "send_payment": ((b"c", b"c"), (b"c", b"c")),
    "write_check": ((b"c", b"s"), (b"c",)),
    "amalgamate": ((b"c", b"s"), (b"c", b"s")),
}


@pytest.mark.parametrize("op", SMALLBANK_OPS)
def test_smallbank_op_shapes(op):
    view = view_of(smallbank_seed("sb", 10))
    tx = smallbank_tx(random.Random(0), view, "sb", accounts=10, op=op)
    assert shape(tx) == SHAPES[op]
    assert all(e.version == Version(*e.version) for e in tx.read_set)
    assert all(len(w.value) == 10 for w in tx.write_set)


def test_smallbank_arithmetic():
    view = view_of(smallbank_seed("sb", 3, balance=100))
    b = TxBuilder(view)
    smallbank_op(b, "send_payment", "sb", 0, "sb", 1, 30)
    writes = {w.key: int(w.value) for w in b.build(b"n").write_set}
    assert writes == {StateKey("sb", checking(0)): 70, StateKey("sb", checking(1)): 130}
    b = TxBuilder(view)
    smallbank_op(b, "amalgamate", "sb", 2, "sb", 0, 1)
    writes = {w.key: int(w.value) for w in b.build(b"n").write_set}
    assert writes == {StateKey("sb", savings(2)): 0, StateKey("sb", checking(0)): 200}


def test_smallbank_ops_are_uniform():
    view = view_of(smallbank_seed("sb", 50))
    rng = random.Random(2)
    n = 100_000
    by_shape = {v: k for k, v in SHAPES.items()}
    counts = Counter(by_shape[shape(smallbank_tx(rng, view, "sb", accounts=50))] for _ in range(n))
    p = 1 / 6
    sigma = math.sqrt(n * p * (1 - p))
    for op in SMALLBANK_OPS:
        assert abs(counts[op] - n * p) <= 3 * sigma


def test_ycsb_shape():
    seed = ycsb_seed("y", 100, value_size=1024)
    assert all(len(v) == 1024 for _, v in seed)
    tx = ycsb_tx(random.Random(3), view_of(seed), ZipfSampler(100, 0.9), "y")
    assert len(tx.read_set) == 2 and len(tx.write_set) == 2
    assert {e.key for e in tx.read_set} == {w.key for w in tx.write_set}
    assert all(len(w.value) == 1024 for w in tx.write_set)


def test_cross_contract_fraction_and_fan_out():
    w = ContractWorkload(("a", "b", "c", "d"), "smallbank", accounts=20, cross_fraction=0.5, fan_out=3)
    view = view_of(w.seed())
    rng = random.Random(4)
    spans = Counter(len(w.next_tx(rng, view, b"%d" % i).invoked_contracts) for i in range(2000))
    assert set(spans) == {1, 3}
    assert 0.45 < spans[3] / 2000 < 0.55
    with pytest.raises(ValueError):
        ContractWorkload(("a",), fan_out=2)
