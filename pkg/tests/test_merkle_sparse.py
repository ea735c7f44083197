import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from conftest import key, make_tx, put
from eovledger.encoding import DecodeError
from eovledger.merkle import EmptyLeaves, merkle_root
from eovledger.model import ZERO_HASH, decode_tx, encode_tx, seal_block
from eovledger.sim.fixtures import distributed_fixture
from eovledger.sparse import (DuplicateTracker, Filter, SparseBlock, SparseCheck, check_duplicates,
                              make_sparse, verify_sparse)

CONTRACTS = ["c0", "c1", "c2", "c3"]


def h(data):
    return hashlib.sha256(data).digest()


def leaf(i):
    return h(b"leaf%d" % i)


def test_merkle_root_small_trees():
    a, b, c = leaf(0), leaf(1), leaf(2)
    assert merkle_root([a]) == a
    assert merkle_root([a, b]) == h(a + b)
    # the odd last node is promoted unchanged
    assert merkle_root([a, b, c]) == h(h(a + b) + c)
    d, e = leaf(3), leaf(4)
    assert merkle_root([a, b, c, d, e]) == h(h(h(a + b) + h(c + d)) + e)


def test_merkle_root_needs_leaves():
    with pytest.raises(EmptyLeaves):
        merkle_root([])


def random_block(rng, number=1, prev=ZERO_HASH, size=None):
    txs = []
    for i in range(size or rng.randint(1, 12)):
        picked = rng.sample(CONTRACTS, rng.choice([1, 1, 2, 3]))
        writes = [put(key(c, f"k{rng.randrange(50)}"), bytes([rng.randrange(256)])) for c in picked]
        txs.append(make_tx(None, f"{number}-{i}-{rng.random()}", (), writes))
    return seal_block(number, prev, txs)


def random_filter(rng):
    if rng.random() < 0.1:
        return Filter.full("p")
    return Filter("p", rng.sample(CONTRACTS, rng.randint(1, 3)))


def test_full_filter_keeps_everything():
    b = random_block(random.Random(1), size=5)
    sb = make_sparse(b, Filter.full("p"))
    assert [tx for _, tx in sb.included] == list(b.txs)
    assert verify_sparse(sb, ZERO_HASH) is SparseCheck.OK


def test_filter_selects_transactions_touching_any_filtered_contract():
    fx = distributed_fixture()
    sb = make_sparse(fx.block, Filter("P2", {"S2"}))
    assert [fx.names[(1, i)] for i, _ in sb.included] == ["T2", "T3"]
    assert sb.merkle_leaves == tuple(fx.block.tx_ids)
    assert verify_sparse(sb, ZERO_HASH)


def test_filter_matching_nothing_still_verifies():
    b = random_block(random.Random(2), size=4)
    sb = make_sparse(b, Filter("p", {"unused"}))
    assert sb.included == () and sb.tx_count == 4  # positions, not included bodies
    assert verify_sparse(sb, ZERO_HASH) is SparseCheck.OK


def test_sparse_codec_round_trip():
    rng = random.Random(3)
    for _ in range(20):
        b = random_block(rng)
        sb = make_sparse(b, random_filter(rng))
        assert SparseBlock.decode(sb.encode()) == sb


def test_filter_cannot_be_empty():
    with pytest.raises(ValueError):
        Filter("p", set())


def test_brute_force_selection():
    rng = random.Random(4)
    for _ in range(50):
        b = random_block(rng)
        flt = random_filter(rng)
        want = [i for i, tx in enumerate(b.txs)
                if flt.contracts is None or any(c in flt.contracts for c in tx.invoked_contracts)]
        assert [i for i, _ in make_sparse(b, flt).included] == want


@given(st.integers(0, 2**32), st.integers(0, 2**32))
def test_root_is_independent_of_filter(block_seed, filter_seed):
    b = random_block(random.Random(block_seed))
    sb = make_sparse(b, random_filter(random.Random(filter_seed)))
    assert sb.merkle_root == b.merkle_root == merkle_root(sb.merkle_leaves)
    assert sb.block_hash == b.block_hash


# -- tampering -------------------------------------------------------------------------

def flip(data: bytes, pos: int, mask: int) -> bytes:
    out = bytearray(data)
    out[pos] ^= mask
    return bytes(out)


def rejects(sb, prev) -> bool:
    return verify_sparse(sb, prev) is not SparseCheck.OK


def tamper_included(sb, rng):
    """Flip one byte of one included transaction's encoding; None if it no longer decodes."""
    slot = rng.randrange(len(sb.included))
    i, tx = sb.included[slot]
    raw = encode_tx(tx)
    try:
        bad = decode_tx(flip(raw, rng.randrange(len(raw)), rng.randrange(1, 256)))
    except DecodeError:
        return None
    included = list(sb.included)
    included[slot] = (i, bad)
    return SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, sb.applied_filter,
                       sb.merkle_leaves, tuple(included))


def tamper_leaf(sb, rng):
    leaves = list(sb.merkle_leaves)
    j = rng.randrange(len(leaves))
    leaves[j] = flip(leaves[j], rng.randrange(32), rng.randrange(1, 256))
    return SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, sb.applied_filter,
                       tuple(leaves), sb.included)


def tamper_prev(sb, rng):
    prev = flip(sb.prev_hash, rng.randrange(32), rng.randrange(1, 256))
    return SparseBlock(sb.number, prev, sb.merkle_root, sb.block_hash, sb.applied_filter,
                       sb.merkle_leaves, sb.included)


def run_tamper_cases(n: int, seed: int = 0) -> dict:
    """Returns counts per tamper kind of (cases, rejected), plus honest acceptances."""
    rng = random.Random(seed)
    prev = h(b"genesis")
    stats = {"honest": [0, 0], "tx": [0, 0], "leaf": [0, 0], "prev": [0, 0]}
    for _ in range(n):
        b = random_block(rng, number=rng.randint(1, 1000), prev=prev)
        sb = make_sparse(b, random_filter(rng))
        stats["honest"][0] += 1
        stats["honest"][1] += verify_sparse(sb, prev) is SparseCheck.OK
        kind = rng.choice(["tx", "leaf", "prev"] if sb.included else ["leaf", "prev"])
        if kind == "tx":
            bad = tamper_included(sb, rng)
            ok = bad is None or rejects(bad, prev)
        elif kind == "leaf":
            ok = rejects(tamper_leaf(sb, rng), prev)
        else:
            ok = rejects(tamper_prev(sb, rng), prev)
        stats[kind][0] += 1
        stats[kind][1] += ok
    return stats


def test_tamper_cases_are_rejected():
    stats = run_tamper_cases(600, seed=5)
    for kind, (cases, good) in stats.items():
        assert cases > 0 and good == cases, kind


def test_specific_tamper_results():
    rng = random.Random(6)
    b = random_block(rng, size=6)
    sb = make_sparse(b, Filter.full("p"))
    swapped = SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, sb.applied_filter,
                          sb.merkle_leaves, (sb.included[1], sb.included[0]) + sb.included[2:])
    assert verify_sparse(swapped, ZERO_HASH) is SparseCheck.BAD_INDEX
    moved = SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, sb.applied_filter,
                        sb.merkle_leaves, ((0, sb.included[1][1]),))
    assert verify_sparse(moved, ZERO_HASH) is SparseCheck.LEAF_MISMATCH
    assert verify_sparse(sb, b"\x01" * 32) is SparseCheck.PREV_HASH_MISMATCH
    renumbered = SparseBlock(sb.number + 1, sb.prev_hash, sb.merkle_root, sb.block_hash,
                             sb.applied_filter, sb.merkle_leaves, sb.included)
    assert verify_sparse(renumbered, ZERO_HASH) is SparseCheck.BLOCK_HASH_MISMATCH
    dropped = SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, sb.applied_filter,
                          sb.merkle_leaves[:-1], sb.included[:-1])
    assert verify_sparse(dropped, ZERO_HASH) is SparseCheck.ROOT_MISMATCH
    narrow = Filter("p", {"nothing"})
    lying = SparseBlock(sb.number, sb.prev_hash, sb.merkle_root, sb.block_hash, narrow,
                        sb.merkle_leaves, sb.included)
    assert verify_sparse(lying, ZERO_HASH) is SparseCheck.FILTER_MISMATCH


# -- duplicates --------------------------------------------------------------------------

def test_check_duplicates():
    seen = set()
    assert check_duplicates([b"a", b"b"], seen) == set()
    assert check_duplicates([b"c", b"a"], seen) == {1}
    assert check_duplicates([b"d", b"d"], seen) == {1}
    assert seen == {b"a", b"b", b"c", b"d"}


def test_tracker_sees_ids_of_filtered_out_transactions():
    b = random_block(random.Random(7), size=5)
    sb = make_sparse(b, Filter("p", {"nothing"}))
    tracker = DuplicateTracker()
    assert tracker.check(sb.all_tx_ids) == set()
    assert tracker.check(b.tx_ids) == set(range(5))
    assert len(tracker) == 5 and b.tx_ids[0] in tracker
