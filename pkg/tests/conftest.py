import hypothesis
import pytest

from eovledger.model import (EndorsementPolicy, KeyRing, ReadEntry, StateKey, Transaction, Version,
                             WriteEntry, ZERO_HASH, policy_key, seal_block)
from eovledger.sim.generator import StreamGenerator
from eovledger.sim.workloads import MixedWorkload

hypothesis.settings.register_profile("repo", deadline=None, print_blob=True)
hypothesis.settings.load_profile("repo")

ORGS = ("orgA", "orgB", "orgC")


@pytest.fixture
def ring():
    return KeyRing.for_orgs(ORGS, seed=11)


def key(contract, name):
    return StateKey(contract, name.encode() if isinstance(name, str) else name)


def policy_entry(contract, orgs=("orgA",), threshold=1, version=Version(0, 0)):
    return (policy_key(contract), EndorsementPolicy(contract, frozenset(orgs), threshold).encode(),
            version)


def make_tx(ring, nonce, reads=(), writes=(), ranges=(), orgs=("orgA",)):
    tx = Transaction.build(nonce, reads, writes, ranges)
    return ring.endorse(tx, orgs) if ring is not None else tx


def put(k, value=b"x"):
    return WriteEntry(k, value)


def read(k, version=None):
    return ReadEntry(k, version)


def chain(tx_lists, prev=ZERO_HASH, start=1):
    blocks = []
    for n, txs in enumerate(tx_lists, start=start):
        b = seal_block(n, prev, txs)
        prev = b.block_hash
        blocks.append(b)
    return blocks


def mixed_stream(seed, block_count=8, block_size=10, lags=(0, 1, 2), dup_rate=0.05,
                 bad_endorsement_rate=0.03, **workload):
    """(generator, blocks) of conflict-heavy mixed traffic; the generator holds the seed state."""
    ring = KeyRing.for_orgs(ORGS, seed=seed)
    gen = StreamGenerator(MixedWorkload(**workload), ring, seed=seed, lags=lags, dup_rate=dup_rate,
                          bad_endorsement_rate=bad_endorsement_rate)
    return gen, gen.stream(block_count, block_size)


CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
