"""Transaction workloads.

A workload turns a random generator and a read view of the ledger into an
unendorsed transaction, the way an endorser's simulation would: every read
records the version it saw, writes and deletes are buffered, range queries
record the keys and versions they returned.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Optional

from ..model import (EndorsementPolicy, RangeQueryInfo, ReadEntry, StateKey, Transaction,
                     WriteEntry, policy_key)


class ZipfSampler:
    """Ranks 0..n-1 with P(rank r) proportional to 1 / (r + 1) ** s."""

    def __init__(self, n: int, s: float):
        if n < 1 or s < 0:
            raise ValueError("need n >= 1 and s >= 0")
        self.n, self.s = n, s
        weights = [1.0 / (r + 1) ** s for r in range(n)]
        total = math.fsum(weights)
        self.probabilities = [w / total for w in weights]
        acc, self._cdf = 0.0, []
        for p in self.probabilities:
            acc += p
            self._cdf.append(acc)
        self._cdf[-1] = 1.0

    def sample(self, rng) -> int:
        return bisect.bisect_left(self._cdf, rng.random())

    def sample_distinct(self, rng, k: int) -> list:
        picked: list = []
        while len(picked) < k:
            r = self.sample(rng)
            if r not in picked:
                picked.append(r)
        return picked


class TxBuilder:
    """Records what a contract invocation reads and writes against `view`.

    `view` needs ``get(key) -> (value, version) | None`` and
    ``scan(contract, start, end) -> [(key, value, version)]``.
    """

    def __init__(self, view):
        self.view = view
        self._reads: dict = {}
        self._writes: dict = {}
        self._ranges: list = []

    def get(self, contract: str, key: bytes) -> Optional[bytes]:
        return self.get_key(StateKey(contract, key))

    def get_key(self, sk: StateKey) -> Optional[bytes]:
        hit = self.view.get(sk)
        self._reads.setdefault(sk, None if hit is None else hit[1])
        return None if hit is None else hit[0]

    def put(self, contract: str, key: bytes, value: bytes):
        self._writes[StateKey(contract, key)] = WriteEntry(StateKey(contract, key), value, False)

    def put_key(self, sk: StateKey, value: bytes):
        self._writes[sk] = WriteEntry(sk, value, False)

    def delete(self, contract: str, key: bytes):
        self._writes[StateKey(contract, key)] = WriteEntry(StateKey(contract, key), b"", True)

    def range(self, contract: str, start: bytes, end: Optional[bytes]) -> list:
        rows = self.view.scan(contract, start, end)
        observed = tuple(ReadEntry(k, ver) for k, _, ver in rows)
        self._ranges.append(RangeQueryInfo(contract, start, end, observed))
        return [(k.key, v) for k, v, _ in rows]

    @property
    def empty(self) -> bool:
        return not (self._reads or self._writes or self._ranges)

    def build(self, nonce) -> Transaction:
        reads = [ReadEntry(k, v) for k, v in self._reads.items()]
        return Transaction.build(nonce, reads, self._writes.values(), self._ranges)


def _num(value: Optional[bytes]) -> int:
    return int(value) if value else 0


def _val(n: int, size: int = 10) -> bytes:
    return str(max(n, 0) % 10 ** size).zfill(size).encode()


# -- Smallbank ---------------------------------------------------------------------------

SMALLBANK_OPS = ("balance", "deposit_checking", "transact_savings", "send_payment",
                 "write_check", "amalgamate")


def checking(a: int) -> bytes:
    return b"c:%06d" % a


def savings(a: int) -> bytes:
    return b"s:%06d" % a


def smallbank_seed(contract: str, accounts: int, balance: int = 10_000) -> list:
    out = []
    for a in range(accounts):
        out.append((StateKey(contract, checking(a)), _val(balance)))
        out.append((StateKey(contract, savings(a)), _val(balance)))
    return out


def smallbank_op(b: TxBuilder, op: str, c1: str, a: int, c2: str, other: int, amount: int):
    """One Smallbank operation; `c2`/`other` name the second account where the op has one."""
    if op == "balance":
        b.get(c1, checking(a))
        b.get(c1, savings(a))
    elif op == "deposit_checking":
        b.put(c1, checking(a), _val(_num(b.get(c1, checking(a))) + amount))
    elif op == "transact_savings":
        b.put(c1, savings(a), _val(_num(b.get(c1, savings(a))) - amount))
    elif op == "send_payment":
        src, dst = _num(b.get(c1, checking(a))), _num(b.get(c2, checking(other)))
        b.put(c1, checking(a), _val(src - amount))
        b.put(c2, checking(other), _val(dst + amount))
    elif op == "write_check":
        total = _num(b.get(c1, checking(a))) + _num(b.get(c1, savings(a)))
        penalty = 1 if total < amount else 0
        b.put(c1, checking(a), _val(_num(b.get(c1, checking(a))) - amount - penalty))
    elif op == "amalgamate":
        sav, chk = _num(b.get(c1, savings(a))), _num(b.get(c2, checking(other)))
        b.put(c1, savings(a), _val(0))
        b.put(c2, checking(other), _val(sav + chk))
    else:
        raise ValueError(f"unknown smallbank op {op!r}")


def smallbank_tx(rng, view, contract: str = "smallbank", accounts: int = 100_000,
                 op: Optional[str] = None, nonce=None) -> Transaction:
    """Uniform op and uniform accounts; values are 10 bytes."""
    op = op or rng.choice(SMALLBANK_OPS)
    a = rng.randrange(accounts)
    other = rng.randrange(accounts - 1)
    other += other >= a
    b = TxBuilder(view)
    smallbank_op(b, op, contract, a, contract, other, rng.randrange(1, 100))
    return b.build(nonce if nonce is not None else rng.getrandbits(64).to_bytes(8, "big"))


# -- YCSB-style ----------------------------------------------------------------------------

def ycsb_key(i: int) -> bytes:
    return b"user%08d" % i


def ycsb_seed(contract: str, keys: int, value_size: int = 1024) -> list:
    return [(StateKey(contract, ycsb_key(i)), _filler(i, 0, value_size)) for i in range(keys)]


def _filler(i: int, gen: int, size: int) -> bytes:
    head = b"%d:%d:" % (i, gen)
    return (head * (size // len(head) + 1))[:size]


def ycsb_op(b: TxBuilder, contract: str, ranks, value_size: int, gen: int):
    for r in ranks:
        b.get(contract, ycsb_key(r))
    for r in ranks:
        b.put(contract, ycsb_key(r), _filler(r, gen, value_size))


def ycsb_tx(rng, view, zipf: ZipfSampler, contract: str = "ycsb", value_size: int = 1024,
            nonce=None) -> Transaction:
    """Read two Zipf-chosen keys and write both."""
    b = TxBuilder(view)
    ycsb_op(b, contract, zipf.sample_distinct(rng, 2), value_size, rng.getrandbits(30))
    return b.build(nonce if nonce is not None else rng.getrandbits(64).to_bytes(8, "big"))


# -- multi-contract workload used by scenarios ------------------------------------------

@dataclass
class ContractWorkload:
    """Single- and cross-contract transactions over several contracts of one kind."""

    contracts: tuple
    kind: str = "smallbank"  # or "ycsb"
    accounts: int = 1000
    zipf_s: float = 0.5
    value_size: int = 1024
    cross_fraction: float = 0.0
    fan_out: int = 2

    def __post_init__(self):
        if self.kind not in ("smallbank", "ycsb"):
            raise ValueError(f"unknown workload {self.kind!r}")
        if self.fan_out > len(self.contracts):
            raise ValueError("fan-out exceeds the number of contracts")
        self._zipf = ZipfSampler(self.accounts, self.zipf_s) if self.kind == "ycsb" else None

    def seed(self) -> list:
        out = []
        for c in self.contracts:
            if self.kind == "smallbank":
                out += smallbank_seed(c, self.accounts)
            else:
                out += ycsb_seed(c, self.accounts, self.value_size)
        return out

    def next_tx(self, rng, view, nonce) -> Transaction:
        b = TxBuilder(view)
        cross = self.cross_fraction > 0 and rng.random() < self.cross_fraction
        picked = rng.sample(self.contracts, self.fan_out if cross else 1)
        if self.kind == "ycsb":
            if cross:
                for c in picked:
                    ycsb_op(b, c, [self._zipf.sample(rng)], self.value_size, rng.getrandbits(30))
            else:
                ycsb_op(b, picked[0], self._zipf.sample_distinct(rng, 2), self.value_size,
                        rng.getrandbits(30))
        else:
            a, other = rng.randrange(self.accounts), rng.randrange(self.accounts)
            if cross:
                for c in picked[2:]:
                    b.get(c, checking(rng.randrange(self.accounts)))
                smallbank_op(b, rng.choice(("send_payment", "amalgamate")), picked[0], a,
                             picked[1], other, rng.randrange(1, 100))
            else:
                op = rng.choice(SMALLBANK_OPS)
                if other == a:
                    other = (a + 1) % self.accounts
                smallbank_op(b, op, picked[0], a, picked[0], other, rng.randrange(1, 100))
        return b.build(nonce)


@dataclass
class MixedWorkload:
    """Smallbank and YCSB-style traffic plus range scans, inserts, deletes,
    endorsement-policy updates and multi-contract transactions, over a small
    key space so that conflicts are frequent."""

    bank: str = "bank"
    kv: str = "kv"
    accounts: int = 12
    kv_keys: int = 24
    zipf_s: float = 0.8
    value_size: int = 16
    orgs: tuple = ("orgA", "orgB", "orgC")

    def __post_init__(self):
        self._zipf = ZipfSampler(self.kv_keys, self.zipf_s)

    @property
    def contracts(self) -> tuple:
        return (self.bank, self.kv)

    def seed(self) -> list:
        out = smallbank_seed(self.bank, self.accounts)
        out += [(StateKey(self.kv, ycsb_key(i)), _filler(i, 0, self.value_size))
                for i in range(0, self.kv_keys, 2)]
        return out

    def next_tx(self, rng, view, nonce) -> Transaction:
        b = TxBuilder(view)
        roll = rng.random()
        if roll < 0.30:
            a = rng.randrange(self.accounts)
            other = (a + 1 + rng.randrange(self.accounts - 1)) % self.accounts
            smallbank_op(b, rng.choice(SMALLBANK_OPS), self.bank, a, self.bank, other,
                         rng.randrange(1, 50))
        elif roll < 0.50:
            ycsb_op(b, self.kv, self._zipf.sample_distinct(rng, 2), self.value_size,
                    rng.getrandbits(20))
        elif roll < 0.62:
            lo = rng.randrange(self.kv_keys)
            hi = lo + 1 + rng.randrange(6)
            end = None if rng.random() < 0.15 else ycsb_key(hi)
            rows = b.range(self.kv, ycsb_key(lo), end)
            target = self._zipf.sample(rng)
            b.put(self.kv, ycsb_key(target), b"n=%d" % len(rows))
        elif roll < 0.72:
            k = ycsb_key(rng.randrange(self.kv_keys))
            if b.get(self.kv, k) is None:
                b.put(self.kv, k, _filler(rng.randrange(99), 1, self.value_size))
            else:
                b.delete(self.kv, k)
        elif roll < 0.78:
            contract = rng.choice(self.contracts)
            pk = policy_key(contract)
            b.get_key(pk)
            orgs = frozenset(rng.sample(self.orgs, rng.randint(1, len(self.orgs))))
            b.put_key(pk, EndorsementPolicy(contract, orgs, rng.randint(1, len(orgs))).encode())
        elif roll < 0.90:
            a = rng.randrange(self.accounts)
            k = ycsb_key(self._zipf.sample(rng))
            bal = _num(b.get(self.bank, checking(a)))
            b.get(self.kv, k)
            b.put(self.bank, checking(a), _val(bal - 1))
            b.put(self.kv, k, _filler(a, 2, self.value_size))
        else:
            a = rng.randrange(self.accounts)
            b.get(self.bank, savings(a))
            b.range(self.kv, ycsb_key(0), ycsb_key(rng.randrange(1, self.kv_keys)))
        return b.build(nonce)
