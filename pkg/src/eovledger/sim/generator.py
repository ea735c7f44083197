"""Block streams with simulated endorsement.

Each transaction is simulated against a view of the ledger `lag` blocks
behind the tip (lag 0 also sees the earlier transactions of the block being
built, as if endorsed on a peer that already validated them), endorsed by the
orgs that the view's policy requires, and then fed to a serial validator so
the next views stay current.
"""

from __future__ import annotations

import random
from collections import deque
from typing import Optional

from ..model import ZERO_HASH, Endorsement, EndorsementPolicy, TxRef, Version, policy_key, seal_block
from .oracle import DictView, SerialValidator


def default_policies(contracts, orgs=("orgA", "orgB", "orgC"), threshold=1) -> list:
    return [(policy_key(c), EndorsementPolicy(c, frozenset(orgs[:2]), threshold).encode())
            for c in contracts]


def versioned(entries) -> list:
    """Stamp seed entries with versions (0, i)."""
    return [(k, v, Version(0, i)) for i, (k, v) in enumerate(entries)]


class StreamGenerator:
    def __init__(self, workload, keyring, seed: int = 0, lags=(0,), dup_rate: float = 0.0,
                 bad_endorsement_rate: float = 0.0, policies=None):
        self.workload = workload
        self.keyring = keyring
        self.rng = random.Random(seed)
        self.lags = tuple(lags)
        self.dup_rate = dup_rate
        self.bad_endorsement_rate = bad_endorsement_rate
        if policies is None:
            policies = default_policies(workload.contracts, tuple(keyring.orgs))
        self.seed_entries = versioned(list(policies) + workload.seed())
        self.oracle = SerialValidator(keyring, self.seed_entries)
        self.flags: dict = {}
        self.number = 0
        self.prev_hash = ZERO_HASH
        self.blocks: list = []
        self._keep_blocks = True
        self._recent: deque = deque(maxlen=256)
        self._history: deque = deque(maxlen=max(self.lags) + 1)
        if max(self.lags) > 0:
            self._history.append(dict(self.oracle.state))
        self._nonce = 0

    def _view(self, lag):
        if lag == 0 or not self._history:
            return self.oracle.view()
        idx = max(0, len(self._history) - lag)
        return DictView(self._history[idx])

    def endorse(self, tx, view):
        orgs = set()
        for c in tx.invoked_contracts:
            hit = view.get(policy_key(c))
            if hit is not None:
                orgs |= EndorsementPolicy.decode(hit[0]).required_orgs
        orgs = sorted(orgs) or self.keyring.orgs[:1]
        tx = self.keyring.endorse(tx, orgs)
        if self.bad_endorsement_rate and self.rng.random() < self.bad_endorsement_rate:
            tx = tx.with_endorsements(Endorsement(e.org, bytes(b ^ 0xFF for b in e.signature))
                                      for e in tx.endorsements)
        return tx

    def next_tx(self, view=None):
        if self._recent and self.dup_rate and self.rng.random() < self.dup_rate:
            return self.rng.choice(list(self._recent))
        if view is None:
            view = self._view(self.rng.choice(self.lags))
        self._nonce += 1
        tx = self.workload.next_tx(self.rng, view, self._nonce.to_bytes(8, "big"))
        tx = self.endorse(tx, view)
        self._recent.append(tx)
        return tx

    def seal(self, txs):
        self.number += 1
        block = seal_block(self.number, self.prev_hash, txs)
        self.prev_hash = block.block_hash
        if self._keep_blocks:
            self.blocks.append(block)
        return block

    def next_block(self, size: int, view=None):
        txs = []
        for i in range(size):
            tx = self.next_tx(view)
            self.flags[TxRef(self.number + 1, i)] = self.oracle.process(tx, TxRef(self.number + 1, i))
            txs.append(tx)
        if self._history.maxlen > 1:
            self._history.append(dict(self.oracle.state))
        return self.seal(txs)

    def stream(self, block_count: int, size, rng_sizes: Optional[tuple] = None) -> list:
        out = []
        for _ in range(block_count):
            n = size if rng_sizes is None else self.rng.randint(*rng_sizes)
            out.append(self.next_block(n))
        return out
