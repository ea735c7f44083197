"""Reference serial validator.

Validates transactions one at a time in block order against a plain dict of
committed state, applying each valid write-set before the next transaction.
It shares no code with the pipeline beyond the data types and the keyed
digest check, so it can serve as ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..model import EndorsementPolicy, TxRef, TxValidity, Version, owner, policy_key
from ..state import state_digest


class DictView:
    """Read view over a {StateKey: (value, Version)} dict."""

    def __init__(self, state: dict):
        self.state = state

    def get(self, key):
        return self.state.get(key)

    def scan(self, contract, start, end):
        keys = sorted(k for k in self.state
                      if k.contract == contract and k.key >= start and (end is None or k.key < end))
        return [(k, *self.state[k]) for k in keys]


class SerialValidator:
    def __init__(self, keyring, seed=()):
        self.keyring = keyring
        self.state: dict = {}
        self.seen: set = set()
        for key, value, version in seed:
            self.state[key] = (value, Version(*version))

    def view(self) -> DictView:
        return DictView(self.state)

    def _endorsed(self, tx) -> bool:
        payload = tx.response_bytes()
        for c in tx.invoked_contracts:
            hit = self.state.get(policy_key(c))
            if hit is None:
                return False
            policy = EndorsementPolicy.decode(hit[0])
            orgs = {e.org for e in tx.endorsements
                    if e.org in policy.required_orgs and self.keyring.verify(e.org, payload, e.signature)}
            if len(orgs) < policy.threshold:
                return False
        return True

    def _fresh(self, tx) -> bool:
        for e in tx.read_set:
            hit = self.state.get(e.key)
            if (hit[1] if hit else None) != e.version:
                return False
        view = self.view()
        for q in tx.range_queries:
            now = [(k, ver) for k, _, ver in view.scan(q.contract, q.start_key, q.end_key)]
            if now != [(e.key, e.version) for e in q.observed_reads]:
                return False
        return True

    def process(self, tx, ref) -> TxValidity:
        if tx.tx_id in self.seen:
            return TxValidity.INVALID_DUPLICATE
        self.seen.add(tx.tx_id)
        if not self._endorsed(tx):
            return TxValidity.INVALID_ENDORSEMENT
        if not self._fresh(tx):
            return TxValidity.INVALID_SERIALIZABILITY
        for w in tx.write_set:
            if w.is_delete:
                self.state.pop(w.key, None)
            else:
                self.state[w.key] = (w.value, Version(*ref))
        return TxValidity.VALID

    def digest(self, contracts=None) -> bytes:
        return state_digest([(k, v, ver) for k, (v, ver) in self.state.items()
                             if contracts is None or owner(k) in contracts])


@dataclass
class OracleResult:
    flags: dict  # TxRef -> TxValidity
    digest: bytes
    state: dict

    def bitmap(self) -> dict:
        return {ref: f == TxValidity.VALID for ref, f in self.flags.items()}


def serial_oracle(blocks, keyring, seed=()) -> OracleResult:
    v = SerialValidator(keyring, seed)
    flags = {}
    for block in blocks:
        for i, tx in enumerate(block.txs):
            flags[TxRef(block.number, i)] = v.process(tx, TxRef(block.number, i))
    return OracleResult(flags, v.digest(), dict(v.state))
