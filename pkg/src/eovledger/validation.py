"""Endorsement-policy and serializability checks for one transaction."""

from __future__ import annotations

from .model import EndorsementPolicy, owner, policy_key


class UnknownPolicy(LookupError):
    pass


def read_policy(engine, contract) -> EndorsementPolicy:
    hit = engine.read_through(policy_key(contract))
    if hit is None:
        raise UnknownPolicy(contract)
    return EndorsementPolicy.decode(hit[0])


def validate_endorsement(tx, engine, keyring, scope=None, verify_cost: float = 0.0,
                         sleep=None) -> bool:
    """Every in-scope invoked contract must collect `threshold` valid endorsements
    from its required orgs. `sleep(verify_cost)` is called once per signature checked."""
    payload = tx.response_bytes()
    checked: dict = {}

    def verified(e):
        if e not in checked:
            if sleep is not None and verify_cost > 0:
                sleep(verify_cost)
            checked[e] = keyring.verify(e.org, payload, e.signature)
        return checked[e]

    for contract in tx.invoked_contracts:
        if scope is not None and contract not in scope:
            continue
        policy = read_policy(engine, contract)
        orgs = {e.org for e in tx.endorsements if e.org in policy.required_orgs and verified(e)}
        if len(orgs) < policy.threshold:
            return False
    return True


def validate_serializability(tx, engine, scope=None) -> bool:
    """Point reads must match the current version exactly (absent matches absent) and
    every range query must return exactly the keys and versions it observed."""
    for e in tx.read_set:
        if scope is not None and owner(e.key) not in scope:
            continue
        hit = engine.read_through(e.key)
        if (hit[1] if hit is not None else None) != e.version:
            return False
    for q in tx.range_queries:
        if scope is not None and q.contract not in scope:
            continue
        now = [(k, ver) for k, _, ver in engine.range_through(q.contract, q.start_key, q.end_key)]
        if now != [(e.key, e.version) for e in q.observed_reads]:
            return False
    return True
