from pathlib import Path

import pytest

from conftest import ORGS, key, make_tx, put
from eovledger.cli import main
from eovledger.model import KeyRing, TxValidity
from eovledger.sim.generator import StreamGenerator
from eovledger.sim.runtime import EventLoop, Orderer
from eovledger.sim.scenario import ConfigInvalid, ScenarioConfig, make_generator, run_scenario
from eovledger.sim.workloads import ContractWorkload
from eovledger.sparse import Filter, SparseBlock
from eovledger.state import BlockStore, replay

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_event_loop_orders_by_time_then_insertion():
    loop, seen = EventLoop(), []
    loop.at(2.0, seen.append, "c")
    loop.at(1.0, seen.append, "a")
    loop.at(1.0, seen.append, "b")
    loop.run()
    assert seen == ["a", "b", "c"] and loop.now == 2.0


def test_orderer_cuts_full_blocks_and_flushes():
    o = Orderer(100)
    for i in range(250):
        o.submit(make_tx(None, f"n{i}", (), [put(key("c0", f"k{i}"))]))
    blocks = o.cut()
    assert [b.tx_count for b in blocks] == [100, 100]
    blocks += o.cut(flush=True)
    assert [b.tx_count for b in blocks] == [100, 100, 50]
    assert all(b.prev_hash == a.block_hash for a, b in zip(blocks, blocks[1:]))


def test_orderer_payload_sizes():
    ring = KeyRing.for_orgs(ORGS)
    w = ContractWorkload(("c0", "c1", "c2", "c3"), "smallbank", accounts=50, value_size=10)
    gen = StreamGenerator(w, ring, seed=1)
    blocks = gen.stream(4, 100)
    sparse, full = Orderer(100, sparse=True), Orderer(100, sparse=False)
    for o in (sparse, full):
        o.register(Filter("s", {"c0"}))
        o.register(Filter.full("f"))
    for b in blocks:
        sparse.add_block(b)
        full.add_block(b)
        assert isinstance(sparse.payload_for("s", b), SparseBlock)
        sparse.payload_for("f", b)
        full.payload_for("s", b)
        full.payload_for("f", b)
    ratio = sparse.bytes_sent["s"] / sparse.bytes_sent["f"]
    assert 0.15 < ratio < 0.4  # a quarter of the bodies plus the id vector
    assert full.bytes_sent["s"] == full.bytes_sent["f"] == sparse.bytes_sent["f"]


def test_config_text_round_trip():
    cfg = ScenarioConfig(peers_per_org=2, filters_per_peer=1, contracts=("a", "b"),
                         peer_speeds=(1.0, 0.5), sparse_blocks=False, seed=9)
    assert ScenarioConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,field", [
    ("bogus = 1", "bogus"),
    ("seed = 1\nseed = 2", "seed"),
    ("block_size = many", "block_size"),
    ("block_size = 0", "block_size"),
    ("workload = tpcc", "workload"),
    ("protocol = eager", "protocol"),
    ("filters_per_peer = 9", "filters_per_peer"),
    ("peer_speeds = 1.0,-2", "peer_speeds"),
    ("jitter = 1.5", "jitter"),
    ("just words", "line 1"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigInvalid) as exc:
        ScenarioConfig.from_text(text)
    assert exc.value.field == field


def test_config_comments_and_blank_lines():
    cfg = ScenarioConfig.from_text("# heading\n\nseed = 4  # trailing\ncontracts = x, y\n")
    assert cfg.seed == 4 and cfg.contracts == ("x", "y")


def test_shipped_configs_parse():
    for path in CONFIGS.glob("*.conf"):
        ScenarioConfig.from_file(path)


def small_org(**kw):
    base = dict(peers_per_org=2, filters_per_peer=2, contracts=("c0", "c1", "c2", "c3"),
                block_size=30, block_count=8, account_count=40, value_size_bytes=10,
                cross_contract_fraction=0.3, jitter=0.3, seed=5)
    base.update(kw)
    return ScenarioConfig(**base)


def test_runs_are_deterministic():
    a, b = run_scenario(small_org()), run_scenario(small_org())
    assert a.summary() == b.summary()
    assert [p.csv for p in a.peers] == [p.csv for p in b.peers]
    assert [p.digest for p in a.peers] == [p.digest for p in b.peers]


def test_partitions_reassemble_the_full_state():
    report = run_scenario(small_org(org_count=2, peers_per_org=2))
    for org in report.orgs:
        assert org.digest == report.oracle_digest and org.consistent
    assert report.matches_oracle
    assert all(p.contracts and len(p.contracts) == 2 for p in report.peers)


def test_invalidations_grow_with_endorsement_staleness():
    counts = []
    for lag in (0, 1, 2, 4):
        total = 0
        for seed in range(2):
            cfg = ScenarioConfig(contracts=("y",), workload="ycsb", account_count=200, zipf_s=0.9,
                                 value_size_bytes=16, block_size=20, block_count=15,
                                 endorsement_lag=lag, seed=seed)
            gen = make_generator(cfg, KeyRing.for_orgs(ORGS, seed=seed))
            gen.stream(cfg.block_count, cfg.block_size)
            total += sum(f == TxValidity.INVALID_SERIALIZABILITY for f in gen.flags.values())
        counts.append(total)
    assert counts[0] == 0
    assert counts == sorted(counts) and counts[-1] > counts[1]


# -- command line ------------------------------------------------------------------------

def write_config(tmp_path, text):
    path = tmp_path / "s.conf"
    path.write_text(text)
    return str(path)


TINY = """
peers_per_org = 2
filters_per_peer = 1
contracts = a,b
block_size = 10
block_count = 4
account_count = 30
value_size_bytes = 10
cross_contract_fraction = 0.5
"""


def test_cli_run_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "summary.txt").read_text() == capsys.readouterr().out
    assert sorted(p.name for p in out.glob("metrics-*.csv")) == ["metrics-o0p0.csv", "metrics-o0p1.csv"]
    digests = dict(line.split("\t") for line in (out / "digests.txt").read_text().splitlines())
    assert digests["oracle"] == digests["org0"]
    # the stored chain rebuilds the same state as the live peer
    store = out / "stores" / "o0p0.blk"
    assert replay(BlockStore.load(str(store))).digest().hex() == digests["o0p0"]
    assert main(["dump-state", "--store", str(store)]) == 0
    dumped = capsys.readouterr().out.splitlines()
    assert dumped and all(line.split("\t")[0] in ("a", "_policy") for line in dumped)


def test_cli_oracle_check(capsys):
    assert main(["oracle-check", "--config", str(CONFIGS / "mixed.conf")]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_cli_golden(capsys):
    assert main(["golden"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 4


@pytest.mark.parametrize("mode", ["serial", "pipelined", "sparse"])
def test_cli_bench(tmp_path, capsys, mode):
    cfg = write_config(tmp_path, TINY)
    assert main(["bench", "--config", cfg, "--baseline", mode]) == 0
    assert f"mode={mode}" in capsys.readouterr().out


def test_cli_rejects_bad_config(tmp_path, capsys):
    cfg = write_config(tmp_path, "block_size = -3\n")
    assert main(["oracle-check", "--config", cfg]) == 2
    assert "block_size" in capsys.readouterr().err
