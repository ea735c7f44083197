"""Command line entry points: scenario runs, oracle checks, benchmarks, fixtures."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .encoding import sha256
from .sim import bench
from .sim.fixtures import golden_checks
from .sim.scenario import ConfigInvalid, ScenarioConfig, run_scenario
from .state import BlockStore, replay

log = logging.getLogger(__name__)


def _load(path) -> ScenarioConfig:
    return ScenarioConfig.from_file(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stores = out / "stores"
    stores.mkdir(exist_ok=True)
    report = run_scenario(cfg, store_dir=str(stores))
    for p in report.peers:
        (out / f"metrics-{p.peer_id}.csv").write_text(p.csv)
    (out / "summary.txt").write_text(report.summary())
    lines = [f"oracle\t{report.oracle_digest.hex()}"]
    lines += [f"org{o.org}\t{o.digest.hex()}" for o in report.orgs]
    lines += [f"{p.peer_id}\t{p.digest.hex()}" for p in report.peers]
    (out / "digests.txt").write_text("\n".join(lines) + "\n")
    sys.stdout.write(report.summary())
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _load(args.config)
    report = run_scenario(cfg)
    ok = report.matches_oracle and all(o.consistent for o in report.orgs)
    for o in report.orgs:
        bitmap_ok = report.bitmap(o.org) == report.oracle_bitmap
        print(f"org {o.org}: bitmap {'match' if bitmap_ok else 'MISMATCH'}, "
              f"state {'match' if o.digest == report.oracle_digest else 'MISMATCH'}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = _load(args.config)
    keyring, gen, blocks = bench.make_stream(cfg)
    seed = gen.seed_entries
    if args.baseline == "serial":
        run = bench.run_serial(cfg, keyring, seed, blocks)
    elif args.baseline == "pipelined":
        run = bench.run_pipelined(cfg, keyring, seed, blocks)
    else:
        if cfg.filters_per_peer == 0:
            raise ConfigInvalid("filters_per_peer", "the sparse benchmark needs sparse peers")
        run = bench.run_org(cfg, keyring, seed, blocks, sparse=True)
    print(f"mode={run.mode} transactions={run.transactions} seconds={run.seconds:.3f} "
          f"tps={run.tps:.1f} overlap={run.overlap}")
    for pid, work in sorted(run.per_peer_work.items()):
        print(f"  {pid} committed={work}")
    return 0


def cmd_golden(args) -> int:
    ok = True
    for name, passed in golden_checks():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return 0 if ok else 1


def cmd_dump_state(args) -> int:
    store = BlockStore.load(args.store)
    db = replay(store, scope=args.contract or None, upto=args.upto)
    for k, v, ver in db.items():
        print(f"{k.contract}\t{k.key.hex()}\t{ver.block}\t{ver.tx}\t{sha256(v).hex()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eovledger")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario in virtual time and write metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("oracle-check", help="compare a scenario run with the serial validator")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_oracle_check)

    p = sub.add_parser("bench", help="wall-clock throughput of one execution mode")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", choices=("serial", "pipelined", "sparse"), required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("golden", help="replay the hand-built scenarios")
    p.set_defaults(fn=cmd_golden)

    p = sub.add_parser("dump-state", help="rebuild and print the state held in a block store")
    p.add_argument("--store", required=True)
    p.add_argument("--contract", action="append")
    p.add_argument("--upto", type=int)
    p.set_defaults(fn=cmd_dump_state)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
