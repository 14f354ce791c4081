"""``redy`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import re
import sys
import time

from .core import GiB, MiB, SearchSpaceBounds, Slo
from .errors import CapacityUnavailable, ConfigError, SloUnsatisfiable

EXIT_OK, EXIT_CONFIG, EXIT_SLO, EXIT_CAPACITY = 0, 2, 3, 4
_UNITS = {"": 1, "b": 1, "k": 1024, "kib": 1024, "m": MiB, "mib": MiB, "g": GiB, "gib": GiB}


def parse_size(text: str) -> int:
    """'64', '4KiB', '1.5GiB' -> bytes."""
    m = re.fullmatch(r"\s*([0-9.]+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def parse_slo(text: str, record_size: int) -> Slo:
    """'read_lat,write_lat[,read_mops,write_mops]' in microseconds and MOPS."""
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad SLO {text!r}") from None
    if len(vals) not in (2, 4):
        raise ConfigError("SLO needs 2 or 4 comma-separated numbers")
    if len(vals) == 2:
        vals += [0.0, 0.0]
    return Slo(record_size, *vals)


def parse_schedule(text: str) -> list[tuple[int, int]]:
    """'1:1,2:2,3:4' -> [(phase, regions), ...]."""
    if not text:
        return []
    try:
        return [(int(a), int(b)) for a, b in (p.split(":") for p in text.split(","))]
    except ValueError:
        raise ConfigError(f"bad schedule {text!r}") from None


def _cluster_config(path):
    from .bench import default_cluster
    from .clustersim import ClusterConfig
    return ClusterConfig.from_file(path) if path else default_cluster()


# -- subcommands -------------------------------------------------------------------------------

def cmd_model(args) -> int:
    from .perfmodel import SimMeasuredOracle, SyntheticOracle, offline_model
    bounds = SearchSpaceBounds.for_record_size(args.max_c, args.record_size, args.q_min, args.max_q)
    oracle = SyntheticOracle() if args.oracle == "synthetic" else SimMeasuredOracle()
    t = time.perf_counter()
    model = offline_model(bounds, oracle, args.record_size, args.distance, dense=args.dense)
    out = args.out or f"model_r{args.record_size}_d{args.distance}.csv"
    model.to_csv(out)
    print(f"{model.leaf_count} configurations written to {out} in {time.perf_counter() - t:.2f}s")
    return EXIT_OK


def cmd_search(args) -> int:
    from .perfmodel import PerfModel, SyntheticOracle, offline_model, search
    slo = parse_slo(args.slo, args.record_size)
    if args.model:
        model = PerfModel.from_csv(args.model, args.record_size, args.distance)
    else:
        bounds = SearchSpaceBounds.for_record_size(args.max_c, args.record_size, 1, args.max_q)
        model = offline_model(bounds, SyntheticOracle(), args.record_size, args.distance)
    t = time.perf_counter()
    res = search(model, slo)
    dt = time.perf_counter() - t
    if not res.found:
        print(f"no configuration meets the SLO ({res.visited} leaves visited, {dt:.4f}s)")
        return EXIT_SLO
    p = model.point(*res.config.as_tuple())
    print(f"config c={res.config.c} s={res.config.s} b={res.config.b} q={res.config.q}")
    print(f"read {p.read_latency_us:.3f} us {p.read_mops:.3f} MOPS; "
          f"write {p.write_latency_us:.3f} us {p.write_mops:.3f} MOPS")
    print(f"visited {res.visited} of {model.leaf_count} leaves in {dt:.4f}s")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("c,s,b,q,read_latency_us,write_latency_us,read_mops,write_mops\n")
            fh.write(f"{res.config.c},{res.config.s},{res.config.b},{res.config.q},{p.read_latency_us},"
                     f"{p.write_latency_us},{p.read_mops},{p.write_mops}\n")
    return EXIT_OK


def _block(duration: float | None) -> None:
    try:
        if duration is None:
            while True:
                time.sleep(3600)
        time.sleep(duration)
    except KeyboardInterrupt:
        pass


def cmd_serve(args) -> int:
    from .server import CacheServer
    from .transport.sock import SocketServerEndpoint
    host = CacheServer(args.name, args.memory, args.region_size, args.server_threads)
    ep = SocketServerEndpoint(host, args.host, args.port)
    print(f"serving {args.name} on {ep.address[0]}:{ep.address[1]}", flush=True)
    _block(args.duration)
    ep.stop()
    return EXIT_OK


def cmd_manage(args) -> int:
    from .clustersim import ClusterSim
    from .manager import CacheManager, ManagerRpcServer, ModelStore
    models = ModelStore.from_dir(args.models) if args.models else ModelStore()
    mgr = CacheManager(ClusterSim(_cluster_config(args.cluster), args.seed), models)
    srv = ManagerRpcServer(mgr, args.host, args.port)
    print(f"manager listening on {srv.address[0]}:{srv.address[1]}", flush=True)
    _block(args.duration)
    srv.stop()
    return EXIT_OK


def cmd_cluster(args) -> int:
    from .clustersim import ClusterSim
    sim = ClusterSim(_cluster_config(args.cluster), args.seed)
    log = sim.run(args.horizon)
    out = args.out or "cluster_log.csv"
    sim.write_log(out)
    kinds: dict[str, int] = {}
    for e in log:
        kinds[e.kind] = kinds.get(e.kind, 0) + 1
    print(f"{len(log)} events to {out}: " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .workload import WorkloadSpec
    spec = WorkloadSpec(args.distribution, args.theta, args.records, args.key_size, args.value_size,
                        args.read_fraction, args.threads, args.seed)
    tier = {"cache_size": args.cache_size, "memory_budget": args.memory_budget,
            "segment_size": args.segment_size, "ssd_latency_us": args.ssd_latency, "use_redy": args.redy_tier}
    rows = run_bench(spec, args.target, args.backend, args.out, args.duration, args.interval, args.window,
                     ops=args.ops, tier_options=tier)
    if not args.out:
        from .bench import BENCH_COLUMNS
        print(",".join(BENCH_COLUMNS))
        for r in rows:
            print(",".join(str(x) for x in r))
    else:
        total = sum(r[4] for r in rows)
        print(f"{len(rows)} rows, {total} ops written to {args.out}")
    return EXIT_OK


def cmd_migrate_demo(args) -> int:
    from .bench import migrate_demo
    if args.backend != "sim":
        raise ConfigError("migrate-demo runs on the sim backend only")
    res = migrate_demo(parse_schedule(args.schedule), args.regions, not args.no_optimize, args.region_size,
                       args.phase_ms * 1000.0, args.interval_ms * 1000.0, args.threads, args.rate,
                       args.read_fraction, args.seed, args.out)
    for e in res.events:
        print(f"t={e['start'] / 1e6:.3f}s moved {e['k']} region(s) in {(e['finish'] - e['start']) / 1e3:.2f} ms: "
              f"read dip {e['read_dip']:.1%}, write dip {e['write_dip']:.1%}")
    print(f"paused reads {res.paused_reads}, lost writes {res.lost_writes}, stale reads {res.stale_reads}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--backend", choices=["sim", "socket"], default="sim")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", default=None, help="output file")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="redy", description="Remote dynamic memory cache tools")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("model", parents=[shared], help="build an offline performance model (CSV)")
    m.add_argument("--record-size", type=parse_size, default=8)
    m.add_argument("--distance", type=int, choices=[1, 3, 5], default=1)
    m.add_argument("--max-c", type=int, default=8)
    m.add_argument("--max-q", type=int, default=16)
    m.add_argument("--q-min", type=int, default=1)
    m.add_argument("--oracle", choices=["synthetic", "sim"], default="synthetic")
    m.add_argument("--dense", action="store_true", help="measure every grid point")
    m.set_defaults(fn=cmd_model)

    s = sub.add_parser("search", parents=[shared], help="find the first config meeting an SLO")
    s.add_argument("--slo", required=True, help="read_lat_us,write_lat_us[,read_mops,write_mops]")
    s.add_argument("--model", help="model CSV (default: build from the synthetic oracle)")
    s.add_argument("--record-size", type=parse_size, default=8)
    s.add_argument("--distance", type=int, choices=[1, 3, 5], default=1)
    s.add_argument("--max-c", type=int, default=8)
    s.add_argument("--max-q", type=int, default=16)
    s.set_defaults(fn=cmd_search)

    v = sub.add_parser("serve", parents=[shared], help="run a VM cache agent on a TCP port")
    v.add_argument("--name", default="vm0")
    v.add_argument("--memory", type=parse_size, default=GiB)
    v.add_argument("--region-size", type=parse_size, default=64 * MiB)
    v.add_argument("--server-threads", type=int, default=1)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=0)
    v.add_argument("--duration", type=float, default=None, help="seconds to serve (default: until Ctrl-C)")
    v.set_defaults(fn=cmd_serve)

    g = sub.add_parser("manage", parents=[shared], help="run the cache manager RPC service")
    g.add_argument("--cluster", help="cluster config JSON")
    g.add_argument("--models", help="directory of model_r<bytes>_d<switches>.csv files")
    g.add_argument("--host", default="127.0.0.1")
    g.add_argument("--port", type=int, default=0)
    g.add_argument("--duration", type=float, default=None)
    g.set_defaults(fn=cmd_manage)

    c = sub.add_parser("cluster", parents=[shared], help="simulate stranding and reclamation; write the event log")
    c.add_argument("--cluster", help="cluster config JSON")
    c.add_argument("--horizon", type=float, default=3600.0, help="seconds of cluster time")
    c.set_defaults(fn=cmd_cluster)

    b = sub.add_parser("bench", parents=[shared], help="closed-loop benchmark; one CSV row per interval")
    b.add_argument("--target", choices=["cache-direct", "tieredkv"], default="cache-direct")
    b.add_argument("--distribution", choices=["uniform", "zipfian"], default="uniform")
    b.add_argument("--theta", type=float, default=0.99)
    b.add_argument("--records", type=int, default=10 ** 6)
    b.add_argument("--key-size", type=int, default=8)
    b.add_argument("--value-size", type=int, default=8)
    b.add_argument("--read-fraction", type=float, default=1.0)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--window", type=int, default=1, help="outstanding ops per thread (cache-direct)")
    b.add_argument("--duration", type=float, default=0.01, help="seconds of virtual (sim) or wall time")
    b.add_argument("--interval", type=float, default=None, help="row interval in seconds (default: duration)")
    b.add_argument("--ops", type=int, default=None, help="stop after this many ops")
    b.add_argument("--cache-size", type=parse_size, default=8 * MiB, help="tieredkv tier-1 size")
    b.add_argument("--memory-budget", type=parse_size, default=MiB, help="tieredkv in-memory log budget")
    b.add_argument("--segment-size", type=parse_size, default=16 * 1024)
    b.add_argument("--ssd-latency", type=float, default=100.0, help="emulated SSD latency (us)")
    b.add_argument("--redy-tier", action="store_true", help="back tieredkv tier 1 with a Redy cache")
    b.set_defaults(fn=cmd_bench)

    d = sub.add_parser("migrate-demo", parents=[shared], help="migrate regions under load; timeline CSV")
    d.add_argument("--regions", type=int, default=7)
    d.add_argument("--schedule", default="1:1,2:2,3:4", help="phase:count pairs")
    d.add_argument("--no-optimize", action="store_true", help="pause reads and writes during migration")
    d.add_argument("--region-size", type=parse_size, default=4 * MiB)
    d.add_argument("--phase-ms", type=float, default=30.0)
    d.add_argument("--interval-ms", type=float, default=1.0)
    d.add_argument("--threads", type=int, default=2)
    d.add_argument("--rate", type=float, default=0.2, help="offered load in MOPS")
    d.add_argument("--read-fraction", type=float, default=0.5)
    d.set_defaults(fn=cmd_migrate_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except SloUnsatisfiable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SLO
    except CapacityUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
