"""Command line entry point binding all the pieces together."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import baselines, simweb
from .client import ClientConfig, CrawlClient
from .config import (BadConfig, Config, load_config, parse_addr,
                     parse_weights)
from .metrics import CSV_HEADER, MetricsRow
from .runlocal import load_experiment_config, run_local
from .server import SeedServer, ServerConfig

log = logging.getLogger("websailor.cli")


def _setup_logging():
    level_name = os.environ.get("WEBSAILOR_LOG", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname).1s %(name)s: %(message)s",
        datefmt="%H:%M:%S")


def _load_cfg(path: str | None) -> Config:
    return load_config(path) if path else Config()


def _parse_partitions(spec: str):
    groups = []
    for group in spec.split("|"):
        exts = frozenset(tok.strip() for tok in group.split(",") if tok.strip())
        if not exts:
            raise BadConfig("empty partition group in %r" % spec)
        groups.append(exts)
    return groups


# -- subcommand implementations -------------------------------------------------

def cmd_sim(args) -> int:
    if args.sim_cmd == "serve":
        graph = simweb.load_graph(args.graph)
        host, port = parse_addr(args.bind)
        server = simweb.SimWebServer(graph, host=host, port=port,
                                     latency_ms=args.latency_ms,
                                     jitter_ms=args.jitter_ms)
        server.start()
        print("serving %d pages on %s:%d" % (len(graph.nodes), *server.address))
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
        finally:
            server.stop()
        return 0
    weights = parse_weights(args.weights) if args.weights else None
    graph = simweb.generate_ba_graph(args.pages, args.m, args.seed,
                                     ext_weights=weights,
                                     pages_per_host=args.pages_per_host)
    simweb.save_graph(graph, args.out)
    counts = simweb.backlink_counts(graph)
    print("wrote %s: %d nodes, %d edges, max in-degree %d"
          % (args.out, len(graph.nodes), len(graph.edges), max(counts.values())))
    return 0


def cmd_server(args) -> int:
    cfg = _load_cfg(args.config)
    if args.listen:
        cfg.set("listen", args.listen)
    table = cfg.routing_table()
    if not table:
        print("server config needs at least one 'dset' line", file=sys.stderr)
        return 2
    server_cfg = ServerConfig(
        table=table,
        listen=parse_addr(cfg.get("listen", "127.0.0.1:4400")),
        batch_cap=cfg.get("batch_cap", 10, int),
        low_watermark=cfg.get("low_watermark", None, int),
        high_watermark=cfg.get("high_watermark", None, int),
        step=cfg.get("step", 5, int),
        assumed_connections=cfg.get("assumed_connections", 10, int),
        n_buckets=cfg.get("n_buckets", 1024, int),
        parent=parse_addr(cfg.get("parent")) if cfg.get("parent") else None,
        children=cfg.children(),
        redispatch_timeout=cfg.get("redispatch_timeout", None, float),
        snapshot_dir=cfg.get("snapshot_dir"),
    )
    server = SeedServer(server_cfg).start()
    for raw in cfg.lines("seed_url"):
        server.inject_seeds([raw])
    print("seed server on %s:%d" % server.address)
    metrics_csv = cfg.get("metrics_csv")
    period = cfg.get("metrics_period", 1.0, float)
    started = time.monotonic()
    if metrics_csv and not os.path.exists(metrics_csv):
        with open(metrics_csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
    try:
        while True:
            time.sleep(period)
            if metrics_csv:
                now = time.monotonic() - started
                with open(metrics_csv, "a", encoding="utf-8", newline="") as fh:
                    for dset_id, reg in sorted(server.registries.items()):
                        row = MetricsRow(now, "server:%d" % dset_id,
                                         reg.visited_count(), 0,
                                         reg.pending_count(),
                                         server.rate_cmds_by_dset.get(dset_id, 0))
                        fh.write(row.csv_row() + "\n")
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_client(args) -> int:
    cfg = _load_cfg(args.config)
    client_id = args.id or cfg.get("id")
    server_addr = args.server or cfg.get("server")
    dsets = args.dsets or cfg.get("dsets")
    if not (client_id and server_addr and dsets):
        print("client needs --id, --server and --dsets (flags or config)",
              file=sys.stderr)
        return 2
    table = cfg.routing_table() or None
    host_override = cfg.get("host_override")
    client_cfg = ClientConfig(
        client_id=client_id,
        server_addr=parse_addr(str(server_addr)),
        dsets=[int(tok) for tok in str(dsets).split(",")],
        initial_connections=args.connections or cfg.get("connections", 1, int),
        repository_dir=args.repo or cfg.get("repo", "repo"),
        table=table,
        host_override=parse_addr(host_override) if host_override else None,
        fetch_timeout=cfg.get("fetch_timeout", 10.0, float),
        poll_interval=cfg.get("poll_interval", 0.5, float),
        serial=cfg.get("serial", False, bool),
    )
    client = CrawlClient(client_cfg)
    try:
        client.run()
    except KeyboardInterrupt:
        client.stop()
    print("stored %d pages (%d fetch errors)" % (client.pages_stored,
                                                 client.fetch_errors))
    return 0


def cmd_baseline(args) -> int:
    graph = simweb.load_graph(args.graph)
    partitions = _parse_partitions(args.partitions)
    runner = baselines.RUNNERS[args.mode]
    if "," in args.seeds:
        seeds = [int(tok) for tok in args.seeds.split(",")]
    else:
        seeds = int(args.seeds)
    kwargs = dict(seeds_per_crawler=seeds, rounds=args.rounds,
                  slots=args.slots)
    if args.mode == "websailor":
        kwargs["batch_cap"] = args.batch_cap
    result = runner(graph, partitions, **kwargs)
    line = result.csv_row()
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(baselines.BaselineMetrics.CSV_HEADER + "\n")
            fh.write(line + "\n")
    print(baselines.BaselineMetrics.CSV_HEADER)
    print(line)
    return 0


def cmd_run_local(args) -> int:
    cfg = _load_cfg(args.config)
    if args.duration is not None:
        cfg.set("duration", args.duration)
    exp = load_experiment_config(cfg)
    out_dir = args.out_dir or cfg.get("out_dir", "run-out")
    result = run_local(exp, out_dir)
    print(result.summary_path.read_text(), end="")
    if args.plots:
        from .plots import render_report
        for path in render_report(result.metrics_path, out_dir=result.out_dir):
            print("figure: %s" % path)
    return result.exit_code


def cmd_report(args) -> int:
    from .plots import render_report
    for path in render_report(args.metrics, out_dir=args.out, window=args.window):
        print("figure: %s" % path)
    return 0


# -- argument wiring -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="websailor",
        description="server-centric parallel crawler and its test harness")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_server = sub.add_parser("server", help="run a seed server")
    p_server.add_argument("--config", help="config file (dset lines, watermarks, ...)")
    p_server.add_argument("--listen", help="host:port to bind")
    p_server.set_defaults(func=cmd_server)

    p_client = sub.add_parser("client", help="run a crawl client")
    p_client.add_argument("--config")
    p_client.add_argument("--id")
    p_client.add_argument("--server", help="seed server host:port")
    p_client.add_argument("--dsets", help="comma-separated dset ids")
    p_client.add_argument("--connections", type=int)
    p_client.add_argument("--repo", help="page repository directory")
    p_client.set_defaults(func=cmd_client)

    p_sim = sub.add_parser("sim", help="generate or serve a synthetic web")
    p_sim.add_argument("--pages", type=int, default=1000)
    p_sim.add_argument("--m", type=int, default=3)
    p_sim.add_argument("--seed", type=int, default=1)
    p_sim.add_argument("--weights", help=".com=0.5,.edu=0.2,...")
    p_sim.add_argument("--pages-per-host", type=int, default=1)
    p_sim.add_argument("--out", default="web.graph")
    sim_sub = p_sim.add_subparsers(dest="sim_cmd")
    p_sim_serve = sim_sub.add_parser("serve", help="serve a graph file over HTTP")
    p_sim_serve.add_argument("--graph", required=True)
    p_sim_serve.add_argument("--bind", default="127.0.0.1:8080")
    p_sim_serve.add_argument("--latency-ms", type=float, default=0.0)
    p_sim_serve.add_argument("--jitter-ms", type=float, default=0.0)
    p_sim.set_defaults(func=cmd_sim)

    p_base = sub.add_parser("baseline", help="run a static-coordination simulation")
    p_base.add_argument("--mode", required=True, choices=sorted(baselines.RUNNERS))
    p_base.add_argument("--graph", required=True)
    p_base.add_argument("--partitions", required=True,
                        help="extension groups, e.g. '.com|.edu,.net|.org'")
    p_base.add_argument("--seeds", default="1",
                        help="seeds per crawler: one int or comma list")
    p_base.add_argument("--rounds", type=int, default=None)
    p_base.add_argument("--slots", type=int, default=1)
    p_base.add_argument("--batch-cap", type=int, default=10)
    p_base.add_argument("--out", help="write metrics CSV here")
    p_base.set_defaults(func=cmd_baseline)

    p_run = sub.add_parser("run-local", help="orchestrate a full local experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--duration", type=float, default=None)
    p_run.add_argument("--out-dir")
    p_run.add_argument("--plots", action="store_true",
                       help="also render report figures")
    p_run.set_defaults(func=cmd_run_local)

    p_report = sub.add_parser("report", help="render figures for a metrics CSV")
    p_report.add_argument("--metrics", required=True)
    p_report.add_argument("--out", help="directory for figures (default: beside CSV)")
    p_report.add_argument("--window", type=float, default=5.0)
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BadConfig as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
