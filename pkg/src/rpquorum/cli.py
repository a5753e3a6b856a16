"""``rpquorum`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .model import ConsensusConfig, parse_peerlist, parse_vrp_file

log = logging.getLogger("rpquorum")


def _cmd_run(args) -> int:
    from .harness import run_cluster
    from .sim import get_scenario

    scenario = get_scenario(args.scenario)
    config = ConsensusConfig(c=args.consensus_factor, staleness_tolerance=args.staleness,
                             poll_period=args.poll_period, blacklist_expiry=args.blacklist_expiry)
    result = run_cluster(args.nodes, scenario, config, duration=args.duration, seed=args.seed,
                         refresh=args.refresh)
    text = result.to_csv(args.format)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
        last = result.samples[-1] if result.samples else None
        if last:
            print(f"{len(result.samples)} samples -> {args.out}; final consensus={last.consensus} "
                  f"union={last.union} ground-truth={len(scenario.ground_truth())}")
    return 0


def _identity_from_args(args):
    from .config import load_config
    from .service import NodeIdentity

    cert, key, root = args.cert, args.key, args.root
    if args.config:
        cfg = load_config(args.config)
        cert, key, root = cert or cfg.cert, key or cfg.key, root or cfg.root
    if not (cert and key and root):
        raise SystemExit("audit needs --cert, --key and --root (or --config)")
    return NodeIdentity("auditor", cert, key, root)


def _cmd_audit(args) -> int:
    from .harness import audit
    from .service import HttpsTransport

    nodes = list(parse_peerlist(Path(args.nodes_file).read_bytes()).peers)
    transport = HttpsTransport(_identity_from_args(args), timeout=args.timeout)
    report = audit(nodes, transport)
    for _ in range(1, args.passes):
        time.sleep(args.interval)
        report = audit(nodes, transport, previous=report)
    sys.stdout.write(report.render())
    if report.unreachable:
        return 2
    return 0 if report.consistent else 1


def _cmd_verify(args) -> int:
    from .harness import verify_presence

    master = parse_vrp_file(Path(args.master).read_bytes())
    reference = parse_vrp_file(Path(args.reference).read_bytes())
    previous = parse_vrp_file(Path(args.previous_reference).read_bytes()) if args.previous_reference else None
    report = verify_presence(master, reference, previous)
    sys.stdout.write(report.render())
    return 0 if report.ok else 1


def _cmd_traffic(args) -> int:
    from .harness import TrafficParams, parse_size, traffic_extrapolation

    params = TrafficParams(args.n_rp, args.n_node, parse_size(args.s_obj), parse_size(args.s_vrp))
    sys.stdout.write(traffic_extrapolation(params).render())
    return 0


def _cmd_certgen(args) -> int:
    from .certs import certgen

    addresses = list(args.address)
    if args.addresses_file:
        addresses += parse_peerlist(Path(args.addresses_file).read_bytes()).peers
    if not addresses:
        raise SystemExit("certgen needs at least one --address")
    root = (Path(args.root_cert), Path(args.root_key)) if args.root_cert else None
    paths = certgen(args.out_dir, addresses, days=args.days, root=root)
    for addr, p in paths.items():
        print(f"{addr}: {p.cert} {p.key}")
    return 0


def _cmd_node(args) -> int:
    from .config import load_config
    from .service import node_main

    cfg = load_config(args.config)
    runtime = node_main(cfg)
    log.info("node %s serving on https :%d, rtr :%d", cfg.address, cfg.https_port, cfg.rtr_port)
    runtime.run_forever()
    return 0


def _cmd_scenarios(args) -> int:
    import json

    from .sim import get_scenario, scenario_presets, scenario_to_json

    if args.dump:
        json.dump(scenario_to_json(get_scenario(args.dump)), sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    for name, sc in scenario_presets().items():
        n_pp = sum(len(p) for p in sc.tals.values())
        print(f"{name}: {n_pp} publication points, {len(sc.ground_truth())} objects, "
              f"refresh {sc.refresh_interval:g}s, {len(sc.schedule)} scheduled switches")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpquorum", description="Consensus over relying-party outputs.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a cluster and write metrics")
    r.add_argument("--nodes", type=int, default=5)
    r.add_argument("--scenario", default="benign-A", help="preset name or scenario JSON file")
    r.add_argument("--consensus-factor", type=float, default=0.5)
    r.add_argument("--refresh", type=float, default=None, help="override the scenario refresh interval")
    r.add_argument("--duration", type=float, default=1800.0, help="virtual seconds")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--staleness", type=float, default=3600.0)
    r.add_argument("--poll-period", type=float, default=10.0)
    r.add_argument("--blacklist-expiry", type=float, default=86400.0)
    r.add_argument("--format", choices=("csv", "gnuplot"), default="csv")
    r.add_argument("--out", default=None, help="output file (default stdout)")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("audit", help="compare the master outputs of running nodes")
    a.add_argument("--nodes-file", required=True, help="one node address per line")
    a.add_argument("--config")
    a.add_argument("--cert")
    a.add_argument("--key")
    a.add_argument("--root")
    a.add_argument("--passes", type=int, default=2)
    a.add_argument("--interval", type=float, default=10.0)
    a.add_argument("--timeout", type=float, default=5.0)
    a.set_defaults(func=_cmd_audit)

    v = sub.add_parser("verify", help="check master objects against a reference run")
    v.add_argument("--master", required=True)
    v.add_argument("--reference", required=True)
    v.add_argument("--previous-reference")
    v.set_defaults(func=_cmd_verify)

    t = sub.add_parser("traffic", help="extrapolate publication point traffic")
    t.add_argument("--n-rp", type=int, required=True)
    t.add_argument("--n-node", type=int, required=True)
    t.add_argument("--s-obj", required=True, help="e.g. 562MB")
    t.add_argument("--s-vrp", required=True, help="e.g. 6.2MB")
    t.set_defaults(func=_cmd_traffic)

    c = sub.add_parser("certgen", help="create a trust root and node certificates")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--address", action="append", default=[])
    c.add_argument("--addresses-file")
    c.add_argument("--root-cert", help="reuse an existing root instead of creating one")
    c.add_argument("--root-key")
    c.add_argument("--days", type=int, default=365)
    c.set_defaults(func=_cmd_certgen)

    n = sub.add_parser("node", help="run a long-lived node")
    n.add_argument("--config", required=True)
    n.set_defaults(func=_cmd_node)

    s = sub.add_parser("scenarios", help="list scenario presets")
    s.add_argument("--dump", metavar="NAME", help="print a preset as scenario JSON")
    s.set_defaults(func=_cmd_scenarios)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
