"""``ubfsim`` command line.

Exit codes: 0 clean, 1 usage or I/O error, 2 isolation violations found.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .directory import Directory
from .errors import UbfsimError
from .host import Host
from .ident import IDENT_PORT, IdentServer
from .isolation import check_isolation
from .scenario import load_scenario
from .sim import run

log = logging.getLogger("ubfsim")

EXIT_CLEAN, EXIT_ERROR, EXIT_VIOLATIONS = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 means violations here
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    try:
        return int(os.environ.get("UBFSIM_SEED", "0"))
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ubfsim", description="User-separation cluster simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("run", "check"):
        p = sub.add_parser(name, help="simulate a scenario and check isolation")
        p.add_argument("scenario", type=Path)
        p.add_argument("--seed", type=int, default=None,
                       help="tie-break seed (default: $UBFSIM_SEED or 0)")
        p.add_argument("--trace", type=Path, help="write the JSON-lines trace here")
        p.add_argument("--report", choices=("text", "json"), default="text")
    p = sub.add_parser("ident-serve", help="serve identity queries for one registry host")
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--port", type=int, default=IDENT_PORT)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--host", dest="host_id", help="host id in the registry (default: first)")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    seed = _default_seed() if args.seed is None else args.seed
    trace = run(scenario, seed)
    if args.trace:
        trace.dump(args.trace)
    report = check_isolation(scenario, trace)
    sys.stdout.write(report.to_json() + "\n" if args.report == "json" else report.to_text())
    return EXIT_CLEAN if report.clean else EXIT_VIOLATIONS


def load_registry(path: Path, host_id: str | None = None) -> Host:
    data = json.loads(path.read_text(encoding="utf-8"))
    directory = Directory.from_dict(data)
    hosts = data.get("hosts", [])
    if not hosts:
        raise UbfsimError(f"{path}: registry lists no hosts")
    entry = hosts[0] if host_id is None else next((h for h in hosts if h["id"] == host_id), None)
    if entry is None:
        raise UbfsimError(f"{path}: no host {host_id!r}")
    return Host.from_dict(entry, directory)


def _cmd_ident_serve(args: argparse.Namespace) -> int:
    host = load_registry(args.registry, args.host_id)
    with IdentServer(host, (args.bind, args.port)) as server:
        log.info("serving identity queries for %s on %s:%d", host.host_id, args.bind,
                 server.server_address[1])
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return EXIT_CLEAN


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command in ("run", "check"):
            return _cmd_run(args)
        return _cmd_ident_serve(args)
    except (UbfsimError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"ubfsim: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
