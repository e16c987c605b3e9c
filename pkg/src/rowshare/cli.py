"""``rowshare`` command line: agent operations, the synchronizer, and the benchmark.

Agent subcommands load the journal, run one operation, and save again. Output
is line-oriented: rows print as one JSON object per line, counters as plain
integers or ``key=value`` pairs.

Exit codes:

====  =====================================================
0     success
1     other local error (bad input, missing file)
2     command-line usage error
10    AUTH_FAILED
11    NOT_FOUND (including unknown local rows)
12    AFFIRMATIVELY_ABSENT
13    SIGNATURE_INVALID
14    METHOD_UNKNOWN
15    SCHEMA_ERROR (including local schema violations)
16    FRAME_TOO_LARGE
17    INTERNAL
20    synchronizer unreachable / row unavailable
21    row revoked
22    integrity failure (row quarantined)
23    listen address already in use
====  =====================================================
"""

from __future__ import annotations

import argparse
import errno
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .errors import ErrorCode, RowshareError, SchemaError, ServiceError, TransportError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CODES = {
    ErrorCode.AUTH_FAILED: 10,
    ErrorCode.NOT_FOUND: 11,
    ErrorCode.AFFIRMATIVELY_ABSENT: 12,
    ErrorCode.SIGNATURE_INVALID: 13,
    ErrorCode.METHOD_UNKNOWN: 14,
    ErrorCode.SCHEMA_ERROR: 15,
    ErrorCode.FRAME_TOO_LARGE: 16,
    ErrorCode.INTERNAL: 17,
}
EXIT_UNAVAILABLE = 20
EXIT_REVOKED = 21
EXIT_INTEGRITY = 22
EXIT_ADDRESS_IN_USE = 23

AGENT_SETTINGS = ("identity", "journal", "sync", "policy", "password")


def parse_value(text: str) -> Any:
    """Column value from the command line: JSON scalars, anything else is a string."""
    try:
        value = json.loads(text)
    except ValueError:
        return text
    if isinstance(value, (list, dict)):
        return text
    return value


def _row_json(row) -> str:
    return json.dumps(
        {"table": row.table, "row": row.as_dict(), "shared": row.id_pending_row_received},
        ensure_ascii=False,
    )


def _settings(args: argparse.Namespace) -> dict:
    settings: dict[str, Any] = {}
    if args.config:
        settings.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    for name in AGENT_SETTINGS:
        env = os.environ.get(f"ROWSHARE_{name.upper()}")
        if env and name not in settings:
            settings[name] = env
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    settings.setdefault("policy", "delete")
    for required in ("identity", "journal"):
        if not settings.get(required):
            raise _UsageError(f"--{required} is required (flag, config file or ROWSHARE_{required.upper()})")
    return settings


class _UsageError(Exception):
    pass


def _open_agent(settings: dict, *, login: bool = True):
    from .agent import Agent, Identity
    from .server import parse_address
    from .transport import SyncClient, TcpConnection

    identity = Identity.load(settings["identity"])
    client = None
    if settings.get("sync"):
        client = SyncClient(TcpConnection(*parse_address(settings["sync"])))
    agent = Agent(identity, settings["journal"], client, revoked_policy=settings["policy"])
    if client is not None and login:
        if not settings.get("password"):
            raise _UsageError("--password (or ROWSHARE_PASSWORD) is required to reach the synchronizer")
        try:
            agent.login(settings["password"])
        except TransportError as exc:
            logging.getLogger(__name__).warning("working offline: %s", exc)
    return agent


def _ref(args) -> tuple[str, Any]:
    return args.table, parse_value(args.pk)


def _cmd_init_identity(args, out) -> int:
    from .agent import Identity

    path = Path(args.identity)
    if path.exists() and not args.force:
        raise _UsageError(f"{path} exists (use --force to overwrite)")
    Identity.generate(args.user).save(path)
    print(args.user, file=out)
    return EXIT_OK


def _cmd_register(args, out) -> int:
    settings = _settings(args)
    if not settings.get("sync") or not settings.get("password"):
        raise _UsageError("register needs --sync and --password")
    agent = _open_agent(settings, login=False)
    agent.register(settings["password"])
    print(agent.user_id, file=out)
    return EXIT_OK


def _agent_command(fn):
    def run(args, out) -> int:
        agent = _open_agent(_settings(args))
        agent.load()
        try:
            return fn(agent, args, out)
        finally:
            agent.save()
            if agent.client is not None:
                agent.client.close()
    return run


@_agent_command
def _cmd_create_table(agent, args, out) -> int:
    columns = [c.strip() for c in args.columns.split(",") if c.strip()]
    agent.create_table(args.name, columns, args.pk)
    print(args.name, file=out)
    return EXIT_OK


@_agent_command
def _cmd_put(agent, args, out) -> int:
    values = {}
    for item in args.values:
        name, sep, text = item.partition("=")
        if not sep:
            raise _UsageError(f"expected column=value, got {item!r}")
        values[name] = parse_value(text)
    print(_row_json(agent.put(args.table, values)), file=out)
    return EXIT_OK


@_agent_command
def _cmd_grant(agent, args, out) -> int:
    fields = [f.strip() for f in args.fields.split(",") if f.strip()]
    agent.grant(_ref(args), args.receiver, fields)
    print(",".join(agent.access[_ref(args)][args.receiver]), file=out)
    return EXIT_OK


@_agent_command
def _cmd_send(agent, args, out) -> int:
    for receiver, id_pending_row in sorted(agent.send(_ref(args)).items()):
        print(f"{receiver} {id_pending_row}", file=out)
    if agent.pending_retries():
        print(f"queued {agent.pending_retries()}", file=out)
    return EXIT_OK


@_agent_command
def _cmd_receive(agent, args, out) -> int:
    print(agent.receive(), file=out)
    return EXIT_OK


@_agent_command
def _cmd_use(agent, args, out) -> int:
    print(_row_json(agent.use(args.id, revalidate=args.revalidate)), file=out)
    return EXIT_OK


@_agent_command
def _cmd_revoke(agent, args, out) -> int:
    print(agent.revoke(_ref(args), args.receiver), file=out)
    if agent.pending_retries():
        print(f"queued {agent.pending_retries()}", file=out)
    return EXIT_OK


@_agent_command
def _cmd_save(agent, args, out) -> int:
    print(agent.save(), file=out)
    return EXIT_OK


def _cmd_load(args, out) -> int:
    agent = _open_agent(_settings(args))
    report = agent.load()
    agent.save()
    fields = {
        "plain": report.plain_rows,
        "shared": report.shared_rows,
        "dropped": len(report.dropped_ids),
        "retained": len(report.retained_ids) + len(report.revoked_retained_ids),
        "quarantined": len(report.quarantined_ids),
        "errors": len(report.errors),
    }
    print(" ".join(f"{k}={v}" for k, v in fields.items()), file=out)
    return EXIT_OK


@_agent_command
def _cmd_list(agent, args, out) -> int:
    for row in agent.rows(args.table):
        print(_row_json(row), file=out)
    return EXIT_OK


def _cmd_serve(args, out) -> int:
    from .server import serve

    try:
        server = serve(args.listen, args.log, kdf_iterations=args.kdf_iterations, fsync=args.fsync)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            print(f"error: address {args.listen} already in use", file=sys.stderr)
            return EXIT_ADDRESS_IN_USE
        raise
    host, port = server.address
    print(f"listening on {host}:{port}", file=out, flush=True)

    def _stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, _stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        server.service.close()
    return EXIT_OK


def _cmd_bench(args, out) -> int:
    from .bench import BenchConfig, run_benchmark

    for pct in args.pct:
        for n in args.n:
            cfg = BenchConfig(n, args.clients, pct, args.size, args.repetitions, args.output, args.seed,
                              not args.no_warmup)
            result = run_benchmark(cfg)
            print(
                f"n={n} pct={pct:g} encrypted_ms={result.total('encrypted'):.1f} "
                f"baseline_ms={result.total('baseline'):.1f} overhead={result.overhead:.3f}",
                file=out, flush=True,
            )
    return EXIT_OK


def _cmd_bench_worker(args, out) -> int:
    from .bench import worker_main

    return worker_main()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rowshare", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    agent_opts = argparse.ArgumentParser(add_help=False)
    agent_opts.add_argument("--config", help="JSON file with identity/journal/sync/policy/password")
    agent_opts.add_argument("--identity", help="identity key file")
    agent_opts.add_argument("--journal", help="journal (script) file")
    agent_opts.add_argument("--sync", help="synchronizer address host:port")
    agent_opts.add_argument("--policy", choices=("delete", "retain"), help="handling of revoked rows")
    agent_opts.add_argument("--password")

    p = sub.add_parser("init-identity", help="generate a key file for a user")
    p.add_argument("user")
    p.add_argument("--identity", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_init_identity)

    p = sub.add_parser("register", parents=[agent_opts], help="register the identity with the synchronizer")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("create-table", parents=[agent_opts])
    p.add_argument("name")
    p.add_argument("--columns", required=True, help="comma-separated column names")
    p.add_argument("--pk", required=True)
    p.set_defaults(func=_cmd_create_table)

    p = sub.add_parser("put", parents=[agent_opts], help="insert or replace an owned row")
    p.add_argument("table")
    p.add_argument("values", nargs="+", metavar="column=value")
    p.set_defaults(func=_cmd_put)

    for name, helptext in (("grant", "allow a receiver to see some fields"), ("revoke", "withdraw access")):
        p = sub.add_parser(name, parents=[agent_opts], help=helptext)
        p.add_argument("table")
        p.add_argument("pk")
        p.add_argument("receiver")
        if name == "grant":
            p.add_argument("--fields", required=True, help="comma-separated permitted fields")
        p.set_defaults(func=_cmd_grant if name == "grant" else _cmd_revoke)

    p = sub.add_parser("send", parents=[agent_opts], help="send a dossier to its receivers")
    p.add_argument("table")
    p.add_argument("pk")
    p.set_defaults(func=_cmd_send)

    p = sub.add_parser("receive", parents=[agent_opts], help="pick up pending rows")
    p.set_defaults(func=_cmd_receive)

    p = sub.add_parser("use", parents=[agent_opts], help="decrypt a shared row")
    p.add_argument("id", type=int)
    p.add_argument("--revalidate", action="store_true")
    p.set_defaults(func=_cmd_use)

    for name, func in (("save", _cmd_save), ("load", _cmd_load)):
        p = sub.add_parser(name, parents=[agent_opts])
        p.set_defaults(func=func)

    p = sub.add_parser("list", parents=[agent_opts], help="print rows")
    p.add_argument("table", nargs="?")
    p.set_defaults(func=_cmd_list)

    sync = sub.add_parser("sync", help="synchronizer service")
    sync_sub = sync.add_subparsers(dest="sync_command", required=True)
    p = sync_sub.add_parser("serve")
    p.add_argument("--listen", default=os.environ.get("ROWSHARE_LISTEN", "127.0.0.1:7431"))
    p.add_argument("--log", default=os.environ.get("ROWSHARE_LOG"), help="append-only state log")
    p.add_argument("--kdf-iterations", type=int, default=100_000)
    p.add_argument("--fsync", action="store_true", help="fsync the log after every write")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="encrypted vs baseline benchmark, CSV output")
    p.add_argument("--n", type=int, action="append", help="dossier count (repeatable)")
    p.add_argument("--pct", type=float, action="append", help="percentage shared (repeatable)")
    p.add_argument("--clients", type=int, default=2)
    p.add_argument("--size", type=int, default=200, help="approximate dossier size in bytes")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--output", help="CSV file (appended)")
    p.add_argument("--no-warmup", action="store_true")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("bench-worker", help=argparse.SUPPRESS)
    p.set_defaults(func=_cmd_bench_worker)
    return parser


def exit_code_for(exc: BaseException) -> int:
    from .agent import IntegrityError, RevokedError, UnavailableError, UnknownRowError

    if isinstance(exc, RevokedError):
        return EXIT_REVOKED
    if isinstance(exc, UnavailableError):
        return EXIT_UNAVAILABLE
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    if isinstance(exc, ServiceError):
        return EXIT_CODES[exc.code]
    if isinstance(exc, TransportError):
        return EXIT_UNAVAILABLE
    if isinstance(exc, SchemaError):
        return EXIT_CODES[ErrorCode.SCHEMA_ERROR]
    if isinstance(exc, UnknownRowError):
        return EXIT_CODES[ErrorCode.NOT_FOUND]
    return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench":
        args.n = args.n or [1000]
        args.pct = args.pct or [20.0]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, sys.stdout)
    except _UsageError as exc:
        parser.error(str(exc))
    except (RowshareError, ValueError, KeyError, OSError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
