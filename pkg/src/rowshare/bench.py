"""Benchmark harness: encrypted sharing path against a plain baseline.

The harness starts a synchronizer and ``n_clients`` agent workers as separate
processes on loopback. Worker processes are driven over stdin/stdout with one
JSON object per line and time their own work with a monotonic clock, so
process plumbing is not counted.

Phases, per variant:

``create``    create the dossier table on every client
``populate``  client 0 inserts ``n_dossiers`` rows
``share``     client 0 grants and sends ``pct_shared`` % of them, round-robin
              over the other clients (encrypted only; zero for the baseline)
``receive``   each other client picks up its rows (encrypted) or inserts the
              same number of plain rows (baseline), so both variants end with
              the same number of dossiers
``reopen``    every client saves its journal and loads it back

CSV columns: ``n, pct_shared, phase, variant, median_ms`` with an extra
``total`` phase per variant.
"""

from __future__ import annotations

import csv
import json
import os
import random
import shutil
import statistics
import string
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Optional, Sequence

PHASES = ("create", "populate", "share", "receive", "reopen")
VARIANTS = ("encrypted", "baseline")
CSV_HEADER = ("n", "pct_shared", "phase", "variant", "median_ms")
TABLE = "dossiers"
COLUMNS = ("id", "owner", "title", "category", "body")
PASSWORD = "bench-password"


@dataclass(frozen=True)
class BenchConfig:
    n_dossiers: int = 1000
    n_clients: int = 2
    pct_shared: float = 20.0
    dossier_size: int = 200
    repetitions: int = 3
    output: Optional[str] = None
    seed: int = 1
    warmup: bool = True

    def __post_init__(self):
        if not 0 <= self.pct_shared <= 100:
            raise ValueError("pct_shared must lie in [0, 100]")
        if self.n_clients < 1 or (self.pct_shared > 0 and self.n_clients < 2):
            raise ValueError("sharing needs at least two clients")
        if self.n_dossiers < 0 or self.repetitions < 1:
            raise ValueError("n_dossiers must be >= 0 and repetitions >= 1")

    @property
    def n_shared(self) -> int:
        return round(self.n_dossiers * self.pct_shared / 100)


@dataclass
class BenchResult:
    n: int
    pct_shared: float
    phases: dict[str, dict[str, float]] = field(default_factory=dict)

    def total(self, variant: str) -> float:
        return sum(self.phases[variant].values())

    @property
    def overhead(self) -> float:
        base = self.total("baseline")
        return (self.total("encrypted") - base) / base

    def csv_rows(self) -> list[tuple]:
        rows = []
        for variant in VARIANTS:
            for phase in PHASES:
                rows.append((self.n, self.pct_shared, phase, variant, round(self.phases[variant][phase], 3)))
            rows.append((self.n, self.pct_shared, "total", variant, round(self.total(variant), 3)))
        return rows


def dossier_rows(n: int, seed: int, size: int, start: int = 0, owner: str = "owner") -> list[dict[str, Any]]:
    """Deterministic pseudo-random dossiers whose serialized form is about ``size`` bytes."""
    from .store import Row, serialize_row

    rng = random.Random(f"{seed}:{start}")
    letters = string.ascii_letters + string.digits + " "
    rows = []
    for i in range(start, start + n):
        row = {
            "id": i,
            "owner": owner,
            "title": "".join(rng.choices(string.ascii_letters, k=24)),
            "category": rng.choice(("medical", "legal", "finance", "school", "housing")),
            "body": "",
        }
        overhead = len(serialize_row(Row(TABLE, tuple(row.items()))))
        row["body"] = "".join(rng.choices(letters, k=max(size - overhead, 1)))
        rows.append(row)
    return rows


# -- worker side -------------------------------------------------------------


class _Worker:
    def __init__(self):
        self.agent = None
        self.pending_rows: list[dict] = []

    def setup(self, user: str, directory: str, sync: Optional[str]):
        from .agent import Agent, Identity
        from .transport import SyncClient, TcpConnection
        from .server import parse_address

        client = None
        if sync:
            client = SyncClient(TcpConnection(*parse_address(sync)))
        self.agent = Agent(Identity.generate(user), Path(directory) / f"{user}.script", client)
        if client is not None:
            self.agent.register(PASSWORD)
            self.agent.login(PASSWORD)
        return {}

    def prepare(self, n: int, seed: int, size: int, start: int = 0):
        self.pending_rows = dossier_rows(n, seed, size, start, self.agent.user_id)
        return {}

    def create(self):
        self.agent.create_table(TABLE, COLUMNS, "id")
        return {}

    def populate(self):
        for row in self.pending_rows:
            self.agent.put(TABLE, row)
        self.pending_rows = []
        return {}

    def share(self, receivers: Sequence[str], count: int):
        refs = [(TABLE, i) for i in range(count)]
        self.agent.grant_many((ref, receivers[i % len(receivers)], COLUMNS) for i, ref in enumerate(refs))
        sent = self.agent.send_many(refs)
        return {"sent": sum(len(v) for v in sent.values())}

    def receive(self):
        return {"received": self.agent.receive()}

    def reopen(self):
        self.agent.save()
        report = self.agent.load()
        return {"rows": report.rows_loaded, "decrypts": report.decrypts}


def worker_main(stdin: IO[str] = sys.stdin, stdout: IO[str] = sys.stdout) -> int:
    """Serve harness commands: ``{"cmd": name, "args": {...}}`` in, ``{"ok", "ms", ...}`` out."""
    worker = _Worker()
    for line in stdin:
        msg = json.loads(line)
        cmd = msg["cmd"]
        if cmd == "quit":
            break
        try:
            start = time.perf_counter()
            info = getattr(worker, cmd)(**msg.get("args", {}))
            elapsed = (time.perf_counter() - start) * 1000
            reply = {"ok": True, "ms": elapsed, "info": info}
        except Exception as exc:  # noqa: BLE001 - reported to the harness
            reply = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    return 0


# -- harness side ------------------------------------------------------------


class BenchError(RuntimeError):
    pass


def _python_cmd(*args: str) -> list[str]:
    return [sys.executable, "-m", "rowshare.cli", *args]


class _Proc:
    def __init__(self, args: list[str]):
        self.proc = subprocess.Popen(
            args, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1,
        )

    def call(self, cmd: str, **args) -> dict:
        self.proc.stdin.write(json.dumps({"cmd": cmd, "args": args}) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise BenchError(f"worker exited during {cmd!r}")
        reply = json.loads(line)
        if not reply["ok"]:
            raise BenchError(f"worker failed during {cmd!r}: {reply['error']}")
        return reply

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.write('{"cmd": "quit"}\n')
                self.proc.stdin.flush()
                self.proc.wait(timeout=10)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()
                self.proc.wait()


def start_synchronizer(log_path: Path) -> tuple[subprocess.Popen, str]:
    proc = subprocess.Popen(
        _python_cmd("sync", "serve", "--listen", "127.0.0.1:0", "--log", str(log_path),
                    "--kdf-iterations", "1000"),
        stdout=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline().strip()
    if not line.startswith("listening on "):
        proc.kill()
        raise BenchError(f"synchronizer failed to start: {line!r}")
    return proc, line.removeprefix("listening on ")


def stop_synchronizer(proc: subprocess.Popen) -> None:
    proc.terminate()
    try:
        proc.wait(timeout=10)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


def _run_once(cfg: BenchConfig, variant: str, workers: list[_Proc], rep: int, workdir: Path) -> dict[str, float]:
    rundir = workdir / f"{variant}-{rep}"
    rundir.mkdir()
    sync_proc = None
    address = None
    if variant == "encrypted":
        sync_proc, address = start_synchronizer(rundir / "sync.log")
    try:
        users = [f"c{i}r{rep}" for i in range(len(workers))]
        for user, w in zip(users, workers):
            w.call("setup", user=user, directory=str(rundir), sync=address)
        owner, others = workers[0], workers[1:]
        shared = cfg.n_shared
        # extra dossiers per receiving client, round-robin as in the share phase
        per_receiver = [len(range(i, shared, len(others))) for i in range(len(others))] if others else []

        times = dict.fromkeys(PHASES, 0.0)
        owner.call("prepare", n=cfg.n_dossiers, seed=cfg.seed, size=cfg.dossier_size)
        for w in workers:
            times["create"] += w.call("create")["ms"]
        times["populate"] += owner.call("populate")["ms"]
        if variant == "encrypted":
            if shared:
                times["share"] += owner.call("share", receivers=users[1:], count=shared)["ms"]
            for w in others:
                times["receive"] += w.call("receive")["ms"]
        else:
            for i, (w, count) in enumerate(zip(others, per_receiver)):
                w.call("prepare", n=count, seed=cfg.seed, size=cfg.dossier_size, start=cfg.n_dossiers + i * shared)
                times["receive"] += w.call("populate")["ms"]
        for w in workers:
            times["reopen"] += w.call("reopen")["ms"]
        return times
    finally:
        if sync_proc is not None:
            stop_synchronizer(sync_proc)
        shutil.rmtree(rundir, ignore_errors=True)


def run_benchmark(cfg: BenchConfig) -> BenchResult:
    """Run one (n, pct_shared) point and append its rows to ``cfg.output`` if set."""
    workdir = Path(tempfile.mkdtemp(prefix="rowshare-bench-"))
    workers = [_Proc(_python_cmd("bench-worker")) for _ in range(cfg.n_clients)]
    try:
        if cfg.warmup:
            warm = BenchConfig(min(cfg.n_dossiers, 1000), cfg.n_clients, cfg.pct_shared, cfg.dossier_size,
                               1, None, cfg.seed, False)
            for variant in VARIANTS:
                _run_once(warm, variant, workers, -1, workdir)
        samples: dict[str, list[dict[str, float]]] = {v: [] for v in VARIANTS}
        for rep in range(cfg.repetitions):
            # alternate variant order so slow drift affects both equally
            order = VARIANTS if rep % 2 == 0 else VARIANTS[::-1]
            for variant in order:
                samples[variant].append(_run_once(cfg, variant, workers, rep, workdir))
    finally:
        for w in workers:
            w.close()
        shutil.rmtree(workdir, ignore_errors=True)

    result = BenchResult(cfg.n_dossiers, cfg.pct_shared)
    for variant in VARIANTS:
        result.phases[variant] = {
            phase: statistics.median(s[phase] for s in samples[variant]) for phase in PHASES
        }
    if cfg.output:
        write_csv(cfg.output, result.csv_rows())
    return result


def write_csv(path: str, rows: Sequence[tuple]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_HEADER)
        writer.writerows(rows)


def run_sweep(
    ns: Sequence[int], pcts: Sequence[float], *, n_clients: int = 2, dossier_size: int = 200,
    repetitions: int = 3, output: Optional[str] = None, seed: int = 1,
) -> list[BenchResult]:
    results = []
    for pct in pcts:
        for n in ns:
            cfg = BenchConfig(n, n_clients, pct, dossier_size, repetitions, output, seed)
            results.append(run_benchmark(cfg))
    return results


def r_squared(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (xs, ys)."""
    fit = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (fit.slope * x + fit.intercept)) ** 2 for x, y in zip(xs, ys))
    return 1.0 - ss_res / ss_tot if ss_tot else 1.0
