"""Compare the compiled journal codec with the pure-Python one.

    python3 benchmarks/bench_codec.py [--rows N] [--repeat R]

Prints microseconds per line for formatting and parsing with each backend.
"""

import argparse
import random
import string
import sys
import timeit

from rowshare import _codec_py

try:
    from rowshare import _codec as compiled
except ImportError:
    compiled = None


def sample_rows(n: int, seed: int = 7) -> list[list]:
    rng = random.Random(seed)
    letters = string.ascii_letters + " '\\"
    return [
        [i, "".join(rng.choices(letters, k=24)), rng.choice(["medical", "legal", None]),
         rng.random() * 100, "".join(rng.choices(letters, k=120))]
        for i in range(n)
    ]


def measure(impl, rows, repeat: int) -> dict[str, float]:
    columns = ["id", "title", "category", "score", "body"]
    lines = [impl.format_insert("dossiers", columns, r) for r in rows]

    def fmt():
        for r in rows:
            impl.format_insert("dossiers", columns, r)

    def parse():
        for line in lines:
            impl.parse_insert(line)

    per_line = lambda fn: min(timeit.repeat(fn, number=1, repeat=repeat)) / len(rows) * 1e6  # noqa: E731
    return {"format": per_line(fmt), "parse": per_line(parse)}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=20_000)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    rows = sample_rows(args.rows)
    results = {"python": measure(_codec_py, rows, args.repeat)}
    if compiled is None:
        print("compiled codec not built; showing the Python backend only", file=sys.stderr)
    else:
        results["compiled"] = measure(compiled, rows, args.repeat)

    print(f"{'backend':<10}{'format us/line':>16}{'parse us/line':>16}")
    for name, r in results.items():
        print(f"{name:<10}{r['format']:>16.2f}{r['parse']:>16.2f}")
    if compiled is not None:
        py, c = results["python"], results["compiled"]
        print(f"speedup   {py['format'] / c['format']:>15.1f}x{py['parse'] / c['parse']:>15.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
