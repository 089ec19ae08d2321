#!/usr/bin/env python3
"""Benchmark the compiled kernel lane against the pure-Python fallback.

Times the five hot kernels on representative inputs, then a short
end-to-end simulator run under each lane. Run from the repo root:

    python benchmarks/bench_kernels.py [--ops N]
"""

from __future__ import annotations

import argparse
import os
import random
import subprocess
import sys
import time
import timeit


def bench_kernels(mod) -> dict[str, float]:
    key = b"k" * 32
    msg = b"m" * 25
    payload = b"p" * 64
    head = b"h" * 19
    widths = (1, 3) + (13, 1) * 5 + (32,) * 5 + (30,) * 5 + (4,) * 5 + (54, 54, 4, 60)
    values = [(1 << w) - 1 for w in widths]
    packed = mod.pack_fields(widths, values, 72)
    block = mod.seal_slot(key, msg, head, payload, 3)

    n = 200_000
    out = {}
    out["prf_tag"] = timeit.timeit(lambda: mod.prf_tag(key, msg), number=n) / n
    out["xor_pad"] = timeit.timeit(lambda: mod.xor_pad(key, msg, payload), number=n) / n
    out["seal_slot"] = timeit.timeit(lambda: mod.seal_slot(key, msg, head, payload, 3), number=n) / n
    out["check_slot"] = timeit.timeit(lambda: mod.check_slot(key, head, block, 3), number=n) / n
    out["pack_fields"] = timeit.timeit(lambda: mod.pack_fields(widths, values, 72), number=n) / n
    out["unpack_fields"] = timeit.timeit(lambda: mod.unpack_fields(widths, packed), number=n) / n
    return out


def bench_simulator(ops: int) -> float:
    from ringsim.oram import SCHEME_FEATURES, OramConfig, OramController

    cfg = OramConfig(tree_levels=10, cached_levels=3, stash_capacity=2000)
    ctrl = OramController(cfg, SCHEME_FEATURES["rimr"], seed=1)
    rng = random.Random(1)
    for _ in range(500):  # warm the tree
        ctrl.access(rng.randrange(512), "write", bytes(64))
    t0 = time.perf_counter()
    for _ in range(ops):
        ctrl.access(rng.randrange(512), "read")
    return (time.perf_counter() - t0) / ops


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--ops", type=int, default=3000, help="end-to-end accesses to time")
    ap.add_argument("--lane", choices=("c", "pure"), help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.lane:
        # child process: one lane, machine-readable output
        if args.lane == "pure":
            os.environ["RINGSIM_PURE_KERNELS"] = "1"
        import ringsim._kernels as k

        assert k.BACKEND == ("c" if args.lane == "c" else "pure"), k.BACKEND
        for name, secs in bench_kernels(k).items():
            print(f"kernel {name} {secs * 1e9:.0f}")
        print(f"simulator access {bench_simulator(args.ops) * 1e6:.1f}")
        return 0

    rows: dict[str, dict[str, str]] = {}
    for lane in ("c", "pure"):
        env = dict(os.environ)
        env.pop("RINGSIM_PURE_KERNELS", None)
        res = subprocess.run(
            [sys.executable, __file__, "--lane", lane, "--ops", str(args.ops)],
            capture_output=True, text=True, env=env)
        if res.returncode != 0:
            print(f"{lane} lane unavailable:\n{res.stderr}", file=sys.stderr)
            continue
        for line in res.stdout.splitlines():
            parts = line.split()
            rows.setdefault(" ".join(parts[:-1]), {})[lane] = parts[-1]

    print(f"{'benchmark':28s} {'compiled':>12s} {'pure':>12s} {'speedup':>8s}")
    for name, vals in rows.items():
        unit = "ns" if name.startswith("kernel") else "us"
        c, p = vals.get("c"), vals.get("pure")
        speed = f"{float(p) / float(c):.2f}x" if c and p else "-"
        print(f"{name:28s} {c or '-':>10s}{unit} {p or '-':>10s}{unit} {speed:>8s}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
