"""Compare the jitted edit-distance kernel against the pure-numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--sizes 64,256,1024] [--repeats 5]

The active path is selected at import time by the TEXTWARD_NUMBA
environment variable, so this script runs both variants in subprocesses
and reports wall-clock medians side by side.
"""

from __future__ import annotations

import argparse
import json
import statistics
import subprocess
import sys

_WORKER = r"""
import json, random, sys, time
from textward import kernels

sizes = json.loads(sys.argv[1])
repeats = int(sys.argv[2])
rng = random.Random(1234)
alphabet = "abcdefgh"
results = {"using_numba": kernels.USING_NUMBA, "timings": {}}
# Warm-up triggers JIT compilation so it is not billed to the first size.
kernels.levenshtein("warmup" * 10, "wormup" * 10)
for size in sizes:
    a = "".join(rng.choice(alphabet) for _ in range(size))
    b = "".join(rng.choice(alphabet) for _ in range(size))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        d = kernels.levenshtein(a, b)
        samples.append(time.perf_counter() - t0)
    results["timings"][str(size)] = {"median_s": sorted(samples)[len(samples)//2], "distance": d}
print(json.dumps(results))
"""


def run_variant(numba_flag: str, sizes: list[int], repeats: int) -> dict:
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, json.dumps(sizes), str(repeats)],
        env={"TEXTWARD_NUMBA": numba_flag, "PATH": "/usr/bin:/bin:/usr/local/bin"},
        capture_output=True,
        text=True,
        check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="64,256,1024,4096")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    jit = run_variant("1", sizes, args.repeats)
    fallback = run_variant("0", sizes, args.repeats)
    if not jit["using_numba"]:
        print("note: jit variant fell back to numpy (numba unavailable)")

    header = f"{'n':>6}  {'jit (ms)':>12}  {'numpy (ms)':>12}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for size in sizes:
        tj = jit["timings"][str(size)]["median_s"] * 1e3
        tn = fallback["timings"][str(size)]["median_s"] * 1e3
        dj = jit["timings"][str(size)]["distance"]
        dn = fallback["timings"][str(size)]["distance"]
        assert dj == dn, f"paths disagree at n={size}: {dj} != {dn}"
        print(f"{size:>6}  {tj:>12.3f}  {tn:>12.3f}  {tn / tj:>7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
