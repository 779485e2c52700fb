"""Single-threaded timing of the engines, in the style of the bench command.

Run: python demos/03_timing.py [sizes]    e.g. 256,512 (dense at 512 takes about 1.5 min)
"""

import sys
from pathlib import Path

from flashpath.bench import REFERENCE_FOOTER, run_bench, write_bench_csv
from flashpath.network import build_model

sizes = [int(s) for s in (sys.argv[1] if len(sys.argv) > 1 else "128,256").split(",")]
report = run_bench(build_model(0), sizes, ["dense", "strided", "flash"], repeats=3, threads=1,
                   log=print)
for r in report.rows:
    if r.engine != "dense":
        print(f"{r.engine} at {r.image_side}: {r.speedup_vs_dense:.0f}x faster than dense")
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
write_bench_csv(report, out / "bench.csv")
print(REFERENCE_FOOTER)
