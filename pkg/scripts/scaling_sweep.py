"""Sweep matrix size and worker count through the modeled cyclic GEMM.

Prints the makespan table and the best worker count per size. Use --flops-rate
to see how the crossover moves with device throughput.
"""
import argparse

from gridgemm.schedule import DEFAULT_FLOPS_RATE, best_workers, has_crossover, scaling_table
from gridgemm.transport import CostModel


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="1024,2048,4096,8192,16384,24576")
    p.add_argument("--workers", default="1,2,4,8")
    p.add_argument("--flops-rate", type=float, default=DEFAULT_FLOPS_RATE, help="flops per microsecond")
    args = p.parse_args()
    sizes = [int(x) for x in args.sizes.split(",")]
    counts = [int(x) for x in args.workers.split(",")]
    table = scaling_table(sizes, counts, CostModel.from_measurements(), flops_rate=args.flops_rate)
    t = {(e.size, e.workers): e.makespan_us for e in table}
    print(f"{'n':>6} " + " ".join(f"{'P=' + str(c):>10}" for c in counts) + "   best")
    best = best_workers(table)
    for n in sizes:
        print(f"{n:>6} " + " ".join(f"{t[(n, c)] / 1e3:>10.1f}" for c in counts) + f"   {best[n]}")
    lo, hi = min(counts), max(counts)
    print(f"crossover P={lo} vs P={hi} within sizes: {has_crossover(table, min(sizes), max(sizes), lo, hi)}")


if __name__ == "__main__":
    main()
