"""Modeled makespan of the cyclic ring against the broadcast reference.

    python3 scripts/compare_schedules.py --sizes 1024,2048,4096 --workers 2,4,8
"""
import argparse

from gridgemm.cli import compare_schedules
from gridgemm.core import Precision
from gridgemm.transport import CostModel


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="1024,2048,4096")
    p.add_argument("--workers", default="2,4,8")
    p.add_argument("--cost-model", help="CSV table; defaults to the built-in measurements")
    p.add_argument("--precision", default="single")
    args = p.parse_args()
    cost = CostModel.load(args.cost_model) if args.cost_model else CostModel.from_measurements()
    print(f"{'n':>6} {'P':>3} {'cyclic ms':>11} {'broadcast ms':>13} {'ratio':>6}")
    for n in (int(x) for x in args.sizes.split(",")):
        for P in (int(x) for x in args.workers.split(",")):
            cyc, bc = (r["modeled_makespan_us"]
                       for r in compare_schedules(n, P, cost, precision=Precision.parse(args.precision)))
            print(f"{n:>6} {P:>3} {cyc / 1e3:>11.2f} {bc / 1e3:>13.2f} {bc / cyc:>6.2f}")


if __name__ == "__main__":
    main()
