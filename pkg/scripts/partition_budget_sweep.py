"""Peak per-PE memory of the full-size language model against PE count.

For each total PE count the PEs are shared among layers by unit count and
the largest footprint is compared with the 96 KB data budget.

    python scripts/partition_budget_sweep.py --pes 3,30,60,90,120,150,200
"""

import argparse

from egrusim.manycore import PeBudget, plan_stack
from egrusim.synth import synth_lm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pes", default="3,15,30,60,90,120,150,200,300")
    ap.add_argument("--sparsity", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = synth_lm(sparsity=args.sparsity, seed=args.seed)
    budget = PeBudget()
    unlimited = PeBudget.unlimited()
    print(f"{'PEs':>5} {'split':>14} {'peak weights KB':>16} {'peak total KB':>14}  fits")
    for total in (int(v) for v in args.pes.split(",")):
        plans = plan_stack(model.layers, total, unlimited)
        peak = max(max(p.footprints) for p in plans)
        weights = max(max(p.weight_bytes) for p in plans)
        split = "/".join(str(p.n_pes) for p in plans)
        fits = "yes" if peak <= budget.data_available else "no"
        print(f"{total:>5} {split:>14} {weights / 1024:>16.2f} {peak / 1024:>14.2f}  {fits}")


if __name__ == "__main__":
    main()
