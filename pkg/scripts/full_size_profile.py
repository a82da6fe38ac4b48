"""Stage profile of a full-size synthetic language model on 150 PEs.

Builds the 750-1350-1350-750 stack at 95% weight sparsity, tunes the
thresholds to the requested activity sparsity, runs a short token stream and
prints the modeled stage table.

    python scripts/full_size_profile.py --steps 14 --report profile.json
"""

import argparse
import time

import numpy as np

from egrusim.egru import activity_sparsity
from egrusim.lm import embed
from egrusim.manycore import plan_stack, run_sequence
from egrusim.profiler import build_report
from egrusim.synth import calibrate_thresholds, synth_lm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pes", type=int, default=150)
    ap.add_argument("--steps", type=int, default=14)
    ap.add_argument("--activity-sparsity", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--report", default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    model = synth_lm(seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    xs = [embed(int(t), model.embedding) for t in rng.integers(0, model.embedding.vocab_size, args.steps)]
    layers = calibrate_thresholds(model.layers, xs, args.activity_sparsity)
    print("thresholds", " ".join(f"{float(p.theta[0]):.4f}" for p in layers))

    plans = plan_stack(layers, args.pes)
    print("PEs per layer", [p.n_pes for p in plans])
    res = run_sequence(plans, layers, xs)
    for i in range(len(layers)):
        s = np.mean([activity_sparsity(step[i]) for step in res.layer_outputs[2:]])
        print(f"layer {i} activity sparsity {s:.3f}")

    report = build_report(res.counters)
    print(report.format_table())
    print("ranking:", " > ".join(report.ranked_stages()))
    print(f"wall clock {time.perf_counter() - t0:.1f} s")
    if args.report:
        with open(args.report, "w") as f:
            f.write(report.to_json() + "\n")


if __name__ == "__main__":
    main()
