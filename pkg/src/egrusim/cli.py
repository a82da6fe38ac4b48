"""Command-line entry point: ``egrusim <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 PE memory budget exceeded, 4 file or
format error, 5 dimension mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import modelio
from .dvs import GestureClassifierParams, evaluate_dvs
from .egru import GATES
from .lm import LanguageModel, embed, evaluate_lm, generate
from .manycore import BudgetExceeded, PeBudget, plan_stack
from .profiler import build_report
from .sparse import DimensionError, csr_from_dense, csr_to_dense, magnitude_prune
from .synth import calibrate_thresholds, synth_dvs, synth_lm

EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_FORMAT = 4
EXIT_DIMENSION = 5

log = logging.getLogger("egrusim")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _pes(text: str):
    vals = _int_list(text)
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("PE counts must be >= 1")
    return vals[0] if len(vals) == 1 else vals


def _budget(args) -> PeBudget | None:
    if args.budget_data_kb:
        return PeBudget.with_data_kb(args.budget_data_kb)
    return None if args.pes == 1 else PeBudget()


def _load(path):
    try:
        return modelio.load_model_file(path)
    except OSError as e:
        raise CliError(f"{path}: {e.strerror}", EXIT_FORMAT) from None
    except DimensionError as e:
        raise CliError(f"{path}: {e}", EXIT_DIMENSION) from None
    except (modelio.ModelFormatError, ValueError) as e:
        raise CliError(f"{path}: {e}", EXIT_FORMAT) from None


def _read(path, mode="rb"):
    try:
        with open(path, mode) as f:
            return f.read()
    except OSError as e:
        raise CliError(f"{path}: {e.strerror}", EXIT_FORMAT) from None


def _write_report(args, report, extra: dict):
    if not args.report:
        return
    doc = json.loads(report.to_json())
    doc["run"] = extra
    Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sim_pes(args, model):
    # a bare "1" means one PE per layer with unlimited memory unless a budget is given
    return args.pes


def cmd_synth(args):
    dims = _int_list(args.dims)
    if args.kind == "lm":
        model = synth_lm(dims or [750, 1350, 1350, 750], args.vocab_size, args.sparsity, args.seed, args.theta)
    else:
        model = synth_dvs(dims or [512, 256, 256], args.classes, args.sparsity, args.seed, args.theta)
    if args.calibrate_sparsity is not None:
        rng = np.random.default_rng(args.seed + 1)
        if isinstance(model, LanguageModel):
            xs = [embed(int(t), model.embedding) for t in rng.integers(0, model.embedding.vocab_size, 12)]
        else:
            xs = list(rng.standard_normal((12, model.feature_dim)).astype(np.float32))
        layers = calibrate_thresholds(model.layers, xs, args.calibrate_sparsity)
        model = dataclasses.replace(model, layers=layers)
    modelio.save_model_file(model, args.output)
    print(f"wrote {args.kind} model with layers {[p.n_units for p in model.layers]} to {args.output}")


def cmd_prune(args):
    model = _load(args.model)
    layers = []
    for p in model.layers:
        mats = {}
        for g in GATES:
            for side in ("x", "y"):
                name = f"W_{g}_{side}"
                mats[name] = csr_from_dense(magnitude_prune(csr_to_dense(getattr(p, name)), args.sparsity))
        layers.append(dataclasses.replace(p, **mats))
    modelio.save_model_file(dataclasses.replace(model, layers=layers), args.output)
    nnz = sum(m.nnz for p in layers for m in p.weight_matrices())
    print(f"pruned to sparsity {args.sparsity}: {nnz} nonzero weights, wrote {args.output}")


def cmd_partition(args):
    model = _load(args.model)
    budget = _budget(args) or PeBudget()
    layers = list(model.layers)
    try:
        if args.pes == 1 and len(layers) > 1:
            # the whole stack shares one PE
            plans = plan_stack(layers, [1] * len(layers), PeBudget.unlimited())
            needed = sum(p.footprints[0] for p in plans)
            if needed > budget.data_available:
                raise BudgetExceeded(0, needed, budget.data_available)
        else:
            plans = plan_stack(layers, args.pes, budget)
    except BudgetExceeded as e:
        print(f"FAIL {e}")
        raise CliError(str(e), EXIT_BUDGET) from None
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    for plan in plans:
        print(f"layer {plan.layer_id}: {plan.n_units} units on {plan.n_pes} PEs")
        for rank, ((s, t), fp, w) in enumerate(zip(plan.ranges, plan.footprints, plan.weight_bytes)):
            print(f"  pe {rank:3d} units [{s:5d},{t:5d}) weights {w / 1024:8.2f} KB total {fp / 1024:8.2f} KB")
        print(f"  max footprint {max(plan.footprints) / 1024:.2f} KB of {budget.data_available / 1024:.2f} KB")
    print("OK all PEs within budget")


def cmd_eval_lm(args):
    model = _load(args.model)
    if not isinstance(model, LanguageModel):
        raise CliError(f"{args.model}: not a language model", EXIT_FORMAT)
    text = _read(args.input, "r")
    chunks = modelio.load_tokens(text, model.vocab, model.unk_token)
    tokens = [t for c in chunks for t in c]
    res = evaluate_lm(model, tokens, _sim_pes(args, model), _budget(args), reset_state=args.reset_state)
    report = build_report(res.counters)
    print(f"ppl {res.ppl:.6f}")
    print(f"tokens {res.token_count}")
    print("activity_sparsity " + " ".join(f"{s:.4f}" for s in res.layer_sparsity))
    print(report.format_table())
    _write_report(args, report, {"command": "eval-lm", "ppl": res.ppl, "tokens": res.token_count,
                                 "layer_sparsity": res.layer_sparsity})


def cmd_generate(args):
    model = _load(args.model)
    if not isinstance(model, LanguageModel):
        raise CliError(f"{args.model}: not a language model", EXIT_FORMAT)
    prompt = args.prompt if args.prompt is not None else (_read(args.input, "r") if args.input else "")
    ids = [model.token_id(w) for w in prompt.split()]
    out = generate(model, ids, args.length, args.temperature, args.seed, _sim_pes(args, model), _budget(args))
    print(" ".join(model.vocab[i] for i in out))


def cmd_eval_dvs(args):
    model = _load(args.model)
    if not isinstance(model, GestureClassifierParams):
        raise CliError(f"{args.model}: not a gesture classifier", EXIT_FORMAT)
    try:
        items = modelio.load_feature_dataset(_read(args.input))
    except modelio.MalformedRecord as e:
        raise CliError(f"{args.input}: {e}", EXIT_FORMAT) from None
    res = evaluate_dvs(model, items, args.batch, _sim_pes(args, model), _budget(args), aggregate=args.aggregate)
    report = build_report(res.counters, batch_size=len(items))
    print(f"accuracy {res.accuracy:.4f}")
    print(f"items {len(items)} batch {args.batch}")
    print(f"per_item_time_ms {res.time_per_item_s * 1e3:.4f}")
    print(f"per_item_energy_j {res.energy_per_item_j:.6g}")
    print(report.format_table())
    _write_report(args, report, {"command": "eval-dvs", "accuracy": res.accuracy, "predictions": res.predictions,
                                 "batch": args.batch})


def cmd_profile(args):
    model = _load(args.model)
    if isinstance(model, LanguageModel):
        cmd_eval_lm(args)
    else:
        cmd_eval_dvs(args)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egrusim", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, input_required=True):
        p.add_argument("--model", required=True)
        p.add_argument("--input", required=input_required)
        p.add_argument("--pes", type=_pes, default=1, help="total PEs, or one count per layer (a,b,c)")
        p.add_argument("--budget-data-kb", type=float, default=None)
        p.add_argument("--report", default=None, help="write the JSON profile report here")

    p = sub.add_parser("synth", help="write a seeded random model")
    p.add_argument("--kind", choices=("lm", "dvs"), default="lm")
    p.add_argument("--dims", default="", help="n_in,units_1,...; defaults to the full-size shapes")
    p.add_argument("--sparsity", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--classes", type=int, default=11)
    p.add_argument("--theta", type=float, default=0.3)
    p.add_argument("--calibrate-sparsity", type=float, default=None,
                   help="tune thresholds to this mean activity sparsity")
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prune", help="magnitude-prune every weight matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("partition", help="plan PE placement and check memory budgets")
    p.add_argument("--model", required=True)
    p.add_argument("--pes", type=_pes, default=150)
    p.add_argument("--budget-data-kb", type=float, default=None)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("eval-lm", help="perplexity of a text file")
    common(p)
    p.add_argument("--reset-state", action="store_true", help="reset state at every 70-token chunk")
    p.set_defaults(func=cmd_eval_lm)

    p = sub.add_parser("generate", help="sample a continuation")
    common(p, input_required=False)
    p.add_argument("--prompt", default=None)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-dvs", help="gesture accuracy on a feature dataset")
    common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--aggregate", choices=("last", "mean"), default=None)
    p.set_defaults(func=cmd_eval_dvs)

    p = sub.add_parser("profile", help="run a model and print the stage profile")
    common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--aggregate", choices=("last", "mean"), default=None)
    p.add_argument("--reset-state", action="store_true")
    p.set_defaults(func=cmd_profile)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except DimensionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIMENSION
    except (modelio.MalformedRecord, modelio.ModelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    return 0


if __name__ == "__main__":
    sys.exit(main())
