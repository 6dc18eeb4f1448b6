"""``hapkit`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 infeasible plan,
4 numeric failure (non-finite values, singular blocks, failed self-check).
"""

import argparse
import logging
import sys

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    InfeasiblePlanError,
    NonFiniteError,
    PlanError,
    SingularMatrixError,
    SpecError,
)
from .hessian import all_group_traces
from .models import build, mlp, tiny_convnet
from .oracle import exact_hessian, group_indices
from .pipeline import PipelineConfig, Run, StageError, run_pipeline
from .pruning import BUDGET_KINDS, ORDERINGS

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4


def exit_code(exc):
    """Map an exception (or the stage failure wrapping it) to an exit code."""
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, InfeasiblePlanError):
        return EXIT_INFEASIBLE
    if isinstance(exc, (NonFiniteError, SingularMatrixError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, DatasetFormatError, SpecError, PlanError, CheckpointError, OSError)):
        return EXIT_CONFIG
    return 1


def _config(args):
    if not args.config:
        raise ConfigError(f"'{args.command}' needs --config")
    cfg = PipelineConfig.from_file(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        output_dir=args.output_dir,
        ordering=args.ordering,
        budget_kind=args.budget_kind,
        budget=args.budget,
        implant_ratio=args.implant_ratio,
        per_layer_limit=args.per_layer_limit,
    )


def _cmd_train(args):
    run = Run(_config(args))
    model = run.train()
    _, test = run.data()
    print(f"baseline accuracy {100 * model.accuracy(test.X, test.y):.2f}% -> {run.path('baseline.ckpt')}")


def _cmd_trace(args):
    run = Run(_config(args))
    traces = run.trace(run.load_model("baseline.ckpt"))
    for t in traces:
        print(f"group {t.group_id:4d}  trace {t.mean: .6e}  stderr {t.std_error:.2e}")


def _cmd_prune(args):
    run = Run(_config(args))
    plan = run.plan(run.load_model("baseline.ckpt"), run.load_traces())
    print(
        f"pruned {len(plan.pruned)}, implanted {len(plan.implanted)}; "
        f"params {100 * plan.param_fraction:.2f}%, flops {100 * plan.flop_fraction:.2f}% -> {run.path('plan.txt')}"
    )


def _cmd_implant(args):
    run = Run(_config(args))
    plan = run.load_plan()
    model = run.apply(run.load_model("baseline.ckpt"), plan)
    print(f"restructured model: {model.n_params} params -> {run.path('pruned.ckpt')}")


def _cmd_finetune(args):
    run = Run(_config(args))
    plan = run.load_plan()
    baseline = run.load_model("baseline.ckpt")
    final = run.finetune(run.load_model("pruned.ckpt"), plan)
    print(run.report(baseline, final, plan).to_json())


def _cmd_pipeline(args):
    print(run_pipeline(_config(args)).to_json())


def _oracle_check(seed):
    """HVP against central differences and Hutchinson against the exact block traces."""
    rng = np.random.default_rng(seed)
    failures = []
    cases = [
        (mlp([4, 6, 3]), rng.normal(size=(32, 4)), 3),
        (tiny_convnet(3, channels=(2, 3), size=4), rng.normal(size=(16, 1, 4, 4)), 3),
    ]
    for spec, X, c in cases:
        model = build(spec, seed)
        batch = (X, np.eye(c)[rng.integers(0, c, len(X))])
        _, tape = ad.forward(model.loss_fn, model.params, batch)
        v = [rng.normal(size=p.shape) for p in model.params]
        hv = np.concatenate([h.ravel() for h in ad.hvp(tape, v)])
        eps = 1e-5

        def grad_at(sign):
            shifted = [p + sign * eps * vi for p, vi in zip(model.params, v)]
            return np.concatenate([g.ravel() for g in ad.gradient(ad.forward(model.loss_fn, shifted, batch)[1])])

        fd = (grad_at(1) - grad_at(-1)) / (2 * eps)
        rel = float(np.linalg.norm(hv - fd) / max(np.linalg.norm(fd), 1e-12))
        H = exact_hessian(model, batch)
        exact = [float(np.trace(H.block(ix))) for ix in group_indices(model)]
        est = all_group_traces(model, batch, n_iters=300, seed=seed, record_series=False)
        z = [abs(t.mean - e) / max(t.std_error, 1e-12) for t, e in zip(est, exact)]
        covered = float(np.mean([s <= 3 for s in z]))
        name = spec.layers[0].tag
        print(f"{name:10s} hvp rel err {rel:.2e}  asymmetry {H.asymmetry:.2e}  trace within 3 se {covered:.0%}")
        if rel > 1e-5:
            failures.append(f"{name}: hvp relative error {rel:.2e}")
        if H.asymmetry > 1e-8:
            failures.append(f"{name}: Hessian asymmetry {H.asymmetry:.2e}")
    return failures


def _cmd_oracle_check(args):
    failures = _oracle_check(0 if args.seed is None else args.seed)
    if failures:
        raise NonFiniteError("oracle check failed: " + "; ".join(failures))
    print("oracle check passed")


COMMANDS = {
    "train": (_cmd_train, "train the baseline model"),
    "trace": (_cmd_trace, "estimate per-group Hessian traces for the baseline"),
    "prune": (_cmd_prune, "score, rank and write a budgeted plan"),
    "implant": (_cmd_implant, "apply the plan (removals and implants) to the baseline"),
    "finetune": (_cmd_finetune, "fine-tune the restructured model and append a result record"),
    "pipeline": (_cmd_pipeline, "run every stage end to end"),
    "oracle-check": (_cmd_oracle_check, "verify HVPs and trace estimates against exact oracles"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="hapkit", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        p.add_argument("--ordering", choices=ORDERINGS)
        p.add_argument("--budget-kind", choices=BUDGET_KINDS)
        p.add_argument("--budget", type=float, help="fraction remaining, in (0, 1]")
        p.add_argument("--implant-ratio", type=float)
        p.add_argument("--per-layer-limit", type=float)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command][0](args)
    except Exception as exc:
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"hapkit {args.command}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
