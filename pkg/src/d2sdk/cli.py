"""Command line entry point: ``python -m d2sdk <command>``.

Failures print a single JSON line ``{"error": <type>, "message": <text>}`` on
stderr and exit with status 2 (usage / configuration) or 1 (runtime failure).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dd
from . import harness as H
from .errors import ConfigError, D2SDKError, NumericError
from .model import VARIANTS, D2SDKModel, ModelConfig, compute_loss

MICRO_CONFIG = dict(K=2, n_classes=3, d_in=8, backbone_hidden=16, d_s=16, d=8, L=1, num_heads=2, d_ff=16)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d2sdk", description="Train and evaluate cross-domain MoE Transformers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for kind in H.KINDS:
        e = sub.add_parser(kind, help=f"run the {kind} experiment")
        e.add_argument("--config", type=Path, help="JSON file with experiment plan fields")
        seeds = e.add_mutually_exclusive_group()
        seeds.add_argument("--seed", type=int, help="single seed")
        seeds.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
        e.add_argument("--out", type=Path, required=True, help="output directory")
        e.add_argument("--variant", action="append", choices=VARIANTS,
                       help="variant row (repeatable; lodo and select-report only)")
        e.add_argument("--epochs", type=int)
        e.add_argument("--held-out", type=_int_list, help="comma-separated held-out domain ids")
        e.add_argument("--n-per-class", type=int, help="samples per class and domain")
        e.add_argument("--workers", type=int, help="parallel worker processes")
        e.add_argument("--paper-faithful", action="store_true",
                       help="10 seeds, 80 epochs, feed-forward width 1024")

    g = sub.add_parser("gen-data", help="generate and export a synthetic multi-domain dataset")
    g.add_argument("--config", type=Path, help="JSON file with dataset fields")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-per-class", type=int)
    g.add_argument("--out", type=Path, required=True, help="output file")

    c = sub.add_parser("grad-check", help="finite-difference check of the full loss on a micro model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--variant", choices=VARIANTS, default="Full")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", type=Path, help="optional JSON report path")
    return p


def _load_json(path: Path) -> dict:
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def plan_from_args(args) -> H.ExperimentPlan:
    plan = H.ExperimentPlan.paper_faithful(args.command) if args.paper_faithful else H.ExperimentPlan(args.command)
    if args.config:
        fields = {**plan.to_dict(), **_load_json(args.config)}
        fields["kind"] = args.command
        plan = H.ExperimentPlan.from_dict(fields)
    if args.seed is not None:
        plan.seeds = [args.seed]
    if args.seeds is not None:
        plan.seeds = args.seeds
    if args.variant:
        if args.command not in ("lodo", "select-report"):
            raise ConfigError("--variant applies to lodo and select-report only")
        plan.variants = list(dict.fromkeys(args.variant))
    if args.epochs is not None:
        plan.optim = dataclasses.replace(plan.optim, epochs=args.epochs)
    if args.held_out is not None:
        plan.held_out = args.held_out
    if args.n_per_class is not None:
        plan.dataset = {**plan.dataset, "n_per_class": args.n_per_class}
    if args.workers is not None:
        plan.workers = args.workers
    return plan


def cmd_experiment(args) -> dict:
    plan = plan_from_args(args)
    H.validate_plan(plan)  # before anything touches the output directory
    report = H.RUNNERS[args.command](plan)
    paths = H.emit_report(report, args.out)
    sys.stdout.write(report.to_text())
    return {"report": str(paths["structured"]), "table": str(paths["table-text"]),
            "runs": len(report.runs), "seconds": round(report.wall_clock["total_seconds"], 3),
            "hygiene_violations": report.summary["hygiene_violations"]}


def cmd_gen_data(args) -> dict:
    spec = H.default_dataset()
    if args.config:
        spec.update(_load_json(args.config))
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.n_per_class is not None:
        spec["n_per_class"] = args.n_per_class
    unknown = set(spec) - set(H.default_dataset())
    if unknown:
        raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
    ds = H.resolve_dataset(spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dd.save_dataset(ds, args.out)
    return {"dataset": str(args.out), "domains": ds.domain_ids, "samples": sum(len(d) for d in ds.domains.values())}


def micro_gradient_check(seed: int = 0, variant: str = "Full", tol: float = 1e-4) -> ad.GradCheckReport:
    """Full loss of a two-domain micro model against central differences over all parameters."""
    model = D2SDKModel(ModelConfig(**MICRO_CONFIG, variant=variant, seed=seed))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, MICRO_CONFIG["d_in"]))
    y = rng.integers(0, MICRO_CONFIG["n_classes"], size=2)
    z = np.array([0, 1])
    return ad.gradient_check(lambda *_: compute_loss(model.forward(x), y, z, model.cfg.lam)[0],
                             model.params.tensors(), h=1e-4, tol=tol)


def cmd_grad_check(args) -> dict:
    t0 = time.perf_counter()
    rep = micro_gradient_check(args.seed, args.variant, args.tol)
    out = {"passed": bool(rep.passed), "max_rel_error": float(rep.max_rel_error), "n_checked": rep.n_checked,
           "excluded": len(rep.excluded), "seconds": round(time.perf_counter() - t0, 3)}
    if args.out:
        args.out.write_text(json.dumps(out, indent=1) + "\n")
    if not rep.passed:
        raise NumericError(f"gradient check failed: max relative error {rep.max_rel_error:.3e} >= {args.tol}")
    return out


COMMANDS = {"gen-data": cmd_gen_data, "grad-check": cmd_grad_check}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("UsageError", str(e), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handler = COMMANDS.get(args.command, cmd_experiment)
    try:
        result = handler(args)
    except (ConfigError, KeyError, UsageError) as e:
        return _fail(type(e).__name__, str(e).strip("'\""), 2)
    except (D2SDKError, OSError, ValueError) as e:
        return _fail(type(e).__name__, str(e), 1)
    print(json.dumps({"ok": True, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
