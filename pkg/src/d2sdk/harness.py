"""Experiment orchestration: leave-one-domain-out runs, ablations, sweeps and reports.

Every experiment expands into independent runs keyed by (row, held-out
domain, seed). A run builds its own split, model and shuffle stream from the
seed, so runs can execute in any order or in parallel worker processes; the
report is merged in sorted order and is byte-stable for a given plan.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from . import data as dd
from .errors import ConfigError
from .model import VARIANTS, D2SDKModel, ModelConfig
from .trainer import POLICIES, OptimConfig, train_run

log = logging.getLogger(__name__)

REPORT_FORMAT = "d2sdk-report/1"
KINDS = ("lodo", "ablate", "sweep-lambda", "sweep-transformer", "select-report")
TARGETS = ("test", "test:mixed")
ABLATION_VARIANTS = ("ConvExp", "TEExp", "TD", "Full")
COMPARISON_VARIANTS = ("ERM", "ConvExp", "TEExp", "TD", "Full", "WeightedMoE")
LAMBDA_GRID = (0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01)
PAPER_TRANSFORMER_GRID = {"L": [2, 3, 4, 5], "num_heads": [2, 4, 8, 16], "d_ff": [512, 1024, 2048, 4096]}
# feed-forward widths scaled by 1/16 with the model (paper default 1024 -> desk default 64)
DESK_TRANSFORMER_GRID = {"L": [2, 3, 4, 5], "num_heads": [2, 4, 8, 16], "d_ff": [32, 64, 128, 256]}
SEED_POLICY = "data fixed by dataset seed; split, initialization and shuffling re-seeded per round"
MIX_FRACTION = 0.5


def default_dataset() -> dict[str, Any]:
    return {"name": "S4", "n_per_class": 200, "seed": 0, "noise_std": 0.15,
            "separation": 0.75, "d_in": 16, "n_classes": 5}


@dataclass
class ExperimentPlan:
    kind: str = "lodo"
    dataset: dict[str, Any] = field(default_factory=default_dataset)
    held_out: list[int] | None = None  # None: every domain in turn
    variants: list[str] = field(default_factory=lambda: list(COMPARISON_VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=40))
    model: dict[str, Any] = field(default_factory=dict)
    lambda_grid: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    transformer_grid: dict[str, list[int]] = field(default_factory=lambda: {
        k: list(v) for k, v in DESK_TRANSFORMER_GRID.items()})
    val_fraction: float = 0.1
    mixed_target: bool = True
    workers: int = 1

    @classmethod
    def paper_faithful(cls, kind: str = "lodo", **kw) -> ExperimentPlan:
        """Ten rounds, 80 epochs and the full-width feed-forward blocks."""
        plan = cls(kind=kind, seeds=list(range(10)), optim=OptimConfig(epochs=80),
                   model={"d_ff": 1024},
                   transformer_grid={k: list(v) for k, v in PAPER_TRANSFORMER_GRID.items()})
        return dataclasses.replace(plan, **kw)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("workers")  # execution detail, not part of the experiment
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentPlan:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan fields: {sorted(unknown)}")
        d = dict(d)
        if "optim" in d and not isinstance(d["optim"], OptimConfig):
            fields = {f.name for f in dataclasses.fields(OptimConfig)}
            bad = set(d["optim"]) - fields
            if bad:
                raise ConfigError(f"unknown optim fields: {sorted(bad)}")
            d["optim"] = OptimConfig(**d["optim"])
        if "dataset" in d:
            d["dataset"] = {**({} if "path" in d["dataset"] else default_dataset()), **d["dataset"]}
        return cls(**d)


@dataclass(frozen=True)
class RunKey:
    row: str
    variant: str
    held_out: int
    seed: int
    overrides: tuple[tuple[str, Any], ...] = ()


# --- dataset resolution ---------------------------------------------------------

def _dataset_key(spec: dict[str, Any]) -> str:
    return json.dumps(spec, sort_keys=True)


@lru_cache(maxsize=4)
def _dataset_cached(key: str) -> dd.Dataset:
    spec = json.loads(key)
    if "path" in spec:
        return dd.load_dataset(spec["path"])
    if spec.get("name", "S4") != "S4":
        raise ConfigError(f"unknown dataset name {spec.get('name')!r}")
    return dd.make_s4(n_per_class=spec["n_per_class"], d_in=spec["d_in"], n_classes=spec["n_classes"],
                      seed=spec["seed"], noise_std=spec["noise_std"], separation=spec["separation"])


def resolve_dataset(spec: dict[str, Any]) -> dd.Dataset:
    return _dataset_cached(_dataset_key(spec))


def mixed_target(ds: dd.Dataset, bundle: dd.DatasetBundle) -> dd.DomainData:
    """Unseen target mixing the first two source domains half and half."""
    a, b = ds.spec(bundle.source_ids[0]), ds.spec(bundle.source_ids[1])
    seed = int(np.random.SeedSequence([ds.seed, bundle.held_out, 0x313]).generate_state(1)[0])
    return dd.mix_domains(a, b, MIX_FRACTION).sample(ds.prototypes, ds.n_per_class, seed)


# --- plan expansion and validation ----------------------------------------------

def _rows(plan: ExperimentPlan) -> list[tuple[str, str, tuple[tuple[str, Any], ...]]]:
    """(row label, variant, model overrides) for every table row of the plan."""
    if plan.kind in ("lodo", "select-report"):
        return [(v, v, ()) for v in plan.variants]
    if plan.kind == "ablate":
        return [(v, v, ()) for v in ABLATION_VARIANTS]
    if plan.kind == "sweep-lambda":
        return [(f"lambda={lam!r}", "Full", (("lam", float(lam)),)) for lam in plan.lambda_grid]
    if plan.kind == "sweep-transformer":
        rows = []
        for name, values in plan.transformer_grid.items():
            rows += [(f"{name}={v}", "Full", ((name, v),)) for v in values]
        return rows
    raise ConfigError(f"unknown experiment kind {plan.kind!r}; expected one of {KINDS}")


def _model_config(plan: ExperimentPlan, ds: dd.Dataset, variant: str, overrides, seed: int) -> ModelConfig:
    base = {"K": len(ds.specs) - 1, "n_classes": ds.prototypes.shape[0], "d_in": ds.prototypes.shape[1]}
    return ModelConfig(**{**base, **plan.model, **dict(overrides), "variant": variant, "seed": seed})


def validate_plan(plan: ExperimentPlan) -> list[RunKey]:
    """Check the whole plan and expand it into runs; nothing is trained or written."""
    if plan.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {plan.kind!r}; expected one of {KINDS}")
    if not plan.seeds:
        raise ConfigError("plan has an empty seed list")
    if len(set(plan.seeds)) != len(plan.seeds) or min(plan.seeds) < 0:
        raise ConfigError(f"seeds must be distinct non-negative integers, got {plan.seeds}")
    if plan.kind in ("lodo", "select-report"):
        if not plan.variants:
            raise ConfigError("plan has an empty variant list")
        bad = [v for v in plan.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; expected from {VARIANTS}")
    if plan.kind == "sweep-lambda" and not plan.lambda_grid:
        raise ConfigError("empty lambda grid")
    if plan.kind == "sweep-transformer":
        bad = set(plan.transformer_grid) - {"L", "num_heads", "d_ff"}
        if bad or not any(plan.transformer_grid.values()):
            raise ConfigError(f"transformer grid needs non-empty L/num_heads/d_ff lists, got {plan.transformer_grid}")
    if "variant" in plan.model or "seed" in plan.model:
        raise ConfigError("model overrides may not set variant or seed")
    if plan.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not 0 < plan.val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {plan.val_fraction}")
    try:
        ds = resolve_dataset(plan.dataset)
    except (OSError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot build dataset {plan.dataset}: {e}") from e
    if len(ds.specs) < 2:
        raise ConfigError("leave-one-domain-out needs at least two domains")
    held = ds.domain_ids if plan.held_out is None else list(plan.held_out)
    if not held:
        raise ConfigError("plan has an empty held-out list")
    missing = [h for h in held if h not in ds.domain_ids]
    if missing:
        raise ConfigError(f"held-out domains {missing} not in dataset {ds.domain_ids}")
    if plan.mixed_target and len(ds.specs) < 3:
        raise ConfigError("the mixed target needs at least two source domains")
    rows = _rows(plan)
    if not rows:
        raise ConfigError("plan expands to no rows")
    keys = []
    for row, variant, ov in rows:
        _model_config(plan, ds, variant, ov, 0)  # raises on inconsistent overrides
        keys += [RunKey(row, variant, h, s, ov) for h in held for s in plan.seeds]
    return keys


# --- execution ------------------------------------------------------------------

def execute_run(plan: ExperimentPlan, key: RunKey) -> dict[str, Any]:
    """Train one (row, held-out domain, seed) cell and return its record."""
    ds = resolve_dataset(plan.dataset)
    bundle = dd.make_lodo_split(ds, key.held_out, plan.val_fraction, seed=key.seed)
    if plan.mixed_target:
        bundle.add_extra_target("mixed", mixed_target(ds, bundle))
    model = D2SDKModel(_model_config(plan, ds, key.variant, key.overrides, key.seed))
    t0 = time.perf_counter()
    res = train_run(model, bundle, plan.optim, seed=key.seed)
    elapsed = time.perf_counter() - t0
    last = res.epochs[-1]
    return {
        "row": key.row,
        "variant": key.variant,
        "held_out": key.held_out,
        "seed": key.seed,
        "source_ids": res.source_ids,
        "selection": res.selection,
        "final_val_acc": last["val_acc"],
        "final_val_acc_per_domain": last["val_acc_per_domain"],
        "final_loss": last["loss_total"],
        "target_reads": len(res.target_reads),
        "hygiene_violations": [list(v) for v in res.hygiene_violations()],
        "_seconds": elapsed,
    }


def _execute(args):
    plan, key = args
    return execute_run(plan, key)


def _sort_key(rec: dict[str, Any], row_order: dict[str, int]):
    return (row_order[rec["row"]], rec["held_out"], rec["seed"])


# --- report ---------------------------------------------------------------------

def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


@dataclass
class ExperimentReport:
    kind: str
    plan: dict[str, Any]
    rows: list[str]
    columns: list[int]
    runs: list[dict[str, Any]]
    summary: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)  # kept out of the structured file

    def cell_values(self, row: str, column: int, policy: str, target: str = "test") -> list[float]:
        field_name = "test_acc" if target == "test" else f"test_acc:{target.split(':', 1)[1]}"
        return [r["selection"][policy][field_name] for r in self.runs
                if r["row"] == row and r["held_out"] == column]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "kind": self.kind,
            "plan": self.plan,
            "rows": self.rows,
            "columns": self.columns,
            "runs": self.runs,
            "summary": self.summary,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentReport:
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"not a report (format={d.get('format')!r})")
        return cls(d["kind"], d["plan"], d["rows"], d["columns"], d["runs"], d["summary"], d["provenance"])

    @classmethod
    def from_json(cls, text: str) -> ExperimentReport:
        return cls.from_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentReport) and self.to_dict() == other.to_dict()

    def to_text(self) -> str:
        """Aligned tables: one per (target, policy), one column per held-out domain plus Ave."""
        lines = [f"# {self.kind}  seeds={self.plan['seeds']}  epochs={self.plan['optim']['epochs']}",
                 f"# {self.provenance.get('seed_policy', '')}"]
        for note in self.provenance.get("notes", []):
            lines.append(f"# {note}")
        header = ["row"] + [f"domain {c}" for c in self.columns] + ["Ave."]
        for target, by_policy in self.summary["accuracy"].items():
            for policy, rows in by_policy.items():
                lines += ["", f"## target={target} policy={policy} (mean +- std over seeds)"]
                table = [header]
                for row in self.rows:
                    cells = rows[row]
                    table.append([row] + [f"{cells['mean'][str(c)]!r} +- {cells['std'][str(c)]:.4f}"
                                          for c in self.columns] + [repr(cells["ave"])])
                lines += _align(table)
        if "selection_gap" in self.summary:
            lines += ["", "## test-best minus last-epoch on the held-out domain"]
            table = [["row", "mean gap", "max gap", "min gap", "val-best minus last (mean)"]]
            for row in self.rows:
                g = self.summary["selection_gap"][row]
                table.append([row, repr(g["mean"]), repr(g["max"]), repr(g["min"]), repr(g["val_minus_last"])])
            lines += _align(table)
        return "\n".join(lines) + "\n"


def _align(table: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table]


def summarize(kind: str, rows: list[str], columns: list[int], runs: list[dict[str, Any]],
              targets: list[str]) -> dict[str, Any]:
    acc: dict[str, Any] = {}
    for target in targets:
        field_name = "test_acc" if target == "test" else f"test_acc:{target.split(':', 1)[1]}"
        acc[target] = {}
        for policy in POLICIES:
            acc[target][policy] = {}
            for row in rows:
                mean, std = {}, {}
                for c in columns:
                    vals = [r["selection"][policy][field_name] for r in runs
                            if r["row"] == row and r["held_out"] == c]
                    mean[str(c)], std[str(c)] = _mean_std(vals)
                ave = float(np.mean([mean[str(c)] for c in columns]))
                acc[target][policy][row] = {"mean": mean, "std": std, "ave": ave}
    out: dict[str, Any] = {"accuracy": acc}
    vals = {row: [r["final_val_acc"] for r in runs if r["row"] == row] for row in rows}
    out["source_val_acc"] = {row: {"mean": _mean_std(v)[0], "min": min(v)} for row, v in vals.items()}
    out["hygiene_violations"] = sum(len(r["hygiene_violations"]) for r in runs)
    out["dominance_failures"] = [
        [r["row"], r["held_out"], r["seed"]] for r in runs
        if not (r["selection"]["test-best"]["test_acc"] >= r["selection"]["last-epoch"]["test_acc"]
                and r["selection"]["test-best"]["test_acc"] >= r["selection"]["validation-best"]["test_acc"])
    ]
    if kind == "select-report":
        gap = {}
        for row in rows:
            sel = [r["selection"] for r in runs if r["row"] == row]
            d = [s["test-best"]["test_acc"] - s["last-epoch"]["test_acc"] for s in sel]
            v = [s["validation-best"]["test_acc"] - s["last-epoch"]["test_acc"] for s in sel]
            gap[row] = {"mean": float(np.mean(d)), "max": float(max(d)), "min": float(min(d)),
                        "val_minus_last": float(np.mean(v))}
        out["selection_gap"] = gap
    return out


def run_plan(plan: ExperimentPlan) -> ExperimentReport:
    """Validate, run every cell (optionally in worker processes) and merge deterministically."""
    keys = validate_plan(plan)
    t0 = time.perf_counter()
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            records = list(pool.map(_execute, [(plan, k) for k in keys]))
    else:
        records = []
        for i, k in enumerate(keys):
            records.append(execute_run(plan, k))
            log.info("run %d/%d %s held_out=%d seed=%d done", i + 1, len(keys), k.row, k.held_out, k.seed)
    total = time.perf_counter() - t0
    rows = list(dict.fromkeys(k.row for k in keys))
    order = {r: i for i, r in enumerate(rows)}
    per_run = {f"{r['row']}|{r['held_out']}|{r['seed']}": r.pop("_seconds") for r in records}
    records.sort(key=lambda r: _sort_key(r, order))
    columns = sorted({k.held_out for k in keys})
    targets = ["test"] + (["test:mixed"] if plan.mixed_target else [])
    provenance = {"seed_policy": SEED_POLICY, "policies": list(POLICIES),
                  "mix_fraction": MIX_FRACTION if plan.mixed_target else None, "notes": _notes(plan)}
    return ExperimentReport(
        kind=plan.kind, plan=plan.to_dict(), rows=rows, columns=columns, runs=records,
        summary=summarize(plan.kind, rows, columns, records, targets), provenance=provenance,
        wall_clock={"total_seconds": total, "runs": per_run},
    )


def _notes(plan: ExperimentPlan) -> list[str]:
    notes = []
    if plan.kind == "sweep-transformer":
        notes.append(f"grid {plan.transformer_grid}; paper grid {PAPER_TRANSFORMER_GRID}; "
                     "feed-forward widths scaled by the desk model size")
    if plan.mixed_target:
        notes.append(f"target test:mixed draws from the first two source domains at fraction {MIX_FRACTION}")
    return notes


def _kind(plan: ExperimentPlan, kind: str) -> ExperimentPlan:
    return plan if plan.kind == kind else dataclasses.replace(plan, kind=kind)


def run_lodo(plan: ExperimentPlan) -> ExperimentReport:
    return run_plan(_kind(plan, "lodo"))


def run_ablation(plan: ExperimentPlan) -> ExperimentReport:
    return run_plan(_kind(plan, "ablate"))


def run_lambda_sweep(plan: ExperimentPlan) -> ExperimentReport:
    return run_plan(_kind(plan, "sweep-lambda"))


def run_transformer_sweep(plan: ExperimentPlan) -> ExperimentReport:
    return run_plan(_kind(plan, "sweep-transformer"))


def run_selection_report(plan: ExperimentPlan) -> ExperimentReport:
    return run_plan(_kind(plan, "select-report"))


RUNNERS = {
    "lodo": run_lodo,
    "ablate": run_ablation,
    "sweep-lambda": run_lambda_sweep,
    "sweep-transformer": run_transformer_sweep,
    "select-report": run_selection_report,
}


def emit_report(report: ExperimentReport, out_dir: str | Path,
                formats: tuple[str, ...] = ("table-text", "structured")) -> dict[str, Path]:
    """Write report.txt and/or report.json (plus timing.json with wall-clock figures)."""
    if not report.runs:
        raise ConfigError("refusing to emit an empty report")
    bad = set(formats) - {"table-text", "structured"}
    if bad:
        raise ConfigError(f"unknown report formats {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if "structured" in formats:
        written["structured"] = out / "report.json"
        written["structured"].write_text(report.to_json())
    if "table-text" in formats:
        written["table-text"] = out / "report.txt"
        written["table-text"].write_text(report.to_text())
    if report.wall_clock:
        written["timing"] = out / "timing.json"
        written["timing"].write_text(json.dumps(report.wall_clock, indent=1, sort_keys=True) + "\n")
    return written


def parse_text_means(text: str) -> dict[tuple[str, str, str], list[float]]:
    """Read the per-row means (per domain, then Ave.) back out of a text table."""
    out, key = {}, None
    for line in text.splitlines():
        if line.startswith("## "):
            key = None
            if line.startswith("## target="):
                parts = dict(p.split("=", 1) for p in line[3:].split(" (")[0].split())
                key = (parts["target"], parts["policy"])
            continue
        if key is None or not line or line.startswith("#") or line.startswith("row "):
            continue
        cells = [c for c in line.split("  ") if c.strip()]
        row = cells[0].strip()
        nums = [float(c.split("+-")[0]) for c in cells[1:]]
        out[(key[0], key[1], row)] = nums
    return out
