"""SGD training loop with a single step decay, per-epoch evaluation and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from .data import DatasetBundle, DomainData
from .errors import ConfigError, DimensionError, NumericError
from .model import Checkpoint, D2SDKModel, compute_loss, predict

log = logging.getLogger(__name__)

POLICIES = ("last-epoch", "validation-best", "test-best")
EVAL_BATCH = 1024


@dataclass
class OptimConfig:
    lr0: float = 0.001
    batch_size: int = 32
    epochs: int = 80
    decay_factor: float = 0.1
    decay_at_fraction: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 0.0
    stratified: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay_at_fraction <= 1:
            raise ConfigError(f"decay_at_fraction must lie in (0, 1], got {self.decay_at_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def decay_epoch(oc: OptimConfig) -> int:
    # round() guards against products like 0.7 * 10 = 7.000000000000001
    return math.ceil(round(oc.decay_at_fraction * oc.epochs, 9))


def lr_at(epoch: int, oc: OptimConfig) -> float:
    if not 0 <= epoch < oc.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {oc.epochs})")
    return oc.lr0 if epoch < decay_epoch(oc) else oc.lr0 * oc.decay_factor


@dataclass
class TrainState:
    epoch: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    best: dict[str, tuple[int, float]] = field(default_factory=dict)


def sgd_step(params, state: TrainState, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """v <- momentum * v + g (+ weight_decay * w); w <- w - lr * v; then clear grads.

    ``params`` is an iterable of (name, Tensor); a parameter no gradient
    reached is treated as having a zero gradient.
    """
    for name, p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != parameter shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        buf = state.momentum.get(name)
        if buf is None:
            buf = state.momentum[name] = g.copy()
        else:
            if buf.shape != p.shape:
                raise DimensionError(f"{name}: momentum buffer shape {buf.shape} != {p.shape}")
            buf *= momentum
            buf += g
        p.data -= lr * buf
        p.grad = None


class NonFiniteLossError(NumericError):
    pass


def predictions(model: D2SDKModel, data: DomainData) -> np.ndarray:
    return np.concatenate([model.predict(data.x[s:s + EVAL_BATCH]) for s in range(0, len(data), EVAL_BATCH)])


def accuracy(model: D2SDKModel, data: DomainData) -> float:
    return int((predictions(model, data) == data.y).sum()) / len(data)


def _batches(pool: DomainData, oc: OptimConfig, rng: np.random.Generator) -> list[np.ndarray]:
    n = len(pool)
    if not oc.stratified:
        order = rng.permutation(n)
        return [order[s:s + oc.batch_size] for s in range(0, n, oc.batch_size)]
    # round-robin over per-domain shuffles so each batch mixes domains evenly
    per_dom = [rng.permutation(np.flatnonzero(pool.z == k)) for k in np.unique(pool.z)]
    order, i = [], 0
    while any(i < len(p) for p in per_dom):
        order.extend(int(p[i]) for p in per_dom if i < len(p))
        i += 1
    order = np.asarray(order)
    return [order[s:s + oc.batch_size] for s in range(0, n, oc.batch_size)]


@dataclass
class RunResult:
    """Everything one training run produces."""

    config: dict[str, Any]
    optim: dict[str, Any]
    seed: int
    held_out: int
    source_ids: list[int]
    epochs: list[dict[str, Any]]
    selection: dict[str, dict[str, Any]]
    target_reads: list[tuple[str, str]]
    final: Checkpoint
    best_states: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def loss_log(self) -> list[float]:
        return [e["loss_total"] for e in self.epochs]

    def hygiene_violations(self) -> list[tuple[str, str]]:
        return [r for r in self.target_reads if r[0] in ("train", "select")]


def select_epochs(epochs: list[dict[str, Any]], with_test: bool) -> dict[str, int]:
    """Epoch index chosen by each selection policy (ties go to the earliest epoch)."""
    chosen = {"last-epoch": len(epochs) - 1}
    val = [e["val_acc"] for e in epochs]
    chosen["validation-best"] = int(np.argmax(val))
    if with_test:
        chosen["test-best"] = int(np.argmax([e["test_acc"] for e in epochs]))
    return chosen


def train_run(
    model: D2SDKModel,
    bundle: DatasetBundle,
    oc: OptimConfig,
    seed: int = 0,
    hooks: list[Callable[[dict[str, Any]], None]] | None = None,
    out_dir: str | Path | None = None,
    monitor_target: bool = True,
) -> RunResult:
    """Train ``model`` on the bundle's pooled source domains.

    ``monitor_target`` enables the per-epoch target evaluation needed by the
    test-best policy; it runs after the epoch's updates, outside the training
    and selection phases.
    """
    if bundle.K < 1:
        raise ConfigError("bundle has no source domain")
    if model.cfg.has_experts and bundle.K != model.cfg.K:
        raise ConfigError(f"model has K={model.cfg.K} experts but bundle has {bundle.K} sources")
    guard = bundle.guard
    pool = bundle.train_pool()
    val = bundle.val_pool()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))
    state = TrainState()
    lam = model.cfg.lam
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "epochs.jsonl").write_text("")
    records: list[dict[str, Any]] = []
    best_states: dict[str, dict[str, np.ndarray]] = {}
    best_val = -1.0
    best_test = -1.0

    for epoch in range(oc.epochs):
        guard.phase = "train"
        lr = lr_at(epoch, oc)
        sums = np.zeros(3)
        for bi, idx in enumerate(_batches(pool, oc, rng)):
            out = model.forward(pool.x[idx])
            loss, parts = compute_loss(out, pool.y[idx], pool.z[idx], lam)
            if not math.isfinite(parts.total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} batch {bi}: total={parts.total} "
                    f"domain={parts.domain} global={parts.global_}"
                )
            ad.backward(loss)
            sgd_step(model.params, state, lr, oc.momentum, oc.weight_decay)
            sums += len(idx) * np.array([parts.total, parts.domain, parts.global_])
        sums /= len(pool)
        state.epoch = epoch + 1

        guard.phase = "evaluate"
        rec: dict[str, Any] = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": float(sums[0]),
            "loss_domain": float(sums[1]),
            "loss_global": float(sums[2]),
        }
        hit = predictions(model, val) == val.y
        rec["val_acc"] = int(hit.sum()) / len(val)
        rec["val_acc_per_domain"] = [int(hit[val.z == k].sum()) / int((val.z == k).sum()) for k in range(bundle.K)]
        if monitor_target:
            guard.phase = "monitor"
            rec["test_acc"] = accuracy(model, bundle.target("per-epoch-test"))
            for name in bundle.extra_target_names:
                rec[f"test_acc:{name}"] = accuracy(model, bundle.extra_target(name, "per-epoch-test"))
        records.append(rec)
        for hook in hooks or ():
            hook(rec)
        if out_dir is not None:
            with open(out_dir / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        log.debug("epoch %d lr=%g loss=%.6f val=%.4f", epoch, lr, rec["loss_total"], rec["val_acc"])

        # snapshots for the best-epoch checkpoints; strict improvement keeps the earliest epoch
        guard.phase = "select"
        if rec["val_acc"] > best_val:
            best_val = rec["val_acc"]
            best_states["validation-best"] = model.params.state()
            state.best["validation-best"] = (epoch, best_val)
        guard.phase = "monitor"
        if monitor_target and rec["test_acc"] > best_test:
            best_test = rec["test_acc"]
            best_states["test-best"] = model.params.state()
            state.best["test-best"] = (epoch, best_test)

    guard.phase = "select"
    chosen = select_epochs(records, with_test=False)
    guard.phase = "monitor"
    if monitor_target:
        chosen["test-best"] = select_epochs(records, with_test=True)["test-best"]
    guard.phase = "done"

    selection = {}
    for policy, ep in chosen.items():
        entry = {"epoch": ep, "val_acc": records[ep]["val_acc"]}
        if monitor_target:
            entry["test_acc"] = records[ep]["test_acc"]
            for name in bundle.extra_target_names:
                entry[f"test_acc:{name}"] = records[ep][f"test_acc:{name}"]
        selection[policy] = entry

    final = Checkpoint.capture(
        model, optimizer=state.momentum, rng_state=rng.bit_generator.state, epoch=oc.epochs,
        meta={"seed": seed, "held_out": bundle.held_out, "optim": oc.to_dict()},
    )
    result = RunResult(
        config=model.cfg.to_dict(), optim=oc.to_dict(), seed=seed, held_out=bundle.held_out,
        source_ids=list(bundle.source_ids), epochs=records, selection=selection,
        target_reads=list(guard.reads), final=final, best_states=best_states,
    )
    if out_dir is not None:
        final.save(out_dir / "checkpoint-last.json")
        for policy, st in best_states.items():
            ck = Checkpoint(final.config, st, final.groups, epoch=chosen[policy] + 1,
                            meta={**final.meta, "policy": policy})
            ck.save(out_dir / f"checkpoint-{policy}.json")
    return result
