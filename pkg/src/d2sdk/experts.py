"""Shared backbone, per-domain local experts and the domain-agnostic query branch."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import glorot, zeros
from .autodiff import Tensor
from .errors import DimensionError

BACKBONE = "backbone"
GLOBAL = "global"


def expert_group(k: int) -> str:
    return f"expert{k}"


@dataclass
class BackboneParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ExpertParams:
    neck_w: Tensor
    neck_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def tensors(self):
        return {
            "neck.w": self.neck_w, "neck.b": self.neck_b,
            "head.w": self.head_w, "head.b": self.head_b,
        }


@dataclass
class QueryBranchParams:
    neck_w: Tensor
    neck_b: Tensor

    def tensors(self):
        return {"neck.w": self.neck_w, "neck.b": self.neck_b}


def init_backbone(rng: np.random.Generator, d_in: int, hidden: int, d_s: int) -> BackboneParams:
    return BackboneParams(glorot(rng, d_in, hidden), zeros(hidden), glorot(rng, hidden, d_s), zeros(d_s))


def init_expert(rng: np.random.Generator, d_s: int, d: int, n_classes: int) -> ExpertParams:
    return ExpertParams(glorot(rng, d_s, d), zeros(d), glorot(rng, d, n_classes), zeros(n_classes))


def init_query_branch(rng: np.random.Generator, d_s: int, d: int) -> QueryBranchParams:
    return QueryBranchParams(glorot(rng, d_s, d), zeros(d))


def backbone_forward(x: Tensor, p: BackboneParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise DimensionError(f"backbone: input dim {x.shape[-1]} != {p.w1.shape[0]}")
    h = ad.relu(ad.affine(x, p.w1, p.b1))
    return ad.relu(ad.affine(h, p.w2, p.b2))


def expert_neck(shared: Tensor, p: ExpertParams) -> Tensor:
    return ad.relu(ad.affine(shared, p.neck_w, p.neck_b))


def expert_head(feature: Tensor, p: ExpertParams) -> Tensor:
    return ad.affine(feature, p.head_w, p.head_b)


def expert_forward(shared: Tensor, experts: list[ExpertParams], k: int) -> tuple[Tensor, Tensor]:
    """Return the d-dim domain token and the domain classifier logits of expert ``k``."""
    if not 0 <= k < len(experts):
        raise IndexError(f"expert index {k} outside [0, {len(experts)})")
    feature = expert_neck(shared, experts[k])
    return feature, expert_head(feature, experts[k])


def query_forward(shared: Tensor, p: QueryBranchParams) -> Tensor:
    return ad.relu(ad.affine(shared, p.neck_w, p.neck_b))


class ParamRegistry:
    """Ordered name -> Tensor map where every parameter belongs to exactly one group."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._group: dict[str, str] = {}

    def add(self, group: str, prefix: str, tensors: dict[str, Tensor]) -> None:
        for key, t in tensors.items():
            name = f"{prefix}.{key}"
            if name in self._params:
                raise KeyError(f"duplicate parameter {name}")
            if any(t is other for other in self._params.values()):
                raise ValueError(f"parameter {name} already registered under another name")
            t.name = name
            self._params[name] = t
            self._group[name] = group

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def group_of(self, name: str) -> str:
        return self._group[name]

    def groups(self) -> OrderedDict[str, list[str]]:
        out: OrderedDict[str, list[str]] = OrderedDict()
        for name in self._params:
            out.setdefault(self._group[name], []).append(name)
        return out

    def group(self, group: str) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if self._group[n] == group}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{n}: stored shape {arr.shape} != {t.shape}")
            t.data[...] = arr
