"""Procedural multi-domain classification data with controllable domain shift.

Each domain maps class prototypes through its own rotation (first two
coordinates), per-coordinate scale and additive bias, then adds isotropic
Gaussian noise. Generation is a pure function of its arguments.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError

DATASET_FORMAT = "d2sdk-dataset/1"
TARGET_DOMAIN = -1  # domain label given to mixed / unseen samples


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    rotation_deg: float = 0.0
    scale: tuple[float, ...] = ()
    bias: tuple[float, ...] = ()
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError(f"domain {self.domain_id}: noise std must be >= 0")
        if any(s == 0 for s in self.scale):
            raise ConfigError(f"domain {self.domain_id}: scale entries must be non-zero")

    def scale_vec(self, d_in: int) -> np.ndarray:
        return _vec(self.scale, d_in, 1.0, "scale")

    def bias_vec(self, d_in: int) -> np.ndarray:
        return _vec(self.bias, d_in, 0.0, "bias")

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Noise-free image of ``points`` ([n x D_in]) under this domain."""
        d_in = points.shape[1]
        out = points.copy()
        if d_in >= 2 and self.rotation_deg:
            t = math.radians(self.rotation_deg)
            c, s = math.cos(t), math.sin(t)
            x0, x1 = points[:, 0], points[:, 1]
            out[:, 0] = c * x0 - s * x1
            out[:, 1] = s * x0 + c * x1
        return out * self.scale_vec(d_in) + self.bias_vec(d_in)

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "rotation_deg": self.rotation_deg,
            "scale": list(self.scale),
            "bias": list(self.bias),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        return cls(
            int(d["domain_id"]), float(d["rotation_deg"]), tuple(d["scale"]),
            tuple(d["bias"]), float(d["noise_std"]),
        )


def _vec(values, d_in, default, what) -> np.ndarray:
    if len(values) == 0:
        return np.full(d_in, default)
    if len(values) != d_in:
        raise DimensionError(f"{what} has {len(values)} entries, expected {d_in}")
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class DomainSample:
    x: np.ndarray
    y: int
    z: int


@dataclass
class DomainData:
    """Column-oriented samples of one domain (or one split of it)."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    provenance: np.ndarray | None = None  # source spec index for mixed domains

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __iter__(self) -> Iterator[DomainSample]:
        for i in range(len(self)):
            yield DomainSample(self.x[i], int(self.y[i]), int(self.z[i]))

    def subset(self, idx) -> DomainData:
        idx = np.asarray(idx, dtype=np.int64)
        prov = None if self.provenance is None else self.provenance[idx]
        return DomainData(self.x[idx], self.y[idx], self.z[idx], prov)

    @staticmethod
    def concat(parts: Sequence[DomainData]) -> DomainData:
        return DomainData(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.z for p in parts]),
        )

    def canonical_order(self) -> np.ndarray:
        """Row permutation sorting samples by content, independent of input order."""
        keys = [self.x[:, j] for j in range(self.x.shape[1] - 1, -1, -1)]
        return np.lexsort(keys + [self.y, self.z])


def make_class_prototypes(n_classes: int, d_in: int, separation: float, seed: int) -> np.ndarray:
    """``n_classes`` points on a sphere of radius ``separation``, pairwise >= ``separation`` apart."""
    if separation <= 0:
        raise ConfigError("separation must be positive")
    if n_classes < 1 or d_in < 1:
        raise ConfigError("n_classes and d_in must be positive")
    rng = np.random.default_rng(seed)
    best, best_gap = None, -1.0
    for _ in range(200):
        u = rng.normal(size=(n_classes, d_in))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        gap = min_pairwise_distance(u)
        if gap >= 1.0:
            protos = u * separation
            break
        if gap > best_gap:
            best, best_gap = u, gap
    else:
        # crowded sphere (many classes in few dims): grow the radius instead
        protos = best * (separation / best_gap) * (1 + 1e-12)
    if min_pairwise_distance(protos) < separation:
        raise RuntimeError("prototype placement failed the separation check")
    return protos


def min_pairwise_distance(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return math.inf
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return float(dist[np.triu_indices(points.shape[0], 1)].min())


def sample_domain(spec: DomainSpec, prototypes: np.ndarray, n_per_class: int, seed: int) -> DomainData:
    """x = scale * rotate(prototype_y) + bias + N(0, noise_std^2); class-balanced, class-major order."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    n_classes, d_in = prototypes.shape
    centers = spec.transform(prototypes)
    y = np.repeat(np.arange(n_classes), n_per_class)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(y.size, d_in)) * spec.noise_std
    return DomainData(centers[y] + noise, y, np.full(y.size, spec.domain_id, dtype=np.int64))


@dataclass(frozen=True)
class MixedDomain:
    """Samples drawn from ``a`` with probability ``fraction``, else from ``b``."""

    a: DomainSpec
    b: DomainSpec
    fraction: float
    domain_id: int = TARGET_DOMAIN

    def sample(self, prototypes: np.ndarray, n_per_class: int, seed: int) -> DomainData:
        n_classes, d_in = prototypes.shape
        rng = np.random.default_rng(seed)
        y = np.repeat(np.arange(n_classes), n_per_class)
        from_a = rng.random(y.size) < self.fraction
        noise = rng.normal(0.0, 1.0, size=(y.size, d_in))
        ca, cb = self.a.transform(prototypes), self.b.transform(prototypes)
        x = np.where(
            from_a[:, None],
            ca[y] + noise * self.a.noise_std,
            cb[y] + noise * self.b.noise_std,
        )
        prov = np.where(from_a, 0, 1).astype(np.int64)
        return DomainData(x, y, np.full(y.size, self.domain_id, dtype=np.int64), prov)


def mix_domains(a: DomainSpec, b: DomainSpec, fraction: float) -> MixedDomain:
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"mix fraction must lie in [0, 1], got {fraction}")
    return MixedDomain(a, b, float(fraction))


def s4_specs(d_in: int = 16, seed: int = 0, noise_std: float = 0.15) -> list[DomainSpec]:
    """The default four-domain benchmark: rotations 0/25/50/75 degrees."""
    rng = np.random.default_rng(seed)
    specs = []
    for k, angle in enumerate((0.0, 25.0, 50.0, 75.0)):
        scale = rng.uniform(0.8, 1.25, size=d_in)
        bias = rng.uniform(-0.3, 0.3, size=d_in)
        specs.append(DomainSpec(k, angle, tuple(scale.tolist()), tuple(bias.tolist()), noise_std))
    return specs


@dataclass
class Dataset:
    specs: list[DomainSpec]
    prototypes: np.ndarray
    n_per_class: int
    seed: int
    domains: dict[int, DomainData]
    meta: dict = field(default_factory=dict)

    @property
    def domain_ids(self) -> list[int]:
        return [s.domain_id for s in self.specs]

    def spec(self, domain_id: int) -> DomainSpec:
        for s in self.specs:
            if s.domain_id == domain_id:
                return s
        raise KeyError(f"unknown domain id {domain_id}")


def make_dataset(
    specs: Sequence[DomainSpec],
    n_classes: int = 5,
    d_in: int = 16,
    n_per_class: int = 200,
    separation: float = 0.75,
    seed: int = 0,
) -> Dataset:
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids {ids}")
    ss = np.random.SeedSequence(seed)
    proto_ss, *dom_ss = ss.spawn(len(specs) + 1)
    protos = make_class_prototypes(n_classes, d_in, separation, proto_ss.generate_state(1)[0])
    domains = {
        s.domain_id: sample_domain(s, protos, n_per_class, int(d.generate_state(1)[0]))
        for s, d in zip(specs, dom_ss)
    }
    return Dataset(list(specs), protos, n_per_class, seed, domains,
                   {"separation": separation})


def make_s4(n_per_class: int = 200, d_in: int = 16, n_classes: int = 5, seed: int = 0,
            noise_std: float = 0.15, separation: float = 0.75) -> Dataset:
    return make_dataset(s4_specs(d_in, seed, noise_std), n_classes, d_in, n_per_class, separation, seed)


# --- leave-one-domain-out -----------------------------------------------------

class TargetAccessError(RuntimeError):
    pass


class TargetGuard:
    """Records every read of target-domain data together with the caller's phase."""

    FORBIDDEN = ("train", "select")

    def __init__(self) -> None:
        self.phase = "setup"
        self.reads: list[tuple[str, str]] = []

    def record(self, purpose: str) -> None:
        self.reads.append((self.phase, purpose))

    def violations(self) -> list[tuple[str, str]]:
        return [r for r in self.reads if r[0] in self.FORBIDDEN]


@dataclass
class DatasetBundle:
    source_ids: list[int]  # original domain id of expert k
    train: list[DomainData]  # per source domain, z relabelled to 0..K-1
    val: list[DomainData]
    train_idx: list[np.ndarray]
    val_idx: list[np.ndarray]
    held_out: int
    _target: DomainData
    _extra_targets: dict[str, DomainData] = field(default_factory=dict)
    guard: TargetGuard = field(default_factory=TargetGuard)

    @property
    def K(self) -> int:
        return len(self.source_ids)

    @property
    def n_source(self) -> int:
        return int(sum(len(t) for t in self.train))

    def train_pool(self) -> DomainData:
        return DomainData.concat(self.train)

    def val_pool(self) -> DomainData:
        return DomainData.concat(self.val)

    def target(self, purpose: str) -> DomainData:
        self.guard.record(purpose)
        return self._target

    def extra_target(self, name: str, purpose: str) -> DomainData:
        self.guard.record(f"{purpose}:{name}")
        return self._extra_targets[name]

    @property
    def extra_target_names(self) -> list[str]:
        return sorted(self._extra_targets)

    def add_extra_target(self, name: str, data: DomainData) -> None:
        self._extra_targets[name] = data


def n_validation(n: int, val_fraction: float) -> int:
    return int(math.floor(val_fraction * n + 0.5))


def make_lodo_split(dataset: Dataset, held_out: int, val_fraction: float = 0.1, seed: int = 0) -> DatasetBundle:
    """Hold ``held_out`` out as the test-only target; split every source domain into train/val."""
    if held_out not in dataset.domains:
        raise KeyError(f"unknown held-out domain id {held_out}; have {sorted(dataset.domains)}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    source_ids = sorted(d for d in dataset.domains if d != held_out)
    if not source_ids:
        raise ConfigError("need at least one source domain")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    train, val, train_idx, val_idx = [], [], [], []
    for k, dom in enumerate(source_ids):
        data = dataset.domains[dom]
        canon = data.subset(data.canonical_order())
        n = len(canon)
        perm = rng.permutation(n)
        nv = n_validation(n, val_fraction)
        vi, ti = np.sort(perm[:nv]), np.sort(perm[nv:])
        tr, va = canon.subset(ti), canon.subset(vi)
        tr.z = np.full(len(tr), k, dtype=np.int64)
        va.z = np.full(len(va), k, dtype=np.int64)
        train.append(tr)
        val.append(va)
        train_idx.append(ti)
        val_idx.append(vi)
    target = dataset.domains[held_out]
    target = target.subset(target.canonical_order())
    return DatasetBundle(source_ids, train, val, train_idx, val_idx, held_out, target)


# --- text export ----------------------------------------------------------------

def save_dataset(ds: Dataset, path: str | Path) -> Path:
    """One record per line: domain id, class id, then D_in floats at 17 significant digits."""
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "seed": ds.seed,
        "n_per_class": ds.n_per_class,
        "specs": [s.to_dict() for s in ds.specs],
        "prototypes": ds.prototypes.tolist(),
        "meta": ds.meta,
    }
    d_in = ds.prototypes.shape[1]
    lines = ["# " + json.dumps(header, allow_nan=False)]
    lines.append(",".join(["domain", "class"] + [f"x{j}" for j in range(d_in)]))
    for dom in ds.domain_ids:
        data = ds.domains[dom]
        for i in range(len(data)):
            vals = ",".join(format(float(v), ".17g") for v in data.x[i])
            lines.append(f"{int(data.z[i])},{int(data.y[i])},{vals}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise ValueError(f"{path}: missing dataset header")
    header = json.loads(text[0][2:])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported format {header.get('format')!r}")
    specs = [DomainSpec.from_dict(s) for s in header["specs"]]
    protos = np.asarray(header["prototypes"], dtype=np.float64)
    rows: dict[int, list[tuple[int, list[float]]]] = {s.domain_id: [] for s in specs}
    for line in text[2:]:
        if not line.strip():
            continue
        parts = line.split(",")
        dom, cls = int(parts[0]), int(parts[1])
        rows.setdefault(dom, []).append((cls, [float(v) for v in parts[2:]]))
    domains = {}
    for dom, rs in rows.items():
        x = np.asarray([r[1] for r in rs], dtype=np.float64).reshape(len(rs), protos.shape[1])
        y = np.asarray([r[0] for r in rs], dtype=np.int64)
        domains[dom] = DomainData(x, y, np.full(len(rs), dom, dtype=np.int64))
    return Dataset(specs, protos, int(header["n_per_class"]), int(header["seed"]), domains,
                   header.get("meta", {}))
