"""The D2SDK network, its ablation sub-models and the MoE baselines.

A :class:`D2SDKModel` owns a :class:`~d2sdk.experts.ParamRegistry` split into
the backbone group, one group per local expert and the global group (query
branch, cross-domain Transformer, final classifier and any variant-specific
classifiers).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import experts as ex
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

VARIANTS = ("Full", "ConvExp", "TEExp", "TD", "WeightedMoE", "ERM")
CHECKPOINT_FORMAT = "d2sdk-checkpoint/1"

# child indices of the global seed sequence; fixed so that parameters of one
# sub-module never depend on which other sub-modules a variant builds
_STREAM_QUERY, _STREAM_ENCODER, _STREAM_DECODER, _STREAM_FC, _STREAM_EXTRA, _STREAM_EMBED = range(6)


@dataclass
class ModelConfig:
    K: int = 3
    n_classes: int = 5
    d_in: int = 16
    backbone_hidden: int = 64
    d_s: int = 64
    d: int = 32
    L: int = 2
    num_heads: int = 2
    d_ff: int = 64
    lam: float = 0.1
    variant: str = "Full"
    domain_embedding: bool = False
    decoder_self_attn: bool = True
    attn_bias: bool = True
    enc_layers: int | None = None
    dec_layers: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.num_heads < 1 or self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("d_in", "backbone_hidden", "d_s", "d", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("L", "enc_layers", "dec_layers"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def n_enc(self) -> int:
        if self.variant == "TD":
            return 0
        return self.L if self.enc_layers is None else self.enc_layers

    @property
    def n_dec(self) -> int:
        return self.L if self.dec_layers is None else self.dec_layers

    @property
    def has_experts(self) -> bool:
        return self.variant != "ERM"

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    global_logits: Tensor
    expert_logits: list[Tensor] = field(default_factory=list)
    decoded_feature: Tensor | None = None
    moe_weights: np.ndarray | None = None


@dataclass
class LossParts:
    domain: float
    global_: float
    total: float
    lam: float


class D2SDKModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params = ex.ParamRegistry()
        self.head_evaluations = 0
        root = np.random.SeedSequence(cfg.seed)
        s_backbone, s_experts, s_global = root.spawn(3)
        rng = lambda ss: np.random.default_rng(ss)  # noqa: E731

        self.backbone = ex.init_backbone(rng(s_backbone), cfg.d_in, cfg.backbone_hidden, cfg.d_s)
        self.params.add(ex.BACKBONE, "backbone", self.backbone.tensors())

        self.experts: list[ex.ExpertParams] = []
        if cfg.has_experts:
            for k, ss in enumerate(s_experts.spawn(cfg.K)):
                p = ex.init_expert(rng(ss), cfg.d_s, cfg.d, cfg.n_classes)
                self.experts.append(p)
                self.params.add(ex.expert_group(k), f"expert{k}", p.tensors())

        streams = s_global.spawn(6)
        self.query = ex.init_query_branch(rng(streams[_STREAM_QUERY]), cfg.d_s, cfg.d)
        self.params.add(ex.GLOBAL, "query", self.query.tensors())

        self.encoder: list[attn.EncoderLayerParams] = []
        self.decoder: list[attn.DecoderLayerParams] = []
        self.fc_w = self.fc_b = None
        self.te_heads: list[tuple[Tensor, Tensor]] = []
        self.domain_embed: Tensor | None = None

        if cfg.variant in ("Full", "TEExp") and cfg.n_enc:
            r = rng(streams[_STREAM_ENCODER])
            for i in range(cfg.n_enc):
                layer = attn.init_encoder_layer(r, cfg.d, cfg.num_heads, cfg.d_ff, cfg.attn_bias)
                self.encoder.append(layer)
                self.params.add(ex.GLOBAL, f"encoder{i}", layer.tensors())
        if cfg.variant in ("Full", "TD") and cfg.n_dec:
            r = rng(streams[_STREAM_DECODER])
            for i in range(cfg.n_dec):
                layer = attn.init_decoder_layer(r, cfg.d, cfg.num_heads, cfg.d_ff, cfg.attn_bias)
                self.decoder.append(layer)
                self.params.add(ex.GLOBAL, f"decoder{i}", layer.tensors())
        if cfg.variant in ("Full", "TD", "ERM"):
            r = rng(streams[_STREAM_FC])
            self.fc_w, self.fc_b = attn.glorot(r, cfg.d, cfg.n_classes), attn.zeros(cfg.n_classes)
            self.params.add(ex.GLOBAL, "fc", {"w": self.fc_w, "b": self.fc_b})
        if cfg.variant == "TEExp":
            r = rng(streams[_STREAM_EXTRA])
            for k in range(cfg.K):
                w, b = attn.glorot(r, cfg.d, cfg.n_classes), attn.zeros(cfg.n_classes)
                self.te_heads.append((w, b))
                self.params.add(ex.GLOBAL, f"teexp{k}", {"w": w, "b": b})
        if cfg.domain_embedding and cfg.variant in ("Full", "TEExp", "TD"):
            r = rng(streams[_STREAM_EMBED])
            self.domain_embed = Tensor(r.normal(0.0, 0.02, size=(cfg.K, cfg.d)), requires_grad=True)
            self.params.add(ex.GLOBAL, "domain_embed", {"table": self.domain_embed})

    # --- forward ------------------------------------------------------------

    def _head(self, feature: Tensor, k: int) -> Tensor:
        self.head_evaluations += 1
        return ex.expert_head(feature, self.experts[k])

    def _tokens(self, features: list[Tensor]) -> Tensor:
        tokens = ad.stack(features, axis=1)  # [B, K, d]
        if self.domain_embed is not None:
            tokens = ad.add(tokens, self.domain_embed)
        return tokens

    def forward(self, x: Tensor | np.ndarray, with_heads: bool = True) -> ForwardOutput:
        """Run the configured variant.

        ``with_heads=False`` is the inference path: the domain classifiers are
        skipped wherever the variant's global prediction does not need them.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise DimensionError(f"inputs must be [B x {self.cfg.d_in}], got {x.shape}")
        v = self.cfg.variant
        shared = ex.backbone_forward(x, self.backbone)
        if v == "ERM":
            q = ex.query_forward(shared, self.query)
            return ForwardOutput(ad.affine(q, self.fc_w, self.fc_b), [], q)

        features = [ex.expert_neck(shared, p) for p in self.experts]
        heads_needed = with_heads or v in ("ConvExp", "WeightedMoE")
        expert_logits = [self._head(f, k) for k, f in enumerate(features)] if heads_needed else []

        if v == "ConvExp":
            return ForwardOutput(_sum_all(expert_logits), expert_logits if with_heads else [])
        if v == "WeightedMoE":
            return self._weighted_moe(shared, features, expert_logits, with_heads)

        tokens = self._tokens(features)
        if v == "TEExp":
            enc = attn.encoder_stack(tokens, self.encoder)
            per_domain = [
                ad.affine(ad.take(enc, k, axis=1), w, b) for k, (w, b) in enumerate(self.te_heads)
            ]
            return ForwardOutput(_sum_all(per_domain), expert_logits)

        # Full and TD: the decoder reads encoded (Full) or raw (TD) expert tokens
        memory = attn.encoder_stack(tokens, self.encoder)
        q = ex.query_forward(shared, self.query)
        B = q.shape[0]
        dec = attn.decoder_stack(
            ad.reshape(q, (B, 1, self.cfg.d)), memory, self.decoder,
            self_attn=self.cfg.decoder_self_attn,
        )
        decoded = ad.reshape(dec, (B, self.cfg.d))
        return ForwardOutput(ad.affine(decoded, self.fc_w, self.fc_b), expert_logits, decoded)

    def _weighted_moe(self, shared, features, expert_logits, with_heads) -> ForwardOutput:
        q = ex.query_forward(shared, self.query)
        scores = ad.stack([ad.sum(ad.mul(q, f), axis=1) for f in features], axis=1)  # [B, K]
        w = ad.softmax(scores, axis=1)
        B, K = w.shape
        mixed = _sum_all(
            [ad.mul(ad.reshape(ad.take(w, k, axis=1), (B, 1)), g) for k, g in enumerate(expert_logits)]
        )
        return ForwardOutput(mixed, expert_logits if with_heads else [], q, w.data.copy())

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return predict(self.forward(x, with_heads=False))

    def zero_grad(self) -> None:
        self.params.zero_grad()


def _sum_all(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = ad.add(out, t)
    return out


def d2sdk_forward(x, cfg: ModelConfig, model: D2SDKModel) -> ForwardOutput:
    if cfg.variant != "Full":
        raise ConfigError(f"d2sdk_forward needs variant Full, got {cfg.variant}")
    return model.forward(x)


def variant_forward(x, cfg: ModelConfig, model: D2SDKModel) -> ForwardOutput:
    if cfg.variant not in ("ConvExp", "TEExp", "TD", "ERM"):
        raise ConfigError(f"variant_forward does not handle {cfg.variant}")
    return model.forward(x)


def weighted_moe_forward(x, cfg: ModelConfig, model: D2SDKModel) -> ForwardOutput:
    if cfg.variant != "WeightedMoE":
        raise ConfigError(f"weighted_moe_forward needs variant WeightedMoE, got {cfg.variant}")
    return model.forward(x)


def compute_loss(out: ForwardOutput, labels, domains, lam: float) -> tuple[Tensor, LossParts]:
    """lam * mean_i CE(g_{z_i}(x_i), y_i) + (1 - lam) * mean_i CE(h(x_i), y_i).

    Variants without local experts carry no domain term and train on the
    global term alone.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    glob = ad.cross_entropy_loss(out.global_logits, labels)
    if not out.expert_logits:
        return glob, LossParts(0.0, float(glob.data), float(glob.data), 0.0)
    K = len(out.expert_logits)
    B = out.global_logits.shape[0]
    z = ad._check_labels(domains, B, K, what="domain")
    picked = ad.select_rows(ad.stack(out.expert_logits, axis=0), z)
    dom = ad.cross_entropy_loss(picked, labels)
    total = ad.add(ad.scale(dom, lam), ad.scale(glob, 1.0 - lam))
    return total, LossParts(float(dom.data), float(glob.data), float(total.data), lam)


def predict(out: ForwardOutput | Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax of the global logits; ties go to the lowest class id."""
    if isinstance(out, ForwardOutput):
        out = out.global_logits
    logits = out.data if isinstance(out, Tensor) else np.asarray(out)
    return np.argmax(logits, axis=-1)


# --- checkpoints ----------------------------------------------------------------

def _array_record(a: np.ndarray) -> dict[str, Any]:
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def _from_record(r: dict[str, Any]) -> np.ndarray:
    return np.asarray(r["values"], dtype=np.float64).reshape(r["shape"])


@dataclass
class Checkpoint:
    config: dict[str, Any]
    params: dict[str, np.ndarray]
    groups: dict[str, list[str]]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict[str, Any] | None = None
    epoch: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(cls, model: D2SDKModel, optimizer=None, rng_state=None, epoch=0, meta=None):
        return cls(
            config=model.cfg.to_dict(),
            params=model.params.state(),
            groups={g: list(ns) for g, ns in model.params.groups().items()},
            optimizer={} if optimizer is None else {n: b.copy() for n, b in optimizer.items()},
            rng_state=rng_state,
            epoch=epoch,
            meta=dict(meta or {}),
        )

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
            "epoch": self.epoch,
            "meta": self.meta,
            "groups": {
                g: {n: _array_record(self.params[n]) for n in names}
                for g, names in self.groups.items()
            },
            "optimizer": {n: _array_record(b) for n, b in self.optimizer.items()},
            "rng_state": self.rng_state,
        }
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Checkpoint:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint file (format={doc.get('format')!r})")
        params, groups = {}, {}
        for g, members in doc["groups"].items():
            groups[g] = list(members)
            for n, rec in members.items():
                params[n] = _from_record(rec)
        return cls(
            config=doc["config"],
            params=params,
            groups=groups,
            optimizer={n: _from_record(r) for n, r in doc["optimizer"].items()},
            rng_state=doc["rng_state"],
            epoch=doc["epoch"],
            meta=doc["meta"],
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_json(Path(path).read_text())

    def build_model(self) -> D2SDKModel:
        model = D2SDKModel(ModelConfig.from_dict(self.config))
        model.params.load_state(self.params)
        return model
