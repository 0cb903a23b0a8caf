"""Multi-head attention and post-LN Transformer encoder/decoder layers.

All functions accept token tensors shaped ``[n, d]`` or batched ``[B, n, d]``
and return the same rank they were given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class MhaParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Tensor | None
    b_k: Tensor | None
    b_v: Tensor | None
    b_o: Tensor | None
    num_heads: int

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for key in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
            t = getattr(self, key)
            if t is not None:
                out[key] = t
        return out


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class EncoderLayerParams:
    self_attn: MhaParams
    ln1: LayerNormParams
    mlp: MlpParams
    ln2: LayerNormParams

    def tensors(self) -> dict[str, Tensor]:
        return _flatten(self_attn=self.self_attn, ln1=self.ln1, mlp=self.mlp, ln2=self.ln2)


@dataclass
class DecoderLayerParams:
    self_attn: MhaParams
    ln1: LayerNormParams
    cross_attn: MhaParams
    ln2: LayerNormParams
    mlp: MlpParams
    ln3: LayerNormParams

    def tensors(self) -> dict[str, Tensor]:
        return _flatten(
            self_attn=self.self_attn, ln1=self.ln1, cross_attn=self.cross_attn,
            ln2=self.ln2, mlp=self.mlp, ln3=self.ln3,
        )


def _flatten(**parts) -> dict[str, Tensor]:
    return {f"{name}.{k}": t for name, p in parts.items() for k, t in p.tensors().items()}


# --- initialization ---------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_mha(rng, d: int, num_heads: int, bias: bool = True) -> MhaParams:
    if num_heads < 1 or d % num_heads:
        raise ConfigError(f"model dim {d} is not divisible by {num_heads} heads")
    ws = [glorot(rng, d, d) for _ in range(4)]
    bs = [zeros(d) if bias else None for _ in range(4)]
    return MhaParams(ws[0], ws[1], ws[2], ws[3], bs[0], bs[1], bs[2], bs[3], num_heads)


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(d), requires_grad=True), zeros(d))


def init_mlp(rng, d: int, d_ff: int) -> MlpParams:
    return MlpParams(glorot(rng, d, d_ff), zeros(d_ff), glorot(rng, d_ff, d), zeros(d))


def init_encoder_layer(rng, d, num_heads, d_ff, bias=True) -> EncoderLayerParams:
    return EncoderLayerParams(
        init_mha(rng, d, num_heads, bias), init_layer_norm(d),
        init_mlp(rng, d, d_ff), init_layer_norm(d),
    )


def init_decoder_layer(rng, d, num_heads, d_ff, bias=True) -> DecoderLayerParams:
    return DecoderLayerParams(
        init_mha(rng, d, num_heads, bias), init_layer_norm(d),
        init_mha(rng, d, num_heads, bias), init_layer_norm(d),
        init_mlp(rng, d, d_ff), init_layer_norm(d),
    )


# --- forward ----------------------------------------------------------------

def sdp_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_h)) V with the softmax taken over keys."""
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"sdp_attention: query dim {Q.shape} vs key dim {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"sdp_attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    scores = ad.scale(ad.matmul(Q, ad.transpose(K, axes)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, V)
    return (out, weights) if return_weights else out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected tokens [n x d] or [B x n x d], got {x.shape}")


def mha(query_seq: Tensor, key_seq: Tensor, value_seq: Tensor, p: MhaParams) -> Tensor:
    d, h = p.d, p.num_heads
    if d % h:
        raise ConfigError(f"model dim {d} is not divisible by {h} heads")
    for name, t in (("query", query_seq), ("key", key_seq), ("value", value_seq)):
        if t.shape[-1] != d:
            raise DimensionError(f"mha: {name} last dim {t.shape[-1]} != {d}")
    q, squeeze = _batched(query_seq)
    k, _ = _batched(key_seq)
    v, _ = _batched(value_seq)
    B, n_q, _ = q.shape
    n_k = k.shape[1]
    vp = ad.affine(v, p.w_v, p.b_v)
    if n_k == 1 and n_q == 1:
        # one key: the softmax weight is exactly 1, so the context is the value row
        ctx = vp
    else:
        ctx = ad.multihead_attention(
            ad.affine(q, p.w_q, p.b_q), ad.affine(k, p.w_k, p.b_k), vp, h
        )
    out = ad.affine(ctx, p.w_o, p.b_o)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def attention_weights(query_seq: Tensor, key_seq: Tensor, p: MhaParams) -> np.ndarray:
    """Per-head attention weights ``[B, h, n_q, n_k]`` (no gradient tracking)."""
    q, _ = _batched(query_seq)
    k, _ = _batched(key_seq)
    B, n_q, d = q.shape
    n_k, h = k.shape[1], p.num_heads
    dh = d // h
    qd = ad.affine(q, p.w_q, p.b_q).data.reshape(B, n_q, h, dh).transpose(0, 2, 1, 3)
    kd = ad.affine(k, p.w_k, p.b_k).data.reshape(B, n_k, h, dh).transpose(0, 2, 1, 3)
    return ad.softmax(Tensor(qd @ kd.transpose(0, 1, 3, 2) / math.sqrt(dh)), -1).data


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return ad.affine(ad.relu(ad.affine(x, p.w1, p.b1)), p.w2, p.b2)


def _post_ln(x: Tensor, sublayer_out: Tensor, ln: LayerNormParams) -> Tensor:
    return ad.layer_norm(ad.add(x, sublayer_out), ln.gamma, ln.beta)


def encoder_layer(tokens: Tensor, p: EncoderLayerParams) -> Tensor:
    x = _post_ln(tokens, mha(tokens, tokens, tokens, p.self_attn), p.ln1)
    return _post_ln(x, mlp(x, p.mlp), p.ln2)


def decoder_layer(
    query_tok: Tensor, memory: Tensor, p: DecoderLayerParams, self_attn: bool = True
) -> Tensor:
    x = query_tok
    if self_attn:
        x = _post_ln(x, mha(x, x, x, p.self_attn), p.ln1)
    x = _post_ln(x, mha(x, memory, memory, p.cross_attn), p.ln2)
    return _post_ln(x, mlp(x, p.mlp), p.ln3)


def encoder_stack(tokens: Tensor, layers: list[EncoderLayerParams], L: int | None = None) -> Tensor:
    L = len(layers) if L is None else L
    if L < 0 or L > len(layers):
        raise ConfigError(f"encoder depth {L} outside [0, {len(layers)}]")
    x = tokens
    for p in layers[:L]:
        x = encoder_layer(x, p)
    return x


def decoder_stack(
    query_tok: Tensor,
    memory: Tensor,
    layers: list[DecoderLayerParams],
    L: int | None = None,
    self_attn: bool = True,
) -> Tensor:
    L = len(layers) if L is None else L
    if L < 0 or L > len(layers):
        raise ConfigError(f"decoder depth {L} outside [0, {len(layers)}]")
    x = query_tok
    for p in layers[:L]:
        x = decoder_layer(x, memory, p, self_attn=self_attn)
    return x
