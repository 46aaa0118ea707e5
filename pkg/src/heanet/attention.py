"""Decoder-style transformer block over point tokens followed by two batchnorms.

No positional encoding is used, so the block is equivariant to token order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ndtensor as nd
from .exceptions import ConfigError, DimensionError
from .ndtensor import Tensor
from .weights import Weights, add_batchnorm, add_linear, kaiming_uniform


@dataclass
class MHAWeights:
    query: Tensor
    key: Tensor
    value: Tensor
    out: Tensor

    @classmethod
    def from_weights(cls, w, prefix: str) -> "MHAWeights":
        return cls(w[f"{prefix}.query"], w[f"{prefix}.key"], w[f"{prefix}.value"], w[f"{prefix}.out"])

    def tensors(self) -> list:
        return [self.query, self.key, self.value, self.out]


def init_mha(w: Weights, rng, prefix: str, channels: int, dtype=np.float32) -> None:
    for name in ("query", "key", "value", "out"):
        w.add(f"{prefix}.{name}", kaiming_uniform(rng, channels, channels, 1.0, dtype))


def init_transformer(w: Weights, rng, prefix: str, channels: int, heads: int, dtype=np.float32) -> None:
    if channels % heads:
        raise ConfigError(f"width {channels} is not divisible by {heads} heads")
    init_mha(w, rng, f"{prefix}.self_attn", channels, dtype)
    init_mha(w, rng, f"{prefix}.cross_attn", channels, dtype)
    add_linear(w, rng, f"{prefix}.ff.0", channels, 4 * channels, dtype=dtype)
    add_linear(w, rng, f"{prefix}.ff.1", 4 * channels, channels, relu=False, dtype=dtype)
    add_batchnorm(w, f"{prefix}.bn1", channels, dtype)
    add_batchnorm(w, f"{prefix}.bn2", channels, dtype)


def multi_head_attention(queries: Tensor, keys_values: Tensor, w: MHAWeights, heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated and projected.

    Args:
        queries: (B, T_q, C) or (T_q, C).
        keys_values: (B, T_k, C) or (T_k, C).
        w: Projection matrices, each (C, C).
        heads: Number of heads; must divide C.
    """
    squeeze = queries.ndim == 2
    if squeeze:
        queries = nd.reshape(queries, (1,) + queries.shape)
        keys_values = nd.reshape(keys_values, (1,) + keys_values.shape)
    B, Tq, C = queries.shape
    Tk = keys_values.shape[1]
    if C % heads:
        raise ConfigError(f"width {C} is not divisible by {heads} heads")
    if keys_values.shape[2] != C or keys_values.shape[0] != B:
        raise DimensionError(f"queries {queries.shape} and keys/values {keys_values.shape} disagree")
    dh = C // heads

    def split(t, T):
        return nd.transpose(nd.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(queries @ w.query, Tq)
    k = split(keys_values @ w.key, Tk)
    v = split(keys_values @ w.value, Tk)
    attn = nd.softmax(nd.scale(q @ nd.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)), axis=-1)
    merged = nd.reshape(nd.transpose(attn @ v, (0, 2, 1, 3)), (B, Tq, C))
    out = merged @ w.out
    return nd.reshape(out, (Tq, C)) if squeeze else out


def decoder_layer(tokens: Tensor, memory: Tensor, w, prefix: str, heads: int) -> Tensor:
    """Self-attention, cross-attention over ``memory`` and a 4x feed-forward, each residual.

    ``tokens`` and ``memory`` are token-major (B, T, C).
    """
    h = tokens + multi_head_attention(tokens, tokens, MHAWeights.from_weights(w, f"{prefix}.self_attn"), heads)
    h = h + multi_head_attention(h, memory, MHAWeights.from_weights(w, f"{prefix}.cross_attn"), heads)
    ff = nd.relu(nd.linear(h, w[f"{prefix}.ff.0.weight"], w[f"{prefix}.ff.0.bias"]))
    ff = nd.linear(ff, w[f"{prefix}.ff.1.weight"], w[f"{prefix}.ff.1.bias"])
    return h + ff


def _bn(x: Tensor, w, name: str, training: bool) -> Tensor:
    return nd.batchnorm(
        x, w[f"{name}.gamma"], w[f"{name}.beta"], w.buffer(f"{name}.running_mean"),
        w.buffer(f"{name}.running_var"), training,
    )


def transformer_attention(x: Tensor, w, prefix: str, heads: int = 4, memory: Optional[Tensor] = None,
                          training: bool = False) -> Tensor:
    """Apply the decoder layer to (B, C, N) features, then two batchnorms.

    Args:
        x: Features of shape (B, C, N).
        w: Weights holding ``{prefix}.*`` parameters and batchnorm buffers.
        memory: (B, C, N_mem) features for cross-attention; defaults to ``x``.
        training: Batchnorm mode.
    """
    if memory is None:
        memory = x
    if memory.shape[1] != x.shape[1]:
        raise DimensionError(f"memory width {memory.shape[1]} != input width {x.shape[1]}")
    tokens = nd.transpose(x, (0, 2, 1))
    mem = tokens if memory is x else nd.transpose(memory, (0, 2, 1))
    y = nd.transpose(decoder_layer(tokens, mem, w, prefix, heads), (0, 2, 1))
    y = _bn(y, w, f"{prefix}.bn1", training)
    return _bn(y, w, f"{prefix}.bn2", training)
