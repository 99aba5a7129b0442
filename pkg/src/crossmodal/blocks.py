"""Shared network building blocks: linear maps, embedding tables, and the
pre-LayerNorm transformer block used by every encoder, the trunk, the
pretraining decoder and the summarizer head.

Block computation (pinned; oracle-tested):

    a   = x + attention(ln1(x))
    out = a + W2 @ gelu(W1 @ ln2(a) + b1) + b2
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from . import tensor as T
from .tensor import Tensor

INIT_SCALE = 0.02
ATTN_MASK_BLOCKED = -1e9   # finite additive logit bias; softmax underflows to exactly 0


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = T.parameter(INIT_SCALE * rng.standard_normal((d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def named_params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class Embedding:
    """Lookup table; rows gathered by integer id."""

    def __init__(self, rng: np.random.Generator, rows: int, width: int):
        self.table = T.parameter(INIT_SCALE * rng.standard_normal((rows, width)))

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)

    def named_params(self) -> dict[str, Tensor]:
        return {"table": self.table}


class LayerNormParams:
    def __init__(self, width: int):
        self.gain = T.parameter(np.ones(width))
        self.bias = T.parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def named_params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class MultiHeadAttention:
    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        n = x.shape[0]
        h, dh = self.heads, self.width // self.heads

        def split(t: Tensor) -> Tensor:
            return T.swap_axes(T.reshape(t, (n, h, dh)), 0, 1)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = T.softmax_attention(q, k, v, mask)            # (h, n, dh)
        merged = T.reshape(T.swap_axes(att, 0, 1), (n, self.width))
        return self.wo(merged)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, v in lin.named_params().items():
                out[f"{tag}.{k}"] = v
        return out


class TransformerBlock:
    def __init__(self, rng: np.random.Generator, width: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNormParams(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNormParams(width)
        self.fc1 = Linear(rng, width, mlp_ratio * width)
        self.fc2 = Linear(rng, mlp_ratio * width, width)

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        a = T.add(x, self.attn(self.ln1(x), mask))
        return T.add(a, self.fc2(T.gelu(self.fc1(self.ln2(a)))))

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for tag, comp in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2),
                          ("fc1", self.fc1), ("fc2", self.fc2)):
            for k, v in comp.named_params().items():
                out[f"{tag}.{k}"] = v
        return out


class BlockStack:
    def __init__(self, rng: np.random.Generator, layers: int, width: int,
                 heads: int, mlp_ratio: int = 4):
        self.blocks = [TransformerBlock(rng, width, heads, mlp_ratio) for _ in range(layers)]

    def __call__(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        return x

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            for k, v in block.named_params().items():
                out[f"block{i}.{k}"] = v
        return out


def prefixed(prefix: str, named: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in named.items()}


def causal_mask(order: np.ndarray) -> Tensor:
    """Additive attention mask letting position i attend to j only when
    order[j] <= order[i]. `order` holds each position's rank in the
    factorization permutation."""
    order = np.asarray(order)
    allowed = order[None, :] <= order[:, None]
    return Tensor(np.where(allowed, 0.0, ATTN_MASK_BLOCKED))


def parameter_checksum(named: dict[str, Tensor]) -> str:
    """Stable digest of a parameter group, for change-tracking tests."""
    import hashlib
    digest = hashlib.sha256()
    for name in sorted(named):
        digest.update(name.encode())
        digest.update(named[name].data.tobytes())
    return digest.hexdigest()
