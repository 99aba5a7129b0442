"""The shared bottleneck transformer, the vectorizer producing one fixed-width
embedding per sample, and the task heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (ATTN_MASK_BLOCKED, BlockStack, Embedding, LayerNormParams,
                     Linear, MultiHeadAttention, prefixed)
from .data import Modality
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

HEAD_KINDS = ("classification", "dense", "summarizer")


@dataclass(frozen=True)
class TrunkConfig:
    layers: int = 4
    width: int = 64          # must equal projection output width n
    heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 32      # vectorizer output d
    max_tokens: int = 33     # longest shared-space sequence incl. meta token

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"trunk width {self.width} not divisible by "
                              f"{self.heads} heads")


class Trunk:
    """Single shared stack traversed by every modality."""

    def __init__(self, rng: np.random.Generator, cfg: TrunkConfig):
        self.cfg = cfg
        self.stack = BlockStack(rng, cfg.layers, cfg.width, cfg.heads, cfg.mlp_ratio)

    def __call__(self, tokens: Tensor, mask: Tensor | None = None) -> Tensor:
        if tokens.shape[-1] != self.cfg.width:
            raise DimensionError(f"trunk expects width {self.cfg.width}, "
                                 f"got {tokens.shape}")
        return self.stack(tokens, mask)

    def named_params(self):
        return self.stack.named_params()


@dataclass
class SampleEmbedding:
    """Shared-space vector for one sample; the modality tag is metadata."""

    vector: Tensor           # (d,)
    modality: Modality


class Vectorizer:
    """Concatenate trunk tokens (zero-padded to the configured maximum; the
    pad rows never reach any attention) and map linearly to d dims."""

    def __init__(self, rng: np.random.Generator, cfg: TrunkConfig):
        self.cfg = cfg
        self.lin = Linear(rng, cfg.max_tokens * cfg.width, cfg.embed_dim)

    def __call__(self, tokens: Tensor, modality: Modality) -> SampleEmbedding:
        count = tokens.shape[0]
        if count > self.cfg.max_tokens:
            raise ContractError(f"{count} tokens exceed vectorizer maximum "
                                f"{self.cfg.max_tokens}")
        if count < self.cfg.max_tokens:
            pad = Tensor(np.zeros((self.cfg.max_tokens - count, self.cfg.width)))
            tokens = T.concat_rows([tokens, pad])
        flat = T.reshape(tokens, (1, self.cfg.max_tokens * self.cfg.width))
        return SampleEmbedding(T.reshape(self.lin(flat), (self.cfg.embed_dim,)), modality)

    def named_params(self):
        return self.lin.named_params()


# ---------------------------------------------------------------------------
# task heads


@dataclass(frozen=True)
class HeadConfig:
    kind: str                         # classification | dense | summarizer
    task: str
    modalities: tuple[Modality, ...]
    classes: int = 0                  # classification
    out_dim: int = 0                  # dense target width
    summary_len: int = 0              # summarizer
    vocab: int = 0                    # summarizer
    layers: int = 3                   # summarizer blocks

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; known: {HEAD_KINDS}")
        if self.kind == "classification" and self.classes < 2:
            raise ConfigError(f"classification head needs >= 2 classes, got {self.classes}")
        if self.kind == "dense" and self.out_dim < 1:
            raise ConfigError(f"dense head needs out_dim >= 1, got {self.out_dim}")
        if self.kind == "summarizer":
            if Modality.TEXT not in self.modalities:
                raise ConfigError("summarizer head requires the TEXT modality")
            if self.summary_len < 1 or self.vocab < 2:
                raise ConfigError("summarizer head needs summary_len >= 1 and vocab >= 2")


class ClassificationHead:
    """Single-label head over the sample embedding."""

    def __init__(self, rng, cfg: HeadConfig, trunk_cfg: TrunkConfig):
        self.cfg = cfg
        self.lin = Linear(rng, trunk_cfg.embed_dim, cfg.classes)

    def __call__(self, trunk_out: Tensor, emb: SampleEmbedding) -> Tensor:
        return T.reshape(self.lin(T.reshape(emb.vector, (1, emb.vector.shape[0]))),
                         (self.cfg.classes,))

    def named_params(self):
        return self.lin.named_params()


class DenseHead:
    """Per-patch linear readout of the trunk tokens (meta token excluded)."""

    def __init__(self, rng, cfg: HeadConfig, trunk_cfg: TrunkConfig):
        self.cfg = cfg
        self.lin = Linear(rng, trunk_cfg.width, cfg.out_dim)

    def __call__(self, trunk_out: Tensor, emb: SampleEmbedding) -> Tensor:
        patches = T.take_rows(trunk_out, np.arange(1, trunk_out.shape[0]))
        return self.lin(patches)

    def named_params(self):
        return self.lin.named_params()


class DecoderBlock:
    """Summarizer block: causal self-attention, cross-attention over the
    trunk tokens, then the standard MLP. Pre-LayerNorm like all blocks."""

    def __init__(self, rng, width: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNormParams(width)
        self.self_attn = MultiHeadAttention(rng, width, heads)
        self.ln2 = LayerNormParams(width)
        self.cross_attn = CrossAttention(rng, width, heads)
        self.ln3 = LayerNormParams(width)
        self.fc1 = Linear(rng, width, mlp_ratio * width)
        self.fc2 = Linear(rng, mlp_ratio * width, width)

    def __call__(self, x: Tensor, memory: Tensor, causal: Tensor) -> Tensor:
        a = T.add(x, self.self_attn(self.ln1(x), causal))
        b = T.add(a, self.cross_attn(self.ln2(a), memory))
        return T.add(b, self.fc2(T.gelu(self.fc1(self.ln3(b)))))

    def named_params(self):
        out = {}
        for tag, comp in (("ln1", self.ln1), ("self", self.self_attn),
                          ("ln2", self.ln2), ("cross", self.cross_attn),
                          ("ln3", self.ln3), ("fc1", self.fc1), ("fc2", self.fc2)):
            out.update(prefixed(tag, comp.named_params()))
        return out


class CrossAttention:
    def __init__(self, rng, width: int, heads: int):
        self.width, self.heads = width, heads
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        nq, nk = x.shape[0], memory.shape[0]
        h, dh = self.heads, self.width // self.heads

        def split(t: Tensor, n: int) -> Tensor:
            return T.swap_axes(T.reshape(t, (n, h, dh)), 0, 1)

        q = split(self.wq(x), nq)
        k = split(self.wk(memory), nk)
        v = split(self.wv(memory), nk)
        att = T.softmax_attention(q, k, v)
        return self.wo(T.reshape(T.swap_axes(att, 0, 1), (nq, self.width)))

    def named_params(self):
        out = {}
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(prefixed(tag, lin.named_params()))
        return out


class SummarizerHead:
    """3-block decoder over the trunk tokens emitting token logits; decoding
    is greedy only."""

    START = "start-token row = vocab"

    def __init__(self, rng, cfg: HeadConfig, trunk_cfg: TrunkConfig):
        self.cfg = cfg
        self.width = trunk_cfg.width
        self.tok_embed = Embedding(rng, cfg.vocab + 1, self.width)   # +1: start id
        self.pos_embed = Embedding(rng, cfg.summary_len, self.width)
        self.blocks = [DecoderBlock(rng, self.width, trunk_cfg.heads, trunk_cfg.mlp_ratio)
                       for _ in range(cfg.layers)]
        self.out = Linear(rng, self.width, cfg.vocab)

    def _run(self, input_ids: np.ndarray, memory: Tensor) -> Tensor:
        s = len(input_ids)
        x = T.add(self.tok_embed(input_ids), self.pos_embed(np.arange(s)))
        causal = Tensor(np.where(np.tril(np.ones((s, s))) > 0, 0.0, ATTN_MASK_BLOCKED))
        for block in self.blocks:
            x = block(x, memory, causal)
        return self.out(x)                                           # (s, vocab)

    def __call__(self, trunk_out: Tensor, emb: SampleEmbedding,
                 target_ids: np.ndarray | None = None) -> Tensor:
        """Teacher-forced logits for `target_ids` (training); greedy decode
        when no target is given (returns logits of the decoded sequence)."""
        s = self.cfg.summary_len
        start = self.cfg.vocab
        if target_ids is not None:
            if len(target_ids) != s:
                raise ContractError(f"summary target length {len(target_ids)} != {s}")
            input_ids = np.concatenate([[start], np.asarray(target_ids)[:-1]])
            return self._run(input_ids.astype(np.int64), trunk_out)
        decoded: list[int] = []
        logits = None
        for step in range(s):
            input_ids = np.concatenate([[start], decoded])[: step + 1].astype(np.int64)
            logits = self._run(input_ids, trunk_out)
            decoded.append(int(np.argmax(logits.data[step])))
        return logits

    def greedy_decode(self, trunk_out: Tensor, emb: SampleEmbedding) -> np.ndarray:
        logits = self.__call__(trunk_out, emb)
        return np.argmax(logits.data, axis=1)

    def named_params(self):
        out = prefixed("tok", self.tok_embed.named_params())
        out.update(prefixed("pos", self.pos_embed.named_params()))
        for i, b in enumerate(self.blocks):
            out.update(prefixed(f"block{i}", b.named_params()))
        out.update(prefixed("out", self.out.named_params()))
        return out


def build_head(rng, cfg: HeadConfig, trunk_cfg: TrunkConfig):
    cls = {"classification": ClassificationHead, "dense": DenseHead,
           "summarizer": SummarizerHead}[cfg.kind]
    return cls(rng, cfg, trunk_cfg)


def head_forward(head, trunk_out: Tensor, emb: SampleEmbedding,
                 modality: Modality, target_ids: np.ndarray | None = None) -> Tensor:
    """Route one sample's trunk outputs / embedding through a task head."""
    if modality not in head.cfg.modalities:
        raise ConfigError(f"head {head.cfg.task!r} does not accept modality "
                          f"{modality.name}")
    if isinstance(head, SummarizerHead):
        return head(trunk_out, emb, target_ids)
    return head(trunk_out, emb)


def task_loss(kind: str, prediction: Tensor, label) -> Tensor:
    """classification & summarization: mean cross-entropy; dense: mean
    squared error per element."""
    if kind == "classification":
        c = prediction.shape[0]
        return T.cross_entropy_logits(T.reshape(prediction, (1, c)), [int(label)])
    if kind == "summarizer":
        ids = np.asarray(label, dtype=np.int64)
        if prediction.shape[0] != ids.shape[0]:
            raise ContractError(f"summary logits {prediction.shape} vs "
                                f"targets {ids.shape}")
        return T.cross_entropy_logits(prediction, ids)
    if kind == "dense":
        target = np.asarray(label, dtype=np.float64)
        if prediction.shape != target.shape:
            raise ContractError(f"dense prediction {prediction.shape} vs "
                                f"label {target.shape}")
        diff = T.sub(prediction, Tensor(target))
        return T.mean_all(T.mul(diff, diff))
    raise ConfigError(f"unknown head kind {kind!r}")
