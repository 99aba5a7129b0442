"""Per-modality encoder stacks, meta-token extraction, and the learnable
projection of encoder features into the shared patch width.

All six encoders share one transformer-block implementation and differ only
in tokenizer front-end (linear patch embed vs. token-id table) and config.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import BlockStack, Embedding, LayerNormParams, Linear, prefixed
from .data import (DEFAULT_AXES, DEFAULT_PATCH, DEFAULT_VOCAB, Modality,
                   ModalitySample, PatchSequence, PatchSpec, patch_count,
                   patch_dim)
from .errors import ConfigError, ContractError
from .tensor import Tensor

ABSENT = -1
META_FIELDS = 6   # (modality, T, H, W, C, L)


@dataclass(frozen=True)
class MetaToken:
    """Fixed-length shape descriptor conditioning the projection. Axes that
    are semantics-free placeholders for the modality are ABSENT (-1)."""

    modality: Modality
    t: int
    h: int
    w: int
    c: int
    l: int

    def to_vector(self) -> np.ndarray:
        return np.array([int(self.modality), self.t, self.h, self.w, self.c, self.l],
                        dtype=np.float64)


def make_meta_token(sample: ModalitySample) -> MetaToken:
    t, h, w, c, l = sample.axes
    m = sample.modality
    if m is Modality.TEXT:
        return MetaToken(m, ABSENT, ABSENT, ABSENT, ABSENT, l)
    if m is Modality.POINTCLOUD:
        return MetaToken(m, ABSENT, ABSENT, ABSENT, c, l)
    # grid modalities: T..C real, L is the placeholder
    return MetaToken(m, t, h, w, c, ABSENT)


@dataclass(frozen=True)
class EncoderConfig:
    modality: Modality
    layers: int = 2
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    vocab: int = DEFAULT_VOCAB
    axes: tuple[int, int, int, int, int] | None = None
    patch: PatchSpec | None = None

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"encoder width {self.width} not divisible by "
                              f"{self.heads} heads")

    @property
    def sample_axes(self):
        return self.axes or DEFAULT_AXES[self.modality]

    @property
    def patch_spec(self) -> PatchSpec:
        return self.patch or DEFAULT_PATCH[self.modality]

    @property
    def max_patches(self) -> int:
        return patch_count(self.modality, self.sample_axes, self.patch_spec)

    @property
    def raw_patch_dim(self) -> int:
        return patch_dim(self.modality, self.sample_axes, self.patch_spec)


@dataclass
class FeatureSequence:
    """Encoder output: one feature vector per surviving patch, with the
    patches' original position indices."""

    features: Tensor            # (N, width)
    positions: np.ndarray
    modality: Modality


class ModalityEncoder:
    """Tokenizer front-end + positional table + shared-block stack."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        self.cfg = cfg
        if cfg.modality is Modality.TEXT:
            # one extra row: the mask-token id used by the text objective
            self.token_embed = Embedding(rng, cfg.vocab + 1, cfg.width)
            self.patch_embed = None
        else:
            self.token_embed = None
            self.patch_embed = Linear(rng, cfg.raw_patch_dim, cfg.width)
        self.pos_embed = Embedding(rng, cfg.max_patches, cfg.width)
        self.stack = BlockStack(rng, cfg.layers, cfg.width, cfg.heads, cfg.mlp_ratio)

    def __call__(self, seq: PatchSequence, attn_mask: Tensor | None = None) -> FeatureSequence:
        if seq.modality is not self.cfg.modality:
            raise ContractError(f"{self.cfg.modality.name} encoder received a "
                                f"{seq.modality.name} sequence")
        if self.token_embed is not None:
            if seq.patches.size and seq.patches.max() > self.cfg.vocab:
                raise ContractError(f"token id above vocab+mask range {self.cfg.vocab}")
            x = self.token_embed(seq.patches)
        else:
            if seq.patches.shape[1] != self.cfg.raw_patch_dim:
                raise ContractError(f"patch dim {seq.patches.shape[1]} != "
                                    f"configured {self.cfg.raw_patch_dim}")
            x = self.patch_embed(Tensor(seq.patches))
        x = T.add(x, self.pos_embed(seq.positions))
        x = self.stack(x, attn_mask)
        return FeatureSequence(x, seq.positions.copy(), seq.modality)

    def named_params(self):
        out = {}
        front = self.token_embed if self.token_embed is not None else self.patch_embed
        out.update(prefixed("embed", front.named_params()))
        out.update(prefixed("pos", self.pos_embed.named_params()))
        out.update(self.stack.named_params())
        return out


class SharedProjection:
    """Per-modality linear map into the shared width n, then LayerNorm; the
    serialized meta token is embedded and prepended, so an N-patch feature
    sequence becomes N+1 shared-space tokens."""

    def __init__(self, rng: np.random.Generator, n: int,
                 encoder_widths: dict[Modality, int]):
        self.n = n
        self.meta_embed = Linear(rng, META_FIELDS, n)
        self.maps: dict[Modality, Linear] = {}
        self.norms: dict[Modality, LayerNormParams] = {}
        for m, width in encoder_widths.items():
            self.maps[m] = Linear(rng, width, n, bias=False)
            self.norms[m] = LayerNormParams(n)

    def __call__(self, feats: FeatureSequence, meta: MetaToken) -> Tensor:
        m = feats.modality
        if m not in self.maps:
            raise ConfigError(f"no projection registered for modality {m.name}")
        patches = self.maps[m](feats.features)                       # (N, n)
        meta_vec = self.meta_embed(Tensor(meta.to_vector().reshape(1, META_FIELDS)))
        return self.norms[m](T.concat_rows([meta_vec, patches]))     # (N+1, n)

    def named_params(self):
        out = prefixed("meta", self.meta_embed.named_params())
        for m in self.maps:
            tag = m.name.lower()
            out.update(prefixed(tag, self.maps[m].named_params()))
            out.update(prefixed(f"{tag}.ln", self.norms[m].named_params()))
        return out
