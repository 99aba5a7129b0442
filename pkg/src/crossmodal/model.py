"""Full network assembly: six encoders, shared projection, trunk, vectorizer,
pretraining decoder, and task heads, with stable parameter naming for
checkpoints and change-tracking checksums."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import BlockStack, Embedding, Linear, parameter_checksum, prefixed
from .data import (DEFAULT_VOCAB, Modality, ModalitySample, extract_patches,
                   patch_count, patch_dim)
from .encoders import (EncoderConfig, FeatureSequence, MetaToken,
                       ModalityEncoder, SharedProjection, make_meta_token)
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .trunk import (HeadConfig, SampleEmbedding, Trunk, TrunkConfig, Vectorizer,
                    build_head)

ALL_MODALITIES = tuple(Modality)


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale dimensions for every component."""

    enc_layers: int = 2
    enc_width: int = 64
    enc_heads: int = 4
    trunk_layers: int = 4
    trunk_width: int = 64
    trunk_heads: int = 4
    mlp_ratio: int = 4
    embed_dim: int = 32
    dec_layers: int = 2
    vocab: int = DEFAULT_VOCAB
    modalities: tuple[Modality, ...] = ALL_MODALITIES

    def __post_init__(self):
        if self.enc_width % self.enc_heads or self.trunk_width % self.trunk_heads:
            raise ConfigError("widths must be divisible by head counts")
        if not self.modalities:
            raise ConfigError("at least one modality must be registered")

    @property
    def max_tokens(self) -> int:
        return 1 + max(patch_count(m) for m in self.modalities)

    def to_dict(self) -> dict:
        return {
            "enc_layers": self.enc_layers, "enc_width": self.enc_width,
            "enc_heads": self.enc_heads, "trunk_layers": self.trunk_layers,
            "trunk_width": self.trunk_width, "trunk_heads": self.trunk_heads,
            "mlp_ratio": self.mlp_ratio, "embed_dim": self.embed_dim,
            "dec_layers": self.dec_layers, "vocab": self.vocab,
            "modalities": [int(m) for m in self.modalities],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(Modality(c) for c in d["modalities"])
        return ModelConfig(**d)


class PretrainDecoder:
    """Shallow stack reconstructing raw patch content (vocab logits for
    text) from trunk outputs merged with mask-token replicas. Distinct from
    the trunk; only pretraining touches it."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        n = cfg.trunk_width
        self.mask_token = T.parameter(0.02 * rng.standard_normal(n))
        max_patches = max(patch_count(m) for m in cfg.modalities)
        self.pos_embed = Embedding(rng, max_patches, n)
        self.stack = BlockStack(rng, cfg.dec_layers, n, cfg.trunk_heads, cfg.mlp_ratio)
        self.out: dict[Modality, Linear] = {}
        for m in cfg.modalities:
            out_dim = cfg.vocab if m is Modality.TEXT else patch_dim(m)
            self.out[m] = Linear(rng, n, out_dim)

    def __call__(self, tokens: Tensor, positions: np.ndarray, modality: Modality,
                 attn_mask: Tensor | None = None) -> Tensor:
        x = T.add(tokens, self.pos_embed(positions))
        x = self.stack(x, attn_mask)
        return self.out[modality](x)

    def named_params(self):
        out = {"mask_token": self.mask_token}
        out.update(prefixed("pos", self.pos_embed.named_params()))
        out.update(self.stack.named_params())
        for m, lin in self.out.items():
            out.update(prefixed(f"out.{m.name.lower()}", lin.named_params()))
        return out


class Network:
    """One shared trunk; encoders and heads swap around it."""

    def __init__(self, cfg: ModelConfig, head_cfgs: tuple[HeadConfig, ...] = (),
                 seed: int = 0):
        self.cfg = cfg
        self.head_cfgs = tuple(head_cfgs)
        rng = np.random.default_rng([seed, 0xC0DE])
        self.encoders: dict[Modality, ModalityEncoder] = {}
        for m in cfg.modalities:
            ec = EncoderConfig(m, layers=cfg.enc_layers, width=cfg.enc_width,
                               heads=cfg.enc_heads, mlp_ratio=cfg.mlp_ratio,
                               vocab=cfg.vocab)
            self.encoders[m] = ModalityEncoder(rng, ec)
        self.projection = SharedProjection(
            rng, cfg.trunk_width, {m: cfg.enc_width for m in cfg.modalities})
        self.trunk_cfg = TrunkConfig(layers=cfg.trunk_layers, width=cfg.trunk_width,
                                     heads=cfg.trunk_heads, mlp_ratio=cfg.mlp_ratio,
                                     embed_dim=cfg.embed_dim,
                                     max_tokens=cfg.max_tokens)
        self.trunk = Trunk(rng, self.trunk_cfg)
        self.vectorizer = Vectorizer(rng, self.trunk_cfg)
        self.decoder = PretrainDecoder(rng, cfg)
        self.heads: dict[str, object] = {}
        for hc in self.head_cfgs:
            if hc.task in self.heads:
                raise ConfigError(f"duplicate head for task {hc.task!r}")
            self.heads[hc.task] = build_head(rng, hc, self.trunk_cfg)

    # -- forward paths ------------------------------------------------------

    def encoder_for(self, modality: Modality) -> ModalityEncoder:
        if modality not in self.encoders:
            raise ConfigError(f"no encoder registered for {modality.name}")
        return self.encoders[modality]

    def trunk_tokens(self, sample: ModalitySample,
                     trunk_mask: Tensor | None = None) -> Tensor:
        """Plain full-visibility path: patches -> encoder -> projection ->
        trunk. Returns (N+1, n) tokens with the meta token at row 0."""
        seq = extract_patches(sample)
        feats = self.encoder_for(sample.modality)(seq)
        tokens = self.projection(feats, make_meta_token(sample))
        return self.trunk(tokens, trunk_mask)

    def embed_sample(self, sample: ModalitySample) -> SampleEmbedding:
        return self.vectorizer(self.trunk_tokens(sample), sample.modality)

    # -- parameter plumbing -------------------------------------------------

    def component_params(self) -> dict[str, dict[str, Tensor]]:
        comps: dict[str, dict[str, Tensor]] = {}
        for m, enc in self.encoders.items():
            comps[f"encoder.{m.name.lower()}"] = enc.named_params()
        comps["projection"] = self.projection.named_params()
        comps["trunk"] = self.trunk.named_params()
        comps["vectorizer"] = self.vectorizer.named_params()
        comps["decoder"] = self.decoder.named_params()
        for task, head in self.heads.items():
            comps[f"head.{task}"] = head.named_params()
        return comps

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for comp, named in self.component_params().items():
            out.update(prefixed(comp, named))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def component_checksums(self) -> dict[str, str]:
        return {comp: parameter_checksum(named)
                for comp, named in self.component_params().items()}
