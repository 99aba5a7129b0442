"""Stage-1 self-supervised training: patch mask planning, visible-only
encoding with mask-token infill, the permutation language objective for
text, and the uniformly modality-mixed pretraining epoch."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .blocks import ATTN_MASK_BLOCKED
from .data import (DEFAULT_VOCAB, Modality, ModalitySample, PatchSequence,
                   extract_patches, normalize_visual)
from .encoders import make_meta_token
from .errors import ConfigError, ContractError
from .model import Network
from .tensor import Tensor


@dataclass(frozen=True)
class MaskRatios:
    """Per-modality masking ratios and the predicted-token fraction for the
    text objective. Depth follows the visual default."""

    image: float = 0.90
    depth: float = 0.90
    video: float = 0.90
    audio: float = 0.90
    pointcloud: float = 0.80
    text: float = 0.95
    predicted_fraction: float = 0.05

    def __post_init__(self):
        for name in ("image", "depth", "video", "audio", "pointcloud", "text",
                     "predicted_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"MaskRatios.{name} must lie in (0, 1), got {v}")

    def ratio_for(self, modality: Modality) -> float:
        return {
            Modality.IMAGE: self.image, Modality.DEPTH: self.depth,
            Modality.VIDEO: self.video, Modality.AUDIO: self.audio,
            Modality.POINTCLOUD: self.pointcloud, Modality.TEXT: self.text,
        }[modality]


DEFAULT_RATIOS = MaskRatios()


@dataclass
class MaskPlan:
    """Disjoint masked/visible index sets covering 0..N-1."""

    n: int
    k: int
    masked: np.ndarray
    visible: np.ndarray
    ratio: float


def plan_mask(n: int, modality: Modality, rng: np.random.Generator,
              ratios: MaskRatios = DEFAULT_RATIOS) -> MaskPlan:
    """Uniform random K-subset with K = round(ratio * N) clamped to
    [1, N-1] (ties round half-to-even)."""
    if n < 2:
        raise ContractError(f"plan_mask needs N >= 2, got {n}")
    ratio = ratios.ratio_for(modality)
    k = min(max(round(ratio * n), 1), n - 1)
    perm = rng.permutation(n)
    return MaskPlan(n=n, k=k, masked=np.sort(perm[:k]),
                    visible=np.sort(perm[k:]), ratio=ratio)


class TextMaskAction(Enum):
    MASK = "mask"        # p = 0.8
    RANDOM = "random"    # p = 0.1
    KEEP = "keep"        # p = 0.1


@dataclass
class PermutedPlan:
    """Factorization order for the text objective. `order[i]` is position
    i's rank in the permutation; `predicted` holds the max(1, round(f*l))
    positions ranked last (maximal visible context); each gets an 8:1:1
    action and a pre-drawn replacement id for RANDOM."""

    order: np.ndarray
    predicted: np.ndarray
    actions: list[TextMaskAction]
    replacements: np.ndarray


def draw_mask_action(rng: np.random.Generator) -> TextMaskAction:
    u = rng.random()
    if u < 0.8:
        return TextMaskAction.MASK
    if u < 0.9:
        return TextMaskAction.RANDOM
    return TextMaskAction.KEEP


def permuted_lm_prepare(sample: ModalitySample, f: float, rng: np.random.Generator,
                        permutation: np.ndarray | None = None,
                        vocab: int = DEFAULT_VOCAB) -> PermutedPlan:
    """Draw the factorization permutation, the predicted-token set, and the
    8:1:1 corruption actions. `permutation` is a test hook: the identity
    permutation reduces the objective to left-to-right LM masking."""
    if sample.modality is not Modality.TEXT:
        raise ContractError("permuted_lm_prepare expects a text sample")
    l = sample.axes[4]
    if l < 2:
        raise ContractError(f"permuted LM needs l >= 2, got {l}")
    perm = rng.permutation(l) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(l)):
        raise ContractError("permutation hook must be a permutation of 0..l-1")
    order = np.empty(l, dtype=np.int64)
    order[perm] = np.arange(l)
    count = max(1, round(f * l))
    predicted = perm[l - count:].copy()
    actions = [draw_mask_action(rng) for _ in range(count)]
    replacements = rng.integers(0, vocab, size=count)
    return PermutedPlan(order=order, predicted=predicted, actions=actions,
                        replacements=replacements)


# ---------------------------------------------------------------------------
# forward paths


def masked_targets(sample: ModalitySample, plan: MaskPlan) -> np.ndarray:
    """Ground truth at masked positions: raw patch content (token ids for
    text). Callers normalize visual samples before planning, so these are
    patches of the normalized sample."""
    if sample.modality is Modality.TEXT:
        return np.asarray(sample.payload, dtype=np.int64)[plan.masked]
    return extract_patches(sample).patches[plan.masked]


def masked_forward(model: Network, sample: ModalitySample, plan: MaskPlan) -> Tensor:
    """Reconstruction predictions for the masked positions. Only visible
    patches (keeping their original position indices) reach the encoder and
    trunk; the decoder sees trunk outputs merged with K mask-token replicas
    plus fresh positional embeddings for all N slots. Normalization is the
    caller's preprocessing step: doing it here would leak masked content
    into visible patches through the per-sample statistics."""
    seq = extract_patches(sample)
    if plan.n != seq.n:
        raise ContractError(f"mask plan for N={plan.n} applied to sample "
                            f"with N={seq.n}")
    visible_seq = PatchSequence(seq.patches[plan.visible],
                                plan.visible.copy(), seq.modality)
    feats = model.encoder_for(sample.modality)(visible_seq)
    tokens = model.projection(feats, make_meta_token(sample))
    trunk_out = model.trunk(tokens)                                # (N-K+1, n)
    patch_rows = T.take_rows(trunk_out, np.arange(1, trunk_out.shape[0]))
    mask_rows = T.tile_rows(model.decoder.mask_token, plan.k)      # (K, n)
    stackd = T.concat_rows([patch_rows, mask_rows])                # (N, n), visible first
    # reorder to original patch order: row j of output = where position j lives
    source = np.empty(plan.n, dtype=np.int64)
    source[plan.visible] = np.arange(plan.n - plan.k)
    source[plan.masked] = plan.n - plan.k + np.arange(plan.k)
    merged = T.take_rows(stackd, source)
    decoded = model.decoder(merged, np.arange(plan.n), sample.modality)
    return T.take_rows(decoded, plan.masked)


def reconstruction_loss(predictions: Tensor, targets, plan: MaskPlan,
                        modality: Modality) -> Tensor:
    """Mean-per-element squared error over the K masked patches; text uses
    cross-entropy over the predicted tokens of the permutation objective."""
    if predictions.shape[0] != plan.k:
        raise ContractError(f"{predictions.shape[0]} predictions for "
                            f"{plan.k} masked positions")
    if modality is Modality.TEXT:
        ids = np.asarray(targets, dtype=np.int64)
        if ids.shape[0] != plan.k:
            raise ContractError(f"{ids.shape[0]} targets for {plan.k} positions")
        return T.cross_entropy_logits(predictions, ids)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ContractError(f"prediction shape {predictions.shape} vs "
                            f"targets {targets.shape}")
    diff = T.sub(predictions, Tensor(targets))
    return T.mean_all(T.mul(diff, diff))


def _perm_attention_mask(order: np.ndarray) -> Tensor:
    """Token at rank r attends only to ranks <= r."""
    allowed = order[None, :] <= order[:, None]
    return Tensor(np.where(allowed, 0.0, ATTN_MASK_BLOCKED))


def _meta_extended_mask(order: np.ndarray) -> Tensor:
    """Same rule shifted one row/column for the prepended meta token: every
    token may attend the meta token (it carries no content), the meta token
    attends only itself (so no information can round-trip through it)."""
    l = len(order)
    allowed = np.zeros((l + 1, l + 1), dtype=bool)
    allowed[1:, 1:] = order[None, :] <= order[:, None]
    allowed[:, 0] = True
    allowed[0, 1:] = False
    return Tensor(np.where(allowed, 0.0, ATTN_MASK_BLOCKED))


def permuted_lm_logits(model: Network, sample: ModalitySample,
                       plan: PermutedPlan) -> Tensor:
    """Vocab logits at the predicted positions. Every attention the text
    passes through (encoder, trunk, decoder) is constrained to the
    factorization order, so a predicted token's logits cannot depend on
    tokens later in the permutation."""
    ids = np.asarray(sample.payload, dtype=np.int64).copy()
    vocab = model.cfg.vocab
    for pos, action, repl in zip(plan.predicted, plan.actions, plan.replacements):
        if action is TextMaskAction.MASK:
            ids[pos] = vocab                       # the reserved mask-token id
        elif action is TextMaskAction.RANDOM:
            ids[pos] = repl % vocab
    l = ids.shape[0]
    seq = PatchSequence(ids, np.arange(l), Modality.TEXT)
    inner = _perm_attention_mask(plan.order)
    outer = _meta_extended_mask(plan.order)
    feats = model.encoder_for(Modality.TEXT)(seq, attn_mask=inner)
    tokens = model.projection(feats, make_meta_token(sample))
    trunk_out = model.trunk(tokens, outer)
    patch_rows = T.take_rows(trunk_out, np.arange(1, l + 1))
    decoded = model.decoder(patch_rows, np.arange(l), Modality.TEXT,
                            attn_mask=inner)
    return T.take_rows(decoded, plan.predicted)


def permuted_lm_loss(model: Network, sample: ModalitySample, plan: PermutedPlan) -> Tensor:
    logits = permuted_lm_logits(model, sample, plan)
    targets = np.asarray(sample.payload, dtype=np.int64)[plan.predicted]
    return T.cross_entropy_logits(logits, targets)


# ---------------------------------------------------------------------------
# training loop


def pretrain_sample_loss(model: Network, sample: ModalitySample,
                         rng: np.random.Generator,
                         ratios: MaskRatios = DEFAULT_RATIOS) -> Tensor:
    if sample.modality is Modality.TEXT:
        plan = permuted_lm_prepare(sample, ratios.predicted_fraction, rng,
                                   vocab=model.cfg.vocab)
        return permuted_lm_loss(model, sample, plan)
    sample = normalize_visual(sample)
    plan = plan_mask(extract_patches(sample).n, sample.modality, rng, ratios)
    preds = masked_forward(model, sample, plan)
    return reconstruction_loss(preds, masked_targets(sample, plan), plan,
                               sample.modality)


def pretrain_step(model: Network, samples: list[ModalitySample], optimizer,
                  rng: np.random.Generator,
                  ratios: MaskRatios = DEFAULT_RATIOS) -> float:
    """One optimizer step on a single-modality mini-batch; returns the mean
    reconstruction loss."""
    losses = [pretrain_sample_loss(model, s, rng, ratios) for s in samples]
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    total = T.scale(total, 1.0 / len(losses))
    params = model.parameters()
    model.zero_grad()
    T.backward(total, params)
    optimizer.step()
    return total.item()


@dataclass
class EpochMetrics:
    epoch: int
    per_modality: dict[Modality, tuple[float, int]] = field(default_factory=dict)

    def rows(self) -> list[tuple[int, str, float, int]]:
        out = []
        for m in sorted(self.per_modality):
            loss, steps = self.per_modality[m]
            out.append((self.epoch, m.name.lower(), loss, steps))
        return out


def pretrain_epoch(model: Network, datasets: dict[Modality, list[ModalitySample]],
                   optimizer, rng: np.random.Generator, epoch: int = 0,
                   steps: int = 20, batch_size: int = 4,
                   ratios: MaskRatios = DEFAULT_RATIOS,
                   cross_modal: bool = True) -> EpochMetrics:
    """One epoch of masked pretraining. With cross_modal, each step draws
    its modality uniformly at random (no task grouping here); without it,
    the step budget is walked one modality at a time in code order, the
    single-dataset baseline regime."""
    if not datasets:
        raise ConfigError("pretrain_epoch: no datasets registered")
    mods = sorted(datasets.keys())
    totals: dict[Modality, list[float]] = {m: [] for m in mods}
    for step in range(steps):
        if cross_modal:
            m = mods[int(rng.integers(len(mods)))]
        else:
            m = mods[(step * len(mods)) // steps]
        pool = datasets[m]
        idx = rng.integers(len(pool), size=min(batch_size, len(pool)))
        batch = [pool[i] for i in idx]
        totals[m].append(pretrain_step(model, batch, optimizer, rng, ratios))
    metrics = EpochMetrics(epoch=epoch)
    for m in mods:
        if totals[m]:
            metrics.per_modality[m] = (float(np.mean(totals[m])), len(totals[m]))
        else:
            metrics.per_modality[m] = (float("nan"), 0)
    return metrics
