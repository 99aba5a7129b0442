"""Canonical 5-axis modality representation, synthetic datasets, patching.

Every sample, regardless of modality, carries axes (t, h, w, c, l):

    Image       (1, h, w, 3, 1)
    Video       (t, h, w, 3, 1), t > 1
    Depth       (1, h, w, 4, 1)
    PointCloud  (1, 1, 1, 3, l)
    Audio       (t, h, w, c, 1)   spectrogram
    Text        (1, 1, 1, 1, l)   integer token ids

Payloads are float64 in memory but always exactly float32-representable so
the on-disk container (little-endian f32 / u32) round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

DATASET_MAGIC = b"XMDS"
DATASET_VERSION = 1

VARIANCE_FLOOR = 1e-12


class Modality(IntEnum):
    IMAGE = 0
    DEPTH = 1
    VIDEO = 2
    POINTCLOUD = 3
    AUDIO = 4
    TEXT = 5


VISUAL_MODALITIES = (Modality.IMAGE, Modality.DEPTH, Modality.VIDEO,
                     Modality.POINTCLOUD)

# desk-scale canonical shapes
DEFAULT_AXES: dict[Modality, tuple[int, int, int, int, int]] = {
    Modality.IMAGE: (1, 8, 8, 3, 1),
    Modality.DEPTH: (1, 8, 8, 4, 1),
    Modality.VIDEO: (4, 8, 8, 3, 1),
    Modality.POINTCLOUD: (1, 1, 1, 3, 64),
    Modality.AUDIO: (4, 8, 8, 1, 1),
    Modality.TEXT: (1, 1, 1, 1, 32),
}

DEFAULT_VOCAB = 64


@dataclass(frozen=True)
class PatchSpec:
    """Per-modality tokenizer geometry. `spatial` is the patch edge on h and
    w, `temporal` the frame-chunk along t, `group` the point-cloud group
    size. Text always tokenizes one id per position."""

    spatial: int = 4
    temporal: int = 2
    group: int = 16


DEFAULT_PATCH: dict[Modality, PatchSpec] = {
    Modality.IMAGE: PatchSpec(spatial=4, temporal=1),
    Modality.DEPTH: PatchSpec(spatial=4, temporal=1),
    Modality.VIDEO: PatchSpec(spatial=4, temporal=2),
    Modality.AUDIO: PatchSpec(spatial=4, temporal=2),
    Modality.POINTCLOUD: PatchSpec(group=16),
    Modality.TEXT: PatchSpec(),
}


@dataclass
class ModalitySample:
    """One raw datum: modality tag, canonical axes, payload, optional label.

    label is an int class id for classification tasks, a (patches, dim)
    float array for dense tasks, or an int token sequence for text targets.
    """

    modality: Modality
    axes: tuple[int, int, int, int, int]
    payload: np.ndarray
    label: object = None

    def __post_init__(self):
        t, h, w, c, l = self.axes
        m = self.modality
        if min(self.axes) < 0:
            raise ContractError(f"negative axis in {self.axes}")
        ok = {
            Modality.IMAGE: t == 1 and c == 3 and l == 1,
            Modality.VIDEO: t > 1 and c == 3 and l == 1,
            Modality.DEPTH: t == 1 and c == 4 and l == 1,
            Modality.POINTCLOUD: (t, h, w) == (1, 1, 1) and c == 3,
            Modality.AUDIO: l == 1,
            Modality.TEXT: (t, h, w, c) == (1, 1, 1, 1),
        }[m]
        if not ok:
            raise ContractError(f"{m.name} sample violates axis invariant: {self.axes}")
        if m is Modality.TEXT:
            if self.payload.shape != (l,):
                raise ContractError(f"text payload shape {self.payload.shape} != ({l},)")
            if self.payload.size and self.payload.min() < 0:
                raise ContractError("text payload ids must be non-negative")
        elif self.payload.shape != self.axes:
            raise ContractError(f"payload shape {self.payload.shape} != axes {self.axes}")


@dataclass
class PatchSequence:
    """N patch vectors plus their raster positions. For text, `patches` is
    the (N,) id sequence; otherwise a float (N, dim) matrix. Feature-space
    sequences produced by encoders reuse this container with `patches`
    holding the feature matrix."""

    patches: np.ndarray
    positions: np.ndarray
    modality: Modality

    def __post_init__(self):
        n = self.patches.shape[0]
        if n < 1:
            raise ContractError("PatchSequence requires N >= 1")
        if self.positions.shape != (n,):
            raise ContractError(f"positions shape {self.positions.shape} != ({n},)")

    @property
    def n(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Recipe for a reproducible synthetic dataset; same spec + seed gives a
    byte-identical dataset."""

    modality: Modality
    task_kind: str              # "classification" | "dense"
    count: int
    classes: int = 2            # classification only
    target_dim: int = 1         # dense: stats per patch (text dense: summary length)
    seed: int = 0
    rule: str = "class_pattern"
    axes: tuple[int, int, int, int, int] | None = None
    vocab: int = DEFAULT_VOCAB


# ---------------------------------------------------------------------------
# patch extraction


def extract_patches(sample: ModalitySample, spec: PatchSpec | None = None) -> PatchSequence:
    """Cut a sample into its raster-ordered raw patches. Non-divisible patch
    geometry is a hard error: synthetic shapes are fully controlled and
    silent padding would corrupt reconstruction targets."""
    if spec is None:
        spec = DEFAULT_PATCH[sample.modality]
    t, h, w, c, l = sample.axes
    m = sample.modality

    if m is Modality.TEXT:
        if l == 0:
            raise ContractError("text sample has zero tokens")
        ids = np.asarray(sample.payload, dtype=np.int64)
        return PatchSequence(ids, np.arange(l), m)

    if m is Modality.POINTCLOUD:
        if l == 0:
            raise ContractError("point cloud has zero points")
        g = spec.group
        if l % g != 0:
            raise ContractError(f"point count {l} not divisible by group size {g}")
        pts = sample.payload.reshape(3, l)
        patches = pts.reshape(3, l // g, g).transpose(1, 0, 2).reshape(l // g, 3 * g)
        return PatchSequence(np.ascontiguousarray(patches), np.arange(l // g), m)

    # grid modalities: image, depth, video, audio
    if 0 in (t, h, w, c):
        raise ContractError(f"zero-size axis in {sample.axes}")
    p = spec.spatial
    tc = spec.temporal if t > 1 else 1
    if t % tc or h % p or w % p:
        raise ContractError(
            f"axes (t={t}, h={h}, w={w}) not divisible by patch (t={tc}, p={p})")
    grid = sample.payload.reshape(t // tc, tc, h // p, p, w // p, p, c)
    patches = grid.transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, tc * p * p * c)
    return PatchSequence(np.ascontiguousarray(patches), np.arange(patches.shape[0]), m)


def reassemble_patches(seq: PatchSequence, axes: tuple[int, int, int, int, int],
                       spec: PatchSpec | None = None) -> np.ndarray:
    """Inverse raster reassembly of extract_patches (lossless for non-text)."""
    if spec is None:
        spec = DEFAULT_PATCH[seq.modality]
    t, h, w, c, l = axes
    m = seq.modality
    if m is Modality.TEXT:
        return seq.patches.copy()
    if m is Modality.POINTCLOUD:
        g = spec.group
        n = seq.n
        pts = seq.patches.reshape(n, 3, g).transpose(1, 0, 2).reshape(3, l)
        return pts.reshape(1, 1, 1, 3, l)
    p = spec.spatial
    tc = spec.temporal if t > 1 else 1
    grid = seq.patches.reshape(t // tc, h // p, w // p, tc, p, p, c)
    return grid.transpose(0, 3, 1, 4, 2, 5, 6).reshape(t, h, w, c, 1)


def patch_count(modality: Modality, axes=None, spec: PatchSpec | None = None) -> int:
    if axes is None:
        axes = DEFAULT_AXES[modality]
    if spec is None:
        spec = DEFAULT_PATCH[modality]
    t, h, w, c, l = axes
    if modality is Modality.TEXT:
        return l
    if modality is Modality.POINTCLOUD:
        return l // spec.group
    tc = spec.temporal if t > 1 else 1
    return (t // tc) * (h // spec.spatial) * (w // spec.spatial)


def patch_dim(modality: Modality, axes=None, spec: PatchSpec | None = None) -> int:
    """Raw per-patch vector length (1 for text: a single token id)."""
    if axes is None:
        axes = DEFAULT_AXES[modality]
    if spec is None:
        spec = DEFAULT_PATCH[modality]
    t, h, w, c, l = axes
    if modality is Modality.TEXT:
        return 1
    if modality is Modality.POINTCLOUD:
        return 3 * spec.group
    tc = spec.temporal if t > 1 else 1
    return tc * spec.spatial * spec.spatial * c


# ---------------------------------------------------------------------------
# normalization


def normalize_visual(sample: ModalitySample) -> ModalitySample:
    """Normalize the whole payload to zero mean, unit variance. Degenerate
    constant payloads map to all-zeros (variance floor 1e-12)."""
    if sample.modality is Modality.TEXT:
        raise ContractError("normalize_visual is undefined for text samples")
    x = sample.payload
    mu = x.mean()
    var = x.var()
    if var < VARIANCE_FLOOR:
        normed = np.zeros_like(x)
    else:
        normed = (x - mu) / np.sqrt(var)
    return replace(sample, payload=normed)


# ---------------------------------------------------------------------------
# synthetic generation

_RULES = ("class_pattern", "patch_moments", "token_bias", "prefix_copy")


def _class_pattern_basis(modality: Modality, axes, classes: int) -> list[np.ndarray]:
    """Fixed per-class sign patterns, stable across dataset seeds so that
    train and held-out splits share the same class-conditional signal."""
    out = []
    for c in range(classes):
        rng = np.random.default_rng(9_000 + 37 * int(modality) + c)
        out.append(np.sign(rng.standard_normal(axes)).astype(np.float64))
    return out


def generate_dataset(spec: SyntheticDatasetSpec) -> list[ModalitySample]:
    """Draw `spec.count` learnable samples under the named generative rule."""
    if spec.count < 1:
        raise ContractError(f"sample count must be >= 1, got {spec.count}")
    if spec.rule not in _RULES:
        raise ConfigError(f"unknown generative rule {spec.rule!r}; known: {_RULES}")
    axes = spec.axes or DEFAULT_AXES[spec.modality]
    rng = np.random.default_rng(spec.seed)

    if spec.rule == "class_pattern":
        if spec.modality is Modality.TEXT:
            raise ConfigError("rule 'class_pattern' requires a non-text modality")
        return _gen_class_pattern(spec, axes, rng)
    if spec.rule == "patch_moments":
        if spec.modality is Modality.TEXT:
            raise ConfigError("rule 'patch_moments' requires a non-text modality")
        return _gen_patch_moments(spec, axes, rng)
    if spec.rule == "token_bias":
        if spec.modality is not Modality.TEXT:
            raise ConfigError("rule 'token_bias' is text-only")
        return _gen_token_bias(spec, axes, rng)
    if spec.modality is not Modality.TEXT:
        raise ConfigError("rule 'prefix_copy' is text-only")
    return _gen_prefix_copy(spec, axes, rng)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _gen_class_pattern(spec, axes, rng) -> list[ModalitySample]:
    # class signal = mean shift (survives a decision stump on the mean) plus
    # a class sign pattern (survives per-sample normalization)
    basis = _class_pattern_basis(spec.modality, axes, spec.classes)
    offset = [(c - (spec.classes - 1) / 2.0) for c in range(spec.classes)]
    samples = []
    for _ in range(spec.count):
        c = int(rng.integers(spec.classes))
        x = offset[c] + 1.5 * basis[c] + 0.25 * rng.standard_normal(axes)
        samples.append(ModalitySample(spec.modality, axes, _f32(x), label=c))
    return samples


def _gen_patch_moments(spec, axes, rng) -> list[ModalitySample]:
    if not 1 <= spec.target_dim <= 3:
        raise ConfigError(f"patch_moments target_dim must be 1..3, got {spec.target_dim}")
    samples = []
    for _ in range(spec.count):
        x = _f32(rng.standard_normal(axes))
        s = ModalitySample(spec.modality, axes, x)
        seq = extract_patches(s)
        stats = [seq.patches.mean(axis=1)]
        if spec.target_dim >= 2:
            stats.append(seq.patches.std(axis=1))
        if spec.target_dim >= 3:
            stats.append(seq.patches.max(axis=1) - seq.patches.min(axis=1))
        s.label = _f32(np.stack(stats, axis=1))
        samples.append(s)
    return samples


def _gen_token_bias(spec, axes, rng) -> list[ModalitySample]:
    l = axes[4]
    band = spec.vocab // spec.classes
    if band < 1:
        raise ConfigError(f"vocab {spec.vocab} too small for {spec.classes} classes")
    samples = []
    for _ in range(spec.count):
        c = int(rng.integers(spec.classes))
        ids = c * band + rng.integers(band, size=l)
        noise = rng.random(l) < 0.1
        ids = np.where(noise, rng.integers(spec.vocab, size=l), ids)
        samples.append(ModalitySample(spec.modality, axes, ids.astype(np.int64), label=c))
    return samples


def _gen_prefix_copy(spec, axes, rng) -> list[ModalitySample]:
    l = axes[4]
    s_len = spec.target_dim
    if not 1 <= s_len <= l:
        raise ConfigError(f"summary length {s_len} must be in [1, {l}]")
    samples = []
    for _ in range(spec.count):
        ids = rng.integers(spec.vocab, size=l).astype(np.int64)
        samples.append(ModalitySample(spec.modality, axes, ids, label=ids[:s_len].copy()))
    return samples


# ---------------------------------------------------------------------------
# dataset container (documented flat binary)
#
#   header:  magic "XMDS" | version u32 | modality u32 | axes 5*u32
#            | count u32 | task u32 (0 classification, 1 dense)
#            | label_rows u32 | label_cols u32
#   payload: count arrays, little-endian f32 (text: u32 token ids)
#   labels:  classification -> count u32 class ids
#            dense text     -> count * label_rows u32 token ids
#            dense other    -> count * label_rows * label_cols f32
#
# all fields little-endian; readers reject unknown magic or version.

_HEADER = struct.Struct("<4sII5IIIII")


def _label_layout(samples: list[ModalitySample]) -> tuple[int, int, int]:
    first = samples[0].label
    if first is None:
        return 0, 0, 0
    if isinstance(first, (int, np.integer)):
        return 0, 1, 0
    arr = np.asarray(first)
    if arr.ndim == 1:
        return 1, arr.shape[0], 0
    return 1, arr.shape[0], arr.shape[1]


def save_dataset(path, samples: list[ModalitySample]) -> None:
    if not samples:
        raise ContractError("cannot save an empty dataset")
    m = samples[0].modality
    axes = samples[0].axes
    for s in samples:
        if s.modality is not m or s.axes != axes:
            raise ContractError("dataset samples must share modality and axes")
    task, rows, cols = _label_layout(samples)
    blob = bytearray()
    blob += _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, int(m), *axes,
                         len(samples), task, rows, cols)
    for s in samples:
        if m is Modality.TEXT:
            blob += s.payload.astype("<u4").tobytes()
        else:
            blob += s.payload.astype("<f4").tobytes()
    for s in samples:
        if s.label is None:
            continue
        if task == 0:
            blob += struct.pack("<I", int(s.label))
        elif m is Modality.TEXT:
            blob += np.asarray(s.label).astype("<u4").tobytes()
        else:
            blob += np.asarray(s.label).astype("<f4").tobytes()
    atomic_write(path, bytes(blob))


def load_dataset(path) -> list[ModalitySample]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    magic, version, mcode, t, h, w, c, l, count, task, rows, cols = _HEADER.unpack_from(raw)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    m = Modality(mcode)
    axes = (t, h, w, c, l)
    off = _HEADER.size
    payloads = []
    for _ in range(count):
        if m is Modality.TEXT:
            arr = np.frombuffer(raw, "<u4", l, off).astype(np.int64)
            off += 4 * l
        else:
            n = t * h * w * c * l
            arr = np.frombuffer(raw, "<f4", n, off).astype(np.float64).reshape(axes)
            off += 4 * n
        payloads.append(arr)
    labels: list[object] = [None] * count
    if rows:
        for i in range(count):
            if task == 0:
                labels[i] = struct.unpack_from("<I", raw, off)[0]
                off += 4
            elif m is Modality.TEXT:
                labels[i] = np.frombuffer(raw, "<u4", rows, off).astype(np.int64)
                off += 4 * rows
            else:
                n = rows * cols
                labels[i] = np.frombuffer(raw, "<f4", n, off).astype(np.float64).reshape(rows, cols)
                off += 4 * n
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes ({len(raw) - off})")
    return [ModalitySample(m, axes, p, label=lab) for p, lab in zip(payloads, labels)]


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
