"""Checkpoint container: little-endian binary with a JSON header.

Layout:
    magic "XMCK" | version u32 | header_len u64 | header JSON (utf-8)
    | named parameter payload, float64 LE, in manifest order
    | optimizer arrays, float64 LE, in manifest order

The header carries the model hyperparameters, head configs, parameter and
optimizer manifests (name -> shape), the optimizer scalars, the training
rng state, the stage tag and any extra resume state. Save -> load -> forward
is bitwise identical to the pre-save forward.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Modality, atomic_write
from .errors import ContractError, FormatError
from .model import ModelConfig, Network
from .optim import Adam, make_optimizer
from .trunk import HeadConfig

CKPT_MAGIC = b"XMCK"
CKPT_VERSION = 1
STAGES = ("pretrained", "finetuned")

_FIXED = struct.Struct("<4sIQ")


def _head_to_dict(hc: HeadConfig) -> dict:
    return {"kind": hc.kind, "task": hc.task,
            "modalities": [int(m) for m in hc.modalities],
            "classes": hc.classes, "out_dim": hc.out_dim,
            "summary_len": hc.summary_len, "vocab": hc.vocab,
            "layers": hc.layers}


def _head_from_dict(d: dict) -> HeadConfig:
    d = dict(d)
    d["modalities"] = tuple(Modality(c) for c in d["modalities"])
    return HeadConfig(**d)


@dataclass
class Checkpoint:
    stage: str
    model_cfg: ModelConfig
    head_cfgs: tuple[HeadConfig, ...]
    params: dict[str, np.ndarray]
    optimizer_kind: str | None
    optimizer_lr: float
    optimizer_step_count: int
    optimizer_arrays: dict[str, np.ndarray]
    rng_state: dict | None
    extra: dict


def save_checkpoint(path, model: Network, stage: str, optimizer=None,
                    rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    if stage not in STAGES:
        raise ContractError(f"stage must be one of {STAGES}, got {stage!r}")
    named = model.named_params()
    manifest = [[name, list(t.data.shape)] for name, t in named.items()]
    opt_arrays = optimizer.state_arrays() if optimizer is not None else {}
    header = {
        "stage": stage,
        "model": model.cfg.to_dict(),
        "heads": [_head_to_dict(hc) for hc in model.head_cfgs],
        "params": manifest,
        "optimizer": None if optimizer is None else {
            "kind": optimizer.kind, "lr": optimizer.lr,
            "step_count": optimizer.step_count,
            "arrays": [[name, list(a.shape)] for name, a in opt_arrays.items()],
        },
        "rng_state": _encode_rng(rng) if rng is not None else None,
        "extra": extra or {},
    }
    head_bytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += _FIXED.pack(CKPT_MAGIC, CKPT_VERSION, len(head_bytes))
    blob += head_bytes
    for name, _ in manifest:
        blob += named[name].data.astype("<f8").tobytes()
    for name in opt_arrays:
        blob += opt_arrays[name].astype("<f8").tobytes()
    atomic_write(path, bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _FIXED.size or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    magic, version, hlen = _FIXED.unpack_from(raw)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_FIXED.size:_FIXED.size + hlen].decode())
    off = _FIXED.size + hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(raw, "<f8", n, off).reshape(shape).copy()
        off += 8 * n
    opt = header.get("optimizer")
    opt_arrays: dict[str, np.ndarray] = {}
    if opt is not None:
        for name, shape in opt["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            opt_arrays[name] = np.frombuffer(raw, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes ({len(raw) - off})")
    return Checkpoint(
        stage=header["stage"],
        model_cfg=ModelConfig.from_dict(header["model"]),
        head_cfgs=tuple(_head_from_dict(d) for d in header["heads"]),
        params=params,
        optimizer_kind=None if opt is None else opt["kind"],
        optimizer_lr=0.0 if opt is None else opt["lr"],
        optimizer_step_count=0 if opt is None else opt["step_count"],
        optimizer_arrays=opt_arrays,
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )


def load_params(model: Network, ckpt: Checkpoint,
                allow_fresh_heads: bool = False) -> None:
    """Copy checkpoint arrays into the model by name. With
    allow_fresh_heads, head parameters missing from the checkpoint keep
    their initialization (fine-tuning on top of a pretrained checkpoint)."""
    named = model.named_params()
    for name, tensor in named.items():
        if name in ckpt.params:
            arr = ckpt.params[name]
            if arr.shape != tensor.data.shape:
                raise ContractError(f"checkpoint param {name}: shape {arr.shape} "
                                    f"!= model {tensor.data.shape}")
            tensor.data = arr.copy()
        elif allow_fresh_heads and name.startswith("head."):
            continue
        else:
            raise ContractError(f"checkpoint is missing parameter {name}")
    for name in ckpt.params:
        if name not in named and not name.startswith("head."):
            raise ContractError(f"checkpoint has unknown parameter {name}")


def restore_model(ckpt: Checkpoint, seed: int = 0) -> Network:
    """Rebuild the checkpointed network exactly (its own head configs)."""
    model = Network(ckpt.model_cfg, ckpt.head_cfgs, seed=seed)
    load_params(model, ckpt)
    return model


def restore_optimizer(ckpt: Checkpoint, model: Network):
    if ckpt.optimizer_kind is None:
        return None
    opt = make_optimizer(ckpt.optimizer_kind, model.parameters(), ckpt.optimizer_lr)
    opt.step_count = ckpt.optimizer_step_count
    if isinstance(opt, Adam):
        opt.load_state_arrays(ckpt.optimizer_arrays)
    return opt


def _encode_rng(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
