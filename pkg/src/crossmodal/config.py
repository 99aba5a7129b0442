"""Run configuration: a documented JSON schema, validated with field-level
messages before anything executes.

Top-level keys:
    mode        pretrain | finetune | ablate | eval | embed | retrieve
    seed        int, mandatory (env CROSSMODAL_SEED and --seed override)
    out_dir     output directory (env CROSSMODAL_OUT and --out override)
    model       network dims (enc_layers, enc_width, enc_heads, trunk_layers,
                trunk_width, trunk_heads, mlp_ratio, embed_dim, dec_layers,
                vocab, modalities)
    mask_ratios per-modality masking ratios + predicted_fraction
    pretrain    epochs, steps_per_epoch, batch_size, optimizer, lr,
                datasets: [{modality, count, seed, rule?, classes?}]
    finetune    epochs, v1, v2, steps_per_epoch, batch_size, optimizer, lr,
                variant (1..4)
    tasks       [{name, kind, group, datasets: [{modality, rule, classes |
                target_dim, train_count, eval_count, train_seed, eval_seed}]}]
    checkpoint  input checkpoint path (finetune / eval / embed)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (DEFAULT_VOCAB, Modality, ModalitySample,
                   SyntheticDatasetSpec, generate_dataset, patch_count)
from .errors import ConfigError
from .model import ModelConfig
from .pretrain import MaskRatios
from .schedule import AblationVariant, TaskSpec, TrainSchedule
from .trunk import HeadConfig

MODES = ("pretrain", "finetune", "ablate", "eval", "embed", "retrieve")

_MODALITY_NAMES = {m.name.lower(): m for m in Modality}


def modality_by_name(name: str, where: str) -> Modality:
    try:
        return _MODALITY_NAMES[name.lower()]
    except KeyError:
        raise ConfigError(f"{where}: unknown modality {name!r}; expected one of "
                          f"{sorted(_MODALITY_NAMES)}") from None


@dataclass
class RunConfig:
    mode: str
    seed: int
    out_dir: Path
    model: ModelConfig
    mask_ratios: MaskRatios
    pretrain: dict
    finetune: TrainSchedule | None
    variant: AblationVariant
    task_defs: list[dict]
    checkpoint: Path | None
    raw: dict = field(default_factory=dict)


def _expect(cfg: dict, key: str, types, where: str, default=None, required=False):
    if key not in cfg:
        if required:
            raise ConfigError(f"{where}.{key} is required")
        return default
    v = cfg[key]
    if not isinstance(v, types) or isinstance(v, bool) and types is not bool:
        raise ConfigError(f"{where}.{key}: expected {types}, got {type(v).__name__}")
    return v


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_config(raw, seed_override=seed_override,
                        out_override=out_override, base=Path(path).parent)


def parse_config(raw: dict, seed_override: int | None = None,
                 out_override: str | None = None, base: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    mode = _expect(raw, "mode", str, "config", required=True)
    if mode not in MODES:
        raise ConfigError(f"config.mode: unknown mode {mode!r}; expected one of {MODES}")

    seed = seed_override
    if seed is None and os.environ.get("CROSSMODAL_SEED"):
        try:
            seed = int(os.environ["CROSSMODAL_SEED"])
        except ValueError:
            raise ConfigError("CROSSMODAL_SEED must be an integer") from None
    if seed is None:
        seed = _expect(raw, "seed", int, "config", required=True)

    out_dir = out_override or os.environ.get("CROSSMODAL_OUT") or raw.get("out_dir")
    if out_dir is None:
        raise ConfigError("config.out_dir is required (or pass --out / CROSSMODAL_OUT)")

    model = _parse_model(raw.get("model", {}))
    ratios = _parse_ratios(raw.get("mask_ratios", {}))
    pretrain = _parse_pretrain(raw.get("pretrain", {}), model)
    finetune, variant = _parse_finetune(raw.get("finetune", {}))
    task_defs = _parse_tasks(raw.get("tasks", []), model)

    checkpoint = raw.get("checkpoint")
    if checkpoint is not None:
        checkpoint = (base / checkpoint).resolve() if not Path(checkpoint).is_absolute() \
            else Path(checkpoint)
        if not checkpoint.exists():
            raise ConfigError(f"config.checkpoint: path {checkpoint} does not exist")

    if mode in ("finetune", "eval", "ablate") and not task_defs:
        raise ConfigError(f"config.tasks: mode {mode!r} requires at least one task")

    return RunConfig(mode=mode, seed=seed, out_dir=Path(out_dir), model=model,
                     mask_ratios=ratios, pretrain=pretrain, finetune=finetune,
                     variant=variant, task_defs=task_defs, checkpoint=checkpoint,
                     raw=raw)


def _parse_model(cfg: dict) -> ModelConfig:
    where = "model"
    kwargs = {}
    for key in ("enc_layers", "enc_width", "enc_heads", "trunk_layers",
                "trunk_width", "trunk_heads", "mlp_ratio", "embed_dim",
                "dec_layers", "vocab"):
        v = _expect(cfg, key, int, where)
        if v is not None:
            if v < 1 and key not in ("enc_layers", "trunk_layers", "dec_layers"):
                raise ConfigError(f"{where}.{key} must be >= 1, got {v}")
            if v < 0:
                raise ConfigError(f"{where}.{key} must be >= 0, got {v}")
            kwargs[key] = v
    if "modalities" in cfg:
        mods = cfg["modalities"]
        if not isinstance(mods, list) or not mods:
            raise ConfigError(f"{where}.modalities must be a non-empty list")
        kwargs["modalities"] = tuple(modality_by_name(m, f"{where}.modalities")
                                     for m in mods)
    try:
        return ModelConfig(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None


def _parse_ratios(cfg: dict) -> MaskRatios:
    where = "mask_ratios"
    kwargs = {}
    for key in ("image", "depth", "video", "audio", "pointcloud", "text",
                "predicted_fraction"):
        v = _expect(cfg, key, (int, float), where)
        if v is not None:
            kwargs[key] = float(v)
    try:
        return MaskRatios(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None


def _parse_pretrain(cfg: dict, model: ModelConfig) -> dict:
    where = "pretrain"
    out = {
        "epochs": _expect(cfg, "epochs", int, where, default=50),
        "steps_per_epoch": _expect(cfg, "steps_per_epoch", int, where, default=20),
        "batch_size": _expect(cfg, "batch_size", int, where, default=4),
        "optimizer": _expect(cfg, "optimizer", str, where, default="adam"),
        "lr": float(_expect(cfg, "lr", (int, float), where, default=1e-3)),
        "datasets": [],
    }
    for key in ("epochs", "steps_per_epoch", "batch_size"):
        if out[key] < 0 or (key != "epochs" and out[key] < 1):
            raise ConfigError(f"{where}.{key} must be positive, got {out[key]}")
    for i, d in enumerate(cfg.get("datasets", [])):
        dw = f"{where}.datasets[{i}]"
        m = modality_by_name(_expect(d, "modality", str, dw, required=True), dw)
        if m not in model.modalities:
            raise ConfigError(f"{dw}.modality: {m.name} is not in model.modalities")
        count = _expect(d, "count", int, dw, default=64)
        if count < 1:
            raise ConfigError(f"{dw}.count must be >= 1, got {count}")
        rule = _expect(d, "rule", str, dw,
                       default="token_bias" if m is Modality.TEXT else "class_pattern")
        out["datasets"].append({
            "modality": m, "count": count, "rule": rule,
            "classes": _expect(d, "classes", int, dw, default=2),
            "seed": _expect(d, "seed", int, dw, default=1000 + int(m)),
        })
    return out


def _parse_finetune(cfg: dict) -> tuple[TrainSchedule | None, AblationVariant]:
    where = "finetune"
    variant_code = _expect(cfg, "variant", int, where, default=4)
    if variant_code not in (1, 2, 3, 4):
        raise ConfigError(f"{where}.variant must be 1..4, got {variant_code}")
    try:
        schedule = TrainSchedule(
            epochs=_expect(cfg, "epochs", int, where, default=20),
            v1=_expect(cfg, "v1", int, where, default=2),
            v2=_expect(cfg, "v2", int, where, default=2),
            steps_per_epoch=_expect(cfg, "steps_per_epoch", int, where, default=25),
            batch_size=_expect(cfg, "batch_size", int, where, default=8),
            optimizer=_expect(cfg, "optimizer", str, where, default="adam"),
            lr=float(_expect(cfg, "lr", (int, float), where, default=1e-3)),
        )
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    return schedule, AblationVariant(variant_code)


def _parse_tasks(defs: list, model: ModelConfig) -> list[dict]:
    if not isinstance(defs, list):
        raise ConfigError("config.tasks must be a list")
    out = []
    names = set()
    for i, t in enumerate(defs):
        where = f"tasks[{i}]"
        name = _expect(t, "name", str, where, required=True)
        if name in names:
            raise ConfigError(f"{where}.name: duplicate task {name!r}")
        names.add(name)
        kind = _expect(t, "kind", str, where, required=True)
        if kind not in ("classification", "dense", "summarizer"):
            raise ConfigError(f"{where}.kind: unknown head kind {kind!r}")
        group = _expect(t, "group", str, where, required=True)
        if group not in ("simple", "dense"):
            raise ConfigError(f"{where}.group must be 'simple' or 'dense', got {group!r}")
        datasets = t.get("datasets", [])
        if not datasets:
            raise ConfigError(f"{where}.datasets must be non-empty")
        parsed = []
        for j, d in enumerate(datasets):
            dw = f"{where}.datasets[{j}]"
            m = modality_by_name(_expect(d, "modality", str, dw, required=True), dw)
            if m not in model.modalities:
                raise ConfigError(f"{dw}.modality: {m.name} is not in model.modalities")
            entry = {
                "modality": m,
                "rule": _expect(d, "rule", str, dw, required=True),
                "classes": _expect(d, "classes", int, dw, default=2),
                "target_dim": _expect(d, "target_dim", int, dw, default=1),
                "train_count": _expect(d, "train_count", int, dw, default=64),
                "eval_count": _expect(d, "eval_count", int, dw, default=64),
                "train_seed": _expect(d, "train_seed", int, dw, default=100 + 10 * i + j),
                "eval_seed": _expect(d, "eval_seed", int, dw, default=500 + 10 * i + j),
            }
            for key in ("train_count", "eval_count"):
                if entry[key] < 1:
                    raise ConfigError(f"{dw}.{key} must be >= 1, got {entry[key]}")
            parsed.append(entry)
        out.append({"name": name, "kind": kind, "group": group, "datasets": parsed})
    return out


# ---------------------------------------------------------------------------
# materialization


def build_head_cfgs(cfg: RunConfig) -> tuple[HeadConfig, ...]:
    heads = []
    for t in cfg.task_defs:
        mods = tuple(d["modality"] for d in t["datasets"])
        first = t["datasets"][0]
        if t["kind"] == "classification":
            hc = HeadConfig(kind="classification", task=t["name"], modalities=mods,
                            classes=first["classes"])
        elif t["kind"] == "dense":
            hc = HeadConfig(kind="dense", task=t["name"], modalities=mods,
                            out_dim=first["target_dim"])
        else:
            hc = HeadConfig(kind="summarizer", task=t["name"], modalities=mods,
                            summary_len=first["target_dim"], vocab=cfg.model.vocab)
        heads.append(hc)
    return tuple(heads)


def _dataset_spec(entry: dict, t: dict, cfg: RunConfig, seed: int,
                  count: int) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(
        modality=entry["modality"],
        task_kind="classification" if t["kind"] == "classification" else "dense",
        count=count,
        classes=entry["classes"],
        target_dim=entry["target_dim"],
        seed=seed,
        rule=entry["rule"],
        vocab=cfg.model.vocab,
    )


def build_task_specs(cfg: RunConfig, head_cfgs: tuple[HeadConfig, ...]) -> list[TaskSpec]:
    by_name = {hc.task: hc for hc in head_cfgs}
    out = []
    for t in cfg.task_defs:
        train: dict[Modality, list[ModalitySample]] = {}
        eval_: dict[Modality, list[ModalitySample]] = {}
        for entry in t["datasets"]:
            train[entry["modality"]] = generate_dataset(
                _dataset_spec(entry, t, cfg, entry["train_seed"], entry["train_count"]))
            eval_[entry["modality"]] = generate_dataset(
                _dataset_spec(entry, t, cfg, entry["eval_seed"], entry["eval_count"]))
        out.append(TaskSpec(task=t["name"], group=t["group"],
                            head=by_name[t["name"]], train=train, eval=eval_))
    return out


def build_pretrain_datasets(cfg: RunConfig) -> dict[Modality, list[ModalitySample]]:
    out: dict[Modality, list[ModalitySample]] = {}
    for d in cfg.pretrain["datasets"]:
        spec = SyntheticDatasetSpec(
            modality=d["modality"], task_kind="classification", count=d["count"],
            classes=d["classes"], seed=d["seed"], rule=d["rule"],
            vocab=cfg.model.vocab)
        out[d["modality"]] = generate_dataset(spec)
    return out
