"""Command-line surface.

Verbs: pretrain, finetune, ablate, eval, embed, retrieve.
Common flags: --config PATH, --checkpoint PATH, --out DIR, --seed INT.
Exit codes: 0 ok, 2 config error, 3 contract error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (load_checkpoint, load_params, restore_model,
                         restore_optimizer, restore_rng, save_checkpoint)
from .config import (RunConfig, build_head_cfgs, build_pretrain_datasets,
                     build_task_specs, load_config)
from .data import atomic_write, load_dataset
from .errors import ConfigError, ContractError, FormatError
from .model import Network
from .optim import make_optimizer
from .pretrain import pretrain_epoch
from .retrieval import load_embeddings, rank_by_cosine, save_embeddings
from .schedule import (AblationVariant, TaskRegistry, evaluate, finetune_run,
                       metric_name, run_ablation)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(c) for c in row) for row in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def format_report(tree: dict, indent: int = 0) -> str:
    """Key-value hierarchy, two-space indent per level."""
    lines = []
    for key, value in tree.items():
        pad = "  " * indent
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(format_report(value, indent + 1))
        else:
            lines.append(f"{pad}{key}: {_fmt(value)}")
    return "\n".join(lines)


def _require_mode(cfg: RunConfig, verb: str) -> None:
    if cfg.mode != verb:
        raise ConfigError(f"config.mode is {cfg.mode!r} but the command is {verb!r}")


def _load_cfg(args, verb: str) -> RunConfig:
    if not args.config:
        raise ConfigError(f"{verb} requires --config")
    cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
    _require_mode(cfg, verb)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


# ---------------------------------------------------------------------------
# verbs


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args, "pretrain")
    datasets = build_pretrain_datasets(cfg)
    if not datasets:
        raise ConfigError("pretrain.datasets must be non-empty")
    model = Network(cfg.model, (), seed=cfg.seed)
    pt = cfg.pretrain
    optimizer = make_optimizer(pt["optimizer"], model.parameters(), pt["lr"])
    rng = np.random.default_rng([cfg.seed, 1])
    rows = []
    for epoch in range(pt["epochs"]):
        metrics = pretrain_epoch(model, datasets, optimizer, rng, epoch=epoch,
                                 steps=pt["steps_per_epoch"],
                                 batch_size=pt["batch_size"],
                                 ratios=cfg.mask_ratios)
        rows.extend(metrics.rows())
    write_csv(cfg.out_dir / "pretrain_metrics.csv",
              ["epoch", "modality", "mean_loss", "steps"], rows)
    ckpt_path = cfg.out_dir / "pretrained.ckpt"
    save_checkpoint(ckpt_path, model, "pretrained", optimizer=optimizer, rng=rng,
                    extra={"pretrain_epochs_done": pt["epochs"]})
    print(f"pretrained {pt['epochs']} epochs over "
          f"{[m.name.lower() for m in sorted(datasets)]}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics:    {cfg.out_dir / 'pretrain_metrics.csv'}")
    return 0


def _finetune_setup(cfg: RunConfig, ckpt_path):
    """Build (model, optimizer, rng, start_epoch, rr_cursor) from a
    pretrained checkpoint (fresh heads) or resume a finetuned one."""
    ckpt = load_checkpoint(ckpt_path)
    head_cfgs = build_head_cfgs(cfg)
    schedule = cfg.finetune
    if ckpt.model_cfg.to_dict() != cfg.model.to_dict():
        raise ContractError("checkpoint model dimensions differ from config.model")
    if ckpt.stage == "pretrained":
        model = Network(cfg.model, head_cfgs, seed=cfg.seed)
        load_params(model, ckpt, allow_fresh_heads=True)
        optimizer = make_optimizer(schedule.optimizer, model.parameters(), schedule.lr)
        rng = np.random.default_rng([cfg.seed, 2])
        return model, optimizer, rng, 0, 0
    if ckpt.head_cfgs != head_cfgs:
        raise ContractError("finetuned checkpoint head configuration does not "
                            "match config.tasks")
    prev_variant = ckpt.extra.get("variant")
    if prev_variant is not None and prev_variant != int(cfg.variant):
        raise ContractError(f"checkpoint was fine-tuned with variant "
                            f"{prev_variant}, config asks for {int(cfg.variant)}")
    model = restore_model(ckpt, seed=cfg.seed)
    optimizer = restore_optimizer(ckpt, model)
    if optimizer is None:
        optimizer = make_optimizer(schedule.optimizer, model.parameters(), schedule.lr)
    rng = restore_rng(ckpt.rng_state)
    return model, optimizer, rng, ckpt.extra.get("epochs_done", 0), \
        ckpt.extra.get("rr_cursor", 0)


def _result_rows(result, variant=None):
    rows = []
    for r in result.rows:
        row = (r.epoch, r.group, r.task, r.modality.name.lower(), r.loss, r.metric)
        rows.append((int(variant),) + row if variant is not None else row)
    return rows


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args, "finetune")
    ckpt_path = args.checkpoint or cfg.checkpoint
    if ckpt_path is None:
        raise ConfigError("finetune requires --checkpoint (or config.checkpoint)")
    model, optimizer, rng, start_epoch, rr_cursor = _finetune_setup(cfg, ckpt_path)
    registry = TaskRegistry(model, build_task_specs(cfg, model.head_cfgs))
    schedule = cfg.finetune
    result = finetune_run(model, registry, schedule, cfg.variant, rng,
                          optimizer=optimizer, start_epoch=start_epoch,
                          rr_cursor=rr_cursor)
    write_csv(cfg.out_dir / "finetune_metrics.csv",
              ["epoch", "group", "task", "modality", "loss", "metric"],
              _result_rows(result))
    report = {
        "run": {"mode": "finetune", "variant": int(cfg.variant), "seed": cfg.seed,
                "task_grouping": "on" if cfg.variant.task_grouping else "off",
                "modality_mixing": "on" if cfg.variant.modality_mixing else "off"},
        "schedule": {"epochs": schedule.epochs, "v1": schedule.v1, "v2": schedule.v2,
                     "steps_per_epoch": schedule.steps_per_epoch,
                     "batch_size": schedule.batch_size,
                     "optimizer": schedule.optimizer, "lr": schedule.lr,
                     "trained_epochs": f"{start_epoch}..{schedule.epochs}"},
        "final_metrics": {
            task: {mod: value for mod, value in per.items()}
            for task, per in result.final.items()},
    }
    atomic_write(cfg.out_dir / "finetune_report.txt",
                 (format_report(report) + "\n").encode())
    out_ckpt = cfg.out_dir / "finetuned.ckpt"
    save_checkpoint(out_ckpt, model, "finetuned", optimizer=optimizer, rng=rng,
                    extra={"epochs_done": schedule.epochs,
                           "rr_cursor": result.rr_cursor,
                           "variant": int(cfg.variant)})
    print(format_report(report))
    print(f"checkpoint: {out_ckpt}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args, "ablate")
    if args.checkpoint or cfg.checkpoint:
        raise ConfigError("ablate pretrains internally per variant; remove the "
                          "checkpoint input")
    head_cfgs = build_head_cfgs(cfg)
    datasets = build_pretrain_datasets(cfg)
    if not datasets:
        raise ConfigError("pretrain.datasets must be non-empty for ablate")
    pt = cfg.pretrain

    def make_model() -> Network:
        return Network(cfg.model, head_cfgs, seed=cfg.seed)

    def pretrain_fn(model, variant, rng):
        optimizer = make_optimizer(pt["optimizer"], model.parameters(), pt["lr"])
        for epoch in range(pt["epochs"]):
            pretrain_epoch(model, datasets, optimizer, rng, epoch=epoch,
                           steps=pt["steps_per_epoch"], batch_size=pt["batch_size"],
                           ratios=cfg.mask_ratios,
                           cross_modal=variant.modality_mixing or variant.task_grouping)

    def make_registry(model) -> TaskRegistry:
        return TaskRegistry(model, build_task_specs(cfg, head_cfgs))

    report, results = run_ablation(make_model, pretrain_fn, make_registry,
                                   cfg.finetune, cfg.seed)
    table = report.to_table()
    atomic_write(cfg.out_dir / "ablation_table.txt", table.encode())
    header = ["variant", "task_grouping", "modality_mixing"] + report.columns
    rows = []
    for v in sorted(report.rows):
        var = AblationVariant(v)
        rows.append((f"variant-{v}", "on" if var.task_grouping else "off",
                     "on" if var.modality_mixing else "off")
                    + tuple(report.rows[v][c] for c in report.columns))
    write_csv(cfg.out_dir / "ablation_table.csv", header, rows)
    detail = []
    for v in sorted(results):
        detail.extend(_result_rows(results[v], variant=v))
    write_csv(cfg.out_dir / "ablation_metrics.csv",
              ["variant", "epoch", "group", "task", "modality", "loss", "metric"],
              detail)
    print(table, end="")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args, "eval")
    ckpt_path = args.checkpoint or cfg.checkpoint
    if ckpt_path is None:
        raise ConfigError("eval requires --checkpoint (or config.checkpoint)")
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stage != "finetuned":
        raise ContractError(f"eval needs a finetuned checkpoint, got stage "
                            f"{ckpt.stage!r}")
    model = restore_model(ckpt, seed=cfg.seed)
    registry = TaskRegistry(model, build_task_specs(cfg, model.head_cfgs))
    rows = []
    for task in registry.tasks:
        for m in sorted(task.eval.keys()):
            value = evaluate(model, task, m)
            rows.append((task.task, m.name.lower(), metric_name(task.head.kind), value))
    write_csv(cfg.out_dir / "eval_metrics.csv",
              ["task", "modality", "metric", "value"], rows)
    for row in rows:
        print(f"{row[0]}/{row[1]}: {row[2]} = {_fmt(row[3])}")
    return 0


def cmd_embed(args) -> int:
    if not args.checkpoint:
        raise ConfigError("embed requires --checkpoint")
    if not args.data:
        raise ConfigError("embed requires --data DATASET_FILE")
    out_dir = Path(args.out) if args.out else None
    if args.config:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        _require_mode(cfg, "embed")
        out_dir = cfg.out_dir
        ckpt = load_checkpoint(args.checkpoint)
        if "model" in cfg.raw and cfg.model.embed_dim != ckpt.model_cfg.embed_dim:
            raise ContractError(f"config embed_dim {cfg.model.embed_dim} != "
                                f"checkpoint embed_dim {ckpt.model_cfg.embed_dim}")
    else:
        ckpt = load_checkpoint(args.checkpoint)
    if out_dir is None:
        raise ConfigError("embed requires --out (or config.out_dir)")
    out_dir.mkdir(parents=True, exist_ok=True)
    model = restore_model(ckpt, seed=0)
    samples = load_dataset(args.data)
    for s in samples:
        if s.modality not in model.encoders:
            raise ConfigError(f"checkpoint has no encoder for modality "
                              f"{s.modality.name}")
    matrix = np.stack([model.embed_sample(s).vector.data for s in samples])
    tags = [s.modality.name.lower() for s in samples]
    path = out_dir / "embeddings.emb"
    save_embeddings(path, matrix, tags)
    print(f"wrote {matrix.shape[0]} embeddings of dim {matrix.shape[1]} to {path}")
    return 0


def cmd_retrieve(args) -> int:
    if not args.query or not args.gallery:
        raise ConfigError("retrieve requires --query and --gallery embedding files")
    out_dir = Path(args.out) if args.out else None
    if args.config:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        _require_mode(cfg, "retrieve")
        out_dir = cfg.out_dir
    if out_dir is None:
        raise ConfigError("retrieve requires --out (or config.out_dir)")
    out_dir.mkdir(parents=True, exist_ok=True)
    query, _ = load_embeddings(args.query)
    gallery, _ = load_embeddings(args.gallery)
    ranked = rank_by_cosine(query, gallery, args.k)
    payload = {"k": args.k, "indices": ranked.tolist()}
    atomic_write(out_dir / "retrieval.json",
                 json.dumps(payload, sort_keys=True).encode())
    for qi, row in enumerate(ranked[:5]):
        print(f"query {qi}: {list(row)}")
    print(f"wrote {out_dir / 'retrieval.json'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmodal",
        description="Desk-scale multi-modal transformer: masked pretraining, "
                    "task-grouped fine-tuning, ablations, embeddings.")
    sub = parser.add_subparsers(dest="verb", required=True)
    verbs = {
        "pretrain": cmd_pretrain, "finetune": cmd_finetune, "ablate": cmd_ablate,
        "eval": cmd_eval, "embed": cmd_embed, "retrieve": cmd_retrieve,
    }
    for verb, fn in verbs.items():
        p = sub.add_parser(verb)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        if verb == "embed":
            p.add_argument("--data", type=str, default=None,
                           help="dataset container file to embed")
        if verb == "retrieve":
            p.add_argument("--query", type=str, default=None)
            p.add_argument("--gallery", type=str, default=None)
            p.add_argument("--k", type=int, default=5)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ContractError as e:
        print(f"contract error: {e}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
