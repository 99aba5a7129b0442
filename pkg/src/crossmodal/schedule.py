"""Stage-2 fine-tuning: simple/dense task grouping, modality-mixed batch
assembly from unpaired datasets, v1/v2 epoch alternation, evaluation, and
the four-variant ablation harness (grouping x mixing toggles)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import tensor as T
from .data import Modality, ModalitySample
from .errors import ConfigError, ContractError
from .model import Network
from .optim import make_optimizer
from .tensor import Tensor
from .trunk import HeadConfig, SummarizerHead, head_forward, task_loss

GROUPS = ("simple", "dense")
MERGED = "all"   # pool label when task grouping is disabled


@dataclass
class TaskSpec:
    """One registered task: its group, its per-modality train/eval datasets,
    and the head that serves it."""

    task: str
    group: str
    head: HeadConfig
    train: dict[Modality, list[ModalitySample]]
    eval: dict[Modality, list[ModalitySample]]

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"task {self.task!r}: group must be one of {GROUPS}, "
                              f"got {self.group!r}")
        if self.head.task != self.task:
            raise ConfigError(f"task {self.task!r} references head {self.head.task!r}")
        for m in self.train:
            if m not in self.head.modalities:
                raise ConfigError(f"task {self.task!r}: head does not accept "
                                  f"modality {m.name}")
        if not self.train:
            raise ConfigError(f"task {self.task!r} has no training datasets")


@dataclass(frozen=True)
class TrainSchedule:
    """v1 simple-group epochs then v2 dense-group epochs, repeated across E
    epochs. E = 0 is the documented eval-only degenerate run."""

    epochs: int
    v1: int = 2
    v2: int = 2
    steps_per_epoch: int = 25
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3

    def __post_init__(self):
        if self.v1 < 1 or self.v2 < 1:
            raise ConfigError(f"v1 and v2 must be >= 1, got v1={self.v1} v2={self.v2}")
        if self.epochs != 0 and self.epochs < self.v1 + self.v2:
            raise ConfigError(f"epochs must be 0 or >= v1+v2={self.v1 + self.v2}, "
                              f"got {self.epochs}")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_epoch and batch_size must be >= 1")


class AblationVariant(IntEnum):
    """The four training-strategy rows: toggling task grouping and modality
    mixing. Variant 1 also pretrains one modality at a time."""

    BASELINE = 1
    GROUPED = 2
    MIXED = 3
    GROUPED_MIXED = 4

    @property
    def task_grouping(self) -> bool:
        return self in (AblationVariant.GROUPED, AblationVariant.GROUPED_MIXED)

    @property
    def modality_mixing(self) -> bool:
        return self in (AblationVariant.MIXED, AblationVariant.GROUPED_MIXED)


def build_group_sequence(schedule: TrainSchedule) -> list[str]:
    """Deterministic epoch labels: v1 simple, v2 dense, repeating, truncated
    at E. The alternation starts with the simple group."""
    pattern = ["simple"] * schedule.v1 + ["dense"] * schedule.v2
    reps = -(-schedule.epochs // len(pattern)) if schedule.epochs else 0
    return (pattern * reps)[: schedule.epochs]


@dataclass
class BatchItem:
    task: TaskSpec
    modality: Modality
    sample: ModalitySample


@dataclass
class MixedBatch:
    group: str
    items: list[BatchItem]

    def modalities(self) -> set[Modality]:
        return {it.modality for it in self.items}


class TaskRegistry:
    """Validated task collection; head wiring is checked here so routing can
    never fail mid-training."""

    def __init__(self, model: Network, tasks: list[TaskSpec]):
        if not tasks:
            raise ConfigError("no tasks registered")
        names = [t.task for t in tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        for t in tasks:
            if t.task not in model.heads:
                raise ConfigError(f"model has no head for task {t.task!r}")
            for m in t.train:
                if m not in model.encoders:
                    raise ConfigError(f"model has no encoder for {m.name} "
                                      f"(task {t.task!r})")
        self.model = model
        self.tasks = list(tasks)

    def pool(self, group: str) -> list[tuple[TaskSpec, Modality]]:
        """(task, modality) dataset pairs for a group ('all' merges groups),
        in deterministic (task name, modality code) order."""
        pairs = [(t, m) for t in self.tasks
                 if group == MERGED or t.group == group
                 for m in sorted(t.train.keys())]
        return sorted(pairs, key=lambda p: (p[0].task, int(p[1])))


def assemble_mixed_batch(group: str, registry: TaskRegistry, batch_size: int,
                         rng: np.random.Generator, mixing_enabled: bool,
                         rr_cursor: int = 0) -> tuple[MixedBatch, int]:
    """Mixing on: every slot draws a (task, modality) dataset uniformly,
    then a sample uniformly; batches large enough to cover two modalities
    are guaranteed to contain at least two. Mixing off: the whole batch
    comes from one dataset, datasets visited round-robin via rr_cursor."""
    pool = registry.pool(group)
    if not pool:
        raise ConfigError(f"no datasets registered for group {group!r}")
    if not mixing_enabled:
        task, modality = pool[rr_cursor % len(pool)]
        data = task.train[modality]
        idx = rng.integers(len(data), size=batch_size)
        items = [BatchItem(task, modality, data[i]) for i in idx]
        return MixedBatch(group, items), rr_cursor + 1

    items = []
    for _ in range(batch_size):
        task, modality = pool[int(rng.integers(len(pool)))]
        data = task.train[modality]
        items.append(BatchItem(task, modality, data[int(rng.integers(len(data)))]))
    distinct = {m for _, m in pool}
    if len(distinct) >= 2 and batch_size >= 2 * len(distinct):
        got = {it.modality for it in items}
        if len(got) < 2:
            others = [p for p in pool if p[1] not in got]
            task, modality = others[int(rng.integers(len(others)))]
            data = task.train[modality]
            items[0] = BatchItem(task, modality, data[int(rng.integers(len(data)))])
    return MixedBatch(group, items), rr_cursor


# ---------------------------------------------------------------------------
# training / evaluation


def _sample_loss(model: Network, item: BatchItem) -> Tensor:
    trunk_out = model.trunk_tokens(item.sample)
    head = model.heads[item.task.task]
    kind = item.task.head.kind
    emb = model.vectorizer(trunk_out, item.modality) if kind == "classification" else None
    target_ids = item.sample.label if kind == "summarizer" else None
    pred = head_forward(head, trunk_out, emb, item.modality, target_ids)
    return task_loss(kind, pred, item.sample.label)


def train_batch(model: Network, optimizer, batch: MixedBatch) -> dict[tuple[str, Modality], float]:
    """Sum the per-sample losses of one mixed batch and take one optimizer
    step; returns mean loss per (task, modality) pair for reporting."""
    losses: dict[tuple[str, Modality], list[float]] = {}
    total: Tensor | None = None
    for item in batch.items:
        loss = _sample_loss(model, item)
        losses.setdefault((item.task.task, item.modality), []).append(loss.item())
        total = loss if total is None else T.add(total, loss)
    model.zero_grad()
    T.backward(total, model.parameters())
    optimizer.step()
    return {k: float(np.mean(v)) for k, v in losses.items()}


def evaluate(model: Network, task: TaskSpec, modality: Modality) -> float:
    """classification -> top-1 accuracy; dense -> mean squared error;
    summarizer -> greedy token accuracy."""
    data = task.eval.get(modality)
    if data is None:
        raise ConfigError(f"task {task.task!r} has no eval data for {modality.name}")
    head = model.heads[task.task]
    kind = task.head.kind
    scores = []
    for sample in data:
        trunk_out = model.trunk_tokens(sample)
        if kind == "classification":
            emb = model.vectorizer(trunk_out, modality)
            pred = head_forward(head, trunk_out, emb, modality)
            scores.append(1.0 if int(np.argmax(pred.data)) == int(sample.label) else 0.0)
        elif kind == "dense":
            pred = head_forward(head, trunk_out, None, modality)
            target = np.asarray(sample.label, dtype=np.float64)
            if pred.data.shape != target.shape:
                raise ContractError(f"dense eval shape {pred.data.shape} vs "
                                    f"{target.shape}")
            scores.append(float(np.mean((pred.data - target) ** 2)))
        else:
            assert isinstance(head, SummarizerHead)
            decoded = head.greedy_decode(trunk_out, None)
            target = np.asarray(sample.label, dtype=np.int64)
            scores.append(float(np.mean(decoded == target)))
    return float(np.mean(scores))


def metric_name(kind: str) -> str:
    return {"classification": "accuracy", "dense": "mse",
            "summarizer": "token_accuracy"}[kind]


@dataclass
class EpochRow:
    epoch: int
    group: str
    task: str
    modality: Modality
    loss: float          # nan when the pair saw no batches this epoch
    metric: float


@dataclass
class FinetuneResult:
    variant: AblationVariant
    rows: list[EpochRow] = field(default_factory=list)
    final: dict[str, dict[str, float]] = field(default_factory=dict)
    rr_cursor: int = 0
    epochs_done: int = 0


def _eval_all(model, registry) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for task in registry.tasks:
        per = {}
        for m in sorted(task.eval.keys()):
            per[m.name.lower()] = evaluate(model, task, m)
        out[task.task] = per
    return out


def finetune_epoch(model: Network, registry: TaskRegistry, schedule: TrainSchedule,
                   variant: AblationVariant, optimizer, rng: np.random.Generator,
                   epoch: int, group: str, rr_cursor: int) -> tuple[list[EpochRow], int]:
    pair_losses: dict[tuple[str, Modality], list[float]] = {}
    for _ in range(schedule.steps_per_epoch):
        batch, rr_cursor = assemble_mixed_batch(group, registry, schedule.batch_size,
                                                rng, variant.modality_mixing, rr_cursor)
        for pair, loss in train_batch(model, optimizer, batch).items():
            pair_losses.setdefault(pair, []).append(loss)
    rows = []
    for task in registry.tasks:
        for m in sorted(task.eval.keys()):
            seen = pair_losses.get((task.task, m))
            loss = float(np.mean(seen)) if seen else float("nan")
            rows.append(EpochRow(epoch, group, task.task, m, loss,
                                 evaluate(model, task, m)))
    return rows, rr_cursor


def finetune_run(model: Network, registry: TaskRegistry, schedule: TrainSchedule,
                 variant: AblationVariant, rng: np.random.Generator,
                 optimizer=None, start_epoch: int = 0,
                 rr_cursor: int = 0) -> FinetuneResult:
    """Train epochs [start_epoch, E) of the variant's schedule, evaluating
    every registered task each epoch; E=0 gives an eval-only report."""
    if optimizer is None:
        optimizer = make_optimizer(schedule.optimizer, model.parameters(), schedule.lr)
    seq = (build_group_sequence(schedule) if variant.task_grouping
           else [MERGED] * schedule.epochs)
    result = FinetuneResult(variant=variant, rr_cursor=rr_cursor)
    for epoch in range(start_epoch, schedule.epochs):
        rows, result.rr_cursor = finetune_epoch(
            model, registry, schedule, variant, optimizer, rng,
            epoch, seq[epoch], result.rr_cursor)
        result.rows.extend(rows)
        result.epochs_done = epoch + 1
    result.final = _eval_all(model, registry)
    return result


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationReport:
    """One row per variant, one metric column per (task, modality) pair;
    the ordering among variants is reported, never asserted."""

    columns: list[str]
    rows: dict[int, dict[str, float]]

    def to_table(self) -> str:
        header = ["variant", "task_grouping", "modality_mixing"] + self.columns
        lines = ["\t".join(header)]
        for v in sorted(self.rows):
            var = AblationVariant(v)
            cells = [f"variant-{v}", "on" if var.task_grouping else "off",
                     "on" if var.modality_mixing else "off"]
            cells += [repr(self.rows[v][c]) for c in self.columns]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def run_ablation(make_model, pretrain_fn, make_registry, schedule: TrainSchedule,
                 seed: int) -> tuple[AblationReport, dict[int, FinetuneResult]]:
    """Run all four variants under one seed. `make_model()` builds a fresh
    identically-initialized network, `pretrain_fn(model, variant, rng)` runs
    stage 1 (single-dataset regime for the baseline variant), and
    `make_registry(model)` wires the tasks."""
    results: dict[int, FinetuneResult] = {}
    columns: list[str] = []
    rows: dict[int, dict[str, float]] = {}
    for variant in AblationVariant:
        rng = np.random.default_rng([seed, 0xAB1A, int(variant)])
        model = make_model()
        pretrain_fn(model, variant, rng)
        registry = make_registry(model)
        result = finetune_run(model, registry, schedule, variant, rng)
        results[int(variant)] = result
        row = {}
        for task_name, per in result.final.items():
            for mod_name, value in per.items():
                col = f"{task_name}/{mod_name}"
                if col not in columns:
                    columns.append(col)
                row[col] = value
        rows[int(variant)] = row
    return AblationReport(columns=columns, rows=rows), results
