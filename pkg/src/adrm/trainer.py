"""Class-incremental training loop: fine-tune, joint, experience replay and ADRM.

Each optimizer step minimizes the current-task cross-entropy plus, when the
memory is non-empty, the cross-entropy of a rehearsal batch of the same
size. In ``adrm`` mode the rehearsal batch is diversified with FGSM and
``floor(ratio * B)`` fooled and resisted samples are appended to it.

Randomness comes from four independent streams (data order/augmentation,
init, memory, diversification), so ADRM with ratio 0 replays the exact
trajectory of ER.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import AugmentConfig, augment_batch, make_task_stream
from .diversify import DiversificationSpec, diversify, mix_rehearsal
from .errors import InvalidArgument, TrainingFailure
from .evaluation import AccuracyMatrix, accuracy
from .memory import MemoryBuffer
from .models import init_model

log = logging.getLogger(__name__)

MODES = ("finetune", "joint", "er", "adrm")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    memory: int = 0
    diversify: int = 0


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "er"
    architecture: str = "small-cnn"
    model_options: dict = field(default_factory=dict)
    batch_size: int = 256
    rehearsal_batch_size: int | None = None
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 0.1
    milestones: tuple = (0.5, 0.75)
    epochs_first: int = 200
    epochs_rest: int = 128
    memory_budget: int = 1024
    memory_policy: str = "reservoir"
    offer_timing: str = "after_task"
    augment: AugmentConfig | None = AugmentConfig()
    augment_diversified: bool = False
    diversification: DiversificationSpec = DiversificationSpec()
    seeds: Seeds = Seeds()

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        for name in ("lr", "lr_decay"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise InvalidArgument("momentum and weight_decay must be >= 0")
        if self.epochs_first < 1 or self.epochs_rest < 1:
            raise InvalidArgument("epoch budgets must be >= 1")
        if self.offer_timing not in ("after_task", "per_step"):
            raise InvalidArgument("offer_timing must be 'after_task' or 'per_step'")

    @property
    def uses_memory(self):
        return self.mode in ("er", "adrm")

    @property
    def replay_size(self):
        return self.rehearsal_batch_size or self.batch_size


@dataclass
class StepLossBreakdown:
    current_task_loss: float
    rehearsal_loss: float
    total: float


@dataclass
class TaskLog:
    task_id: int
    epoch_losses: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


class RandomStreams:
    """Independent generators for each source of randomness in a run."""

    def __init__(self, seeds):
        self.data = np.random.default_rng(seeds.data)
        mem = np.random.SeedSequence(seeds.memory).spawn(2)
        self.memory_reservoir_seed = int(mem[0].generate_state(1)[0])
        self.memory_sample = np.random.default_rng(mem[1])
        eps, mix = np.random.SeedSequence(seeds.diversify).spawn(2)
        self.epsilon = np.random.default_rng(eps)
        self.mix = np.random.default_rng(mix)

    def state(self):
        return {name: getattr(self, name).bit_generator.state
                for name in ("data", "memory_sample", "epsilon", "mix")}


class Learner:
    """Mutable training state shared across the tasks of one run."""

    def __init__(self, stream, config):
        self.stream = stream
        self.config = config
        self.rng = RandomStreams(config.seeds)
        self.position = np.full(stream.dataset.n_classes, -1, dtype=np.int64)
        self.position[stream.class_order] = np.arange(len(stream.class_order))
        first = len(stream.tasks[0].class_ids)
        self.model = init_model(config.architecture, first, config.seeds.init,
                                stream.dataset.image_shape, **config.model_options)
        self.buffer = MemoryBuffer(config.memory_budget, self.rng.memory_reservoir_seed,
                                   config.memory_policy)
        self.global_step = 0
        self.tasks_done = 0

    def task_tensors(self, handle, subset):
        x = torch.from_numpy(handle.images[subset])
        y = torch.from_numpy(self.position[handle.labels[subset]])
        return x, y


def _schedule(config, epochs):
    return sorted({max(1, round(m * epochs)) for m in config.milestones if 0 < m < 1})


def train_task(learner, task, tlog=None):
    """Train on one task and then offer its examples to the memory.

    Step records go into ``tlog`` as they happen, so a caller holding it
    keeps the partial log when training fails.
    """
    cfg, model, buffer, rng = learner.config, learner.model, learner.buffer, learner.rng
    if task.task_id > 0:
        model.expand(len(task.class_ids))
    x_all, y_all = learner.task_tensors(learner.stream.dataset.train, task.train_subset)
    epochs = cfg.epochs_first if task.task_id == 0 else cfg.epochs_rest
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, _schedule(cfg, epochs), gamma=cfg.lr_decay)
    tlog = TaskLog(task.task_id) if tlog is None else tlog
    model.train()
    n = len(y_all)
    for epoch in range(epochs):
        order = torch.from_numpy(rng.data.permutation(n))
        epoch_total = 0.0
        n_batches = math.ceil(n / cfg.batch_size)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment is not None:
                xb = augment_batch(xb, int(rng.data.integers(2 ** 31)), cfg.augment)
            current = F.cross_entropy(model(xb), yb)
            rehearsal = torch.zeros(())
            diag = None
            if cfg.uses_memory and len(buffer):
                mx, my = buffer.sample(cfg.replay_size, rng.memory_sample)
                if cfg.mode == "adrm":
                    div = diversify(model, mx, my, cfg.diversification, rng.epsilon)
                    if cfg.augment_diversified and cfg.augment is not None:
                        div.perturbed = augment_batch(div.perturbed, int(rng.mix.integers(2 ** 31)),
                                                      cfg.augment)
                    mx, my = mix_rehearsal(mx, my, div, cfg.diversification.ratio, rng.mix)
                    diag = div.diagnostics()
                rehearsal = F.cross_entropy(model(mx), my)
            total = current + rehearsal
            if not torch.isfinite(total):
                raise TrainingFailure("non-finite training loss", learner.global_step)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            record = {"task": task.task_id, "epoch": epoch, "step": b,
                      "global_step": learner.global_step, "lr": opt.param_groups[0]["lr"],
                      "current_task_loss": current.item(), "rehearsal_loss": rehearsal.item(),
                      "total": total.item()}
            tlog.steps.append(record)
            if diag is not None:
                tlog.diagnostics.append({"task": task.task_id, "epoch": epoch, "step": b,
                                         "global_step": learner.global_step, **diag})
            if cfg.uses_memory and cfg.offer_timing == "per_step":
                buffer.offer_many(x_all[idx], y_all[idx], task.task_id)
            learner.global_step += 1
            epoch_total += total.item()
        sched.step()
        tlog.epoch_losses.append(epoch_total / n_batches)
        log.debug("task %d epoch %d loss %.4f", task.task_id, epoch, tlog.epoch_losses[-1])
    if cfg.uses_memory and cfg.offer_timing == "after_task":
        buffer.offer_many(x_all, y_all, task.task_id)
    learner.tasks_done += 1
    return tlog


def evaluate_seen(learner, upto):
    """Accuracies on the test subsets of tasks 0..upto."""
    handle = learner.stream.dataset.test
    out = []
    for task in learner.stream.tasks[:upto + 1]:
        x, y = learner.task_tensors(handle, task.test_subset)
        out.append(accuracy(learner.model, x, y))
    return out


@dataclass
class RunArtifacts:
    task_logs: list
    class_order: list
    buffer: MemoryBuffer
    checkpoints: list = field(default_factory=list)

    @property
    def step_log(self):
        return [s for t in self.task_logs for s in t.steps]

    @property
    def diagnostics(self):
        return [d for t in self.task_logs for d in t.diagnostics]


STEP_HEADER = ("task", "epoch", "step", "global_step", "lr", "current_task_loss",
               "rehearsal_loss", "total")
DIAG_HEADER = ("task", "epoch", "step", "global_step", "n_fooled", "n_resisted",
               "mean_epsilon", "fooling_rate")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows({k: r[k] for k in header} for r in rows)


def save_checkpoint(path, learner, config_digest=""):
    m = learner.model
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": m.architecture_id,
        "input_shape": list(m.input_shape),
        "init_seed": m.init_seed,
        "model_options": dict(learner.config.model_options),
        "head_blocks": [b.out_features for b in m.head.blocks],
        "state_dict": m.state_dict(),
        "tasks_done": learner.tasks_done,
        "global_step": learner.global_step,
        "class_order": list(map(int, learner.stream.class_order)),
        "config_digest": config_digest,
        "buffer": learner.buffer.state_dict(),
        "rng": learner.rng.state(),
    }, path)


def load_checkpoint(path):
    """Rebuild the model stored in a checkpoint; returns ``(model, payload)``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {payload.get('format_version')}")
    blocks = payload["head_blocks"]
    model = init_model(payload["architecture_id"], blocks[0], payload["init_seed"],
                       payload["input_shape"], **payload["model_options"])
    for n in blocks[1:]:
        model.expand(n)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def run_stream(stream, config, run_dir=None, config_digest=""):
    """Train every task in order and fill the accuracy matrix row by row.

    With ``run_dir`` set, per-task checkpoints, the step log, diversifier
    diagnostics and the accuracy matrix are written there; a failing run
    still writes whatever rows were completed before re-raising.
    """
    if config.mode == "joint":
        stream = make_task_stream(stream.dataset, 1)
    if len(stream.tasks[0].class_ids) < 2:
        raise InvalidArgument("the first task must contain at least two classes")
    learner = Learner(stream, config)
    T = len(stream.tasks)
    matrix = AccuracyMatrix(T)
    artifacts = RunArtifacts([], list(stream.class_order), learner.buffer)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    try:
        for task in stream.tasks:
            tlog = TaskLog(task.task_id)
            artifacts.task_logs.append(tlog)
            train_task(learner, task, tlog)
            for i, acc in enumerate(evaluate_seen(learner, task.task_id)):
                matrix.set(task.task_id, i, acc)
            log.info("task %d: %s", task.task_id, np.round(matrix.row(task.task_id), 4).tolist())
            if run_dir is not None:
                ckpt = run_dir / "checkpoints" / f"task_{task.task_id}.pt"
                save_checkpoint(ckpt, learner, config_digest)
                artifacts.checkpoints.append(ckpt)
    finally:
        if run_dir is not None:
            matrix.to_csv(run_dir / "accuracy_matrix.csv")
            _write_csv(run_dir / "metrics.csv", STEP_HEADER, artifacts.step_log)
            _write_csv(run_dir / "diversifier.csv", DIAG_HEADER, artifacts.diagnostics)
    return learner.model, matrix, artifacts
