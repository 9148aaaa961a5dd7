"""Task-stream orchestration: per-task SGD, freezing, evaluation, checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from . import autodiff as ad
from . import serialization
from .autodiff import NonFiniteError, Tensor
from .data import LabeledSet, TaskStream
from .evaluation import AccuracyMatrix, EncodedSet, evaluate_seen
from .objectives import REGULARIZERS, CCLConfig, ClassifierBank, total_loss
from .optim import SGD, cosine_annealing_lr
from .prompt_pool import PromptPool
from .vit import Backbone, BackboneConfig

logger = logging.getLogger(__name__)

RESULT_KINDS = ("cil", "til", "task_acc", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 10
    batch_size: int = 16
    lr0: float = 0.01
    momentum: float = 0.9
    ccl: CCLConfig = CCLConfig()
    enable_ccl: bool = True
    enable_pcl: bool = True
    enable_mk: bool = True
    enable_aux_head: bool = True
    enable_aux_loss: bool = True
    regularizer: str = "adaptive"
    per_example_sampling: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.ccl, dict):
            object.__setattr__(self, "ccl", CCLConfig(**self.ccl))
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be >= 1")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def uses_aux_head(self) -> bool:
        return self.enable_pcl and self.enable_aux_loss and self.enable_aux_head

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentState:
    backbone: Backbone
    pool: PromptPool
    bank: ClassifierBank
    rng: np.random.Generator
    total_tasks: int
    tasks_done: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    results: Dict[str, AccuracyMatrix] = field(default_factory=dict)
    logs: List[dict] = field(default_factory=list)
    metrics: List[dict] = field(default_factory=list)

    @classmethod
    def create(cls, backbone: Backbone, total_tasks: int, config: TrainConfig,
               task_weights: Optional[List[float]] = None) -> "ExperimentState":
        if not backbone.frozen:
            raise ValueError("backbone must be pretrained and frozen")
        c = backbone.config
        state = cls(backbone=backbone,
                    pool=PromptPool(c.prompt_length, c.embed_dim, multi_key=config.enable_mk),
                    bank=ClassifierBank(c.embed_dim),
                    rng=np.random.default_rng(config.seed),
                    total_tasks=total_tasks)
        state.results = {k: AccuracyMatrix(task_weights=task_weights, num_tasks=total_tasks) for k in RESULT_KINDS}
        return state

    def trainable_parameters(self) -> Dict[str, Tensor]:
        """Exactly the leaves that receive gradient during the current task."""
        params: Dict[str, Tensor] = {}
        if len(self.pool) and not self.pool.current.frozen:
            params["prompt"] = self.pool.current.prompt
            params["keys"] = self.pool.current.keys
        if len(self.bank) and not self.bank.current.frozen:
            params["head.weight"] = self.bank.current.weight
            params["head.bias"] = self.bank.current.bias
        if self.bank.aux is not None:
            params["aux.weight"] = self.bank.aux.weight
            params["aux.bias"] = self.bank.aux.bias
        return params


def begin_task(state: ExperimentState, class_labels, config: TrainConfig) -> None:
    """Grow the pool and bank for a new task; earlier parameters freeze."""
    labels = np.unique(np.asarray(class_labels))
    if len(state.bank) and np.intersect1d(state.bank.global_labels(), labels).size:
        raise ValueError("new task's classes overlap earlier tasks")
    if len(state.pool) != state.tasks_done:
        raise RuntimeError("begin_task called twice for the same task")
    state.pool.add_task(labels, state.rng)
    state.bank.add_task(labels, state.rng, with_aux=config.uses_aux_head)


def train_task(state: ExperimentState, train_set: LabeledSet, config: TrainConfig,
               on_step: Optional[Callable[[ExperimentState, int], None]] = None) -> dict:
    """Run mini-batch SGD on the total loss for the newest task, then freeze it."""
    t = state.tasks_done
    if len(state.pool) != t + 1:
        raise RuntimeError("begin_task must be called before train_task")
    if not np.array_equal(np.unique(train_set.labels), state.bank.class_sets[t]):
        raise ValueError("training data does not match the task's class set")
    started = time.perf_counter()
    enc = EncodedSet.encode(state.backbone, train_set)
    y_local = state.bank.local_index(t, enc.labels)
    opt = SGD(state.trainable_parameters(), lr=config.lr0, momentum=config.momentum)
    n, bs = len(enc), config.batch_size
    total_steps = config.epochs_per_task * math.ceil(n / bs)
    step = 0
    epoch_losses = []
    for epoch in range(config.epochs_per_task):
        order = state.rng.permutation(n)
        sums: Dict[str, float] = {}
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            opt.zero_grad()
            try:
                loss, parts = total_loss(enc.tokens[idx], enc.queries[idx], y_local[idx], state.backbone,
                                         state.pool, state.bank, config, state.rng)
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteError(f"task {t + 1}, epoch {epoch}, step {step}: {exc}") from exc
            opt.step(cosine_annealing_lr(step, total_steps, config.lr0))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            state.metrics.append({"step": len(state.metrics), "task": t + 1, "L_total": parts["total"],
                                  "L_CCL": parts["ccl"], "L_ce": parts["ce"], "L_aux": parts["aux"],
                                  "L_mk": parts["mk"], "tau_rate": parts["tau_rate"]})
            step += 1
            if on_step is not None:
                on_step(state, step)
        epoch_losses.append({k: v / n for k, v in sums.items()})
    state.velocity = dict(opt.velocity)
    state.bank.finish_task()
    state.pool.freeze_all()
    state.tasks_done = t + 1
    log = {"task": t + 1, "epochs": config.epochs_per_task, "steps": step,
           "epoch_losses": epoch_losses, "final_losses": epoch_losses[-1],
           "wall_time_s": round(time.perf_counter() - started, 3)}
    state.logs.append(log)
    return log


def run_stream(stream: TaskStream, backbone: Backbone, config: TrainConfig,
               state: Optional[ExperimentState] = None, checkpoint_dir=None,
               stop_after: Optional[int] = None) -> ExperimentState:
    """Train every remaining task of ``stream`` in order, evaluating on all seen tasks after each.

    Pass a restored ``state`` to resume; ``stop_after`` halts once that many
    tasks are done (used to produce mid-stream checkpoints).
    """
    ad.set_default_dtype(config.dtype)
    weights = [len(cs) for cs in stream.class_sets]
    if state is None:
        state = ExperimentState.create(backbone, stream.num_tasks, config, weights)
    test_sets = [EncodedSet.encode(state.backbone, stream.test(j)) for j in range(stream.num_tasks)]
    end = stream.num_tasks if stop_after is None else min(stop_after, stream.num_tasks)
    while state.tasks_done < end:
        t = state.tasks_done
        begin_task(state, stream.classes(t), config)
        log = train_task(state, stream.train(t), config)
        row = evaluate_seen(state, test_sets)
        for k in RESULT_KINDS:
            state.results[k].append(row[k])
        logger.info("task %d/%d done in %.1fs, seen acc %.4f", t + 1, stream.num_tasks,
                    log["wall_time_s"], state.results["cil"].row_accuracy(t))
        if checkpoint_dir is not None:
            save_checkpoint(state, config, Path(checkpoint_dir) / f"after_task_{t + 1}.ckpt")
    return state


# -- checkpoints -----------------------------------------------------------------

def _checkpoint_payload(state: ExperimentState, config: TrainConfig):
    arrays = {f"backbone.{k}": v for k, v in state.backbone.state_arrays().items()}
    arrays.update(state.pool.state_arrays())
    arrays.update(state.bank.state_arrays())
    arrays.update({f"opt.{k}": v for k, v in state.velocity.items()})
    meta = {
        "code_version": __version__,
        "config": config.to_dict(),
        "backbone_config": state.backbone.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "total_tasks": state.total_tasks,
        "tasks_done": state.tasks_done,
        "pool": state.pool.meta(),
        "bank": state.bank.meta(),
        "results": {k: {"rows": m.to_list(), "weights": m.task_weights} for k, m in state.results.items()},
        "logs": state.logs,
        "metrics": state.metrics,
    }
    return meta, arrays


def checkpoint_bytes(state: ExperimentState, config: TrainConfig) -> bytes:
    meta, arrays = _checkpoint_payload(state, config)
    return serialization.dumps("experiment", meta, arrays)


def save_checkpoint(state: ExperimentState, config: TrainConfig, path) -> str:
    meta, arrays = _checkpoint_payload(state, config)
    return serialization.save(path, "experiment", meta, arrays)


def load_checkpoint(path):
    """Restore ``(state, config)``; refuses files written by another code version."""
    meta, arrays = serialization.load(path, kind="experiment")
    if meta["code_version"] != __version__:
        raise serialization.CheckpointVersionError(
            f"checkpoint written by promptcl {meta['code_version']}, this is {__version__}")
    config = TrainConfig(**meta["config"])
    ad.set_default_dtype(config.dtype)
    backbone = Backbone.from_arrays(BackboneConfig(**meta["backbone_config"]),
                                    {k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = ExperimentState(
        backbone=backbone,
        pool=PromptPool.from_state(meta["pool"], arrays),
        bank=ClassifierBank.from_state(meta["bank"], arrays),
        rng=rng,
        total_tasks=meta["total_tasks"],
        tasks_done=meta["tasks_done"],
        velocity={k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.")},
        results={k: AccuracyMatrix(v["rows"], task_weights=v["weights"], num_tasks=meta["total_tasks"])
                 for k, v in meta["results"].items()},
        logs=meta["logs"],
        metrics=meta["metrics"],
    )
    return state, config
