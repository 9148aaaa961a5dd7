"""Task prompts, their class keys, query-key prompt selection and the key loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import Tensor


@dataclass
class TaskPrompt:
    task_id: int
    prompt: Tensor  # (L_P, D)
    keys: Tensor  # (n_keys, D): one per class, or a single task key in one-key mode
    class_labels: np.ndarray

    def freeze(self) -> None:
        for name in ("prompt", "keys"):
            t = getattr(self, name)
            data = np.array(t.data)
            data.setflags(write=False)
            setattr(self, name, Tensor(data, requires_grad=False))

    @property
    def frozen(self) -> bool:
        return not self.prompt.requires_grad

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"prompt": self.prompt.data, "keys": self.keys.data, "class_labels": self.class_labels}

    def content_hash(self) -> str:
        return serialization.content_hash("task_prompt", {"task_id": self.task_id}, self.arrays())


class PromptPool:
    """Growing list of task prompts; only the newest one is ever trainable."""

    def __init__(self, prompt_length: int, embed_dim: int, multi_key: bool = True,
                 prompt_init_std: float = 0.02):
        self.prompt_length = prompt_length
        self.embed_dim = embed_dim
        self.multi_key = multi_key
        self.prompt_init_std = prompt_init_std
        self.tasks: List[TaskPrompt] = []

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def current(self) -> TaskPrompt:
        return self.tasks[-1]

    def add_task(self, class_labels, rng: np.random.Generator, task_id: int | None = None) -> TaskPrompt:
        """Append a fresh prompt and keys for a new task and freeze all earlier ones."""
        task_id = len(self.tasks) if task_id is None else task_id
        if task_id != len(self.tasks):
            raise ValueError(f"task {task_id} already added or out of order (pool has {len(self.tasks)})")
        class_labels = np.asarray(class_labels, dtype=np.int64)
        for tp in self.tasks:
            if np.intersect1d(tp.class_labels, class_labels).size:
                raise ValueError("class labels overlap an earlier task")
            if not tp.frozen:
                tp.freeze()
        dtype = ad.get_default_dtype()
        n_keys = len(class_labels) if self.multi_key else 1
        keys = rng.standard_normal((n_keys, self.embed_dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        prompt = rng.normal(0.0, self.prompt_init_std, (self.prompt_length, self.embed_dim))
        tp = TaskPrompt(task_id, Tensor(prompt.astype(dtype), requires_grad=True),
                        Tensor(keys.astype(dtype), requires_grad=True), class_labels)
        self.tasks.append(tp)
        return tp

    def freeze_all(self) -> None:
        for tp in self.tasks:
            if not tp.frozen:
                tp.freeze()

    # -- keys -------------------------------------------------------------------
    def key_owner(self) -> np.ndarray:
        """Task index of every row of the concatenated key matrix."""
        return np.concatenate([np.full(len(tp.keys.data), i) for i, tp in enumerate(self.tasks)])

    def key_matrix(self) -> np.ndarray:
        return np.concatenate([tp.keys.data for tp in self.tasks], axis=0)

    def key_offset(self, task: int) -> int:
        return sum(len(tp.keys.data) for tp in self.tasks[:task])

    # -- selection ----------------------------------------------------------------
    def sample_training_prompt(self, rng: np.random.Generator, size: int | None = None):
        """Uniform draw over the tasks seen so far (0-based indices)."""
        if not self.tasks:
            raise ValueError("empty prompt pool")
        return rng.integers(0, len(self.tasks), size=size)

    def similarities(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = self.key_matrix().astype(np.float64)
        qn = np.linalg.norm(q, axis=1)
        if (qn <= ad.COSINE_EPS).any():
            raise ZeroDivisionError("zero-norm query")
        kn = np.linalg.norm(k, axis=1)
        return (q / qn[:, None]) @ (k / kn[:, None]).T

    def select(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Batched argmax over all keys; returns (task index, key index within task).

        ``np.argmax`` keeps the first maximum, and keys are laid out task-major,
        so ties resolve to the lexicographically smallest (task, key).
        """
        if not self.tasks:
            raise ValueError("empty prompt pool")
        flat = np.argmax(self.similarities(queries), axis=1)
        owner = self.key_owner()
        task = owner[flat]
        offsets = np.array([self.key_offset(i) for i in range(len(self.tasks))])
        return task, flat - offsets[task]

    def select_prompt(self, q: np.ndarray) -> Tuple[int, int]:
        task, key = self.select(np.asarray(q)[None])
        return int(task[0]), int(key[0])

    def task_selection_accuracy(self, queries: np.ndarray, task_ids: np.ndarray) -> float:
        task, _ = self.select(queries)
        return float(np.mean(task == np.asarray(task_ids)))

    # -- training -------------------------------------------------------------------
    def multi_key_loss(self, queries: np.ndarray, y_local) -> Tensor:
        """Softmax cross-entropy over cosine similarities to every key in the pool.

        The target is the current task's key for the example's class (or the
        task's single key in one-key mode). Keys of earlier tasks stay in the
        denominator behind ``stop_gradient``; queries are constants.
        """
        y_local = np.atleast_1d(np.asarray(y_local, dtype=np.int64))
        cur = self.current
        n_cls = len(cur.class_labels)
        if (y_local < 0).any() or (y_local >= n_cls).any():
            raise ValueError("label not in the current task")
        keys = [ad.stop_gradient(tp.keys) for tp in self.tasks[:-1]] + [cur.keys]
        key_mat = ad.concat(keys, axis=0) if len(keys) > 1 else cur.keys
        q = Tensor(np.atleast_2d(queries).astype(cur.keys.data.dtype, copy=False))
        sims = ad.cosine_matrix(q, key_mat)
        target = self.key_offset(len(self.tasks) - 1) + (y_local if self.multi_key else np.zeros_like(y_local))
        return ad.cross_entropy(sims, target)

    # -- persistence ------------------------------------------------------------------
    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for tp in self.tasks:
            for k, v in tp.arrays().items():
                out[f"pool.{tp.task_id}.{k}"] = v
        return out

    def meta(self) -> dict:
        return {"prompt_length": self.prompt_length, "embed_dim": self.embed_dim,
                "multi_key": self.multi_key, "prompt_init_std": self.prompt_init_std,
                "num_tasks": len(self.tasks), "frozen": [tp.frozen for tp in self.tasks]}

    @classmethod
    def from_state(cls, meta: dict, arrays: Dict[str, np.ndarray]) -> "PromptPool":
        pool = cls(meta["prompt_length"], meta["embed_dim"], meta["multi_key"], meta["prompt_init_std"])
        for i in range(meta["num_tasks"]):
            tp = TaskPrompt(i, Tensor(arrays[f"pool.{i}.prompt"], requires_grad=True),
                            Tensor(arrays[f"pool.{i}.keys"], requires_grad=True),
                            arrays[f"pool.{i}.class_labels"].astype(np.int64))
            if meta["frozen"][i]:
                tp.freeze()
            pool.tasks.append(tp)
        return pool
