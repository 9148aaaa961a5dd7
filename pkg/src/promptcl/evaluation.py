"""Inference modes (CIL, TIL, forced prompt) and continual-learning metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import LabeledSet

SUMMARY_SCHEMA_VERSION = 1


@dataclass
class EncodedSet:
    """A labelled set with its frozen-backbone tokens and queries precomputed."""

    tokens: np.ndarray
    queries: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray

    @classmethod
    def encode(cls, backbone, data: LabeledSet) -> "EncodedSet":
        dtype = ad.get_default_dtype()
        images = data.images.astype(dtype, copy=False)
        return cls(backbone.embed_constant(images), backbone.queries(images), data.labels, data.task_ids)

    def __len__(self) -> int:
        return len(self.labels)


def prompted_features(backbone, tokens: np.ndarray, prompt, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(tokens), batch_size):
            out.append(backbone.encode(ad.Tensor(tokens[s:s + batch_size]), prompt).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, backbone.config.embed_dim))


def _features_by_task(model, enc: EncodedSet, prompt_index: np.ndarray) -> np.ndarray:
    feats = np.empty((len(enc), model.backbone.config.embed_dim), dtype=enc.tokens.dtype)
    for i in np.unique(prompt_index):
        rows = np.flatnonzero(prompt_index == i)
        feats[rows] = prompted_features(model.backbone, enc.tokens[rows], model.pool.tasks[int(i)].prompt)
    return feats


def _all_head_logits(bank, feats: np.ndarray) -> np.ndarray:
    return np.concatenate([feats @ h.weight.data + h.bias.data for h in bank.heads], axis=1)


def predict_cil(model, enc: EncodedSet):
    """Route each input by its query, then take the argmax over every head.

    Returns ``(global class predictions, selected task indices)``.
    """
    if not len(model.bank):
        raise ValueError("no trained task")
    selected, _ = model.pool.select(enc.queries)
    logits = _all_head_logits(model.bank, _features_by_task(model, enc, selected))
    return model.bank.global_labels()[np.argmax(logits, axis=1)], selected


def predict_fixed_prompt(model, enc: EncodedSet, forced: int) -> np.ndarray:
    """Like :func:`predict_cil` with prompt selection overridden to task ``forced``."""
    if not 0 <= forced < len(model.pool):
        raise IndexError(f"unknown prompt index {forced}")
    feats = prompted_features(model.backbone, enc.tokens, model.pool.tasks[forced].prompt)
    return model.bank.global_labels()[np.argmax(_all_head_logits(model.bank, feats), axis=1)]


def predict_til(model, enc: EncodedSet, task: int) -> np.ndarray:
    """Use the true task's prompt and restrict the argmax to that task's head."""
    if not 0 <= task < len(model.bank):
        raise IndexError(f"unknown task {task}")
    head = model.bank.heads[task]
    feats = prompted_features(model.backbone, enc.tokens, model.pool.tasks[task].prompt)
    return model.bank.class_sets[task][np.argmax(feats @ head.weight.data + head.bias.data, axis=1)]


def evaluate_seen(model, test_sets: Sequence[EncodedSet], fixed_prompt: int = 0) -> Dict[str, List[float]]:
    """Per-task accuracies of every inference mode on the tasks seen so far."""
    row: Dict[str, List[float]] = {"cil": [], "til": [], "task_acc": [], "fixed": []}
    for j, enc in enumerate(test_sets[:len(model.bank)]):
        pred, sel = predict_cil(model, enc)
        row["cil"].append(float(np.mean(pred == enc.labels)))
        row["task_acc"].append(float(np.mean(sel == enc.task_ids)))
        row["til"].append(float(np.mean(predict_til(model, enc, j) == enc.labels)))
        row["fixed"].append(float(np.mean(predict_fixed_prompt(model, enc, fixed_prompt) == enc.labels)))
    return row


# -- accuracy matrix -------------------------------------------------------------

class AccuracyMatrix:
    """Lower-triangular a[t][j]: accuracy on task j's test data after training task t (0-based)."""

    def __init__(self, rows: Sequence[Sequence[float]] = (), task_weights: Optional[Sequence[float]] = None,
                 num_tasks: Optional[int] = None):
        self.rows: List[List[float]] = []
        self.num_tasks = num_tasks
        self.task_weights = None if task_weights is None else [float(w) for w in task_weights]
        for r in rows:
            self.append(r)

    def append(self, row: Sequence[float]) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows)} must have {len(self.rows) + 1} entries, got {len(row)}")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, tj):
        t, j = tj
        if j > t:
            raise IndexError("entries above the diagonal are undefined")
        return self.rows[t][j]

    @property
    def complete(self) -> bool:
        return len(self.rows) > 0 and (self.num_tasks is None or len(self.rows) == self.num_tasks)

    def weights(self, t: int) -> np.ndarray:
        """Unnormalized per-task weights for row t (class counts, or ones)."""
        return np.ones(t + 1) if self.task_weights is None else np.asarray(self.task_weights[:t + 1])

    def row_accuracy(self, t: int) -> float:
        """Accuracy over all classes seen after task t (class-count weighted)."""
        # divide once at the end so dyadic inputs give exactly rounded results
        w = self.weights(t)
        return float(np.dot(w, self.rows[t]) / w.sum())

    def to_list(self) -> List[List[float]]:
        return [list(r) for r in self.rows]

    def to_csv(self) -> str:
        T = len(self.rows)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{j + 1}" for j in range(T)])
        for t, row in enumerate(self.rows):
            w.writerow([t + 1] + [repr(v) for v in row] + [""] * (T - len(row)))
        return buf.getvalue()

    def __eq__(self, other) -> bool:
        return isinstance(other, AccuracyMatrix) and self.rows == other.rows


def _require_complete(A: AccuracyMatrix) -> None:
    if not A.complete:
        raise ValueError("accuracy matrix is incomplete")


def last_acc(A: AccuracyMatrix) -> float:
    _require_complete(A)
    return A.row_accuracy(len(A) - 1)


def avg_acc(A: AccuracyMatrix) -> float:
    _require_complete(A)
    return float(np.mean([A.row_accuracy(t) for t in range(len(A))]))


def forgetting_ff(A: AccuracyMatrix, upto: Optional[int] = None) -> float:
    """Mean over old tasks j of (best accuracy before the final task) - (final accuracy).

    ``upto`` is the number of tasks to consider (defaults to all rows).
    """
    T = len(A) if upto is None else upto
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    last = T - 1
    drops = [max(A.rows[i][j] for i in range(j, last)) - A.rows[last][j] for j in range(last)]
    return float(np.mean(drops))


def seen_accuracy_curve(A: AccuracyMatrix) -> List[float]:
    return [A.row_accuracy(t) for t in range(len(A))]


def fixed_prompt_scores(F: AccuracyMatrix) -> Dict[str, float]:
    """Forced-first-prompt accuracy averaged over tasks 2..T (Last) and over rows 2..T (Avg)."""
    if len(F) < 2:
        raise ValueError("fixed-prompt probe needs at least two tasks")

    def later(t):
        w = F.weights(t)[1:]
        return float(np.dot(w, F.rows[t][1:]) / w.sum())

    return {"last": later(len(F) - 1), "avg": float(np.mean([later(t) for t in range(1, len(F))]))}


# -- reporting ---------------------------------------------------------------------

def summarize(results: Dict[str, AccuracyMatrix]) -> dict:
    A = results["cil"]
    summary = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "num_tasks": len(A),
        "last": last_acc(A),
        "avg": avg_acc(A),
        "ff": forgetting_ff(A) if len(A) >= 2 else None,
        "task_acc": results["task_acc"].row_accuracy(len(A) - 1),
        "til_last": last_acc(results["til"]),
        "til_avg": avg_acc(results["til"]),
        "til_task_acc": 1.0,
    }
    if len(A) >= 2:
        fp = fixed_prompt_scores(results["fixed"])
        summary["fixed_prompt_last"] = fp["last"]
        summary["fixed_prompt_avg"] = fp["avg"]
        summary["ff_curve"] = [forgetting_ff(A, t) for t in range(2, len(A) + 1)]
    return summary


def emit_report(results: Dict[str, AccuracyMatrix], path, logs: Optional[list] = None,
                metrics: Optional[List[dict]] = None) -> dict:
    """Write matrix.csv, curve.csv, summary.json (plus optional logs) under ``path``.

    Every file is a pure function of its inputs, so re-emitting is byte-identical.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    A = results["cil"]
    (out / "matrix.csv").write_text(A.to_csv())
    for name in ("til", "task_acc", "fixed"):
        if name in results:
            (out / f"matrix_{name}.csv").write_text(results[name].to_csv())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_task", "seen_acc", "ff"])  # ff is undefined after the first task
    for t, v in enumerate(seen_accuracy_curve(A)):
        w.writerow([t + 1, repr(v), repr(forgetting_ff(A, t + 1)) if t >= 1 else ""])
    (out / "curve.csv").write_text(buf.getvalue())
    summary = summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if logs is not None:
        (out / "task_log.json").write_text(json.dumps(logs, indent=2, sort_keys=True) + "\n")
    if metrics is not None:
        buf = io.StringIO()
        cols = ["step", "task", "L_total", "L_CCL", "L_ce", "L_aux", "L_mk", "tau_rate"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for m in metrics:
            w.writerow([m[c] for c in cols])
        (out / "metrics.csv").write_text(buf.getvalue())
    return summary
