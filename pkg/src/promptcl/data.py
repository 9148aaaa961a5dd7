"""Synthetic patch-image benchmark: class prototypes, task styles, Gaussian noise."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    num_pretrain_classes: int = 20
    num_stream_classes: int = 20
    tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 200
    test_per_class: int = 50
    pretrain_train_per_class: int = 100
    pretrain_test_per_class: int = 25
    image_size: int = 16
    channels: int = 3
    noise_sigma: float = 0.3
    style_shift: float = 0.5
    # prototypes are random mixtures of a shared dictionary of smooth patterns
    basis_size: int = 16
    smoothness: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.num_stream_classes != self.tasks * self.classes_per_task:
            raise ValueError("num_stream_classes must equal tasks * classes_per_task")
        for name in ("num_pretrain_classes", "tasks", "classes_per_task", "train_per_class",
                     "test_per_class", "pretrain_train_per_class", "pretrain_test_per_class",
                     "image_size", "channels", "basis_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_sigma < 0 or self.style_shift < 0 or self.smoothness <= 0:
            raise ValueError("noise_sigma and style_shift must be >= 0, smoothness > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # global class ids
    task_ids: np.ndarray  # 0-based task index; -1 for pretraining data

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TaskStream:
    """Per-task train/test splits with disjoint class sets.

    Task indices are 0-based. Training data is only reachable one task at a
    time through :meth:`train`.
    """

    class_sets: List[np.ndarray]
    _train: List[LabeledSet] = field(repr=False)
    _test: List[LabeledSet] = field(repr=False)

    def __post_init__(self):
        seen: set = set()
        for cs in self.class_sets:
            cs_set = set(cs.tolist())
            if seen & cs_set:
                raise ValueError("task class sets overlap")
            seen |= cs_set

    @property
    def num_tasks(self) -> int:
        return len(self.class_sets)

    def classes(self, t: int) -> np.ndarray:
        return self.class_sets[t]

    def train(self, t: int) -> LabeledSet:
        return self._train[t]

    def test(self, t: int) -> LabeledSet:
        return self._test[t]

    def head(self, num_tasks: int) -> "TaskStream":
        return TaskStream(self.class_sets[:num_tasks], self._train[:num_tasks], self._test[:num_tasks])


def smooth_field(rng: np.random.Generator, shape: Tuple[int, ...], length_scale: float) -> np.ndarray:
    """Unit-RMS Gaussian random field, low-pass filtered over the last two axes."""
    white = rng.standard_normal(shape)
    h, w = shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    gain = np.exp(-2.0 * (np.pi * length_scale) ** 2 * (fx ** 2 + fy ** 2))
    out = np.fft.ifft2(np.fft.fft2(white) * gain).real
    return out / np.sqrt(np.mean(out ** 2))


def _sample(rng, prototype, style, n, sigma, label, task):
    noise = rng.standard_normal((n,) + prototype.shape) * sigma
    images = prototype[None] + style[None] + noise
    return LabeledSet(images, np.full(n, label, dtype=np.int64), np.full(n, task, dtype=np.int64))


def _concat(sets: List[LabeledSet]) -> LabeledSet:
    return LabeledSet(np.concatenate([s.images for s in sets]),
                      np.concatenate([s.labels for s in sets]),
                      np.concatenate([s.task_ids for s in sets]))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Tuple[LabeledSet, LabeledSet], TaskStream]:
    """Build ``((pretrain_train, pretrain_test), stream)`` deterministically from ``spec.seed``.

    Stream classes get global ids ``0..num_stream_classes-1``; pretraining
    classes follow them, so the two label sets never intersect.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.channels, spec.image_size, spec.image_size)
    basis = np.stack([smooth_field(rng, shape, spec.smoothness) for _ in range(spec.basis_size)])

    def prototype():
        coef = rng.standard_normal(spec.basis_size)
        p = np.tensordot(coef, basis, axes=1)
        return p / np.sqrt(np.mean(p ** 2))

    n_total = spec.num_stream_classes + spec.num_pretrain_classes
    protos = [prototype() for _ in range(n_total)]
    styles = [spec.style_shift * smooth_field(rng, shape, spec.smoothness) for _ in range(spec.tasks)]
    zero_style = np.zeros(shape)

    pre_train, pre_test = [], []
    for k in range(spec.num_pretrain_classes):
        label = spec.num_stream_classes + k
        pre_train.append(_sample(rng, protos[label], zero_style, spec.pretrain_train_per_class,
                                 spec.noise_sigma, label, -1))
        pre_test.append(_sample(rng, protos[label], zero_style, spec.pretrain_test_per_class,
                                spec.noise_sigma, label, -1))

    order = rng.permutation(spec.num_stream_classes)
    class_sets, train, test = [], [], []
    for t in range(spec.tasks):
        cs = np.sort(order[t * spec.classes_per_task:(t + 1) * spec.classes_per_task])
        class_sets.append(cs)
        train.append(_concat([_sample(rng, protos[c], styles[t], spec.train_per_class,
                                      spec.noise_sigma, c, t) for c in cs]))
        test.append(_concat([_sample(rng, protos[c], styles[t], spec.test_per_class,
                                     spec.noise_sigma, c, t) for c in cs]))
    return (_concat(pre_train), _concat(pre_test)), TaskStream(class_sets, train, test)
