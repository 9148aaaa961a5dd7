"""A small vision transformer with per-layer prompt-segment insertion."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import ShapeError, Tensor
from .optim import SGD, cosine_annealing_lr

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    num_layers: int = 6
    num_heads: int = 2
    mlp_ratio: int = 2
    # 1-based layer numbers; segment j of the prompt goes in front of layer prompt_insert_layers[j]
    prompt_insert_layers: Tuple[int, ...] = (1, 4)
    prompt_length: int = 8
    num_segments: int = 2

    def __post_init__(self):
        object.__setattr__(self, "prompt_insert_layers", tuple(int(i) for i in self.prompt_insert_layers))
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_segments < 1 or self.prompt_length % self.num_segments:
            raise ValueError("prompt_length must be a positive multiple of num_segments")
        if self.prompt_length // self.num_segments == 0:
            raise ValueError("prompt segments must be non-empty")
        if len(self.prompt_insert_layers) != self.num_segments:
            raise ValueError("need exactly one insertion layer per prompt segment")
        if len(set(self.prompt_insert_layers)) != self.num_segments:
            raise ValueError("insertion layers must be distinct")
        if not all(1 <= i <= self.num_layers for i in self.prompt_insert_layers):
            raise ValueError("insertion layers must lie in 1..num_layers")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def segment_length(self) -> int:
        return self.prompt_length // self.num_segments

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prompt_insert_layers"] = list(self.prompt_insert_layers)
        return d


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, L, C*patch*patch), row-major over the patch grid."""
    b, c, h, w = images.shape
    g = h // patch
    x = images.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch * patch)


class Backbone:
    """Pre-LN transformer encoder with a class token at sequence position 0."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        c = config
        d, hidden = c.embed_dim, c.embed_dim * c.mlp_ratio
        patch_dim = c.channels * c.patch_size ** 2

        def dense(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))

        p: Dict[str, np.ndarray] = {
            "patch_w": dense(patch_dim, d),
            "patch_b": np.zeros(d),
            "cls": rng.normal(0.0, 0.02, (1, d)),
            "pos": rng.normal(0.0, 0.02, (c.num_patches + 1, d)),
            "norm_w": np.ones(d),
            "norm_b": np.zeros(d),
        }
        for i in range(c.num_layers):
            p.update({
                f"l{i}.ln1_w": np.ones(d), f"l{i}.ln1_b": np.zeros(d),
                f"l{i}.qkv_w": dense(d, 3 * d), f"l{i}.qkv_b": np.zeros(3 * d),
                f"l{i}.proj_w": dense(d, d) / math.sqrt(2 * c.num_layers), f"l{i}.proj_b": np.zeros(d),
                f"l{i}.ln2_w": np.ones(d), f"l{i}.ln2_b": np.zeros(d),
                f"l{i}.fc1_w": dense(d, hidden), f"l{i}.fc1_b": np.zeros(hidden),
                f"l{i}.fc2_w": dense(hidden, d) / math.sqrt(2 * c.num_layers), f"l{i}.fc2_b": np.zeros(d),
            })
        dtype = ad.get_default_dtype()
        self.params: Dict[str, Tensor] = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}
        self.frozen = False

    # -- state ------------------------------------------------------------------
    def freeze(self) -> "Backbone":
        for k, t in self.params.items():
            self.params[k] = Tensor(t.data, requires_grad=False)
            self.params[k].data.setflags(write=False)
        self.frozen = True
        return self

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def content_hash(self) -> str:
        return serialization.content_hash("backbone", {"config": self.config.to_dict()}, self.state_arrays())

    def save(self, path, extra_meta: Optional[dict] = None) -> str:
        meta = {"config": self.config.to_dict(), "frozen": self.frozen, **(extra_meta or {})}
        return serialization.save(path, "backbone", meta, self.state_arrays())

    @classmethod
    def load(cls, path) -> "Backbone":
        meta, arrays = serialization.load(path, kind="backbone")
        return cls.from_arrays(BackboneConfig(**meta["config"]), arrays, frozen=meta["frozen"])

    @classmethod
    def from_arrays(cls, config: BackboneConfig, arrays: Dict[str, np.ndarray], frozen: bool = True) -> "Backbone":
        self = cls.__new__(cls)
        self.config = config
        self.params = {k: Tensor(v, requires_grad=not frozen) for k, v in arrays.items()}
        self.frozen = False
        if frozen:
            self.freeze()
        return self

    # -- forward ------------------------------------------------------------------
    def embed(self, images: np.ndarray) -> Tensor:
        """Token sequence (B, L+1, D): class token, then patch embeddings, plus positions."""
        c = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ShapeError(f"image shape {images.shape[1:]} does not match config "
                             f"{(c.channels, c.image_size, c.image_size)}")
        p = self.params
        patches = Tensor(patchify(images, c.patch_size).astype(p["patch_w"].data.dtype, copy=False))
        tokens = ad.linear(patches, p["patch_w"], p["patch_b"])
        cls_tok = ad.broadcast_to(p["cls"], (images.shape[0], 1, c.embed_dim))
        return ad.add(ad.concat([cls_tok, tokens], axis=1), p["pos"])

    def _block(self, i: int, x: Tensor) -> Tensor:
        c, p = self.config, self.params
        b, n, d = x.shape
        h, dh = c.num_heads, d // c.num_heads
        y = ad.layer_norm(x, p[f"l{i}.ln1_w"], p[f"l{i}.ln1_b"])
        qkv = ad.linear(y, p[f"l{i}.qkv_w"], p[f"l{i}.qkv_b"])
        qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dh)), axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        x = ad.add(x, ad.linear(o, p[f"l{i}.proj_w"], p[f"l{i}.proj_b"]))
        y = ad.layer_norm(x, p[f"l{i}.ln2_w"], p[f"l{i}.ln2_b"])
        y = ad.linear(ad.gelu(ad.linear(y, p[f"l{i}.fc1_w"], p[f"l{i}.fc1_b"])), p[f"l{i}.fc2_w"], p[f"l{i}.fc2_b"])
        return ad.add(x, y)

    def encode(self, tokens: Tensor, prompt: Optional[Tensor] = None) -> Tensor:
        """Run the encoder on embedded tokens; returns the class-token feature (B, D).

        With a prompt (L_P, D), segment j is prepended to the input of layer
        ``prompt_insert_layers[j]`` and its outputs are dropped right after.
        """
        c = self.config
        inserts = {}
        if prompt is not None:
            if prompt.shape != (c.prompt_length, c.embed_dim):
                raise ShapeError(f"prompt shape {prompt.shape} != {(c.prompt_length, c.embed_dim)}")
            sl = c.segment_length
            inserts = {layer - 1: j for j, layer in enumerate(c.prompt_insert_layers)}
        x = tokens
        b = x.shape[0]
        for i in range(c.num_layers):
            if i in inserts:
                j = inserts[i]
                seg = ad.broadcast_to(prompt[j * sl:(j + 1) * sl], (b, sl, c.embed_dim))
                x = self._block(i, ad.concat([seg, x], axis=1))[:, sl:]
            else:
                x = self._block(i, x)
        x = ad.layer_norm(x[:, 0], self.params["norm_w"], self.params["norm_b"])
        return x

    def forward_with_prompt(self, images: np.ndarray, prompt: Tensor) -> Tensor:
        return self.encode(self.embed(images), prompt)

    def forward_query(self, images: np.ndarray) -> np.ndarray:
        """Prompt-free class-token feature; always detached from the graph."""
        with ad.no_grad():
            return self.encode(self.embed(images)).data

    def embed_constant(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Embedded token arrays for a frozen backbone (cacheable across epochs)."""
        out = []
        with ad.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.embed(images[s:s + batch_size]).data)
        return np.concatenate(out, axis=0)

    def queries(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward_query(images[s:s + batch_size]) for s in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)


def pretrain_backbone(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                      config: BackboneConfig, epochs: int = 30, seed: int = 0, batch_size: int = 32,
                      lr: float = 0.05, momentum: float = 0.9,
                      stream_classes: Sequence[int] = ()) -> Tuple[Backbone, dict]:
    """Train a backbone plus a throwaway linear head, then freeze the backbone.

    Returns the frozen backbone and a report with held-out pretraining accuracy.
    """
    overlap = set(np.unique(train_y).tolist()) & set(int(c) for c in stream_classes)
    if overlap:
        raise ValueError(f"pretraining classes overlap the continual stream: {sorted(overlap)}")
    rng = np.random.default_rng(seed)
    backbone = Backbone(config, rng)
    classes = np.unique(train_y)
    remap = {int(c): i for i, c in enumerate(classes)}
    y_local = np.array([remap[int(c)] for c in train_y])
    head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(config.embed_dim), (config.embed_dim, len(classes))),
                    requires_grad=True)
    head_b = Tensor(np.zeros(len(classes)), requires_grad=True)
    params = dict(backbone.params, head_w=head_w, head_b=head_b)
    opt = SGD(params, lr=lr, momentum=momentum)
    n = len(train_x)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            feats = backbone.encode(backbone.embed(train_x[idx]))
            loss = ad.cross_entropy(ad.linear(feats, head_w, head_b), y_local[idx])
            loss.backward()
            opt.step(cosine_annealing_lr(step, total, lr))
            step += 1
            running += loss.item() * len(idx)
        logger.debug("pretrain epoch %d loss %.4f", epoch, running / n)

    with ad.no_grad():
        feats = backbone.queries(test_x)
        pred = classes[np.argmax(feats @ head_w.data + head_b.data, axis=1)]
    acc = float(np.mean(pred == test_y))
    backbone.freeze()
    report = {"pretrain_test_acc": acc, "chance": 1.0 / len(classes), "epochs": epochs,
              "final_train_loss": running / n}
    return backbone, report
