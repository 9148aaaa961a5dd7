"""Loss family: gated entropy smoothing on old heads, cross-task prompt CE,
auxiliary-head CE, key loss, and their unweighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import serialization
from .autodiff import Tensor

if TYPE_CHECKING:  # pragma: no cover
    from .prompt_pool import PromptPool
    from .trainer import TrainConfig
    from .vit import Backbone

REGULARIZERS = ("adaptive", "edl", "roh")


@dataclass(frozen=True)
class CCLConfig:
    tau1: float = 1.15
    margin: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if not self.tau1 > 1:
            raise ValueError("tau1 must be > 1")
        if self.margin < 0 or self.alpha < 0:
            raise ValueError("margin and alpha must be >= 0")


class LinearHead:
    """``h @ weight + bias`` with weight (D, n)."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02) -> "LinearHead":
        dtype = ad.get_default_dtype()
        return cls(Tensor(rng.normal(0.0, std, (in_dim, out_dim)).astype(dtype), requires_grad=True),
                   Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True))

    def __call__(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.weight, self.bias)

    @property
    def frozen(self) -> bool:
        return not self.weight.requires_grad

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def freeze(self) -> None:
        for name in ("weight", "bias"):
            data = np.array(getattr(self, name).data)
            data.setflags(write=False)
            setattr(self, name, Tensor(data, requires_grad=False))

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}

    def content_hash(self) -> str:
        return serialization.content_hash("head", {}, self.arrays())


class ClassifierBank:
    """Per-task heads over task-local labels plus the transient auxiliary head."""

    def __init__(self, embed_dim: int):
        self.embed_dim = embed_dim
        self.heads: List[LinearHead] = []
        self.class_sets: List[np.ndarray] = []
        self.aux: Optional[LinearHead] = None

    def __len__(self) -> int:
        return len(self.heads)

    @property
    def current(self) -> LinearHead:
        return self.heads[-1]

    def add_task(self, class_labels, rng: np.random.Generator, with_aux: bool = True) -> None:
        for head in self.heads:
            if not head.frozen:
                head.freeze()
        labels = np.asarray(class_labels, dtype=np.int64)
        self.heads.append(LinearHead.create(self.embed_dim, len(labels), rng))
        self.class_sets.append(labels)
        self.aux = LinearHead.create(self.embed_dim, len(labels), rng) if with_aux else None

    def finish_task(self) -> None:
        if self.heads and not self.current.frozen:
            self.current.freeze()
        self.aux = None

    def global_labels(self) -> np.ndarray:
        return np.concatenate(self.class_sets)

    def all_logits(self, h: Tensor) -> Tensor:
        return ad.concat([head(h) for head in self.heads], axis=-1)

    def local_index(self, task: int, labels) -> np.ndarray:
        """Position of global ``labels`` inside task ``task``'s class list."""
        cs = self.class_sets[task]
        labels = np.atleast_1d(np.asarray(labels))
        idx = np.searchsorted(cs, labels)
        idx_c = np.clip(idx, 0, len(cs) - 1)
        if not np.array_equal(cs[idx_c], labels):
            raise ValueError(f"labels outside task {task}'s classes")
        return idx_c

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (head, cs) in enumerate(zip(self.heads, self.class_sets)):
            out[f"bank.{i}.weight"] = head.weight.data
            out[f"bank.{i}.bias"] = head.bias.data
            out[f"bank.{i}.classes"] = cs
        if self.aux is not None:
            out["bank.aux.weight"] = self.aux.weight.data
            out["bank.aux.bias"] = self.aux.bias.data
        return out

    def meta(self) -> dict:
        return {"embed_dim": self.embed_dim, "num_heads": len(self.heads),
                "frozen": [h.frozen for h in self.heads], "has_aux": self.aux is not None}

    @classmethod
    def from_state(cls, meta: dict, arrays: Dict[str, np.ndarray]) -> "ClassifierBank":
        bank = cls(meta["embed_dim"])
        for i in range(meta["num_heads"]):
            head = LinearHead(Tensor(arrays[f"bank.{i}.weight"], requires_grad=True),
                              Tensor(arrays[f"bank.{i}.bias"], requires_grad=True))
            if meta["frozen"][i]:
                head.freeze()
            bank.heads.append(head)
            bank.class_sets.append(arrays[f"bank.{i}.classes"].astype(np.int64))
        if meta["has_aux"]:
            bank.aux = LinearHead(Tensor(arrays["bank.aux.weight"], requires_grad=True),
                                  Tensor(arrays["bank.aux.bias"], requires_grad=True))
        return bank


# -- classifier consistency ------------------------------------------------------

def _values(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def select_temperature(old_logits, cur_logits, cfg: CCLConfig):
    """``tau1`` where an old head's top logit comes within ``margin`` of the current head's, else 1.

    Works row-wise on (B, n) inputs and returns a (B,) array; 1-D inputs give a float.
    Inputs are read as plain values, so nothing differentiates through the gate.
    """
    old, cur = _values(old_logits), _values(cur_logits)
    if old.shape[-1] == 0 or cur.shape[-1] == 0:
        raise ValueError("empty logit vector")
    tau = np.where(old.max(axis=-1) + cfg.margin >= cur.max(axis=-1), cfg.tau1, 1.0)
    return float(tau) if tau.ndim == 0 else tau


def _row_mean(per_row: Tensor, logits: Tensor) -> Tensor:
    return per_row if logits.ndim == 1 else ad.mean(per_row)


def adaptive_entropy(logits: Tensor, tau) -> Tensor:
    """Cross-entropy of softmax(logits) against the detached target softmax(logits / tau).

    d/d logits = softmax(logits) - softmax(logits / tau), which vanishes at tau = 1.
    Batched input is averaged over rows; ``tau`` may be per-row.
    """
    tau = np.asarray(tau, dtype=logits.data.dtype)
    if (tau < 1).any():
        raise ValueError("tau must be >= 1")
    inv = 1.0 / tau if logits.ndim == 1 else (1.0 / tau).reshape(-1, 1)
    target = ad.stop_gradient(ad.softmax(ad.scale(logits, inv), axis=-1))
    return _row_mean(ad.soft_cross_entropy(logits, target), logits)


def edl_loss(logits: Tensor) -> Tensor:
    """Cross-entropy against the uniform label 1/n."""
    n = logits.shape[-1]
    per_row = ad.scale(ad.tsum(ad.log_softmax(logits, axis=-1), axis=-1), -1.0 / n)
    return _row_mean(per_row, logits)


def roh_loss(logits: Tensor, rng: np.random.Generator) -> Tensor:
    """Cross-entropy against a freshly drawn random one-hot label per row."""
    n = logits.shape[-1]
    rows = 1 if logits.ndim == 1 else logits.shape[0]
    delta = np.zeros((rows, n), dtype=logits.data.dtype)
    delta[np.arange(rows), rng.integers(0, n, size=rows)] = 1.0
    if logits.ndim == 1:
        delta = delta[0]
    per_row = ad.neg(ad.tsum(ad.mul(Tensor(delta), ad.log_softmax(logits, axis=-1)), axis=-1))
    return _row_mean(per_row, logits)


def zero_loss(dtype=None) -> Tensor:
    return Tensor(0.0, dtype=dtype)


def ccl_loss(h: Tensor, bank: ClassifierBank, cfg: CCLConfig, regularizer: str = "adaptive",
             rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, float]:
    """Average smoothing term over all earlier heads, scaled by alpha.

    Returns the loss and the fraction of (example, old head) pairs whose
    temperature gate fired. Earlier heads are frozen, so gradient reaches
    only ``h`` (and through it the current prompt).
    """
    t = len(bank.heads)
    if t <= 1:
        return zero_loss(h.data.dtype), 0.0
    if regularizer not in REGULARIZERS:
        raise ValueError(f"unknown regularizer {regularizer!r}")
    cur = h.data @ bank.current.weight.data + bank.current.bias.data
    terms, fired = [], []
    for head in bank.heads[:-1]:
        logits = head(h)
        if regularizer == "adaptive":
            tau = select_temperature(logits.data, cur, cfg)
            fired.append(np.asarray(tau) > 1)
            terms.append(adaptive_entropy(logits, tau))
        elif regularizer == "edl":
            terms.append(edl_loss(logits))
        else:
            terms.append(roh_loss(logits, rng))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    rate = float(np.mean(np.concatenate([np.atleast_1d(f) for f in fired]))) if fired else 1.0
    return ad.scale(total, cfg.alpha / (t - 1)), rate


# -- prompt consistency ------------------------------------------------------------

def pcl_ce_loss(backbone: "Backbone", tokens: Tensor, prompt: Tensor, head: LinearHead, y_local) -> Tensor:
    """CE of the current head on features produced under an arbitrary pool prompt."""
    return ad.cross_entropy(head(backbone.encode(tokens, prompt)), y_local)


def aux_loss(h: Tensor, aux_head: LinearHead, y_local) -> Tensor:
    """CE of the auxiliary head on current-prompt features."""
    return ad.cross_entropy(aux_head(h), y_local)


def total_loss(tokens: np.ndarray, queries: np.ndarray, y_local: np.ndarray, backbone: "Backbone",
               pool: "PromptPool", bank: ClassifierBank, config: "TrainConfig",
               rng: np.random.Generator) -> Tuple[Tensor, Dict[str, float]]:
    """Sum of all enabled terms with unit weights, plus a per-term breakdown.

    ``tokens`` are embedded inputs (B, L+1, D) from the frozen backbone,
    ``queries`` the matching prompt-free features, ``y_local`` task-local labels.
    """
    t = len(pool)
    tok = Tensor(tokens)
    y_local = np.asarray(y_local, dtype=np.int64)
    h = backbone.encode(tok, pool.current.prompt)
    head = bank.current
    dtype = h.data.dtype
    terms: Dict[str, Tensor] = {}

    if config.enable_ccl:
        terms["ccl"], tau_rate = ccl_loss(h, bank, config.ccl, config.regularizer, rng)
    else:
        terms["ccl"], tau_rate = zero_loss(dtype), 0.0

    if config.enable_pcl:
        terms["ce"] = _sampled_prompt_ce(tok, h, y_local, backbone, pool, head, config, rng)
        if config.enable_aux_loss:
            aux_head = bank.aux if config.enable_aux_head else head
            terms["aux"] = aux_loss(h, aux_head, y_local)
        else:
            terms["aux"] = zero_loss(dtype)
    else:
        terms["ce"] = ad.cross_entropy(head(h), y_local)
        terms["aux"] = zero_loss(dtype)

    terms["mk"] = pool.multi_key_loss(queries, y_local)

    total = terms["ccl"]
    for name in ("ce", "aux", "mk"):
        total = ad.add(total, terms[name])
    # "+ 0.0" folds a signed zero (e.g. a one-key loss of exactly 0) into 0.0 for the logs
    breakdown = {name: float(v.data) + 0.0 for name, v in terms.items()}
    breakdown["total"] = float(total.data) + 0.0
    breakdown["tau_rate"] = tau_rate
    return total, breakdown


def _sampled_prompt_ce(tok: Tensor, h: Tensor, y_local: np.ndarray, backbone: "Backbone",
                       pool: "PromptPool", head: LinearHead, config: "TrainConfig",
                       rng: np.random.Generator) -> Tensor:
    t = len(pool)
    if not config.per_example_sampling:
        i = int(pool.sample_training_prompt(rng))
        feats = h if i == t - 1 else backbone.encode(tok, pool.tasks[i].prompt)
        return ad.cross_entropy(head(feats), y_local)
    draws = pool.sample_training_prompt(rng, size=len(y_local))
    logits, order = [], []
    for i in np.unique(draws):
        rows = np.flatnonzero(draws == i)
        feats = h[rows] if i == t - 1 else backbone.encode(tok[rows], pool.tasks[i].prompt)
        logits.append(head(feats))
        order.append(rows)
    return ad.cross_entropy(ad.concat(logits, axis=0), y_local[np.concatenate(order)])
