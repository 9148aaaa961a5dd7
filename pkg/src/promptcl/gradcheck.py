"""Central finite-difference checks for the autodiff engine and the loss family."""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| divided by the larger of max |a| and max |n| (0 when both vanish)."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                    eps: float = 1e-6) -> Dict[str, float]:
    """Relative error between backprop and finite differences for each named leaf.

    ``loss_fn`` must rebuild the graph from the leaves' current ``data`` on every call
    and be deterministic. Values behind ``stop_gradient`` are held at the base point,
    so the comparison is against the derivative backprop actually defines.
    """
    tape = ad.StopGradientTape()
    for p in params.values():
        p.zero_grad()
    with tape.recording():
        loss_fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def value() -> float:
        with ad.no_grad(), tape.replaying():
            return float(loss_fn().data)

    return {k: relative_error(analytic[k], numerical_gradient(value, p.data, eps)) for k, p in params.items()}


# -- suites ---------------------------------------------------------------------

def entropy_gradient_identity(n_vectors: int = 100, taus: Iterable[float] = (1.02, 1.15, 1.2),
                              seed: int = 0) -> Dict[str, float]:
    """Worst errors of the smoothing-entropy gradient against its closed form and against FD."""
    from .objectives import adaptive_entropy

    rng = np.random.default_rng(seed)
    worst_closed = worst_fd = 0.0
    for _ in range(n_vectors):
        n = int(rng.integers(2, 21))
        z = rng.normal(0.0, 2.0, n)
        for tau in taus:
            x = Tensor(z.copy(), requires_grad=True, dtype=np.float64)
            adaptive_entropy(x, tau).backward()
            closed = _softmax(z) - _softmax(z / tau)
            worst_closed = max(worst_closed, relative_error(x.grad, closed))
            err = check_gradients(lambda: adaptive_entropy(x, tau), {"x": x})["x"]
            worst_fd = max(worst_fd, err)
    return {"closed_form_rel_err": worst_closed, "finite_difference_rel_err": worst_fd}


def tau_one_nullity(n_vectors: int = 100, seed: int = 0) -> float:
    """Largest |gradient entry| of the smoothing entropy at tau = 1."""
    from .objectives import adaptive_entropy

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_vectors):
        x = Tensor(rng.normal(0.0, 3.0, int(rng.integers(2, 21))), requires_grad=True, dtype=np.float64)
        adaptive_entropy(x, 1.0).backward()
        worst = max(worst, float(np.max(np.abs(x.grad))))
    return worst


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def toy_state(seed: int = 0, per_example_sampling: bool = True, **flags):
    """A two-task state (D=8, two classes per task) positioned at the start of task 2's training.

    Task 1's prompt, keys and head hold random frozen values so every loss term is active.
    """
    from .objectives import ClassifierBank
    from .prompt_pool import PromptPool
    from .trainer import TrainConfig
    from .vit import Backbone, BackboneConfig

    ad.set_default_dtype(np.float64)
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(image_size=4, patch_size=2, channels=1, embed_dim=8, num_layers=2, num_heads=2,
                         mlp_ratio=2, prompt_insert_layers=(1, 2), prompt_length=4, num_segments=2)
    backbone = Backbone(cfg, rng).freeze()
    train_cfg = TrainConfig(dtype="float64", per_example_sampling=per_example_sampling, **flags)
    pool = PromptPool(cfg.prompt_length, cfg.embed_dim, multi_key=train_cfg.enable_mk, prompt_init_std=0.5)
    bank = ClassifierBank(cfg.embed_dim)
    for labels in ([0, 1], [2, 3]):
        pool.add_task(labels, rng)
        bank.add_task(labels, rng, with_aux=train_cfg.uses_aux_head)
        for head in [bank.current] + ([bank.aux] if bank.aux is not None else []):
            head.weight.data[...] = rng.normal(0.0, 1.0, head.weight.shape)
            head.bias.data[...] = rng.normal(0.0, 0.5, head.bias.shape)
    images = rng.normal(size=(6, 1, 4, 4))
    y_local = np.array([0, 1, 0, 1, 1, 0])
    return backbone, pool, bank, train_cfg, images, y_local


def full_loss_gradcheck(seed: int = 0, eps: float = 1e-6, **flags) -> Dict[str, float]:
    """FD check of the summed objective against every trainable leaf of the toy state."""
    from .objectives import total_loss

    backbone, pool, bank, cfg, images, y_local = toy_state(seed, **flags)
    tokens = backbone.embed_constant(images)
    queries = backbone.queries(images)
    params = {"prompt": pool.current.prompt, "keys": pool.current.keys,
              "head.weight": bank.current.weight, "head.bias": bank.current.bias}
    if bank.aux is not None:
        params.update({"aux.weight": bank.aux.weight, "aux.bias": bank.aux.bias})

    def loss():
        return total_loss(tokens, queries, y_local, backbone, pool, bank, cfg, np.random.default_rng(seed))[0]

    return check_gradients(loss, params, eps)


def run_suite(seed: int = 0) -> Tuple[bool, Dict[str, float]]:
    """Everything the ``gradcheck`` command reports, with pass/fail at the pinned tolerances."""
    ident = entropy_gradient_identity(seed=seed)
    null = tau_one_nullity(seed=seed)
    full = full_loss_gradcheck(seed=seed)
    results = {**ident, "tau1_max_abs_grad": null, "full_loss_max_rel_err": max(full.values())}
    ok = (ident["closed_form_rel_err"] < 1e-6 and ident["finite_difference_rel_err"] < 1e-6
          and null <= 1e-12 and results["full_loss_max_rel_err"] < 1e-5)
    return ok, results
