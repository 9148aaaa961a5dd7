import math

import mpmath
import numpy as np
import pytest

from promptcl import autodiff as ad
from promptcl.autodiff import Tensor
from promptcl.gradcheck import check_gradients, entropy_gradient_identity, full_loss_gradcheck, toy_state
from promptcl.objectives import (CCLConfig, ClassifierBank, adaptive_entropy, aux_loss, ccl_loss, edl_loss,
                                 pcl_ce_loss, roh_loss, select_temperature, total_loss)

CFG = CCLConfig()


def no_grad(t):
    return t.grad is None or not np.any(t.grad)


def softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def mp_adaptive_entropy(logits, tau):
    """Independent high-precision evaluation of -<softmax(l / tau), log softmax(l)>."""
    mpmath.mp.dps = 50
    l = [mpmath.mpf(v) for v in logits]
    zt = mpmath.fsum(mpmath.exp(v / tau) for v in l)
    z = mpmath.fsum(mpmath.exp(v) for v in l)
    return float(-mpmath.fsum(mpmath.exp(v / tau) / zt * (v - mpmath.log(z)) for v in l))


# -- temperature gate ------------------------------------------------------------------

def test_temperature_gate_cases():
    assert select_temperature([2.0, 0.0], [1.5, 0.2], CFG) == 1.15
    assert select_temperature([0.5, 0.0], [1.5, 0.2], CFG) == 1.0
    cfg = CCLConfig(tau1=1.15, margin=0.25)
    assert select_temperature([1.25, 0.0], [1.5, 0.0], cfg) == 1.15  # boundary is inclusive


def test_temperature_gate_is_per_row():
    old = np.array([[2.0, 0.0], [0.0, 0.1]])
    cur = np.array([[1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_array_equal(select_temperature(old, cur, CFG), [1.15, 1.0])


def test_ccl_config_validation():
    for bad in (dict(tau1=1.0), dict(margin=-0.1), dict(alpha=-1.0)):
        with pytest.raises(ValueError):
            CCLConfig(**bad)


# -- adaptive entropy ---------------------------------------------------------------------

@pytest.mark.parametrize("tau", [1.0, 1.15, 3.0])
def test_uniform_logits_give_ln2(tau):
    assert adaptive_entropy(Tensor([0.0, 0.0]), tau).item() == pytest.approx(math.log(2), abs=1e-12)


def test_value_against_high_precision_oracle():
    oracle = mp_adaptive_entropy([1.0, 0.0], 1.2)
    assert oracle == pytest.approx(0.6162, abs=1e-3)
    assert adaptive_entropy(Tensor([1.0, 0.0]), 1.2).item() == pytest.approx(oracle, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = rng.normal(0, 2, rng.integers(2, 9))
        assert adaptive_entropy(Tensor(z), 1.15).item() == pytest.approx(mp_adaptive_entropy(z, 1.15), abs=1e-12)


def test_tau_one_gradient_is_exactly_zero(rng):
    for _ in range(20):
        x = Tensor(rng.normal(0, 4, rng.integers(2, 21)), requires_grad=True)
        adaptive_entropy(x, 1.0).backward()
        assert np.abs(x.grad).max() <= 1e-12


@pytest.mark.parametrize("tau", [1.02, 1.15, 1.2])
def test_closed_form_gradient(rng, tau):
    for _ in range(10):
        z = rng.normal(0, 2, rng.integers(2, 21))
        x = Tensor(z.copy(), requires_grad=True)
        adaptive_entropy(x, tau).backward()
        np.testing.assert_allclose(x.grad, softmax(z) - softmax(z / tau), atol=1e-14)


def test_gradient_identity_suite():
    res = entropy_gradient_identity(n_vectors=30)
    assert res["closed_form_rel_err"] < 1e-6 and res["finite_difference_rel_err"] < 1e-6


def test_smoothing_direction(rng):
    for _ in range(20):
        z = rng.normal(0, 2, 6)
        x = Tensor(z, requires_grad=True)
        adaptive_entropy(x, 1.15).backward()
        assert x.grad[np.argmax(z)] > 0 and x.grad[np.argmin(z)] < 0


def test_batched_entropy_with_row_taus(rng):
    z = rng.normal(size=(3, 4))
    taus = np.array([1.0, 1.15, 1.2])
    batched = adaptive_entropy(Tensor(z), taus).item()
    rows = np.mean([adaptive_entropy(Tensor(z[i]), taus[i]).item() for i in range(3)])
    assert batched == pytest.approx(rows, abs=1e-14)
    with pytest.raises(ValueError):
        adaptive_entropy(Tensor(z), 0.9)


# -- EDL / ROH ---------------------------------------------------------------------------

def test_edl_uniform():
    assert edl_loss(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-12)


def test_roh_expectation_matches_edl(rng):
    z = Tensor(rng.normal(size=5))
    draws = np.mean([roh_loss(z, rng).item() for _ in range(10_000)])
    assert draws == pytest.approx(edl_loss(z).item(), rel=0.01)


def test_edl_roh_gradchecks(rng):
    z = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    assert check_gradients(lambda: edl_loss(z), {"z": z})["z"] < 1e-8
    assert check_gradients(lambda: roh_loss(z, np.random.default_rng(3)), {"z": z})["z"] < 1e-8


# -- CCL -----------------------------------------------------------------------------------

def bank_with(rng, sizes, dim=4, scale=1.0):
    bank = ClassifierBank(dim)
    label = 0
    for n in sizes:
        bank.add_task(list(range(label, label + n)), rng)
        bank.current.weight.data[...] = rng.normal(0, scale, bank.current.weight.shape)
        label += n
        if label < sum(sizes):
            bank.finish_task()
    return bank


def test_ccl_single_task_is_zero(rng):
    bank = bank_with(rng, [3])
    h = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    loss, _ = ccl_loss(h, bank, CFG)
    assert loss.item() == 0.0 and not loss.requires_grad


def test_ccl_zero_logits_gives_log_n(rng):
    bank = ClassifierBank(4)
    bank.add_task([0, 1, 2], rng)
    bank.finish_task()
    bank.add_task([3, 4], rng)
    bank.current.weight.data[...] = 0.0
    bank.heads[0] = type(bank.heads[0])(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
    loss, _ = ccl_loss(Tensor(rng.normal(size=4)), bank, CFG)
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_ccl_gradcheck_wrt_h(rng):
    bank = bank_with(rng, [2, 3, 2], scale=2.0)
    h = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    assert check_gradients(lambda: ccl_loss(h, bank, CFG)[0], {"h": h})["h"] < 1e-6


def test_ccl_margin_semantics(rng):
    bank = bank_with(rng, [2, 2])
    bank.heads[0] = type(bank.heads[0])(Tensor(np.zeros((4, 2))), Tensor(np.array([-5.0, -5.0])))
    bank.current.bias.data[...] = [5.0, 0.0]
    h = Tensor(rng.normal(0, 0.01, size=(3, 4)), requires_grad=True)
    loss, rate = ccl_loss(h, bank, CFG)
    loss.backward()
    assert rate == 0.0 and np.abs(h.grad).max() == 0.0


def test_ccl_never_touches_old_heads(rng):
    bank = bank_with(rng, [2, 2, 2])
    h = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    ccl_loss(h, bank, CFG)[0].backward()
    for head in bank.heads[:-1]:
        assert no_grad(head.weight) and no_grad(head.bias)


# -- PCL / aux -----------------------------------------------------------------------------

@pytest.fixture
def toy():
    return toy_state(seed=2)


def test_pcl_gradient_routing(toy):
    backbone, pool, bank, cfg, images, y = toy
    tok = Tensor(backbone.embed_constant(images))
    old, cur, head = pool.tasks[0].prompt, pool.current.prompt, bank.current
    pcl_ce_loss(backbone, tok, old, head, y).backward()
    assert no_grad(old) and no_grad(cur) and np.abs(head.weight.grad).max() > 0
    head.weight.zero_grad()
    pcl_ce_loss(backbone, tok, cur, head, y).backward()
    assert np.abs(cur.grad).max() > 0


def test_pcl_value_matches_manual_composition(toy):
    backbone, pool, bank, cfg, images, y = toy
    tok = Tensor(backbone.embed_constant(images))
    P = pool.tasks[0].prompt
    h = backbone.encode(tok, P).data
    logits = h @ bank.current.weight.data + bank.current.bias.data
    manual = np.mean([-np.log(softmax(row)[c]) for row, c in zip(logits, y)])
    assert pcl_ce_loss(backbone, tok, P, bank.current, y).item() == pytest.approx(manual, abs=1e-12)


def test_aux_loss_never_reaches_current_head(toy):
    backbone, pool, bank, cfg, images, y = toy
    h = backbone.encode(Tensor(backbone.embed_constant(images)), pool.current.prompt)
    aux_loss(h, bank.aux, y).backward()
    assert no_grad(bank.current.weight) and no_grad(bank.current.bias)
    assert np.abs(pool.current.prompt.grad).max() > 0 and np.abs(bank.aux.weight.grad).max() > 0


def _run_total(toy, seed=0, **flags):
    import dataclasses

    backbone, pool, bank, cfg, images, y = toy
    cfg = dataclasses.replace(cfg, **flags)
    return total_loss(backbone.embed_constant(images), backbone.queries(images), y, backbone, pool, bank,
                      cfg, np.random.default_rng(seed))


def test_total_loss_additivity(toy):
    loss, parts = _run_total(toy)
    assert abs(parts["total"] - (parts["ccl"] + parts["ce"] + parts["aux"] + parts["mk"])) < 1e-12
    assert loss.item() == parts["total"]


def test_ablation_routing(toy):
    backbone, pool, bank, cfg, images, y = toy
    _, parts = _run_total(toy, enable_aux_loss=False)
    assert parts["aux"] == 0.0
    _, parts = _run_total(toy, enable_ccl=False)
    assert parts["ccl"] == 0.0
    # without C_aux the auxiliary term is computed on C_t
    bank.current.weight.zero_grad()
    loss, parts = _run_total(toy, enable_aux_head=False)
    h = backbone.encode(Tensor(backbone.embed_constant(images)), pool.current.prompt)
    assert parts["aux"] == pytest.approx(aux_loss(h, bank.current, y).item(), abs=1e-12)


def test_first_task_has_no_ccl(rng):
    from promptcl.trainer import TrainConfig
    from promptcl.prompt_pool import PromptPool
    from promptcl.vit import Backbone, BackboneConfig

    cfg = BackboneConfig(image_size=4, patch_size=2, channels=1, embed_dim=8, num_layers=2, num_heads=2,
                         prompt_insert_layers=(1, 2), prompt_length=4)
    bb = Backbone(cfg, rng).freeze()
    pool, bank = PromptPool(4, 8), ClassifierBank(8)
    pool.add_task([0, 1], rng)
    bank.add_task([0, 1], rng)
    x = rng.normal(size=(4, 1, 4, 4))
    loss, parts = total_loss(bb.embed_constant(x), bb.queries(x), np.array([0, 1, 1, 0]), bb, pool, bank,
                             TrainConfig(dtype="float64"), rng)
    assert parts["ccl"] == 0.0 and parts["ce"] > 0 and parts["aux"] > 0 and parts["mk"] > 0


@pytest.mark.parametrize("flags", [
    {}, dict(per_example_sampling=False), dict(enable_mk=False, enable_aux_head=False),
    dict(regularizer="edl"), dict(enable_pcl=False),
])
def test_full_loss_gradcheck(flags):
    errs = full_loss_gradcheck(seed=1, **flags)
    assert max(errs.values()) < 1e-5, errs
