import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from htcl.losses import (ClassCenters, LossBundle, contrastive_loss, contrastive_loss_flat,
                         head_center_loss, hpc_ce, mask_augment, obj_ce, reweighted_ce,
                         total_loss)
from htcl.model import LossSwitches, collate, compute_losses
from htcl.numeric import grad_check, l2_normalize, make_generator

from conftest import small_net, toy_scenes

D = torch.float64


def _unit(rng, n, d=4):
    return l2_normalize(torch.tensor(rng.standard_normal((n, d)), dtype=D))


def brute_contrastive(qs, tau):
    """Plain-loop evaluation over 2m samples; sample i pairs with i +/- m."""
    n = len(qs)
    m = n // 2
    total = 0.0
    for i in range(n):
        j = i + m if i < m else i - m
        dot = lambda a, b: sum(x * y for x, y in zip(qs[a], qs[b]))
        denom = sum(math.exp(dot(i, a) / tau) for a in range(n) if a != i)
        total -= math.log(math.exp(dot(i, j) / tau) / denom)
    return total


# -- mask augmentation ------------------------------------------------------------

def test_mask_p0_and_p1():
    G = torch.randn(2, 4, 3, dtype=D)
    mask = torch.tensor([[True] * 4, [True, True, True, False]])
    out, hit = mask_augment(G, mask, 0.0, make_generator(0))
    assert torch.equal(out, G) and not hit.any()
    out, hit = mask_augment(G, mask, 1.0, make_generator(0))
    assert torch.equal(hit, mask)
    assert torch.allclose(out[0], G[0].mean(0).expand(4, 3))
    assert torch.allclose(out[1, :3], G[1, :3].mean(0).expand(3, 3))
    assert torch.equal(out[1, 3], G[1, 3])     # padding untouched


def test_mask_fraction_concentrates():
    G = torch.randn(1, 10 ** 4, 2, dtype=D)
    _, hit = mask_augment(G, torch.ones(1, 10 ** 4, dtype=torch.bool), 0.1, make_generator(3))
    assert 0.08 <= float(hit.double().mean()) <= 0.12


def test_mask_rejects_bad_probability():
    with pytest.raises(ValueError, match="p_m"):
        mask_augment(torch.zeros(1, 1, 1), torch.ones(1, 1, dtype=torch.bool), 1.5,
                     make_generator(0))


# -- contrastive ----------------------------------------------------------------------

def test_contrastive_single_relation_is_zero():
    rng = np.random.default_rng(0)
    assert float(contrastive_loss_flat(_unit(rng, 2), 0.1)) == 0.0
    assert float(contrastive_loss_flat(_unit(rng, 0), 0.1)) == 0.0


def test_contrastive_matches_brute_force_m2():
    rng = np.random.default_rng(1)
    q = _unit(rng, 4)
    ref = brute_contrastive(q.tolist(), 0.1)
    assert float(contrastive_loss_flat(q, 0.1)) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_contrastive_padded_batch_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    sizes = [3, 1, 2]
    T = max(sizes)
    q = torch.zeros(3, T, 5, dtype=D)
    qa = torch.zeros(3, T, 5, dtype=D)
    mask = torch.zeros(3, T, dtype=torch.bool)
    ref = 0.0
    for b, m in enumerate(sizes):
        a, c = _unit(rng, m, 5), _unit(rng, m, 5)
        q[b, :m], qa[b, :m], mask[b, :m] = a, c, True
        ref += brute_contrastive(torch.cat([a, c]).tolist(), 0.2)
    assert float(contrastive_loss(q, qa, mask, 0.2)) == pytest.approx(ref, rel=1e-12)
    mean = contrastive_loss(q, qa, mask, 0.2, reduction="mean")
    assert float(mean) == pytest.approx(ref / (2 * sum(sizes)), rel=1e-12)


def test_contrastive_permutation_invariance():
    rng = np.random.default_rng(2)
    q = _unit(rng, 10)
    perm = torch.tensor([3, 0, 4, 1, 2])
    q2 = torch.cat([q[:5][perm], q[5:][perm]])
    assert float(contrastive_loss_flat(q2, 0.1)) == pytest.approx(float(contrastive_loss_flat(q, 0.1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_contrastive_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    q = _unit(rng, 8)
    Rm, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    rot = q @ torch.tensor(Rm, dtype=D)
    assert float(contrastive_loss_flat(rot, 0.1)) == pytest.approx(
        float(contrastive_loss_flat(q, 0.1)), rel=1e-9)


def test_contrastive_decreases_when_positive_moves_closer():
    rng = np.random.default_rng(4)
    q = _unit(rng, 6)
    before = float(contrastive_loss_flat(q, 0.1))
    q2 = q.clone()
    q2[3] = l2_normalize(q[3] + 0.3 * (q[0] - q[3]))   # the positive of sample 0 moves toward it
    # everything else fixed: compare only anchor 0's term
    def anchor0(qs):
        sims = qs @ qs[0] / 0.1
        return float(torch.logsumexp(sims[1:], 0) - sims[3])
    assert anchor0(q2) < anchor0(q)
    assert float(contrastive_loss_flat(q2, 0.1)) != before


def test_contrastive_rejects_bad_tau():
    with pytest.raises(ValueError, match="tau"):
        contrastive_loss_flat(torch.zeros(2, 3), 0.0)


# -- head center loss ----------------------------------------------------------------------

def _centers(C=4, dim=3, head=(0, 1)):
    c = ClassCenters(C, dim).to(D)
    c.set_head(head)
    return c


def test_center_loss_examples():
    c = _centers()
    c.centers[0] = torch.tensor([1.0, 2.0, 3.0])
    c.seen[0] = True
    assert float(head_center_loss(torch.tensor([[1.0, 2.0, 3.0]], dtype=D), torch.tensor([0]), c)) == 0
    x = torch.tensor([[4.0, 6.0, 3.0]], dtype=D)
    assert float(head_center_loss(x, torch.tensor([0]), c)) == pytest.approx(5.0)


def test_center_loss_batch_matches_direct_sum():
    c = _centers(head=(0, 1, 2))
    rng = np.random.default_rng(0)
    cent = rng.standard_normal((3, 3))
    c.centers[:3] = torch.tensor(cent)
    c.seen[:3] = True
    x = rng.standard_normal((5, 3))
    y = np.array([0, 2, 3, 1, 2])     # class 3 is tail and skipped
    ref = sum(np.linalg.norm(x[i] - cent[y[i]]) for i in range(5) if y[i] != 3)
    got = head_center_loss(torch.tensor(x), torch.tensor(y), c)
    assert float(got) == pytest.approx(ref, rel=1e-12)


def test_unseen_head_class_excluded_until_update():
    c = _centers()
    x = torch.tensor([[1.0, 0.0, 0.0]], dtype=D)
    assert float(head_center_loss(x, torch.tensor([1]), c)) == 0.0
    c.update(x, torch.tensor([1]))
    assert torch.allclose(c.centers[1], 0.1 * x[0])
    assert float(head_center_loss(x, torch.tensor([1]), c)) == pytest.approx(0.9)
    c.update(torch.ones(1, 3, dtype=D), torch.tensor([3]))      # tail: untouched
    assert not c.seen[3] and float(c.centers[3].abs().sum()) == 0


def test_center_loss_translation_covariance():
    c = _centers()
    c.centers[0] = torch.tensor([0.5, -1.0, 2.0])
    c.seen[0] = True
    x = torch.tensor([[1.0, 1.0, 1.0], [0.0, 2.0, -1.0]], dtype=D)
    y = torch.tensor([0, 0])
    base = float(head_center_loss(x, y, c))
    shift = torch.tensor([3.0, -7.0, 0.25], dtype=D)
    c.centers[0] += shift
    assert float(head_center_loss(x + shift, y, c)) == pytest.approx(base, rel=1e-12)


def test_centers_receive_no_gradient():
    c = _centers()
    x = torch.randn(2, 3, dtype=D, requires_grad=True)
    c.update(x, torch.tensor([0, 0]))
    head_center_loss(x, torch.tensor([0, 0]), c).backward()
    assert not c.centers.requires_grad and x.grad is not None


# -- cross-entropy family -------------------------------------------------------------------

def test_reweighted_unit_weights_is_ce():
    z = torch.randn(6, 4, dtype=D)
    y = torch.tensor([0, 1, 2, 3, 1, 0])
    p = torch.softmax(z, -1)
    assert float(reweighted_ce(p, y, torch.ones(4, dtype=D))) == pytest.approx(float(hpc_ce(z, y)))


def test_reweighted_perfect_prediction_is_zero():
    p = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D)
    assert float(reweighted_ce(p, torch.tensor([1, 0]), torch.tensor([1.0, 3.0], dtype=D))) == 0.0


def test_reweighted_two_class_hand_computation():
    p = torch.tensor([[0.8, 0.2], [0.3, 0.7]], dtype=D)
    got = reweighted_ce(p, torch.tensor([0, 1]), torch.tensor([1.0, 2.0], dtype=D))
    assert float(got) == pytest.approx((-math.log(0.8) - 2 * math.log(0.7)) / 2, rel=1e-14)


def test_reweighted_clamps_zero_probability(caplog):
    p = torch.tensor([[1.0, 0.0]], dtype=D)
    got = reweighted_ce(p, torch.tensor([1]), torch.ones(2, dtype=D))
    assert float(got) == pytest.approx(-math.log(1e-12))
    assert "clamp" in caplog.text


def test_uniform_counts_give_scaled_ce():
    from htcl.dataset import effective_number_weights
    w = torch.tensor(effective_number_weights([30] * 4, 0.99), dtype=D)
    z = torch.randn(5, 4, dtype=D)
    y = torch.tensor([0, 3, 2, 2, 1])
    ratio = float(reweighted_ce(torch.softmax(z, -1), y, w)) / float(hpc_ce(z, y))
    assert ratio == pytest.approx(float(w[0]), rel=1e-12)


def test_ce_examples():
    C = 7
    assert float(hpc_ce(torch.zeros(3, C, dtype=D), torch.tensor([0, 4, 6]))) == pytest.approx(math.log(C))
    z = torch.full((2, 3), -50.0, dtype=D)
    z[0, 1] = z[1, 2] = 50.0
    assert float(obj_ce(z, torch.tensor([1, 2]))) < 1e-30


def test_ce_matches_log_softmax_gather():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, 6)
    ref = -np.mean([z[i, y[i]] - math.log(sum(math.exp(v) for v in z[i])) for i in range(6)])
    assert float(hpc_ce(torch.tensor(z), torch.tensor(y))) == pytest.approx(ref, rel=1e-12)


# -- total ----------------------------------------------------------------------------------

def test_total_loss_examples():
    z = torch.tensor(0.0, dtype=D)
    assert float(LossBundle(z, z, z, z, z).l_total) == 0.0
    t = lambda v: torch.tensor(v, dtype=D)
    a = LossBundle(t(1.0), t(5.0), t(2.0), t(3.0), t(4.0), lam=0.0)
    b = LossBundle(t(1.0), t(500.0), t(2.0), t(3.0), t(4.0), lam=0.0)
    assert float(a.l_total) == float(b.l_total) == 10.0
    c = LossBundle(t(1.0), t(5.0), t(2.0), t(3.0), t(4.0), lam=0.1)
    assert float(c.l_ssl) == pytest.approx(1.5)
    assert float(total_loss(c, 0.1)) == pytest.approx(10.5)


def _prepared(seed, reduction="sum"):
    net = small_net(seed)
    batch = collate(toy_scenes(2, seed=seed), D)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        net.centers.centers.copy_(torch.tensor(rng.standard_normal(net.centers.centers.shape)))
        net.centers.seen.fill_(True)
    w = torch.tensor(rng.uniform(0.5, 2.0, net.C), dtype=D)

    def run():
        return compute_losses(net, batch, w, LossSwitches(), 1e-4, 0.1, 0.3,
                              make_generator(seed), con_reduction=reduction)
    return net, batch, w, run


def test_full_toy_total_equals_recomputed_parts():
    net, batch, w, run = _prepared(0)
    bundle, out = run()
    lab = batch.labelled
    y = batch.pair_label[lab]
    q, qa = out.q[batch.pair_pad_idx], out.q_aug[batch.pair_pad_idx]
    parts = [contrastive_loss(q, qa, batch.pair_pad_mask, 0.1),
             1e-4 * head_center_loss(out.r_t[lab], y, net.centers),
             reweighted_ce(out.p_hat[lab], y, w), hpc_ce(out.z_h[lab], y),
             obj_ce(out.obj_logits, batch.classes)]
    assert float(bundle.l_total.detach()) == pytest.approx(float(sum(parts).detach()), rel=1e-12)
    assert float(bundle.l_hc.detach()) > 0 and float(bundle.l_con.detach()) > 0


def test_switched_off_terms_are_zero():
    net, batch, w, _ = _prepared(1)
    sw = LossSwitches(use_l_con=False, use_l_hc=False, use_l_rw=False, use_l_hpc=False)
    bundle, _ = compute_losses(net, batch, w, sw, 1e-4, 0.1, 0.1, make_generator(0))
    for name in ("l_con", "l_hc", "l_rw", "l_hpc"):
        assert float(getattr(bundle, name).detach()) == 0.0
    assert float(bundle.l_total.detach()) == pytest.approx(float(bundle.l_obj.detach()))


# -- finite-difference checks for every loss ---------------------------------------------------

SEEDS = range(10)


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_function_gradients(seed):
    rng = np.random.default_rng(seed)
    q = torch.tensor(rng.standard_normal((2, 3, 4)), dtype=D, requires_grad=True)
    qa = torch.tensor(rng.standard_normal((2, 3, 4)), dtype=D, requires_grad=True)
    mask = torch.tensor([[True, True, True], [True, True, False]])
    rep = grad_check(lambda: contrastive_loss(l2_normalize(q), l2_normalize(qa), mask, 0.1),
                     {"q": q, "q_aug": qa})
    assert rep.passed, ("contrastive", rep.failing[:3])

    c = _centers(head=(0, 1))
    c.centers[:2] = torch.tensor(rng.standard_normal((2, 3)))
    c.seen[:2] = True
    x = torch.tensor(rng.standard_normal((4, 3)), dtype=D, requires_grad=True)
    y = torch.tensor([0, 1, 2, 0])
    rep = grad_check(lambda: head_center_loss(x, y, c), {"x": x})
    assert rep.passed, ("center", rep.failing[:3])

    z = torch.tensor(rng.standard_normal((5, 4)), dtype=D, requires_grad=True)
    w = torch.tensor(rng.uniform(0.1, 3, 4), dtype=D)
    y = torch.tensor(rng.integers(0, 4, 5))
    rep = grad_check(lambda: reweighted_ce(torch.softmax(z, -1), y, w) + hpc_ce(z, y) + obj_ce(z, y),
                     {"z": z})
    assert rep.passed, ("ce", rep.failing[:3])


@pytest.mark.parametrize("seed", SEEDS)
def test_full_objective_gradient(seed):
    net, _, _, run = _prepared(seed)
    params = dict(net.named_parameters())
    rep = grad_check(lambda: run()[0].l_total, params, max_entries=100, seed=seed)
    assert rep.passed, (rep.max_rel_err, rep.failing[:3])
    assert rep.max_rel_err <= 1e-4
    assert len(rep.kinks) <= 0.02 * rep.checked
