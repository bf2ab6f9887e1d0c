import numpy as np
import pytest
import torch

from htcl.dataset import SceneGraph
from htcl.model import collate
from htcl.numeric import ContractError, cross_entropy, grad_check

from conftest import small_net, toy_scenes

D = torch.float64


def _scene(classes, boxes, visual, rels=((0, 1, 0),)):
    rels = np.asarray(rels, dtype=np.int64).reshape(-1, 3)
    visual = np.asarray(visual, dtype=np.float64)
    return SceneGraph(0, np.asarray(classes), np.asarray(boxes, dtype=np.float64), visual, rels,
                      visual[rels[:, 0]] + visual[rels[:, 1]])


def _rand_scene(rng, n=3, d_v=6, N_obj=4):
    lo = rng.uniform(0, 0.5, (n, 2))
    boxes = np.concatenate([lo, lo + rng.uniform(0.1, 0.5, (n, 2))], axis=1)
    rels = [(0, 1, 2), (2, 0, 1), (1, 2, 4)][: n]
    return _scene(rng.integers(0, N_obj, n), boxes, rng.standard_normal((n, d_v)), rels)


def test_single_object_feature_shape():
    net = small_net()
    sg = _scene([1], [[0.1, 0.1, 0.4, 0.4]], np.ones((1, 6)), rels=np.zeros((0, 3)))
    f = net.features.object_encode(collate([sg], D), "predcls")
    assert f.shape == (1, net.dims.d_f)


def test_identical_objects_identical_features():
    net = small_net()
    box = [0.1, 0.2, 0.5, 0.6]
    sg = _scene([2, 2], [box, box], np.ones((2, 6)))
    f = net.features.object_encode(collate([sg], D), "predcls")
    assert torch.equal(f[0], f[1])


def test_bbox_perturbation_changes_feature():
    net = small_net()
    a = _scene([1, 2], [[0.1, 0.1, 0.4, 0.4], [0.2, 0.2, 0.6, 0.6]], np.ones((2, 6)))
    b = _scene([1, 2], [[0.1, 0.1, 0.45, 0.4], [0.2, 0.2, 0.6, 0.6]], np.ones((2, 6)))
    fa = net.features.object_encode(collate([a], D), "predcls")
    fb = net.features.object_encode(collate([b], D), "predcls")
    assert float((fa[0] - fb[0]).detach().abs().max()) > 0
    assert torch.equal(fa[1], fb[1])


def test_single_object_context_is_encoder_of_its_token():
    net = small_net(3)
    sg = _scene([1], [[0.1, 0.1, 0.4, 0.4]], np.full((1, 6), 0.3), rels=np.zeros((0, 3)))
    batch = collate([sg], D)
    pe, fp = net.features.pe, net.features
    f = fp.object_encode(batch, "predcls")
    e = pe(batch.visual, f, fp.word(batch.classes), batch.obj_pad_idx, batch.obj_pad_mask)
    tok = pe.inp(torch.cat([batch.visual, f, fp.word(batch.classes)], -1))
    assert torch.allclose(e, pe.layer(tok[None])[0], atol=1e-12)


def test_object_permutation_equivariance():
    rng = np.random.default_rng(0)
    net = small_net(1)
    sg = _rand_scene(rng)
    perm = np.array([2, 0, 1])            # new index i holds old object perm[i]
    inv = np.argsort(perm)
    rels = sg.relations.copy()
    rels[:, :2] = inv[rels[:, :2]]
    sg2 = SceneGraph(0, sg.classes[perm], sg.boxes[perm], sg.visual[perm], rels, sg.union)
    b1, b2 = collate([sg], D), collate([sg2], D)
    r1, logit1, _ = net.features(b1)
    r2, logit2, _ = net.features(b2)
    assert torch.allclose(logit1[perm], logit2, atol=1e-12)
    idx1 = {tuple(p): k for k, p in enumerate(b1.pair_local.tolist())}
    for k, (s, o) in enumerate(b2.pair_local.tolist()):
        assert torch.allclose(r2[k], r1[idx1[(perm[s], perm[o])]], atol=1e-12)


def test_swapping_visuals_swaps_label_logits():
    net = small_net(2)
    box = [0.1, 0.1, 0.5, 0.5]
    v = np.random.default_rng(1).standard_normal((2, 6))
    a = _scene([0, 0], [box, box], v)
    b = _scene([0, 0], [box, box], v[::-1])
    la = net.features(collate([a], D))[1]
    lb = net.features(collate([b], D))[1]
    assert torch.allclose(la, lb.flip(0), atol=1e-12)


def test_relation_features_shape_and_asymmetry():
    rng = np.random.default_rng(2)
    net = small_net()
    sg = _rand_scene(rng)
    batch = collate([sg], D)
    r, _, _ = net.features(batch)
    assert r.shape == (6, net.dims.d_r)    # all ordered pairs of 3 objects
    pairs = batch.pair_local.tolist()
    assert not torch.allclose(r[pairs.index([0, 1])], r[pairs.index([1, 0])])


def test_extreme_inputs_are_finite():
    rng = np.random.default_rng(3)
    net = small_net()
    sg = _rand_scene(rng)
    sg.visual[:] = np.sign(rng.standard_normal(sg.visual.shape)) * 1e3
    sg.union[:] = 2e3
    r, logits, _ = net.features(collate([sg], D))
    assert torch.isfinite(r).all() and torch.isfinite(logits).all()


def test_sgcls_uses_predicted_labels():
    net = small_net()
    batch = collate(toy_scenes(2), D)
    _, logits, labels = net.features(batch, "sgcls")
    assert torch.equal(labels, logits.argmax(-1))


def test_visual_dim_mismatch_is_contract_error():
    net = small_net(d_v=6)
    sg = _scene([0, 1], [[0.1, 0.1, 0.2, 0.2]] * 2, np.ones((2, 5)))
    with pytest.raises(ContractError, match="d_v"):
        net.features(collate([sg], D))


def test_pipeline_gradient_check():
    for seed in range(10):
        net = small_net(seed)
        batch = collate(toy_scenes(2, seed=seed), D)
        lab = batch.labelled

        def f():
            r, logits, _ = net.features(batch)
            return cross_entropy(net.head.hpc(r[lab]), batch.pair_label[lab]) + \
                cross_entropy(logits, batch.classes)

        params = {k: v for k, v in net.features.named_parameters()}
        params["hpc.weight"] = net.head.hpc.weight
        rep = grad_check(f, params)
        assert rep.passed, (seed, rep.max_rel_err, rep.failing[:3])
