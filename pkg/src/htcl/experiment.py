"""The standard synthetic experiment, the baseline/fine-tuned/HTCL comparison and the gradient suite."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import GenConfig, SceneGraph, generate
from .head import TailPreferEncoder
from .losses import ClassCenters, contrastive_loss, head_center_loss, hpc_ce, obj_ce, reweighted_ce
from .metrics import BiasReport, MetricsReport, bias_report
from .model import Dims, HTCLNet, LossSwitches, collate, compute_losses
from .numeric import (EncoderLayer, Embedding, GradCheckReport, LayerNorm, Linear, MLP,
                      MultiHeadSelfAttention, cross_entropy, grad_check, l2_normalize,
                      log_softmax, make_generator, masked_mean, softmax)
from .trainer import TrainConfig, TrainResult, evaluate, fit_pipeline, train

logger = logging.getLogger(__name__)

STANDARD_SEED = 42


def standard_gen_config(**kw) -> GenConfig:
    """C=20 predicates, Zipf 1.5, 2000 training images, seed 42.

    Tail predicates are tilted toward a head "parent" (``confusion``), relation
    evidence is noisy and images carry at most two annotated relations, so a
    plain classifier trades tail recall for head recall the way real predicate
    vocabularies do.
    """
    d = dict(num_images=2000, C=20, zipf_exponent=1.5, seed=STANDARD_SEED,
             confusion=0.85, noise=1.5, max_relations=2)
    d.update(kw)
    return GenConfig(**d)


def standard_train_config(**kw) -> TrainConfig:
    """Default hyperparameters with the desk-scale schedule of 10 epochs."""
    d = dict(seed=STANDARD_SEED, epochs=10)
    d.update(kw)
    return TrainConfig().replace(**d)


@dataclass
class Comparison:
    """Head-biased baseline, its HPC fine-tuned copy and the full model, evaluated on one split."""

    baseline: MetricsReport
    ft: MetricsReport
    htcl: MetricsReport
    baseline_run: TrainResult
    htcl_run: TrainResult
    ft_net: HTCLNet
    htcl_net: HTCLNet

    @property
    def reports(self) -> dict[str, MetricsReport]:
        return {"baseline": self.baseline, "ft": self.ft, "htcl": self.htcl}

    def bias(self, K: int) -> BiasReport:
        gate = self.htcl_net.head.gate.detach().numpy()
        return bias_report(self.reports, self.htcl_run.stats.counts, gate, K)


def compare_models(config: TrainConfig, train_scenes: list[SceneGraph],
                   test_scenes: list[SceneGraph], C: int, N_obj: int, d_v: int) -> Comparison:
    hp_cfg = config.replace(branch_mode="hp_only", use_tpc_ft=False)
    full_cfg = config.replace(branch_mode="full")
    logger.info("training head-biased baseline")
    base_run = train(hp_cfg, train_scenes, C, N_obj, d_v, evaluate_each_epoch=False)
    ft_net, _ = fit_pipeline(hp_cfg, train_scenes, C, N_obj, d_v, finetune="HPC", trained=base_run)
    logger.info("training full model")
    htcl_run = train(full_cfg, train_scenes, C, N_obj, d_v, evaluate_each_epoch=False)
    htcl_net, _ = fit_pipeline(full_cfg, train_scenes, C, N_obj, d_v, trained=htcl_run)
    return Comparison(evaluate(base_run.net, test_scenes, hp_cfg), evaluate(ft_net, test_scenes, hp_cfg),
                      evaluate(htcl_net, test_scenes, full_cfg), base_run, htcl_run, ft_net, htcl_net)


def standard_data(gen: GenConfig | None = None) -> dict[str, list[SceneGraph]]:
    return generate(gen or standard_gen_config())


# ---------------------------------------------------------------------------
# gradient suite

_SMALL = Dims(d_pos=4, d_word=6, d_f=8, d_e=8, d_r=8, d_model=8, d_ff=12, heads=2, d_proj=6)


def _leaf(rng, *shape):
    return torch.tensor(rng.standard_normal(shape), dtype=torch.float64, requires_grad=True)


def _cases(seed: int):
    """(name, f, params) for every layer type and every loss, in double precision."""
    D = torch.float64
    rng = np.random.default_rng(seed)
    g = make_generator(seed)
    out = []

    lin = Linear(4, 3, g).to(D)
    x = _leaf(rng, 5, 4)
    out.append(("linear", lambda: (lin(x) ** 2).sum(), {"x": x, **dict(lin.named_parameters())}))

    mlp = MLP(4, 6, 3, g).to(D)
    x2 = _leaf(rng, 5, 4)
    w3 = torch.tensor(rng.standard_normal(3), dtype=D)
    out.append(("mlp", lambda: (mlp(x2) * w3).sum(), {"x": x2, **dict(mlp.named_parameters())}))

    emb = Embedding(5, 3, g).to(D)
    idx = torch.tensor([0, 3, 3, 1])
    probs = torch.softmax(torch.tensor(rng.standard_normal((2, 5)), dtype=D), -1)
    out.append(("embedding", lambda: (emb(idx) ** 2).sum() + (emb.mix(probs) ** 3).sum(),
                dict(emb.named_parameters())))

    ln = LayerNorm(6).to(D)
    with torch.no_grad():
        ln.gain.copy_(torch.tensor(rng.standard_normal(6)))
        ln.shift.copy_(torch.tensor(rng.standard_normal(6)))
    x3 = _leaf(rng, 3, 6)
    w6 = torch.tensor(rng.standard_normal((3, 6)), dtype=D)
    out.append(("layer_norm", lambda: (ln(x3) * w6).sum(), {"x": x3, **dict(ln.named_parameters())}))

    attn = MultiHeadSelfAttention(8, 2, g).to(D)
    x4 = _leaf(rng, 2, 4, 8)
    mask = torch.tensor([[True, True, True, False], [True, True, False, False]])
    w8 = torch.tensor(rng.standard_normal((2, 4, 8)), dtype=D) * mask[..., None]
    out.append(("attention", lambda: (attn(x4, mask) * w8).sum(),
                {"x": x4, **dict(attn.named_parameters())}))

    enc = EncoderLayer(8, 4, 10, g).to(D)
    x5 = _leaf(rng, 1, 3, 8)
    w5 = torch.tensor(rng.standard_normal((1, 3, 8)), dtype=D)
    out.append(("encoder_layer", lambda: (enc(x5) * w5).sum(), {"x": x5, **dict(enc.named_parameters())}))

    tpfe = TailPreferEncoder(4, 6, 8, 2, 12, 2, g).to(D)
    r, s = _leaf(rng, 3, 4), _leaf(rng, 3, 6)
    pidx, pmask = torch.arange(3)[None], torch.ones(1, 3, dtype=torch.bool)
    w4 = torch.tensor(rng.standard_normal((3, 4)), dtype=D)
    out.append(("tpfe", lambda: (tpfe.encode(tpfe.tokens(r, s), pidx, pmask) * w4).sum(),
                {"r": r, "s": s, **dict(tpfe.named_parameters())}))

    z = _leaf(rng, 3, 4)
    v = _leaf(rng, 3, 4)
    t = _leaf(rng, 2, 3, 4)
    m = torch.tensor([[True, False, True], [True, True, True]])
    w34 = torch.tensor(rng.standard_normal((3, 4)), dtype=D)
    out.append(("elementwise", lambda: (softmax(z) * w34).sum() + (log_softmax(z) * w34).sum()
                + (l2_normalize(v) * w34).sum() + (masked_mean(t, m, 1) ** 2).sum()
                + torch.sigmoid(z).sum(), {"z": z, "v": v, "t": t}))

    q, qa = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 3, 5)
    out.append(("contrastive_loss", lambda: contrastive_loss(l2_normalize(q), l2_normalize(qa), m, 0.1),
                {"q": q, "q_aug": qa}))

    centers = ClassCenters(4, 3).to(D)
    centers.set_head([0, 1])
    centers.centers[:2] = torch.tensor(rng.standard_normal((2, 3)))
    centers.seen[:2] = True
    f = _leaf(rng, 4, 3)
    y4 = torch.tensor([0, 1, 2, 0])
    out.append(("head_center_loss", lambda: head_center_loss(f, y4, centers), {"r_t": f}))

    logits = _leaf(rng, 5, 4)
    y5 = torch.tensor(rng.integers(0, 4, 5))
    w = torch.tensor(rng.uniform(0.1, 3.0, 4), dtype=D)
    out.append(("reweighted_ce", lambda: reweighted_ce(torch.softmax(logits, -1), y5, w), {"z": logits}))
    out.append(("hpc_obj_ce", lambda: hpc_ce(logits, y5) + obj_ce(logits, y5) + cross_entropy(logits, y5),
                {"z": logits}))

    gen = GenConfig(num_images=2, num_test_images=0, N_obj=4, C=5, d_v=6, seed=seed,
                    max_objects=4, zipf_exponent=0.5, num_parents=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scenes = generate(gen)["train"]
    net = HTCLNet(5, 4, 6, _SMALL, tpfe_layers=2, seed=seed).to(D)
    net.head.set_gate(rng.integers(1, 50, size=5))
    net.centers.set_head([0, 1, 2])
    with torch.no_grad():
        net.centers.centers.copy_(torch.tensor(rng.standard_normal(net.centers.centers.shape)))
        net.centers.seen.fill_(True)
    batch = collate(scenes, D)
    wts = torch.tensor(rng.uniform(0.5, 2.0, 5), dtype=D)

    def total():
        bundle, _ = compute_losses(net, batch, wts, LossSwitches(), 1e-4, 0.1, 0.3,
                                   make_generator(seed), con_reduction="sum")
        return bundle.l_total
    out.append(("total_loss", total, dict(net.named_parameters())))
    return out


def gradient_suite(seeds=range(10), step: float = 1e-5, tol: float = 1e-4,
                   max_entries: int = 8) -> dict:
    """Finite-difference check of every layer type and loss over ``seeds``.

    Every parameter tensor is probed at up to ``max_entries`` random entries.
    """
    rows = []
    for seed in seeds:
        for name, f, params in _cases(int(seed)):
            rep: GradCheckReport = grad_check(f, params, step=step, tol=tol,
                                                  max_entries=max_entries, seed=int(seed))
            rows.append({"check": name, "seed": int(seed), "max_rel_err": rep.max_rel_err,
                         "checked": rep.checked, "kinks": len(rep.kinks),
                         "failing": len(rep.failing), "passed": rep.passed})
    worst = max(r["max_rel_err"] for r in rows)
    return {"step": step, "tol": tol, "max_rel_err": worst,
            "passed": all(r["passed"] for r in rows), "checks": rows}
