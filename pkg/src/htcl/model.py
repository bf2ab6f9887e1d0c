"""Full network: feature pipeline + HTCL head, batch collation, forward and losses."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .dataset import SceneGraph
from .features import FeaturePipeline
from .head import HTCLHead, cooperate
from .losses import (ClassCenters, LossBundle, contrastive_loss, head_center_loss, hpc_ce,
                     mask_augment, obj_ce, reweighted_ce)
from .numeric import MLP, l2_normalize, make_generator, softmax

BRANCH_MODES = ("hp_only", "tpfr_only", "full")
TASKS = ("predcls", "sgcls")


@dataclass
class Dims:
    d_pos: int = 16
    d_word: int = 32
    d_f: int = 64
    d_e: int = 64
    d_r: int = 64
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    d_proj: int = 64


@dataclass
class Batch:
    """Flat per-object and per-pair tensors for a list of scenes.

    Candidate pairs are all ordered pairs (s, o), s != o, of each image in
    lexicographic order. ``pair_label`` is -1 where no relation is annotated.
    """

    image_ids: list[int]
    classes: torch.Tensor
    boxes: torch.Tensor
    visual: torch.Tensor
    obj_pad_idx: torch.Tensor
    obj_pad_mask: torch.Tensor
    pair_s: torch.Tensor
    pair_o: torch.Tensor
    pair_local: np.ndarray        # (P, 2) subject/object index within the image
    pair_image: torch.Tensor
    pair_label: torch.Tensor
    pair_rel: np.ndarray          # relation row index within the image, -1 if none
    union: torch.Tensor
    pair_pad_idx: torch.Tensor
    pair_pad_mask: torch.Tensor

    @property
    def num_pairs(self) -> int:
        return int(self.pair_s.shape[0])

    @property
    def labelled(self) -> torch.Tensor:
        return self.pair_label >= 0


def _pad_layout(counts: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    B = len(counts)
    T = max(counts) if counts else 0
    idx = torch.zeros(B, T, dtype=torch.long)
    mask = torch.zeros(B, T, dtype=torch.bool)
    start = 0
    for b, n in enumerate(counts):
        idx[b, :n] = torch.arange(start, start + n)
        mask[b, :n] = True
        start += n
    return idx, mask


def collate(scenes: list[SceneGraph], dtype=torch.float32) -> Batch:
    classes, boxes, visual, n_objs = [], [], [], []
    ps, po, local, pimg, plabel, prel, union, n_pairs = [], [], [], [], [], [], [], []
    offset = 0
    for b, sg in enumerate(scenes):
        n = sg.num_objects
        classes.append(sg.classes), boxes.append(sg.boxes), visual.append(sg.visual)
        n_objs.append(n)
        label = -np.ones((n, n), dtype=np.int64)
        rel = -np.ones((n, n), dtype=np.int64)
        u = {}
        for k, (s, o, p) in enumerate(sg.relations):
            label[s, o] = p
            rel[s, o] = k
            u[(s, o)] = sg.union[k]
        cnt = 0
        for s in range(n):
            for o in range(n):
                if s == o:
                    continue
                ps.append(offset + s), po.append(offset + o), local.append((s, o))
                pimg.append(b), plabel.append(label[s, o]), prel.append(rel[s, o])
                union.append(u.get((s, o), sg.visual[s] + sg.visual[o]))
                cnt += 1
        n_pairs.append(cnt)
        offset += n
    d_v = scenes[0].visual.shape[1] if scenes else 0
    obj_idx, obj_mask = _pad_layout(n_objs)
    pair_idx, pair_mask = _pad_layout(n_pairs)
    cat = (lambda xs, shape: torch.as_tensor(np.concatenate(xs) if xs else np.zeros(shape)))
    return Batch(
        image_ids=[sg.image_id for sg in scenes],
        classes=cat(classes, (0,)).long(),
        boxes=cat(boxes, (0, 4)).to(dtype),
        visual=cat(visual, (0, d_v)).to(dtype),
        obj_pad_idx=obj_idx, obj_pad_mask=obj_mask,
        pair_s=torch.as_tensor(ps, dtype=torch.long),
        pair_o=torch.as_tensor(po, dtype=torch.long),
        pair_local=np.asarray(local, dtype=np.int64).reshape(-1, 2),
        pair_image=torch.as_tensor(pimg, dtype=torch.long),
        pair_label=torch.as_tensor(plabel, dtype=torch.long),
        pair_rel=np.asarray(prel, dtype=np.int64),
        union=torch.as_tensor(np.asarray(union).reshape(-1, d_v)).to(dtype),
        pair_pad_idx=pair_idx, pair_pad_mask=pair_mask,
    )


@dataclass
class Outputs:
    obj_logits: torch.Tensor
    r: torch.Tensor
    z_h: torch.Tensor
    p_hat: torch.Tensor
    s: torch.Tensor | None = None
    g: torch.Tensor | None = None
    r_t: torch.Tensor | None = None
    z_t: torch.Tensor | None = None
    z_o: torch.Tensor | None = None
    q: torch.Tensor | None = None
    q_aug: torch.Tensor | None = None


class ProjectionHead(nn.Module):
    """MLP onto the unit hypersphere used by the contrastive loss."""

    def __init__(self, d_r: int, d_proj: int, g: torch.Generator):
        super().__init__()
        self.mlp = MLP(d_r, d_r, d_proj, g)

    def forward(self, x):
        return l2_normalize(self.mlp(x))


class HTCLNet(nn.Module):
    def __init__(self, C: int, N_obj: int, d_v: int, dims: Dims | None = None,
                 tpfe_layers: int = 4, seed: int = 0):
        super().__init__()
        dims = dims or Dims()
        self.C, self.N_obj, self.d_v, self.dims = C, N_obj, d_v, dims
        self.tpfe_layers = tpfe_layers
        g = make_generator(seed)
        self.features = FeaturePipeline(dims, N_obj, d_v, g)
        self.head = HTCLHead(dims, C, self.features.word, tpfe_layers, g)
        self.proj = ProjectionHead(dims.d_r, dims.d_proj, g)
        self.centers = ClassCenters(C, dims.d_r)

    def arch(self) -> dict:
        return {"C": self.C, "N_obj": self.N_obj, "d_v": self.d_v,
                "dims": asdict(self.dims), "tpfe_layers": self.tpfe_layers}

    @property
    def dtype(self) -> torch.dtype:
        return self.head.hpc.weight.dtype

    def forward(self, batch: Batch, branch_mode: str = "full", task: str = "predcls",
                use_tpfe: bool = True, augment: tuple[float, torch.Generator] | None = None) -> Outputs:
        """Run the network on every candidate pair.

        ``augment=(p_m, generator)`` also encodes the mean-masked view and
        returns both projected views for the contrastive loss.
        """
        if branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode: expected one of {BRANCH_MODES}, got {branch_mode!r}")
        if task not in TASKS:
            raise ValueError(f"task: expected one of {TASKS}, got {task!r}")
        r, obj_logits, labels = self.features(batch, task)
        z_h = self.head.hpc(r)
        if branch_mode == "hp_only":
            return Outputs(obj_logits, r, z_h, softmax(z_h))
        s = self.head.semantic(z_h, labels[batch.pair_s], labels[batch.pair_o])
        g = self.head.tpfe.tokens(r, s)
        r_t = self.head.tpfe.encode(g, batch.pair_pad_idx, batch.pair_pad_mask, use_tpfe)
        z_t = self.head.tpc(r_t)
        if branch_mode == "tpfr_only":
            z_o = softmax(z_t)
        else:
            z_o = cooperate(z_h, z_t, self.head.gate_logit)
        out = Outputs(obj_logits, r, z_h, softmax(z_o), s, g, r_t, z_t, z_o)
        if augment is not None:
            p_m, gen = augment
            G = g[batch.pair_pad_idx]
            G_mask, _ = mask_augment(G, batch.pair_pad_mask, p_m, gen)
            r_t_aug = self.head.tpfe.encode(G_mask[batch.pair_pad_mask], batch.pair_pad_idx,
                                            batch.pair_pad_mask, use_tpfe)
            out.q = self.proj(r_t)
            out.q_aug = self.proj(r_t_aug)
        return out

    def scores(self, batch: Batch, branch_mode: str = "full", task: str = "predcls",
               use_tpfe: bool = True) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(batch, branch_mode, task, use_tpfe).p_hat


@dataclass
class LossSwitches:
    branch_mode: str = "full"
    use_l_ssl: bool = True
    use_l_con: bool = True
    use_l_hc: bool = True
    use_l_hpc: bool = True
    use_l_rw: bool = True


def compute_losses(net: HTCLNet, batch: Batch, weights: torch.Tensor, sw: LossSwitches,
                   lam: float, tau: float, p_m: float, generator: torch.Generator,
                   task: str = "predcls", use_tpfe: bool = True,
                   con_reduction: str = "mean") -> tuple[LossBundle, Outputs]:
    """All loss terms for one batch; switched-off terms are exact zeros."""
    use_con = sw.branch_mode != "hp_only" and sw.use_l_ssl and sw.use_l_con
    use_hc = sw.branch_mode != "hp_only" and sw.use_l_ssl and sw.use_l_hc
    out = net(batch, sw.branch_mode, task, use_tpfe,
              augment=(p_m, generator) if use_con else None)
    zero = out.z_h.sum() * 0.0
    lab = batch.labelled
    y = batch.pair_label[lab]
    l_con = zero
    if use_con:
        q = out.q[batch.pair_pad_idx]
        q_aug = out.q_aug[batch.pair_pad_idx]
        l_con = contrastive_loss(q, q_aug, batch.pair_pad_mask, tau, con_reduction)
    l_hc = head_center_loss(out.r_t[lab], y, net.centers) if use_hc else zero
    if sw.branch_mode == "hp_only":
        l_rw = zero
        l_hpc = hpc_ce(out.z_h[lab], y)
    else:
        l_rw = reweighted_ce(out.p_hat[lab], y, weights) if sw.use_l_rw else zero
        l_hpc = hpc_ce(out.z_h[lab], y) if sw.use_l_hpc else zero
    l_obj = obj_ce(out.obj_logits, batch.classes)
    return LossBundle(l_con, l_hc, l_rw, l_hpc, l_obj, lam), out
