"""Stand-in for a classical SGG backbone: object encoder, context encoder, predicate decoder."""
from __future__ import annotations

import torch
from torch import nn

from .numeric import ContractError, Embedding, EncoderLayer, Linear, MLP, concat


class ObjectEncoder(nn.Module):
    """f = MLP([visual, pos(bbox), emb(class)])."""

    def __init__(self, d_v: int, d_pos: int, d_word: int, d_f: int, g: torch.Generator):
        super().__init__()
        self.d_v = d_v
        self.pos = Linear(4, d_pos, g)
        self.mlp = MLP(d_v + d_pos + d_word, d_f, d_f, g)

    def forward(self, visual, boxes, word):
        if visual.shape[-1] != self.d_v:
            raise ContractError(f"object_encode: visual dim {visual.shape[-1]} != d_v {self.d_v}")
        return self.mlp(concat([visual, self.pos(boxes), word]))


class ContextEncoder(nn.Module):
    """One self-attention block over the objects of each image, plus the object label head."""

    def __init__(self, d_v: int, d_f: int, d_word: int, d_e: int, n_obj: int,
                 heads: int, d_ff: int, g: torch.Generator):
        super().__init__()
        self.label_head = Linear(d_f, n_obj, g)
        self.inp = Linear(d_v + d_f + d_word, d_e, g)
        self.layer = EncoderLayer(d_e, heads, d_ff, g)

    def forward(self, visual, f, word, pad_idx, pad_mask):
        """``pad_idx`` (B, n_max) indexes flat objects; returns flat context features."""
        tokens = self.inp(concat([visual, f, word]))
        x = self.layer(tokens[pad_idx], pad_mask)
        return x[pad_mask]


class PredicateDecoder(nn.Module):
    """r = MLP([e_subj, e_obj, union])."""

    def __init__(self, d_e: int, d_v: int, d_r: int, g: torch.Generator):
        super().__init__()
        self.mlp = MLP(2 * d_e + d_v, d_r, d_r, g)

    def forward(self, e_s, e_o, union):
        return self.mlp(concat([e_s, e_o, union]))


class FeaturePipeline(nn.Module):
    def __init__(self, dims, n_obj: int, d_v: int, g: torch.Generator):
        super().__init__()
        self.n_obj = n_obj
        # last row stands for "class unknown" (SGCls input)
        self.word = Embedding(n_obj + 1, dims.d_word, g)
        self.oe = ObjectEncoder(d_v, dims.d_pos, dims.d_word, dims.d_f, g)
        self.pe = ContextEncoder(d_v, dims.d_f, dims.d_word, dims.d_e, n_obj,
                                 dims.heads, dims.d_ff, g)
        self.pd = PredicateDecoder(dims.d_e, d_v, dims.d_r, g)

    def object_encode(self, batch, task: str):
        cls_in = batch.classes if task == "predcls" else torch.full_like(batch.classes, self.n_obj)
        return self.oe(batch.visual, batch.boxes, self.word(cls_in))

    def forward(self, batch, task: str = "predcls"):
        """Returns (r per candidate pair, object label logits, object labels used downstream)."""
        f = self.object_encode(batch, task)
        logits = self.pe.label_head(f)
        if task == "predcls":
            labels = batch.classes
        else:
            labels = logits.detach().argmax(dim=-1)
        e = self.pe(batch.visual, f, self.word(labels), batch.obj_pad_idx, batch.obj_pad_mask)
        r = self.pd(e[batch.pair_s], e[batch.pair_o], batch.union)
        return r, logits, labels
