"""Head-prefer and tail-prefer branches and their gated cooperation."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .numeric import Embedding, EncoderLayer, Linear, MLP, concat, softmax


def hp_classify(r: torch.Tensor, hpc: Linear) -> torch.Tensor:
    return hpc(r)


def tp_classify(r_t: torch.Tensor, tpc: Linear) -> torch.Tensor:
    return tpc(r_t)


def semantic_rep(z_h: torch.Tensor, subj_label: torch.Tensor, obj_label: torch.Tensor,
                 word: Embedding, pred_word: Embedding) -> torch.Tensor:
    """s = [emb(subj), sum_k softmax(z_h)_k * pred_emb[k], emb(obj)]."""
    return concat([word(subj_label), pred_word.mix(softmax(z_h)), word(obj_label)])


def cooperate(z_h: torch.Tensor, z_t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """z_o = softmax(z_h) * sigmoid(c) + softmax(z_t) * (1 - sigmoid(c)), per class."""
    gate = torch.sigmoid(c)
    return softmax(z_h) * gate + softmax(z_t) * (1 - gate)


def init_gate(counts) -> np.ndarray:
    """c_i = ln(max(n_i, 1))."""
    return np.log(np.maximum(np.asarray(counts, dtype=np.float64), 1.0))


class TailPreferEncoder(nn.Module):
    """Stacked encoder blocks over the relation tokens of each image.

    Tokens are ``g = MLP([r, s])``; without encoder blocks (``layers=0``) the
    output is just the final projection of ``g``.
    """

    def __init__(self, d_r: int, d_s: int, d_model: int, heads: int, d_ff: int,
                 layers: int, g: torch.Generator):
        super().__init__()
        self.token = MLP(d_r + d_s, d_model, d_model, g)
        self.layers = nn.ModuleList(EncoderLayer(d_model, heads, d_ff, g) for _ in range(layers))
        self.out = Linear(d_model, d_r, g)

    def tokens(self, r: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return self.token(concat([r, s]))

    def encode(self, tokens: torch.Tensor, pad_idx: torch.Tensor, pad_mask: torch.Tensor,
               use_layers: bool = True) -> torch.Tensor:
        """Flat tokens (P, d_model) -> flat tail-prefer features (P, d_r)."""
        if tokens.shape[0] == 0:
            return tokens.new_zeros((0, self.out.d_out))
        if use_layers and len(self.layers):
            x = tokens[pad_idx]
            for layer in self.layers:
                x = layer(x, pad_mask)
            tokens = x[pad_mask]
        return self.out(tokens)


class HTCLHead(nn.Module):
    def __init__(self, dims, C: int, word: Embedding, tpfe_layers: int, g: torch.Generator):
        super().__init__()
        self.C = C
        self.hpc = Linear(dims.d_r, C, g)
        self.pred_word = Embedding(C, dims.d_word, g)
        self.tpfe = TailPreferEncoder(dims.d_r, 3 * dims.d_word, dims.d_model, dims.heads,
                                      dims.d_ff, tpfe_layers, g)
        self.tpc = Linear(dims.d_r, C, g)
        self.gate_logit = nn.Parameter(torch.zeros(C))
        self._word = [word]   # shared with the feature pipeline; not re-registered

    def set_gate(self, counts) -> None:
        with torch.no_grad():
            self.gate_logit.copy_(torch.as_tensor(init_gate(counts), dtype=self.gate_logit.dtype))

    @property
    def gate(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logit)

    def semantic(self, z_h, subj_label, obj_label):
        return semantic_rep(z_h, subj_label, obj_label, self._word[0], self.pred_word)
