"""Training objectives.

Cross-entropy style losses average over the batch. The head center loss is a
sum over head samples; the contrastive loss is an anchor sum or, optionally,
an anchor mean.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch
from torch import nn

from .numeric import LOG_CLAMP, ContractError, cross_entropy

logger = logging.getLogger(__name__)

CENTER_MOMENTUM = 0.9


def mask_augment(G: torch.Tensor, mask: torch.Tensor, p_m: float,
                 generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace each real token by its image's mean token with probability ``p_m``.

    ``G`` is (B, T, d) padded per image, ``mask`` (B, T) marks real tokens.
    Returns the augmented tensor and the boolean replacement mask.
    """
    if not 0.0 <= p_m <= 1.0:
        raise ContractError(f"mask_augment: p_m must be in [0, 1], got {p_m}")
    m = mask.to(G.dtype).unsqueeze(-1)
    mean = (G * m).sum(dim=1, keepdim=True) / m.sum(dim=1, keepdim=True).clamp_min(1.0)
    draw = torch.rand(mask.shape, generator=generator, dtype=torch.float64) < p_m
    hit = draw & mask
    return torch.where(hit.unsqueeze(-1), mean.expand_as(G), G), hit


def contrastive_loss(q: torch.Tensor, q_aug: torch.Tensor, mask: torch.Tensor,
                     tau: float, reduction: str = "sum") -> torch.Tensor:
    """Self-supervised contrastive loss over the anchors of every image.

    ``q`` and ``q_aug`` are (B, T, d) unit vectors from the two views; the
    positive of ``q[b, k]`` is ``q_aug[b, k]`` and vice versa. Negatives are all
    other real samples of the same image. Images with one relation contribute 0.
    ``reduction="mean"`` divides the anchor sum by the number of real anchors.
    """
    if reduction not in ("sum", "mean"):
        raise ContractError(f"contrastive_loss: reduction must be 'sum' or 'mean', got {reduction!r}")
    if tau <= 0:
        raise ContractError(f"contrastive_loss: tau must be > 0, got {tau}")
    if q.shape != q_aug.shape or q.shape[:2] != mask.shape:
        raise ContractError(
            f"contrastive_loss: views {tuple(q.shape)}/{tuple(q_aug.shape)}, mask {tuple(mask.shape)}")
    B, T, _ = q.shape
    if B == 0 or T == 0:
        return q.sum() * 0.0
    A = torch.cat([q, q_aug], dim=1)                     # (B, 2T, d)
    valid = torch.cat([mask, mask], dim=1)               # (B, 2T)
    sim = A @ A.transpose(1, 2) / tau                    # (B, 2T, 2T)
    eye = torch.eye(2 * T, dtype=torch.bool)
    keep = valid[:, None, :] & ~eye[None]
    # padded anchors see only themselves so their row stays finite
    keep = keep | (~valid[:, :, None] & eye[None])
    sim_masked = sim.masked_fill(~keep, float("-inf"))
    log_denom = torch.logsumexp(sim_masked, dim=-1)      # (B, 2T)
    pos_index = torch.cat([torch.arange(T) + T, torch.arange(T)])
    pos = sim.gather(2, pos_index.view(1, 2 * T, 1).expand(B, 2 * T, 1)).squeeze(-1)
    per_anchor = (log_denom - pos).masked_fill(~valid, 0.0)
    if reduction == "mean":
        return per_anchor.sum() / valid.sum().clamp_min(1)
    return per_anchor.sum()


def contrastive_loss_flat(q_list: torch.Tensor, tau: float) -> torch.Tensor:
    """Single-image form: ``q_list`` is (2m, d) with view one first, then view two."""
    m = q_list.shape[0] // 2
    if m == 0:
        return q_list.sum() * 0.0
    mask = torch.ones(1, m, dtype=torch.bool)
    return contrastive_loss(q_list[:m][None], q_list[m:][None], mask, tau)


class ClassCenters(nn.Module):
    """Running mean feature per head class, kept as buffers (no gradient)."""

    def __init__(self, C: int, dim: int, momentum: float = CENTER_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("centers", torch.zeros(C, dim))
        self.register_buffer("seen", torch.zeros(C, dtype=torch.bool))
        self.register_buffer("head", torch.zeros(C, dtype=torch.bool))

    def set_head(self, head_set) -> None:
        self.head.zero_()
        self.head[torch.as_tensor(list(head_set), dtype=torch.long)] = True

    @torch.no_grad()
    def update(self, feats: torch.Tensor, labels: torch.Tensor) -> None:
        feats = feats.detach().to(self.centers.dtype)
        for k in torch.unique(labels).tolist():
            if not self.head[k]:
                continue
            mean = feats[labels == k].mean(dim=0)
            self.centers[k] = self.momentum * self.centers[k] + (1 - self.momentum) * mean
            self.seen[k] = True


def head_center_loss(r_t: torch.Tensor, labels: torch.Tensor, centers: ClassCenters) -> torch.Tensor:
    """Sum of Euclidean distances from head-class features to their (seen) class center."""
    labels = labels.long()
    use = centers.head[labels] & centers.seen[labels]
    if not bool(use.any()):
        return r_t.sum() * 0.0
    diff = r_t[use] - centers.centers[labels[use]].to(r_t.dtype)
    return torch.linalg.vector_norm(diff, dim=-1).sum()


def reweighted_ce(p_hat: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-w[y] * log p_hat[y]``; probabilities are clamped at 1e-12."""
    if p_hat.shape[0] == 0:
        return p_hat.sum() * 0.0
    labels = labels.long()
    p_y = p_hat.gather(1, labels.unsqueeze(1)).squeeze(1)
    if bool((p_y < LOG_CLAMP).any()):
        logger.warning("reweighted_ce: %d probabilities below clamp", int((p_y < LOG_CLAMP).sum()))
    w = weights.to(p_hat.dtype)[labels]
    return -(w * p_y.clamp_min(LOG_CLAMP).log()).mean()


def hpc_ce(z_h: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(z_h, labels)


def obj_ce(label_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(label_logits, labels)


@dataclass
class LossBundle:
    l_con: torch.Tensor
    l_hc: torch.Tensor
    l_rw: torch.Tensor
    l_hpc: torch.Tensor
    l_obj: torch.Tensor
    lam: float = 1e-4

    @property
    def l_ssl(self) -> torch.Tensor:
        return self.l_con + self.lam * self.l_hc

    @property
    def l_total(self) -> torch.Tensor:
        return total_loss(self, self.lam)

    def as_floats(self) -> dict[str, float]:
        out = {f.name: float(getattr(self, f.name).detach())
               for f in fields(self) if f.name != "lam"}
        out["l_ssl"] = float(self.l_ssl.detach())
        out["l_total"] = float(self.l_total.detach())
        return out


def total_loss(b: LossBundle, lam: float) -> torch.Tensor:
    return (b.l_con + lam * b.l_hc) + b.l_rw + b.l_hpc + b.l_obj
