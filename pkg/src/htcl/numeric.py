"""Differentiable building blocks, Adam, finite-difference checking and checkpoints.

Tensors and reverse-mode differentiation come from torch. Everything layered on
top (the layers, the parameter store, the optimizer, the gradient checker and the
checkpoint format) lives here so the rest of the package only talks to this module.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

CHECK_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32
LOG_CLAMP = 1e-12
LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "htcl-checkpoint"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """An operation received inputs that violate its shape or value contract."""


class BackwardError(RuntimeError):
    pass


class NondeterministicFunctionError(RuntimeError):
    pass


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def _check_last_dim(op: str, x: torch.Tensor, expected: int) -> None:
    if x.shape[-1] != expected:
        raise ContractError(f"{op}: expected last dim {expected}, got shape {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# functional ops

def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    norm = (x * x).sum(dim=dim, keepdim=True).clamp_min(eps * eps).sqrt()
    return x / norm


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the rows of ``logits``."""
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ContractError(
            f"cross_entropy: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    logp = log_softmax(logits, dim=-1)
    return -logp.gather(1, labels.long().unsqueeze(1)).mean()


_relu_trace: list[torch.Tensor] | None = None


def relu(x: torch.Tensor) -> torch.Tensor:
    """ReLU that records its activation pattern while a trace is open."""
    if _relu_trace is not None:
        _relu_trace.append((x > 0).detach().reshape(-1))
    return torch.relu(x)


@contextmanager
def trace_relu():
    """Collect the on/off pattern of every ``relu`` call made inside the block."""
    global _relu_trace
    outer, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = outer


def concat(tensors: Iterable[torch.Tensor], dim: int = -1) -> torch.Tensor:
    tensors = list(tensors)
    lead = {tuple(t.shape[:-1]) for t in tensors} if dim in (-1,) else None
    if lead is not None and len(lead) > 1:
        raise ContractError(f"concat: leading shapes differ {sorted(lead)}")
    return torch.cat(tensors, dim=dim)


def masked_mean(x: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    """Mean of ``x`` over ``dim`` counting only positions where ``mask`` is true."""
    m = mask.to(x.dtype).unsqueeze(-1)
    total = (x * m).sum(dim=dim, keepdim=True)
    count = m.sum(dim=dim, keepdim=True).clamp_min(1.0)
    return total / count


# ---------------------------------------------------------------------------
# layers

class Linear(nn.Module):
    """Affine map with fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        bound = 1.0 / math.sqrt(d_in)
        w = (torch.rand(d_out, d_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.weight = nn.Parameter(w.to(TRAIN_DTYPE))
        if bias:
            b = (torch.rand(d_out, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            self.bias = nn.Parameter(b.to(TRAIN_DTYPE))
        else:
            self.register_parameter("bias", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim("linear", x, self.d_in)
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(nn.Module):
    """Two affine maps with a ReLU between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, generator: torch.Generator):
        super().__init__()
        self.fc1 = Linear(d_in, d_hidden, generator)
        self.fc2 = Linear(d_hidden, d_out, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(relu(self.fc1(x)))


class Embedding(nn.Module):
    def __init__(self, num: int, dim: int, generator: torch.Generator):
        super().__init__()
        w = torch.randn(num, dim, generator=generator, dtype=torch.float64) * 0.02
        self.weight = nn.Parameter(w.to(TRAIN_DTYPE))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        idx = idx.long()
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.weight.shape[0]):
            raise ContractError(
                f"embedding: index out of range [0, {self.weight.shape[0]})")
        return self.weight[idx]

    def mix(self, probs: torch.Tensor) -> torch.Tensor:
        """Probability-weighted sum of table rows, ``probs @ table``."""
        _check_last_dim("embedding.mix", probs, self.weight.shape[0])
        return probs @ self.weight


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.gain = nn.Parameter(torch.ones(dim, dtype=TRAIN_DTYPE))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=TRAIN_DTYPE))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        _check_last_dim("layer_norm", x, self.dim)
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.normalize(x) * self.gain + self.shift


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over padded token sets.

    ``x`` is (batch, tokens, dim); ``mask`` (batch, tokens) marks real tokens.
    Padded keys receive no attention, padded queries produce garbage that the
    caller must ignore. No positional encoding is added anywhere.
    """

    def __init__(self, dim: int, heads: int, generator: torch.Generator):
        super().__init__()
        if dim % heads:
            raise ContractError(f"attention: dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, generator)
        self.k = Linear(dim, dim, generator)
        self.v = Linear(dim, dim, generator)
        self.out = Linear(dim, dim, generator)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.ndim != 3:
            raise ContractError(f"attention: expected (batch, tokens, dim), got {tuple(x.shape)}")
        _check_last_dim("attention", x, self.dim)
        b, t, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        if mask is not None:
            if mask.shape != (b, t):
                raise ContractError(f"attention: mask {tuple(mask.shape)} vs tokens {(b, t)}")
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
            # a fully padded row would be all -inf; give it a harmless finite row
            scores = scores.masked_fill(~mask[:, None, :, None], 0.0)
        attn = softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, self.dim)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, d_ff: int, generator: torch.Generator):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads, generator)
        self.norm1 = LayerNorm(dim)
        self.ff = MLP(dim, d_ff, dim, generator)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ff(x))


# ---------------------------------------------------------------------------
# parameters and optimisation

class ParamStore:
    """Named view over a module's parameters with gradient slots and a step counter."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.step = 0
        self._pending = False

    @property
    def params(self) -> dict[str, nn.Parameter]:
        return dict(self.module.named_parameters())

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                for n, p in self.module.named_parameters()}

    def backward(self, loss: torch.Tensor) -> None:
        if loss.ndim != 0:
            raise ContractError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
        if self._pending:
            raise BackwardError("backward called twice without zero_grad/step")
        for p in self.module.parameters():
            p.grad = None
        loss.backward()
        for p in self.module.parameters():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self._pending = True

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None
        self._pending = False


class Adam:
    """Adam with bias correction. ``step`` applies the update and clears gradients."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, only: Iterable[str] | None = None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.only = set(only) if only is not None else None
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t = 0

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.store.module.named_parameters():
            if self.only is not None and name not in self.only:
                continue
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, torch.zeros_like(p))
            v = self.v.setdefault(name, torch.zeros_like(p))
            m.mul_(self.b1).add_(g, alpha=1 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))
        self.store.zero_grad()
        self.store.step += 1


def optimizer_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    failing: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)
    per_tensor: dict[str, float] = field(default_factory=dict)
    kinks: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failing


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _traced(f: Callable[[], torch.Tensor]) -> tuple[float, torch.Tensor]:
    with torch.no_grad(), trace_relu() as trace:
        value = float(f())
    pattern = torch.cat(trace) if trace else torch.zeros(0, dtype=torch.bool)
    return value, pattern


def grad_check(f: Callable[[], torch.Tensor], params: dict[str, torch.Tensor],
               step: float = 1e-5, tol: float = 1e-4, max_entries: int = 100,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` must rebuild its computation from scratch on every call, including any
    random draws. Up to ``max_entries`` entries per tensor are probed (all of them
    when the tensor is smaller). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor')`` where ``floor'`` is ``floor`` raised to
    the roundoff level of the difference quotient, ``8 eps |f| / step / tol``.

    An entry whose +-step perturbation flips any ``relu`` on or off straddles a
    kink where the difference quotient is meaningless; it is listed in
    ``kinks`` and not scored.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ContractError(f"grad_check: {name} must be float64, got {p.dtype}")
    base1, pattern = _traced(f)
    base2, _ = _traced(f)
    if base1 != base2 and not (math.isnan(base1) and math.isnan(base2)):
        raise NondeterministicFunctionError(
            f"f returned {base1!r} then {base2!r} for identical parameters")
    noise = 8 * np.finfo(np.float64).eps * abs(base1) / step
    floor = max(floor, noise / tol)

    for p in params.values():
        p.grad = None
    loss = f()
    tensors = list(params.values())
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, checked=0, floor=floor)
    for (name, p), g in zip(params.items(), analytic):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            i = int(i)
            orig = float(flat[i])
            flat[i] = orig + step
            fp, pat_p = _traced(f)
            flat[i] = orig - step
            fm, pat_m = _traced(f)
            flat[i] = orig
            where = tuple(int(j) for j in np.unravel_index(i, tuple(p.shape)))
            if not (torch.equal(pat_p, pattern) and torch.equal(pat_m, pattern)):
                report.kinks.append((name, where))
                continue
            num = (fp - fm) / (2 * step)
            ana = float(gflat[i])
            err = _rel_err(ana, num, floor)
            worst = max(worst, err)
            report.checked += 1
            if not err <= tol:
                report.failing.append((name, where, ana, num, err))
        report.per_tensor[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# ---------------------------------------------------------------------------
# checkpoints

def state_to_json(module: nn.Module) -> dict:
    out = {}
    for name, t in module.state_dict().items():
        t = t.detach().cpu()
        out[name] = {
            "shape": list(t.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "values": t.reshape(-1).tolist(),
        }
    return out


def state_from_json(entries: dict) -> dict[str, torch.Tensor]:
    state = {}
    for name, e in entries.items():
        dtype = getattr(torch, e["dtype"])
        values = torch.tensor(e["values"], dtype=torch.float64 if dtype.is_floating_point else dtype)
        if values.numel() != math.prod(e["shape"]):
            raise ContractError(f"checkpoint: {name} has {values.numel()} values for shape {e['shape']}")
        state[name] = values.to(dtype).reshape(e["shape"])
    return state


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta, "params": state_to_json(module)}
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path}: not an htcl checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc["meta"], state_from_json(doc["params"])
