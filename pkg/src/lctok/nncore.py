"""Differentiation and optimisation substrate.

Reverse-mode gradients come from torch autograd; the Adam update is written
out explicitly so its moments live in a plain, checkpointable state object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch
from torch import nn

from .errors import ContractViolation, TrainingDivergence


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def check_finite(loss: torch.Tensor, what: str = "loss") -> None:
    if not torch.isfinite(loss).all():
        raise TrainingDivergence(f"{what} is not finite: {loss.detach().flatten()[:4].tolist()}")


def grad(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> list[torch.Tensor | None]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Frozen parameters (``requires_grad=False``) get ``None``. Trainable
    parameters the loss does not depend on get zeros.
    """
    params = list(params)
    if loss.numel() != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss)
    trainable = [p for p in params if p.requires_grad]
    if loss.requires_grad and trainable:
        gs = torch.autograd.grad(loss, trainable, allow_unused=True)
    else:
        gs = [None] * len(trainable)
    it = iter(gs)
    out: list[torch.Tensor | None] = []
    for p in params:
        if not p.requires_grad:
            out.append(None)
            continue
        g = next(it)
        out.append(torch.zeros_like(p) if g is None else g)
    return out


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def arrays(self) -> dict[str, torch.Tensor]:
        out = {f"m.{k}": t for k, t in self.m.items()}
        out.update({f"v.{k}": t for k, t in self.v.items()})
        return out

    def meta(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}

    @classmethod
    def from_parts(cls, meta: Mapping, arrays: Mapping[str, torch.Tensor]) -> "OptimizerState":
        st = cls(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                 eps=meta["eps"], step=meta["step"])
        for k, t in arrays.items():
            kind, name = k.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = t
        return st


@torch.no_grad()
def adam_step(params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor | None],
              state: OptimizerState,
              lr: float | None = None) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """One bias-corrected Adam update, applied in place.

    Parameters with ``requires_grad=False`` or a ``None`` gradient are left
    untouched. ``lr`` overrides ``state.lr`` for this step only (schedules).
    """
    if state.step < 0:
        raise ContractViolation("optimizer step must be nonnegative")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None or not p.requires_grad:
            continue
        if g.shape != p.shape:
            raise ContractViolation(
                f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        if not torch.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return params, state


class Adam:
    """Stateful wrapper over :func:`adam_step` for a module's trainable parameters."""

    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.99), eps=1e-8,
                 warmup: int = 0, total_steps: int | None = None, min_lr_frac: float = 0.1):
        self.params = {n: p for n, p in module.named_parameters() if p.requires_grad}
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.warmup = warmup
        self.total_steps = total_steps
        self.min_lr_frac = min_lr_frac

    def current_lr(self) -> float:
        s = self.state.step
        lr = self.state.lr
        if self.warmup and s < self.warmup:
            return lr * (s + 1) / self.warmup
        if self.total_steps:
            frac = min(1.0, (s - self.warmup) / max(1, self.total_steps - self.warmup))
            return lr * (self.min_lr_frac + (1 - self.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))
        return lr

    def step(self, loss: torch.Tensor) -> float:
        names = list(self.params)
        gs = grad(loss, [self.params[n] for n in names])
        adam_step(self.params, dict(zip(names, gs)), self.state, lr=self.current_lr())
        return float(loss.detach())


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def changed_params(module: nn.Module, snap: Mapping[str, torch.Tensor]) -> list[str]:
    """Names whose current value differs bitwise from ``snap``."""
    cur = module.state_dict()
    return [k for k, v in snap.items() if not torch.equal(cur[k], v)]


@dataclass
class TrainResult:
    curve: list[tuple] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    state: "TrainState | None" = None


@dataclass
class TrainState:
    """Everything besides model weights needed to continue a run bit-exactly."""
    step: int
    opt: OptimizerState
    rng: torch.Tensor          # torch.Generator state


def run_steps(total: int, step_fn, opt: Adam, gen: torch.Generator,
              resume: TrainState | None = None, on_checkpoint=None, every: int = 0,
              modules: Mapping[str, nn.Module] | None = None) -> None:
    """Call ``step_fn(step)`` for the remaining steps of a run.

    With ``resume`` the optimizer state and generator state are restored first.
    ``on_checkpoint(TrainState, modules)`` fires every ``every`` completed
    steps (not after the last one; the caller saves the final state).
    """
    start = 0
    if resume is not None:
        opt.state = resume.opt
        gen.set_state(resume.rng)
        start = resume.step
        missing = [n for n in opt.params if n not in opt.state.m and opt.state.step]
        if missing:
            raise ContractViolation(f"resumed optimizer state lacks moments for {missing[:5]}")
    for step in range(start, total):
        step_fn(step)
        done = step + 1
        if on_checkpoint is not None and every and done % every == 0 and done < total:
            on_checkpoint(TrainState(done, opt.state, gen.get_state()), dict(modules or {}))
