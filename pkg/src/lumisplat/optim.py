"""Adam with cosine learning-rate decay over named parameter dicts.

Parameters live in plain {name: tensor} dicts rather than modules, so the
freeze contract is a name set: frozen entries keep their bits and their
moment buffers untouched.  A step with any non-finite gradient is rejected
as a whole and reported, leaving every parameter and moment unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int
    lr0: float
    horizon: int

    def __post_init__(self) -> None:
        if self.lr0 <= 0 or self.horizon < 1 or self.step < 0:
            raise ValueError("need lr0 > 0, horizon >= 1, step >= 0")


def init_optim(params: dict[str, torch.Tensor], lr: float = 1.5e-4,
               horizon: int = 12000) -> OptimState:
    return OptimState(m={k: torch.zeros_like(p) for k, p in params.items()},
                      v={k: torch.zeros_like(p) for k, p in params.items()},
                      step=0, lr0=lr, horizon=horizon)


def cosine_lr(state: OptimState) -> float:
    t = min(state.step, state.horizon)
    return state.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / state.horizon))


def adam_step(state: OptimState, params: dict[str, torch.Tensor],
              grads: dict[str, torch.Tensor | None],
              frozen: frozenset[str] | set[str] = frozenset()) -> list[str]:
    """Apply one update in place; returns the names of offending gradients
    when the step is rejected (empty list = applied)."""
    bad = [name for name, g in grads.items()
           if g is not None and not bool(torch.isfinite(g).all())]
    if bad:
        return bad
    lr = cosine_lr(state)
    t = state.step + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    with torch.no_grad():
        for name, p in params.items():
            if name in frozen:
                continue
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
            v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + EPS))
    state.step += 1
    return []
