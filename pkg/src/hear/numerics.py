"""Optimisation core: learning-rate schedule, AdamW, and a finite-difference gradient oracle.

Tensors and reverse-mode differentiation come from torch; everything that
decides how parameters move (the schedule and the optimiser update) and the
independent gradient check lives here.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch

from .errors import ConfigError, NumericError

log = logging.getLogger(__name__)


def set_deterministic(seed: int | None = None, threads: int = 1) -> None:
    """Pin thread count and deterministic kernels so identical runs produce identical bits."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


@dataclass(frozen=True)
class LrSchedule:
    peak_rate: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError(f"invalid schedule lengths {self.warmup_steps}/{self.total_steps}")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )
        if self.peak_rate < 0:
            raise ConfigError("peak_rate must be non-negative")


class ScheduleOverrun(UserWarning):
    pass


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warm-up to the peak rate, then half-cosine decay to exactly zero at total_steps.

    Steps past the end of the schedule return 0.0 and emit a ScheduleOverrun warning.
    """
    if step < 0:
        raise ConfigError(f"negative step {step}")
    peak, warm, total = schedule.peak_rate, schedule.warmup_steps, schedule.total_steps
    if step > total:
        warnings.warn(f"step {step} beyond schedule end {total}; rate clamped to 0", ScheduleOverrun)
        return 0.0
    if step < warm:
        return peak * step / warm
    progress = (step - warm) / (total - warm)
    if progress >= 1.0:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW moments keyed by parameter name, plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, t in self.exp_avg.items():
            out[f"m.{name}"] = t
        for name, t in self.exp_avg_sq.items():
            out[f"v.{name}"] = t
        return out

    def hyperparams(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }

    @classmethod
    def from_parts(cls, hyper: Mapping, tensors: Mapping[str, torch.Tensor]) -> "OptimizerState":
        state = cls(**hyper)
        for key, t in tensors.items():
            kind, name = key.split(".", 1)
            (state.exp_avg if kind == "m" else state.exp_avg_sq)[name] = t.clone()
        return state


@torch.no_grad()
def adamw_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
    rate: float,
) -> OptimizerState:
    """Apply one AdamW update in place (decoupled weight decay, bias-corrected moments).

    Every gradient is checked before any parameter moves; a non-finite element
    aborts the whole step with the offending parameter's name.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise NumericError(f"gradient shape {tuple(g.shape)} != parameter shape for {name}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}; step aborted")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if state.weight_decay:
            p.mul_(1.0 - rate * state.weight_decay)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-rate / bias1)
    return state


class AdamW:
    """Stateful wrapper binding adamw_step to a set of named trainable parameters."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, torch.nn.Parameter]],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.state = OptimizerState(beta1, beta2, eps, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, rate: float) -> None:
        adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state, rate)


def _flat_view(t: torch.Tensor) -> torch.Tensor:
    return t.data.view(-1)


def _central_difference(loss_fn, flat, c, eps, pi) -> float:
    orig = flat[c].item()
    with torch.no_grad():
        flat[c] = orig + eps
        up = loss_fn().item()
        flat[c] = orig - eps
        down = loss_fn().item()
        flat[c] = orig
    if not (math.isfinite(up) and math.isfinite(down)):
        raise NumericError(f"loss non-finite when perturbing param {pi} coordinate {c}")
    return (up - down) / (2 * eps)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
    max_coords: int = 512,
    seed: int = 0,
    richardson: bool = True,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` is a closure over ``params`` (float64 leaves with
    requires_grad) returning a scalar. At most ``max_coords`` coordinates per
    parameter are probed, sampled without replacement.

    With ``richardson`` the step-eps and step-eps/2 central differences are
    combined, cancelling the eps^2 truncation term. That lets eps stay large
    enough to keep round-off negligible on coordinates whose gradient is tiny.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps {eps} outside [1e-6, 1e-3]")
    for p in params:
        if p.dtype != torch.float64:
            raise ConfigError("grad_check requires float64 parameters")

    loss = loss_fn()
    if loss.numel() != 1:
        raise ConfigError("loss_fn must return a scalar")
    analytic = torch.autograd.grad(loss, list(params), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)

    worst = 0.0
    for pi, (p, a) in enumerate(zip(params, analytic)):
        a = torch.zeros_like(p) if a is None else a
        flat = _flat_view(p)
        n = flat.numel()
        coords = torch.arange(n) if n <= max_coords else torch.randperm(n, generator=gen)[:max_coords]
        a_flat = a.reshape(-1)
        for c in coords.tolist():
            numeric = _central_difference(loss_fn, flat, c, eps, pi)
            if richardson:
                half = _central_difference(loss_fn, flat, c, eps / 2, pi)
                numeric = (4 * half - numeric) / 3
            an = a_flat[c].item()
            err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
