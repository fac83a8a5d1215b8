"""Stage 2: masked audio modelling against frozen tokenizer targets."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FrozenContractError, NumericError
from .numerics import AdamW, LrSchedule, lr_at
from .tokenizer import VOCAB_SIZE, AcousticTokenizer
from .transformer import Encoder, EncoderConfig, make_config

log = logging.getLogger(__name__)

MASK_RATIO = 0.40


@dataclass
class MaskPlan:
    indices: torch.Tensor  # sorted, unique, int64
    n: int
    ratio: float = MASK_RATIO

    def as_bool(self) -> torch.Tensor:
        m = torch.zeros(self.n, dtype=torch.bool)
        m[self.indices] = True
        return m


def mask_count(n: int, ratio: float = MASK_RATIO) -> int:
    # round half away from zero, so 0.4 * N never depends on banker's rounding
    return int(ratio * n + 0.5)


def sample_mask(n: int, generator: torch.Generator | None = None, ratio: float = MASK_RATIO, bernoulli: bool = False) -> MaskPlan:
    """Unstructured random masking: exactly round(ratio * n) positions, or per-position Bernoulli."""
    if n < 1:
        raise ConfigError("cannot mask an empty sequence")
    if bernoulli:
        hit = torch.rand(n, generator=generator) < ratio
        idx = hit.nonzero().flatten()
    else:
        idx = torch.randperm(n, generator=generator)[: mask_count(n, ratio)]
    return MaskPlan(idx.sort().values, n, ratio)


def apply_mask(patches: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Zero the masked patch vectors; everything else is copied bit-for-bit."""
    if patches.shape[0] != plan.n:
        raise ConfigError(f"plan covers {plan.n} tokens, patches have {patches.shape[0]}")
    if len(plan.indices) and (plan.indices.min() < 0 or plan.indices.max() >= plan.n):
        raise ConfigError("mask index out of range")
    out = patches.clone()
    out[plan.indices] = 0.0
    return out


def mam_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over masked positions; callers pass only the masked rows."""
    if logits.shape[0] == 0:
        warnings.warn("empty mask: MAM loss defined as 0", RuntimeWarning)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets)


class MaskedAcousticModel(nn.Module):
    """Acoustic encoder plus a linear head predicting tokenizer indices at every position."""

    def __init__(self, encoder_cfg: EncoderConfig | None = None, vocab_size: int = VOCAB_SIZE):
        super().__init__()
        self.encoder = Encoder(encoder_cfg or make_config("acoustic"))
        self.head = nn.Linear(self.encoder.cfg.hidden, vocab_size)
        nn.init.trunc_normal_(self.head.weight, std=0.02, a=-0.04, b=0.04)
        nn.init.zeros_(self.head.bias)

    def forward(self, patches, pad_mask=None):
        return self.head(self.encoder(patches, pad_mask))


@dataclass
class MamBatch:
    corrupted: torch.Tensor  # (B, N, D)
    targets: torch.Tensor  # (B, N)
    masked: torch.Tensor  # (B, N) bool, never True on padding
    pad_mask: torch.Tensor | None


def make_mam_batch(
    patches: torch.Tensor,
    pad_mask: torch.Tensor | None,
    tokenizer: AcousticTokenizer,
    generator: torch.Generator | None = None,
    ratio: float = MASK_RATIO,
    bernoulli: bool = False,
) -> MamBatch:
    targets = tokenizer.tokenize(patches, pad_mask)
    b, n, _ = patches.shape
    lengths = [n] * b if pad_mask is None else (~pad_mask).sum(1).tolist()
    corrupted = patches.clone()
    masked = torch.zeros(b, n, dtype=torch.bool)
    for i, length in enumerate(lengths):
        plan = sample_mask(int(length), generator, ratio, bernoulli)
        corrupted[i, : int(length)] = apply_mask(patches[i, : int(length)], plan)
        masked[i, plan.indices] = True
    return MamBatch(corrupted, targets, masked, pad_mask)


def check_frozen(module: nn.Module) -> float:
    """Sum of |grad| over a module that must not learn; raises if it is not exactly zero."""
    total = 0.0
    for name, p in module.named_parameters():
        if p.grad is not None:
            total += p.grad.abs().sum().item()
            if total != 0.0:
                raise FrozenContractError(f"frozen parameter {name} received a gradient")
    return total


def pretrain_step(
    patches: torch.Tensor,
    pad_mask: torch.Tensor | None,
    model: MaskedAcousticModel,
    tokenizer: AcousticTokenizer,
    opt: AdamW,
    schedule: LrSchedule,
    step: int,
    generator: torch.Generator | None = None,
    ratio: float = MASK_RATIO,
    bernoulli: bool = False,
) -> dict[str, float]:
    """Tokenise -> mask -> encode corrupted patches -> CE at masked positions -> AdamW."""
    tokenizer.eval()
    batch = make_mam_batch(patches, pad_mask, tokenizer, generator, ratio, bernoulli)
    model.train()
    logits = model(batch.corrupted, pad_mask)
    sel = batch.masked
    loss = mam_loss(logits[sel], batch.targets[sel])
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite MAM loss at step {step}")
    rate = lr_at(schedule, min(step, schedule.total_steps))
    opt.zero_grad()
    loss.backward()
    frozen_grad = check_frozen(tokenizer)
    opt.step(rate)
    with torch.no_grad():
        n_masked = int(sel.sum())
        acc = (logits[sel].argmax(-1) == batch.targets[sel]).double().mean().item() if n_masked else 0.0
    return {
        "step": step,
        "loss": loss.item(),
        "lr": rate,
        "masked_acc": acc,
        "n_masked": n_masked,
        "tokenizer_grad_abs_sum": frozen_grad,
    }
