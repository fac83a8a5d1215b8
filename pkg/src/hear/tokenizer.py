"""Stage 1: knowledge-distilled Gumbel-Softmax acoustic tokenizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError
from .numerics import AdamW, LrSchedule, lr_at
from .transformer import Encoder, EncoderConfig, make_config

VOCAB_SIZE = 1024
CODE_DIM = 32


@dataclass(frozen=True)
class TemperatureSchedule:
    tau0: float = 2.0
    decay: float = 0.999995
    floor: float = 0.5

    def __call__(self, step: int) -> float:
        return tau_at(step, self)

    def floor_step(self) -> int:
        """First step at which the floor is reached."""
        return math.ceil(math.log(self.floor / self.tau0) / math.log(self.decay))


def tau_at(step: int, schedule: TemperatureSchedule = TemperatureSchedule()) -> float:
    if step < 0:
        raise ConfigError("step must be >= 0")
    return max(schedule.floor, schedule.tau0 * schedule.decay**step)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.3  # reconstruction
    beta: float = 0.7  # distillation
    gamma: float = 0.1  # diversity


@dataclass
class QuantizerOutput:
    probs: torch.Tensor  # (..., V) Gumbel-softmax sample (or plain softmax when noise is off)
    hard_index: torch.Tensor  # (...,)
    quantized: torch.Tensor  # (..., code_dim)
    logit_probs: torch.Tensor  # softmax(logits), the noise-free assignment distribution
    gumbel: torch.Tensor | None  # the noise that was added, for replay


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def gumbel_quantize(
    logits: torch.Tensor,
    codebook: torch.Tensor,
    tau: float,
    generator: torch.Generator | None = None,
    hard: bool = False,
    noise: bool | torch.Tensor = True,
) -> QuantizerOutput:
    """Gumbel-Softmax quantisation of (..., V) logits against a (V, code_dim) codebook.

    ``noise`` may be a pre-drawn Gumbel tensor (for replay), True to draw from
    ``generator``, or False for the deterministic path. With ``hard`` the
    forward value is the one-hot argmax and gradients follow the soft sample.
    """
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite quantizer logits")
    if isinstance(noise, torch.Tensor):
        g = noise.to(logits.dtype)
    elif noise:
        g = sample_gumbel(logits.shape, generator, logits.dtype)
    else:
        g = None
    perturbed = logits if g is None else logits + g
    soft = F.softmax(perturbed / tau, dim=-1)
    index = soft.argmax(dim=-1)
    if hard:
        one_hot = F.one_hot(index, logits.shape[-1]).to(soft.dtype)
        weights = one_hot - soft.detach() + soft
    else:
        weights = soft
    return QuantizerOutput(
        probs=soft,
        hard_index=index,
        quantized=weights @ codebook,
        logit_probs=F.softmax(logits, dim=-1),
        gumbel=g,
    )


# -- losses ---------------------------------------------------------------


def _masked_mean(x: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    if valid is None:
        return x.mean()
    w = valid.to(x.dtype)
    return (x * w).sum() / w.sum().clamp_min(1.0)


def reconstruction_loss(reconstructed, original, valid=None) -> torch.Tensor:
    """Mean squared error over all (valid) elements."""
    if reconstructed.shape != original.shape:
        raise ConfigError(f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(original.shape)}")
    per_token = ((reconstructed - original) ** 2).mean(dim=-1)
    return _masked_mean(per_token, valid)


def diversity_loss(probs: torch.Tensor, valid=None) -> torch.Tensor:
    """Mean over codes of (batch-mean assignment probability - 1/V)^2."""
    V = probs.shape[-1]
    flat = probs.reshape(-1, V)
    if valid is not None:
        w = valid.reshape(-1, 1).to(probs.dtype)
        mean_p = (flat * w).sum(0) / w.sum().clamp_min(1.0)
    else:
        mean_p = flat.mean(0)
    return ((mean_p - 1.0 / V) ** 2).mean()


def distillation_loss(decoder_out, teacher_out, proj=None, valid=None, eps: float = 1e-8) -> torch.Tensor:
    """1 - mean cosine similarity between projected decoder features and teacher features."""
    student = proj(decoder_out) if proj is not None else decoder_out
    if student.shape[:-1] != teacher_out.shape[:-1]:
        raise ConfigError("decoder and teacher sequences are not time-aligned")
    if student.shape[-1] != teacher_out.shape[-1]:
        raise ConfigError("projection does not map decoder width onto teacher width")
    num = (student * teacher_out).sum(-1)
    den = student.norm(dim=-1).clamp_min(eps) * teacher_out.norm(dim=-1).clamp_min(eps)
    return 1.0 - _masked_mean(num / den, valid)


@dataclass
class TokenizerLosses:
    rec: torch.Tensor
    distill: torch.Tensor
    div: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def as_floats(self) -> dict[str, float]:
        return {
            "L_rec": self.rec.item(),
            "L_distill": self.distill.item(),
            "L_div": self.div.item(),
            "L_total": self.total.item(),
        }


def combine_losses(rec, distill, div, weights: LossWeights = LossWeights()) -> TokenizerLosses:
    total = weights.alpha * rec + weights.beta * distill + weights.gamma * div
    return TokenizerLosses(rec, distill, div, total, weights)


# -- models ---------------------------------------------------------------


class Teacher(Protocol):
    out_dim: int

    def __call__(self, patches: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor: ...


class RandomTeacher(nn.Module):
    """Frozen, randomly initialised encoder standing in for a pre-trained teacher."""

    def __init__(self, cfg: EncoderConfig, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg)
        self.out_dim = cfg.hidden
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, patches, pad_mask=None):
        return self.encoder(patches, pad_mask)


def default_teacher_config(input_width: int = 256, max_relative_distance: int = 64) -> EncoderConfig:
    return EncoderConfig(192, 768, 4, 2, max_relative_distance, input_width)


@dataclass
class TokenizerForward:
    quant: QuantizerOutput
    reconstruction: torch.Tensor
    decoder_hidden: torch.Tensor


class AcousticTokenizer(nn.Module):
    """Encoder -> V logits -> Gumbel-Softmax over a V x code_dim codebook -> Decoder.

    The decoder hidden states feed both the patch reconstruction head and the
    projection onto the teacher's feature width.
    """

    def __init__(
        self,
        patch_width: int = 256,
        teacher_dim: int = 192,
        vocab_size: int = VOCAB_SIZE,
        code_dim: int = CODE_DIM,
        encoder_cfg: EncoderConfig | None = None,
        decoder_cfg: EncoderConfig | None = None,
    ):
        super().__init__()
        encoder_cfg = encoder_cfg or make_config("tokenizer", input_width=patch_width)
        decoder_cfg = decoder_cfg or make_config("decoder", input_width=code_dim)
        if encoder_cfg.input_width != patch_width or decoder_cfg.input_width != code_dim:
            raise ConfigError("tokenizer/decoder input widths do not match patch width / code dim")
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.encoder = Encoder(encoder_cfg)
        self.to_logits = nn.Linear(encoder_cfg.hidden, vocab_size)
        self.codebook = nn.Parameter(torch.empty(vocab_size, code_dim))
        self.decoder = Encoder(decoder_cfg)
        self.reconstruct = nn.Linear(decoder_cfg.hidden, patch_width)
        self.distill_proj = nn.Linear(decoder_cfg.hidden, teacher_dim)
        nn.init.normal_(self.codebook, std=1.0)
        for lin in (self.to_logits, self.reconstruct, self.distill_proj):
            nn.init.trunc_normal_(lin.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(lin.bias)

    def logits(self, patches, pad_mask=None):
        return self.to_logits(self.encoder(patches, pad_mask))

    def forward(self, patches, pad_mask=None, tau=2.0, generator=None, hard=False, noise=True) -> TokenizerForward:
        q = gumbel_quantize(self.logits(patches, pad_mask), self.codebook, tau, generator, hard, noise)
        hidden = self.decoder(q.quantized, pad_mask)
        return TokenizerForward(q, self.reconstruct(hidden), hidden)

    @torch.no_grad()
    def tokenize(self, patches, pad_mask=None) -> torch.Tensor:
        """Deterministic hard token indices (no Gumbel noise)."""
        return self.logits(patches, pad_mask).argmax(dim=-1)


def tokenize(patches, tokenizer: AcousticTokenizer, pad_mask=None) -> torch.Tensor:
    return tokenizer.tokenize(patches, pad_mask)


def tokenizer_losses(
    model: AcousticTokenizer,
    teacher,
    patches: torch.Tensor,
    pad_mask: torch.Tensor | None = None,
    tau: float = 2.0,
    weights: LossWeights = LossWeights(),
    generator: torch.Generator | None = None,
    hard: bool = False,
    noise: bool | torch.Tensor = True,
) -> TokenizerLosses:
    valid = None if pad_mask is None else ~pad_mask
    out = model(patches, pad_mask, tau, generator, hard, noise)
    with torch.no_grad():
        target = teacher(patches, pad_mask)
    rec = reconstruction_loss(out.reconstruction, patches, valid)
    distill = distillation_loss(out.decoder_hidden, target, model.distill_proj, valid)
    div = diversity_loss(out.quant.logit_probs, valid)
    return combine_losses(rec, distill, div, weights)


def tokenizer_train_step(
    patches: torch.Tensor,
    pad_mask: torch.Tensor | None,
    model: AcousticTokenizer,
    teacher,
    opt: AdamW,
    schedule: LrSchedule,
    step: int,
    weights: LossWeights = LossWeights(),
    temperature: TemperatureSchedule = TemperatureSchedule(),
    generator: torch.Generator | None = None,
) -> dict[str, float]:
    """One optimisation step on the weighted reconstruction/distillation/diversity objective.

    Soft Gumbel mixtures are used while the temperature is annealing; once it
    sits on its floor the quantiser switches to straight-through hard codes.
    """
    tau = tau_at(step, temperature)
    hard = tau <= temperature.floor
    rate = lr_at(schedule, min(step, schedule.total_steps))
    model.train()
    losses = tokenizer_losses(model, teacher, patches, pad_mask, tau, weights, generator, hard)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite tokenizer loss at step {step}: {losses.as_floats()}")
    opt.zero_grad()
    losses.total.backward()
    opt.step(rate)
    return {"step": step, **losses.as_floats(), "lr": rate, "tau": tau}


def codebook_entropy(indices: torch.Tensor, vocab_size: int) -> float:
    """Entropy (nats) of the empirical code-usage histogram."""
    counts = torch.bincount(indices.reshape(-1), minlength=vocab_size).double()
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * p.log()).sum())
