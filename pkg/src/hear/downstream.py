"""Stage 3: chunked acoustic encoding, cross-fade merge, spectrum gating, task model and classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .frontend import ChunkLayout, FrontendConfig, Waveform, extract_features, layout_chunks
from .numerics import AdamW, LrSchedule, lr_at
from .transformer import Encoder, EncoderConfig, make_config

log = logging.getLogger(__name__)


class FineTuneMode(str, Enum):
    BASE = "base"
    SCRATCH = "scratch"
    NO_SPECTRUM = "no_spectrum"
    TRANSFER = "transfer"


@dataclass(frozen=True)
class Preset:
    batch_size: int
    lr: float
    epochs: int


PRESETS = {
    "ESC-50": Preset(16, 2e-4, 80),
    "GSCv1": Preset(64, 3e-4, 30),
    "GSCv2": Preset(64, 3e-4, 30),
    "VoxCeleb": Preset(16, 1e-4, 15),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- cross-fade -----------------------------------------------------------


def fade_in_weights(length: int, dtype=torch.float64) -> torch.Tensor:
    """w(u) = (1 - cos(pi u)) / 2 sampled at token centres u = (t + 0.5) / length.

    cos(pi u) is evaluated as sin(pi (1/2 - u)) so the midpoint weight is exactly
    0.5 and w(u) + w(1 - u) = 1 holds bit-exactly (sin is odd in floating point).
    """
    # 1/2 - u = (length - 2t - 1) / (2 length): integer numerator, exactly antisymmetric
    half_minus_u = (length - 1 - 2 * torch.arange(length, dtype=torch.float64)) / (2 * length)
    return ((1.0 - torch.sin(math.pi * half_minus_u)) / 2.0).to(dtype)


def crossfade_merge(chunk_features: Sequence[torch.Tensor], layout: ChunkLayout) -> torch.Tensor:
    """Stitch per-chunk (n_i, d) features into one (T, d) sequence.

    Inside each overlap the result is prev + w * (next - prev), so chunks that
    already agree pass through unchanged.
    """
    if len(chunk_features) != len(layout.bounds):
        raise ConfigError(f"{len(chunk_features)} chunk features for {len(layout.bounds)} chunks")
    for f, (s, e) in zip(chunk_features, layout.bounds):
        if f.shape[0] != e - s:
            raise ConfigError(f"chunk [{s},{e}) has {f.shape[0]} feature rows")
    pieces = []
    cursor = 0  # first token not yet emitted
    for i, (f, (s, e)) in enumerate(zip(chunk_features, layout.bounds)):
        if i + 1 < len(layout.bounds):
            ns, _ = layout.bounds[i + 1]
            overlap = e - ns
            if overlap <= 0:
                raise ConfigError("adjacent chunks do not overlap")
            nxt = chunk_features[i + 1]
            pieces.append(f[cursor - s : ns - s])
            prev_part = f[ns - s :]
            next_part = nxt[:overlap]
            w = fade_in_weights(overlap, f.dtype).unsqueeze(-1)
            pieces.append(prev_part + w * (next_part - prev_part))
            cursor = e
        else:
            pieces.append(f[cursor - s :])
    merged = torch.cat(pieces, dim=0)
    if merged.shape[0] != layout.n_tokens:
        raise ConfigError(f"merged length {merged.shape[0]} != {layout.n_tokens}")
    return merged


# -- gating ---------------------------------------------------------------


class FeatureGate(nn.Module):
    """v = W_s S + b_s; g = sigmoid(W_g h + b_g); c = [h ; g * v]."""

    def __init__(self, n_bins: int = 257, acoustic_dim: int = 384, gate_dim: int = 128):
        super().__init__()
        self.spec_proj = nn.Linear(n_bins, gate_dim)
        self.gate = nn.Linear(acoustic_dim, gate_dim)
        for lin in (self.spec_proj, self.gate):
            nn.init.trunc_normal_(lin.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(lin.bias)

    def forward(self, h, S, return_gate=False):
        c, g = gate_fuse(h, S, self.spec_proj.weight, self.spec_proj.bias, self.gate.weight, self.gate.bias)
        return (c, g) if return_gate else c


def gate_fuse(h, S, W_s, b_s, W_g, b_g):
    """Fuse acoustic features with the projected spectrum. Weights use torch (out, in) layout.

    Returns (c, g) where c = [h ; sigmoid(W_g h + b_g) * (W_s S + b_s)].
    """
    if not (torch.isfinite(h).all() and torch.isfinite(S).all()):
        raise NumericError("non-finite input to feature gate")
    v = F.linear(S, W_s, b_s)
    g = torch.sigmoid(F.linear(h, W_g, b_g))
    # sigmoid rounds to exactly 0 or 1 once |z| is large; keep the gate strictly inside (0, 1)
    info = torch.finfo(g.dtype)
    g = g.clamp(info.tiny, 1.0 - info.eps / 2)
    return torch.cat([h, g * v], dim=-1), g


# -- pooling --------------------------------------------------------------


def pool_stats(x: torch.Tensor, valid: torch.Tensor | None = None, eps: float = 1e-8) -> torch.Tensor:
    """[mean ; population std ; max] over time. x is (T, d) or (B, T, d); valid is (B, T)."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
        valid = None if valid is None else valid.unsqueeze(0)
    if x.shape[1] < 1:
        raise ConfigError("pool_stats needs T >= 1")
    if valid is None:
        mean = x.mean(1)
        var = ((x - mean.unsqueeze(1)) ** 2).mean(1)
        mx = x.amax(1)
    else:
        w = valid.to(x.dtype).unsqueeze(-1)
        count = w.sum(1).clamp_min(1.0)
        mean = (x * w).sum(1) / count
        var = (((x - mean.unsqueeze(1)) ** 2) * w).sum(1) / count
        mx = x.masked_fill(~valid.unsqueeze(-1), torch.finfo(x.dtype).min).amax(1)
    # var / sqrt(var + eps): exactly 0 for constant input, finite slope at 0, and
    # within eps / (2 std) of the true std elsewhere
    std = var / torch.sqrt(var + eps)
    out = torch.cat([mean, std, mx], dim=-1)
    return out.squeeze(0) if squeeze else out


# -- full model -----------------------------------------------------------


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        for lin in (self.fc1, self.fc2):
            nn.init.trunc_normal_(lin.weight, std=0.02, a=-0.04, b=0.04)
            nn.init.zeros_(lin.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass
class ClipFeatures:
    patches: torch.Tensor  # (T, patch_width)
    spectrum: torch.Tensor  # (T, n_bins)


class HEARClassifier(nn.Module):
    """Acoustic model over independent chunks -> merge -> gate -> task model -> pooling -> head."""

    def __init__(
        self,
        num_classes: int,
        mode: FineTuneMode | str = FineTuneMode.BASE,
        frontend: FrontendConfig = FrontendConfig(),
        acoustic_cfg: EncoderConfig | None = None,
        task_cfg: EncoderConfig | None = None,
        gate_dim: int = 128,
        head_hidden: int = 512,
    ):
        super().__init__()
        self.mode = FineTuneMode(mode)
        self.frontend = frontend
        self.num_classes = num_classes
        acoustic_cfg = acoustic_cfg or make_config("acoustic", input_width=frontend.patch_width)
        self.acoustic = Encoder(acoustic_cfg)
        d = acoustic_cfg.hidden
        self.use_spectrum = self.mode is not FineTuneMode.NO_SPECTRUM
        task_in = d + gate_dim if self.use_spectrum else d
        base_task = task_cfg or make_config("task")
        self.task = Encoder(EncoderConfig(
            base_task.hidden, base_task.intermediate, base_task.heads, base_task.layers,
            base_task.max_relative_distance, task_in,
        ))
        self.gate = FeatureGate(frontend.n_bins, d, gate_dim) if self.use_spectrum else None
        self.head = ClassifierHead(3 * base_task.hidden, head_hidden, num_classes)
        if self.mode is FineTuneMode.TRANSFER:
            self.acoustic.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.mode is FineTuneMode.TRANSFER:
            self.acoustic.eval()
        return self

    def load_acoustic(self, state: dict[str, torch.Tensor]) -> None:
        if self.mode is FineTuneMode.SCRATCH:
            log.info("scratch mode: ignoring pre-trained acoustic weights")
            return
        self.acoustic.load_state_dict(state)

    def encode_chunks(self, patches: Sequence[torch.Tensor]) -> list[tuple[torch.Tensor, ChunkLayout]]:
        """Run the acoustic model on every chunk of every clip; chunks never see each other."""
        jobs, layouts = [], []
        for clip_idx, p in enumerate(patches):
            layout = layout_chunks(p.shape[0], "inference", self.frontend)
            layouts.append(layout)
            jobs.extend((clip_idx, p[s:e]) for s, e in layout.bounds)
        # chunks are batched with key padding only; no attention crosses a chunk
        width = max(j[1].shape[0] for j in jobs)
        batch = torch.zeros(len(jobs), width, patches[0].shape[-1], dtype=patches[0].dtype)
        pad = torch.ones(len(jobs), width, dtype=torch.bool)
        for i, (_, p) in enumerate(jobs):
            batch[i, : p.shape[0]] = p
            pad[i, : p.shape[0]] = False
        feats = self.acoustic(batch, pad if bool(pad.any()) else None)
        per_clip: list[list[torch.Tensor]] = [[] for _ in patches]
        for i, (clip_idx, p) in enumerate(jobs):
            per_clip[clip_idx].append(feats[i, : p.shape[0]])
        return list(zip(per_clip, layouts))

    def forward(self, clips: Sequence[ClipFeatures], spectrum_override: Sequence[torch.Tensor] | None = None):
        """Class logits (B, C) for a list of clips of arbitrary length."""
        chunked = self.encode_chunks([c.patches for c in clips])
        merged = [crossfade_merge(chunks, layout) for chunks, layout in chunked]
        B, T = len(clips), max(m.shape[0] for m in merged)
        d = merged[0].shape[-1]
        h = merged[0].new_zeros(B, T, d)
        valid = torch.zeros(B, T, dtype=torch.bool)
        for i, m in enumerate(merged):
            h[i, : m.shape[0]] = m
            valid[i, : m.shape[0]] = True
        if self.use_spectrum:
            S = h.new_zeros(B, T, self.gate.spec_proj.in_features)
            for i, c in enumerate(clips):
                spec = c.spectrum if spectrum_override is None else spectrum_override[i]
                S[i, : spec.shape[0]] = spec
            x = self.gate(h, S)
        else:
            x = h
        pad = None if bool(valid.all()) else ~valid
        y = self.task(x, pad)
        return self.head(pool_stats(y, None if pad is None else valid))

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def clip_features(w: Waveform, frontend: FrontendConfig = FrontendConfig(), dtype=torch.float32) -> ClipFeatures:
    f = extract_features(w, frontend)
    return ClipFeatures(torch.as_tensor(f.patches, dtype=dtype), torch.as_tensor(f.spectrum, dtype=dtype))


@torch.no_grad()
def forward_full(model: HEARClassifier, waveform: Waveform) -> torch.Tensor:
    """Waveform -> class probabilities."""
    model.eval()
    feats = clip_features(waveform, model.frontend, next(model.parameters()).dtype)
    n_chunks = len(layout_chunks(feats.patches.shape[0], "inference", model.frontend))
    log.info("processing %.2f s of audio in %d chunk(s)", waveform.duration, n_chunks)
    return model([feats]).softmax(-1)[0]


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise DataError(f"label outside class range [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, labels)


def finetune_step(
    model: HEARClassifier,
    clips: Sequence[ClipFeatures],
    labels: torch.Tensor,
    opt: AdamW,
    rate: float,
) -> dict[str, float]:
    model.train()
    logits = model(clips)
    loss = classification_loss(logits, labels)
    if not torch.isfinite(loss):
        raise NumericError("non-finite classification loss")
    opt.zero_grad()
    loss.backward()
    opt.step(rate)
    correct = int((logits.argmax(-1) == labels).sum())
    return {"loss": loss.item(), "correct": correct, "count": len(labels)}


@torch.no_grad()
def evaluate(model: HEARClassifier, clips: Sequence[ClipFeatures], labels: torch.Tensor, batch_size: int = 16) -> dict[str, float]:
    model.eval()
    total_loss, correct = 0.0, 0
    for i in range(0, len(clips), batch_size):
        logits = model(clips[i : i + batch_size])
        y = labels[i : i + batch_size]
        total_loss += classification_loss(logits, y).item() * len(y)
        correct += int((logits.argmax(-1) == y).sum())
    n = max(len(clips), 1)
    return {"loss": total_loss / n, "accuracy": correct / n}


def make_optimizer(model: HEARClassifier, **hyper) -> AdamW:
    return AdamW(model.trainable_parameters(), **hyper)


def finetune_schedule(steps: int, peak: float, warmup_fraction: float = 0.05) -> LrSchedule:
    warm = int(steps * warmup_fraction)
    return LrSchedule(peak, min(warm, steps - 1), max(steps, 1))


def train_classifier(
    model: HEARClassifier,
    clips: Sequence[ClipFeatures],
    labels: Sequence[int],
    epochs: int,
    batch_size: int,
    lr: float,
    generator: torch.Generator,
    opt: AdamW | None = None,
    eval_set: tuple[Sequence[ClipFeatures], Sequence[int]] | None = None,
    on_epoch=None,
    warmup_fraction: float = 0.05,
) -> list[dict]:
    """Shuffle-and-step loop; returns per-epoch train (and optional eval) metrics."""
    labels_t = torch.as_tensor(list(labels), dtype=torch.long)
    opt = opt or make_optimizer(model)
    steps_per_epoch = math.ceil(len(clips) / batch_size)
    schedule = finetune_schedule(epochs * steps_per_epoch, lr, warmup_fraction)
    history, step = [], 0
    for epoch in range(1, epochs + 1):
        order = torch.randperm(len(clips), generator=generator).tolist()
        tot_loss, tot_correct = 0.0, 0
        for b in range(0, len(order), batch_size):
            idx = order[b : b + batch_size]
            r = finetune_step(model, [clips[i] for i in idx], labels_t[idx], opt, lr_at(schedule, step))
            step += 1
            tot_loss += r["loss"] * r["count"]
            tot_correct += r["correct"]
        rows = [{"epoch": epoch, "split": "train", "loss": tot_loss / len(order), "accuracy": tot_correct / len(order)}]
        if eval_set is not None:
            ev = evaluate(model, eval_set[0], torch.as_tensor(list(eval_set[1]), dtype=torch.long), batch_size)
            rows.append({"epoch": epoch, "split": "eval", **ev})
        for row in rows:
            history.append(row)
            if on_epoch:
                on_epoch(row)
    return history
