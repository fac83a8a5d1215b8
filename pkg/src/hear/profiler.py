"""Parameter counts, analytic FLOPs and measured real-time factor.

FLOPs convention: one multiply-add is 2 FLOPs. Non-matmul work is charged a
fixed number of FLOPs per element (see ELEMENTWISE_COST) and reported in its
own bucket so the matmul buckets stay comparable with the textbook
L * (2n(4d^2 + 2df) + 4n^2 d) count.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .frontend import FrontendConfig, Waveform, layout_chunks, num_tokens
from .transformer import EncoderConfig, make_config

REFERENCE_PARAMS = 15e6
REFERENCE_GFLOPS = 9.47
REFERENCE_RTF = 0.095  # ARM single thread; reference only

ELEMENTWISE_COST = {
    "bias": 1,
    "residual": 1,
    "layernorm": 5,
    "softmax": 5,
    "scale": 1,
    "rel_bias": 1,
    "gelu": 8,
    "sigmoid": 4,
    "gate_mul": 1,
    "pool": 5,
}

FLOP_CATEGORIES = (
    "embedding",
    "attention_linear",
    "attention_quadratic",
    "ffn",
    "elementwise",
    "gating",
    "task",
    "head",
)


# -- parameters -------------------------------------------------------------


def count_params(module: nn.Module | dict[str, nn.Module]) -> dict[str, int]:
    """Element counts per named sub-module (shapes only) plus a ``total``."""
    parts = module if isinstance(module, dict) else dict(module.named_children())
    counts = {name: sum(p.numel() for p in m.parameters()) for name, m in parts.items() if m is not None}
    counts["total"] = sum(counts.values())
    return counts


def model_param_report(model) -> dict[str, int]:
    """Inference-time breakdown of a HEARClassifier: acoustic / task (incl. gating) / head."""
    acoustic = sum(p.numel() for p in model.acoustic.parameters())
    gate = sum(p.numel() for p in model.gate.parameters()) if model.gate is not None else 0
    task = sum(p.numel() for p in model.task.parameters()) + gate
    head = sum(p.numel() for p in model.head.parameters())
    return {"acoustic": acoustic, "task": task, "gating": gate, "head": head, "total": acoustic + task + head}


# -- FLOPs ------------------------------------------------------------------


def encoder_flops(n: int, cfg: EncoderConfig) -> dict[str, int]:
    """Analytic FLOPs of one Encoder forward over n tokens."""
    d, f, h, L, din = cfg.hidden, cfg.intermediate, cfg.heads, cfg.layers, cfg.input_width
    c = ELEMENTWISE_COST
    embedding = 2 * n * din * d
    attn_lin = L * 2 * n * 4 * d * d
    attn_quad = L * 4 * n * n * d
    ffn = L * 2 * n * 2 * d * f
    per_layer_elem = (
        2 * n * d * c["layernorm"]
        + 4 * n * d * c["bias"]  # q, k, v, out
        + h * n * n * (c["scale"] + c["rel_bias"] + c["softmax"])
        + (n * f + n * d) * c["bias"]
        + n * f * c["gelu"]
        + 2 * n * d * c["residual"]
    )
    elementwise = n * d * c["bias"] + L * per_layer_elem + n * d * c["layernorm"]
    return {
        "embedding": embedding,
        "attention_linear": attn_lin,
        "attention_quadratic": attn_quad,
        "ffn": ffn,
        "elementwise": elementwise,
    }


def encoder_total(n: int, cfg: EncoderConfig) -> int:
    return sum(encoder_flops(n, cfg).values())


def gating_flops(T: int, n_bins: int, d: int, gate_dim: int) -> int:
    c = ELEMENTWISE_COST
    per_token = 2 * n_bins * gate_dim + 2 * d * gate_dim + 2 * gate_dim * c["bias"] + gate_dim * (c["sigmoid"] + c["gate_mul"])
    return T * per_token


def head_flops(T: int, d: int, hidden: int, num_classes: int) -> int:
    c = ELEMENTWISE_COST
    pool = T * d * c["pool"]
    mlp = 2 * 3 * d * hidden + hidden * (c["bias"] + c["gelu"]) + 2 * hidden * num_classes + num_classes * c["bias"]
    return pool + mlp


def frontend_flops(duration: float, fe: FrontendConfig) -> int:
    """Rough DSP cost: windowing + radix-2 FFT + power + mel matmul + log."""
    n_frames = int(duration * fe.sample_rate) // fe.hop_length
    fft = 5 * fe.n_fft * int(math.log2(fe.n_fft))
    per_frame = fe.win_length + fft + 3 * fe.n_bins + 2 * fe.n_bins * fe.n_mels + fe.n_mels
    return n_frames * per_frame


@dataclass
class WorkloadSpec:
    duration: float = 10.0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    batch_size: int = 1

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


@dataclass
class ModelShape:
    acoustic: EncoderConfig
    task: EncoderConfig  # input_width already includes the gated features
    gate_dim: int = 128
    head_hidden: int = 512
    num_classes: int = 50
    use_spectrum: bool = True

    @classmethod
    def default(cls, frontend: FrontendConfig = FrontendConfig(), gate_dim: int = 128, num_classes: int = 50,
                head_hidden: int = 512, use_spectrum: bool = True) -> "ModelShape":
        acoustic = make_config("acoustic", input_width=frontend.patch_width)
        task_in = acoustic.hidden + (gate_dim if use_spectrum else 0)
        return cls(acoustic, make_config("task", input_width=task_in), gate_dim, head_hidden, num_classes, use_spectrum)


def estimate_flops(shape: ModelShape, workload: WorkloadSpec) -> dict[str, int]:
    """Per-category FLOPs for one clip; the acoustic model runs chunk by chunk."""
    fe = workload.frontend
    T = num_tokens(workload.duration, fe)
    layout = layout_chunks(T, "inference", fe)
    out = dict.fromkeys(FLOP_CATEGORIES, 0)
    for s, e in layout.bounds:
        for k, v in encoder_flops(e - s, shape.acoustic).items():
            out[k] += v
    if shape.use_spectrum:
        out["gating"] = gating_flops(T, fe.n_bins, shape.acoustic.hidden, shape.gate_dim)
    out["task"] = encoder_total(T, shape.task)
    out["head"] = head_flops(T, shape.task.hidden, shape.head_hidden, shape.num_classes)
    out = {k: v * workload.batch_size for k, v in out.items()}
    out["acoustic"] = sum(out[k] for k in ("embedding", "attention_linear", "attention_quadratic", "ffn", "elementwise"))
    out["total"] = out["acoustic"] + out["gating"] + out["task"] + out["head"]
    return out


def monolithic_flops(shape: ModelShape, workload: WorkloadSpec) -> dict[str, int]:
    """Comparator: the acoustic encoder attending over the whole clip at once."""
    T = num_tokens(workload.duration, workload.frontend)
    return encoder_flops(T, shape.acoustic)


# -- RTF --------------------------------------------------------------------


@contextmanager
def single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def rtf(processing_seconds: float, audio_seconds: float) -> float:
    return processing_seconds / audio_seconds


@dataclass
class RtfResult:
    rtf: float
    model_rtf: float
    frontend_rtf: float
    runs: int
    inner_loops: int


def measure_rtf(model, duration: float = 10.0, runs: int = 5, warmup: int = 1, seed: int = 0,
                min_time: float = 0.01) -> RtfResult:
    """Median single-thread wall time per audio second, frontend included.

    If one pass is faster than ``min_time`` the pass is repeated inside the
    timed region until the clock resolution is no longer the limit.
    """
    from .downstream import clip_features

    if runs < 5:
        raise ValueError("use at least 5 timed runs")
    rng = np.random.default_rng(seed)
    fe = model.frontend
    wave = Waveform(0.1 * rng.standard_normal(int(duration * fe.sample_rate)), fe.sample_rate)
    dtype = next(model.parameters()).dtype
    model.eval()

    def frontend_pass():
        return clip_features(wave, fe, dtype)

    def model_pass(feats):
        return model([feats])

    with single_thread(), torch.no_grad():
        feats = frontend_pass()
        for _ in range(warmup):
            model_pass(frontend_pass())
        t0 = time.perf_counter()
        model_pass(frontend_pass())
        inner = max(1, math.ceil(min_time / max(time.perf_counter() - t0, 1e-9)))
        fe_times, model_times = [], []
        for _ in range(runs):
            t0 = time.perf_counter()
            for _ in range(inner):
                feats = frontend_pass()
            t1 = time.perf_counter()
            for _ in range(inner):
                model_pass(feats)
            t2 = time.perf_counter()
            fe_times.append((t1 - t0) / inner)
            model_times.append((t2 - t1) / inner)
    totals = [a + b for a, b in zip(fe_times, model_times)]
    return RtfResult(
        rtf=rtf(statistics.median(totals), duration),
        model_rtf=rtf(statistics.median(model_times), duration),
        frontend_rtf=rtf(statistics.median(fe_times), duration),
        runs=runs,
        inner_loops=inner,
    )


# -- report -----------------------------------------------------------------


@dataclass
class CostReport:
    duration: float
    params: dict[str, int]
    flops: dict[str, int]
    frontend_flops: int
    monolithic_attention_quadratic: int
    rtf: RtfResult | None = None

    @property
    def gflops(self) -> float:
        return self.flops["total"] / 1e9

    def reference_ratio(self) -> float:
        return self.gflops / REFERENCE_GFLOPS

    def to_dict(self) -> dict:
        return {
            "duration_s": self.duration,
            "params": self.params,
            "flops": self.flops,
            "frontend_flops": self.frontend_flops,
            "monolithic_attention_quadratic": self.monolithic_attention_quadratic,
            "gflops_total": self.gflops,
            "reference": {"params": REFERENCE_PARAMS, "gflops": REFERENCE_GFLOPS, "rtf": REFERENCE_RTF},
            "gflops_ratio_to_reference": self.reference_ratio(),
            "flop_convention": {"multiply_add": 2, "elementwise_cost": ELEMENTWISE_COST},
            "rtf": None if self.rtf is None else asdict(self.rtf),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"Cost report for {self.duration:g} s of audio (batch 1)", "", "Parameters"]
        for k, v in self.params.items():
            lines.append(f"  {k:<22}{v:>14,}")
        lines += ["", "FLOPs"]
        for k in (*FLOP_CATEGORIES, "acoustic", "total"):
            lines.append(f"  {k:<22}{self.flops[k] / 1e9:>14.3f} G")
        lines.append(f"  {'frontend (excluded)':<22}{self.frontend_flops / 1e9:>14.3f} G")
        lines.append(f"  {'monolithic attn-quad':<22}{self.monolithic_attention_quadratic / 1e9:>14.3f} G")
        lines.append(f"  total / reference {REFERENCE_GFLOPS} G = {self.reference_ratio():.3f}")
        if self.rtf is not None:
            lines += ["", f"RTF {self.rtf.rtf:.4f} (model {self.rtf.model_rtf:.4f}, frontend {self.rtf.frontend_rtf:.4f}); "
                      f"reference {REFERENCE_RTF} on different hardware"]
        return "\n".join(lines)


def build_report(model, duration: float = 10.0, measure: bool = False, runs: int = 5) -> CostReport:
    shape = ModelShape(
        acoustic=model.acoustic.cfg,
        task=model.task.cfg,
        gate_dim=model.gate.spec_proj.out_features if model.gate is not None else 0,
        head_hidden=model.head.fc1.out_features,
        num_classes=model.num_classes,
        use_spectrum=model.gate is not None,
    )
    work = WorkloadSpec(duration, model.frontend)
    return CostReport(
        duration=duration,
        params=model_param_report(model),
        flops=estimate_flops(shape, work),
        frontend_flops=frontend_flops(duration, model.frontend),
        monolithic_attention_quadratic=monolithic_flops(shape, work)["attention_quadratic"],
        rtf=measure_rtf(model, duration, runs=runs) if measure else None,
    )
