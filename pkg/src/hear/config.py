"""Run configuration: a flat ``key = value`` text format with ``include`` support.

Every default is the published value where one exists; the rest are
documented engineering choices. Unknown keys are rejected.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .checkpoint import config_hash
from .errors import ConfigError
from .frontend import FrontendConfig
from .tokenizer import LossWeights, TemperatureSchedule
from .transformer import EncoderConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # frontend
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    mel_floor: float = 1e-10
    chunk_seconds: float = 6.0
    overlap_seconds: float = 1.0
    min_segment_seconds: float = 1.0

    # encoders: hidden / intermediate / heads / layers
    tokenizer_hidden: int = 128
    tokenizer_intermediate: int = 512
    tokenizer_heads: int = 4
    tokenizer_layers: int = 6
    decoder_hidden: int = 128
    decoder_intermediate: int = 512
    decoder_heads: int = 4
    decoder_layers: int = 2
    acoustic_hidden: int = 384
    acoustic_intermediate: int = 1536
    acoustic_heads: int = 4
    acoustic_layers: int = 6
    task_hidden: int = 384
    task_intermediate: int = 1536
    task_heads: int = 4
    task_layers: int = 1
    rel_k: int = 64

    # stand-in teacher (frozen random encoder)
    teacher_hidden: int = 192
    teacher_intermediate: int = 768
    teacher_heads: int = 4
    teacher_layers: int = 2
    teacher_seed: int = 1234

    # tokenizer objective
    vocab_size: int = 1024
    code_dim: int = 32
    alpha: float = 0.3
    beta: float = 0.7
    gamma: float = 0.1
    tau0: float = 2.0
    tau_decay: float = 0.999995
    tau_floor: float = 0.5
    tokenizer_lr: float = 3e-4
    tokenizer_batch: int = 64
    tokenizer_steps: int = 540_000
    tokenizer_warmup: int = 10_000

    # masked audio modelling
    mask_ratio: float = 0.40
    mask_bernoulli: bool = False
    pretrain_lr: float = 5e-4
    pretrain_batch: int = 128
    pretrain_steps: int = 450_000
    pretrain_warmup: int = 10_000

    # AdamW
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    # fine-tuning
    preset: str = "ESC-50"
    mode: str = "base"
    finetune_lr: float = 0.0  # 0 -> preset value
    finetune_batch: int = 0
    finetune_epochs: int = 0
    finetune_warmup_fraction: float = 0.05
    gate_dim: int = 128
    head_hidden: int = 512

    # data and bookkeeping
    manifest: str = ""
    data_root: str = ""
    log_every: int = 1

    # -- derived views --------------------------------------------------

    @property
    def frontend(self) -> FrontendConfig:
        return FrontendConfig(
            sample_rate=self.sample_rate, win_ms=self.win_ms, hop_ms=self.hop_ms, n_fft=self.n_fft,
            n_mels=self.n_mels, mel_floor=self.mel_floor, chunk_seconds=self.chunk_seconds,
            overlap_seconds=self.overlap_seconds, min_segment_seconds=self.min_segment_seconds,
        )

    def encoder(self, name: str, input_width: int) -> EncoderConfig:
        g = lambda k: getattr(self, f"{name}_{k}")  # noqa: E731
        return EncoderConfig(g("hidden"), g("intermediate"), g("heads"), g("layers"), self.rel_k, input_width)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def temperature(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau0, self.tau_decay, self.tau_floor)

    @property
    def adam(self) -> dict:
        return {"beta1": self.adam_beta1, "beta2": self.adam_beta2, "eps": self.adam_eps, "weight_decay": self.weight_decay}

    def _subset(self, modules: tuple[str, ...], extra: tuple[str, ...]) -> dict:
        keys = ["sample_rate", "win_ms", "hop_ms", "n_fft", "n_mels", "mel_floor", "rel_k", *extra]
        keys += [f"{m}_{k}" for m in modules for k in ("hidden", "intermediate", "heads", "layers")]
        return {k: getattr(self, k) for k in keys}

    def tokenizer_hash(self) -> str:
        return config_hash(self._subset(("tokenizer", "decoder", "teacher"), ("teacher_seed", "vocab_size", "code_dim")))

    def acoustic_hash(self) -> str:
        return config_hash(self._subset(("acoustic",), ("vocab_size",)))

    def classifier_hash(self) -> str:
        return config_hash(self._subset(("acoustic", "task"), ("gate_dim", "head_hidden", "mode")))

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _FIELDS[key].type
    raw = raw.strip()
    try:
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            try:
                return int(raw.replace("_", ""))
            except ValueError:
                f = float(raw)
                if not f.is_integer():
                    raise
                return int(f)
        if typ == "float":
            return float(raw)
        if raw[:1] in "\"'":
            return ast.literal_eval(raw)
        return raw
    except (ValueError, SyntaxError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path: str | Path, _seen: frozenset = frozenset()) -> dict:
    """Parse ``key = value`` lines; ``include other.cfg`` pulls in a file (relative to this one) first."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle at {path}")
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    values: dict = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            values.update(read_config_file(path.parent / line[len("include "):].strip(), _seen | {path}))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    return replace(RunConfig(), **values)


def dump_config(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {v!r}" if isinstance(v, str) else f"{k} = {v}" for k, v in asdict(cfg).items()) + "\n"
