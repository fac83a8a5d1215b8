"""End-to-end stage drivers used by the CLI: tokenizer, MAM pre-training, fine-tuning, inference."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import torch

from .checkpoint import Checkpoint, restore_rng, rng_state_tensor
from .config import RunConfig
from .corpus import ManifestRow, num_classes, pretrain_segments, read_manifest, sample_batch
from .downstream import (
    ClipFeatures,
    FineTuneMode,
    HEARClassifier,
    clip_features,
    forward_full,
    get_preset,
    make_optimizer,
    train_classifier,
)
from .errors import ConfigError, DataError
from .frontend import layout_chunks, load_wav, num_tokens
from .mam import MaskedAcousticModel, pretrain_step
from .numerics import AdamW, LrSchedule, OptimizerState
from .tokenizer import AcousticTokenizer, RandomTeacher, tau_at, tokenizer_train_step

log = logging.getLogger(__name__)


class MetricsWriter:
    """Append-only JSONL; one sorted-key object per line."""

    def __init__(self, path: Path, append: bool):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def write(self, row: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _rows(cfg: RunConfig) -> list[ManifestRow]:
    if not cfg.manifest:
        raise DataError("no corpus: set `manifest` (see `hear synth`)")
    return read_manifest(cfg.manifest, cfg.data_root or None)


def desk_steps(cfg: RunConfig, stage: str, steps: int | None) -> RunConfig:
    """Override a stage's step count; a warm-up that no longer fits shrinks to a tenth of the run."""
    if steps is None:
        return cfg
    warm = getattr(cfg, f"{stage}_warmup")
    if warm >= steps:
        new_warm = steps // 10
        log.warning("%s warm-up %d >= %d steps; using %d", stage, warm, steps, new_warm)
        warm = new_warm
    return replace(cfg, **{f"{stage}_steps": steps, f"{stage}_warmup": warm})


def build_tokenizer(cfg: RunConfig) -> AcousticTokenizer:
    fe = cfg.frontend
    return AcousticTokenizer(
        patch_width=fe.patch_width,
        teacher_dim=cfg.teacher_hidden,
        vocab_size=cfg.vocab_size,
        code_dim=cfg.code_dim,
        encoder_cfg=cfg.encoder("tokenizer", fe.patch_width),
        decoder_cfg=cfg.encoder("decoder", cfg.code_dim),
    )


def build_teacher(cfg: RunConfig) -> RandomTeacher:
    return RandomTeacher(cfg.encoder("teacher", cfg.frontend.patch_width), cfg.teacher_seed)


def _load_weights(module, state, source) -> None:
    try:
        module.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigError(f"{source} does not fit the configured model: {str(e).splitlines()[-1].strip()}") from None


def _save_state(path, cfg_hash, model, opt: AdamW, gen, step, meta) -> Checkpoint:
    ckpt = Checkpoint(cfg_hash, step=step, meta=meta)
    ckpt.add("model", model.state_dict())
    ckpt.add("opt", opt.state.tensors())
    ckpt.tensors["rng.data"] = rng_state_tensor(gen)
    ckpt.meta["optimizer"] = opt.state.hyperparams()
    ckpt.save(path)
    return ckpt


def _restore_state(ckpt: Checkpoint, model, opt: AdamW, gen) -> int:
    _load_weights(model, ckpt.section("model"), "resume checkpoint")
    opt.state = OptimizerState.from_parts(ckpt.meta["optimizer"], ckpt.section("opt"))
    restore_rng(gen, ckpt.tensors["rng.data"])
    return ckpt.step


def train_tokenizer(cfg: RunConfig, out_dir, resume=None, stop_after: int | None = None, force: bool = False) -> Path:
    """Stage-1 loop. Writes tokenizer_metrics.jsonl and tokenizer.ckpt into out_dir."""
    out = Path(out_dir)
    segments = pretrain_segments(_rows(cfg), cfg.frontend)
    torch.manual_seed(cfg.seed)
    model = build_tokenizer(cfg)
    teacher = build_teacher(cfg)
    opt = AdamW(model.named_parameters(), **cfg.adam)
    schedule = LrSchedule(cfg.tokenizer_lr, cfg.tokenizer_warmup, cfg.tokenizer_steps)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    start = 0
    if resume:
        start = _restore_state(Checkpoint.load(resume, cfg.tokenizer_hash(), force), model, opt, gen)
    end = cfg.tokenizer_steps if stop_after is None else min(stop_after, cfg.tokenizer_steps)
    metrics = MetricsWriter(out / "tokenizer_metrics.jsonl", append=bool(resume))
    for step in range(start, end):
        patches, pad = sample_batch(segments, cfg.tokenizer_batch, gen)
        row = tokenizer_train_step(patches, pad, model, teacher, opt, schedule, step, cfg.loss_weights, cfg.temperature, gen)
        if step % cfg.log_every == 0 or step == end - 1:
            metrics.write(row)
    path = out / "tokenizer.ckpt"
    meta = {"kind": "tokenizer", "config": cfg.to_dict(), "tau": tau_at(max(end - 1, 0), cfg.temperature)}
    _save_state(path, cfg.tokenizer_hash(), model, opt, gen, end, meta)
    log.info("tokenizer: %d steps, checkpoint %s", end, path)
    return path


def load_frozen_tokenizer(cfg: RunConfig, path, force: bool = False) -> tuple[AcousticTokenizer, Checkpoint]:
    ckpt = Checkpoint.load(path, cfg.tokenizer_hash(), force)
    if ckpt.meta.get("kind") != "tokenizer":
        raise ConfigError(f"{path} is not a tokenizer checkpoint")
    tok = build_tokenizer(cfg)
    _load_weights(tok, ckpt.section("model"), path)
    tok.requires_grad_(False)
    tok.eval()
    return tok, ckpt


def pretrain(cfg: RunConfig, tokenizer_ckpt, out_dir, resume=None, stop_after: int | None = None, force: bool = False) -> Path:
    """Stage-2 MAM loop with the tokenizer frozen. Writes pretrain_metrics.jsonl and acoustic.ckpt."""
    out = Path(out_dir)
    tokenizer, tok_ckpt = load_frozen_tokenizer(cfg, tokenizer_ckpt, force)
    segments = pretrain_segments(_rows(cfg), cfg.frontend)
    torch.manual_seed(cfg.seed)
    model = MaskedAcousticModel(cfg.encoder("acoustic", cfg.frontend.patch_width), cfg.vocab_size)
    opt = AdamW(model.named_parameters(), **cfg.adam)
    schedule = LrSchedule(cfg.pretrain_lr, cfg.pretrain_warmup, cfg.pretrain_steps)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    start = 0
    if resume:
        start = _restore_state(Checkpoint.load(resume, cfg.acoustic_hash(), force), model, opt, gen)
    end = cfg.pretrain_steps if stop_after is None else min(stop_after, cfg.pretrain_steps)
    metrics = MetricsWriter(out / "pretrain_metrics.jsonl", append=bool(resume))
    tau_frozen = tok_ckpt.meta.get("tau")
    for step in range(start, end):
        patches, pad = sample_batch(segments, cfg.pretrain_batch, gen)
        row = pretrain_step(patches, pad, model, tokenizer, opt, schedule, step, gen, cfg.mask_ratio, cfg.mask_bernoulli)
        row["tau_used_at_tokenizer_freeze"] = tau_frozen
        if step % cfg.log_every == 0 or step == end - 1:
            metrics.write(row)
    path = out / "acoustic.ckpt"
    meta = {"kind": "acoustic", "config": cfg.to_dict(), "tokenizer_hash": tok_ckpt.config_hash}
    _save_state(path, cfg.acoustic_hash(), model, opt, gen, end, meta)
    log.info("pretrain: %d steps, checkpoint %s", end, path)
    return path


def build_classifier(cfg: RunConfig, n_classes: int, mode: str | None = None) -> HEARClassifier:
    fe = cfg.frontend
    return HEARClassifier(
        n_classes,
        mode or cfg.mode,
        fe,
        cfg.encoder("acoustic", fe.patch_width),
        cfg.encoder("task", cfg.acoustic_hidden),
        cfg.gate_dim,
        cfg.head_hidden,
    )


def featurize(rows: list[ManifestRow], cfg: RunConfig) -> list[ClipFeatures]:
    return [clip_features(load_wav(r.path, cfg.sample_rate), cfg.frontend) for r in rows]


def finetune_hparams(cfg: RunConfig) -> tuple[int, float, int]:
    p = get_preset(cfg.preset)
    return (cfg.finetune_batch or p.batch_size, cfg.finetune_lr or p.lr, cfg.finetune_epochs or p.epochs)


def _splits(rows: list[ManifestRow], cv: bool):
    """(name, train_idx, eval_idx) runs: 5-fold CV when folds exist, else the split tags."""
    folds = sorted({r.fold for r in rows if r.fold is not None})
    if cv and folds and all(r.fold is not None for r in rows):
        for k in folds:
            yield f"fold{k}", [i for i, r in enumerate(rows) if r.fold != k], [i for i, r in enumerate(rows) if r.fold == k]
        return
    train = [i for i, r in enumerate(rows) if r.split == "train"]
    held = [i for i, r in enumerate(rows) if r.split in ("test", "eval", "valid", "val")]
    if not train:
        raise DataError("manifest has no rows with split 'train'")
    yield "all", train, held


def finetune(cfg: RunConfig, acoustic_ckpt, out_dir, mode: str | None = None, cv: bool = True, force: bool = False) -> dict:
    """Stage-3 training per fold (or split); returns the per-run accuracy summary."""
    mode = FineTuneMode(mode or cfg.mode)
    cfg = replace(cfg, mode=mode.value)
    out = Path(out_dir)
    rows = _rows(cfg)
    C = num_classes(rows)
    acoustic_state = None
    if mode is not FineTuneMode.SCRATCH:
        if acoustic_ckpt is None:
            raise ConfigError(f"mode {mode.value} needs a pre-trained acoustic checkpoint")
        ck = Checkpoint.load(acoustic_ckpt, cfg.acoustic_hash(), force)
        acoustic_state = {k[len("encoder."):]: v for k, v in ck.section("model").items() if k.startswith("encoder.")}
    batch, lr, epochs = finetune_hparams(cfg)
    feats = featurize(rows, cfg)
    labels = [r.label for r in rows]
    metrics = MetricsWriter(out / f"finetune_{mode.value}_metrics.jsonl", append=False)
    summary = {"mode": mode.value, "runs": {}, "preset": cfg.preset, "batch": batch, "lr": lr, "epochs": epochs}
    for name, tr, ev in _splits(rows, cv):
        torch.manual_seed(cfg.seed)
        model = build_classifier(cfg, C, mode.value)
        if acoustic_state is not None:
            model.load_acoustic(acoustic_state)
        opt = make_optimizer(model, **cfg.adam)
        gen = torch.Generator().manual_seed(cfg.seed + 3)
        eval_set = ([feats[i] for i in ev], [labels[i] for i in ev]) if ev else None
        history = train_classifier(
            model, [feats[i] for i in tr], [labels[i] for i in tr], epochs, batch, lr, gen, opt=opt,
            eval_set=eval_set, on_epoch=lambda row, n=name: metrics.write({**row, "run": n}),
            warmup_fraction=cfg.finetune_warmup_fraction,
        )
        final = {r["split"]: r for r in history if r["epoch"] == epochs}
        summary["runs"][name] = {s: {"loss": r["loss"], "accuracy": r["accuracy"]} for s, r in final.items()}
        ckpt = Checkpoint(cfg.classifier_hash(), step=epochs, meta={
            "kind": "classifier", "config": cfg.to_dict(), "num_classes": C, "mode": mode.value, "run": name,
            "optimizer": opt.state.hyperparams(),
        })
        ckpt.add("model", model.state_dict())
        ckpt.add("opt", opt.state.tensors())
        ckpt.save(out / f"finetune_{mode.value}_{name}.ckpt")
    split = "eval" if all("eval" in r for r in summary["runs"].values()) else "train"
    accs = [r[split]["accuracy"] for r in summary["runs"].values()]
    summary["reported_split"] = split
    summary["mean_accuracy"] = sum(accs) / len(accs)
    (out / f"finetune_{mode.value}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_classifier(path, force: bool = False) -> tuple[HEARClassifier, RunConfig]:
    ckpt = Checkpoint.load(path)
    if ckpt.meta.get("kind") != "classifier":
        raise ConfigError(f"{path} is not a fine-tuned classifier checkpoint")
    cfg = RunConfig(**ckpt.meta["config"])
    if cfg.classifier_hash() != ckpt.config_hash and not force:
        raise ConfigError(f"config hash mismatch in {path}")
    model = build_classifier(cfg, ckpt.meta["num_classes"], ckpt.meta["mode"])
    _load_weights(model, ckpt.section("model"), path)
    model.eval()
    return model, cfg


def infer(checkpoint, wav_path) -> dict:
    model, cfg = load_classifier(checkpoint)
    wave = load_wav(wav_path, cfg.sample_rate)
    probs = forward_full(model, wave)
    p = [float(x) for x in probs.double()]
    top = max(range(len(p)), key=p.__getitem__)
    chunks = len(layout_chunks(num_tokens(wave.duration, cfg.frontend), "inference", cfg.frontend))
    return {"file": str(wav_path), "probabilities": {str(i): v for i, v in enumerate(p)}, "top1": top, "chunks": chunks}
