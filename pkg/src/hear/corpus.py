"""Synthetic desk-scale corpus, CSV manifests, and feature caches for training."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .frontend import FrontendConfig, Waveform, compute_patches, layout_chunks, load_wav, save_wav

DATA_ROOT_ENV = "HEAR_DATA_ROOT"
MANIFEST_HEADER = ["path", "label", "split", "fold"]
FAMILIES = ("sine", "noise_band", "chirp")


@dataclass(frozen=True)
class ClassSpec:
    family: str
    f_lo: float
    f_hi: float


def default_class_specs(n_classes: int, f_min: float = 200.0, f_max: float = 6000.0) -> list[ClassSpec]:
    """Disjoint log-spaced bands, cycling tone / noise-band / chirp families."""
    edges = np.geomspace(f_min, f_max, n_classes + 1)
    specs = []
    for c in range(n_classes):
        lo, hi = edges[c], edges[c + 1]
        # keep a guard gap so neighbouring classes never share a mel band
        pad = 0.15 * (hi - lo)
        specs.append(ClassSpec(FAMILIES[c % len(FAMILIES)], float(lo + pad), float(hi - pad)))
    return specs


def render_clip(spec: ClassSpec, duration: float, rng: np.random.Generator, sample_rate: int = 16000) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    amp = rng.uniform(0.3, 0.8)
    if spec.family == "sine":
        f = rng.uniform(spec.f_lo, spec.f_hi)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif spec.family == "chirp":
        f0, f1 = sorted(rng.uniform(spec.f_lo, spec.f_hi, size=2))
        if rng.random() < 0.5:
            f0, f1 = f1, f0
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t**2 / max(duration, 1e-9))
        x = np.sin(phase)
    elif spec.family == "noise_band":
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spectrum[(freqs < spec.f_lo) | (freqs > spec.f_hi)] = 0
        x = np.fft.irfft(spectrum, n)
        x /= np.abs(x).max() + 1e-12
    else:
        raise DataError(f"unknown family {spec.family!r}")
    x = amp * x + 0.005 * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def synth_corpus(
    out_dir: str | Path,
    n_classes: int = 4,
    clips_per_class: int = 50,
    min_duration: float = 1.0,
    max_duration: float = 13.0,
    seed: int = 0,
    specs: list[ClassSpec] | None = None,
) -> Path:
    """Write deterministic WAVs plus ``manifest.csv`` (folds 1..5 round-robin per class)."""
    out = Path(out_dir)
    try:
        (out / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out}: {e}") from e
    specs = specs or default_class_specs(n_classes)
    rng = np.random.default_rng(seed)
    rows = []
    for c, spec in enumerate(specs):
        for i in range(clips_per_class):
            duration = round(float(rng.uniform(min_duration, max_duration)), 2)
            rel = f"audio/c{c:02d}_{i:04d}.wav"
            try:
                save_wav(out / rel, render_clip(spec, duration, rng))
            except OSError as e:
                raise DataError(f"failed writing {out / rel}: {e}") from e
            rows.append({"path": rel, "label": c, "split": "train", "fold": i % 5 + 1})
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


@dataclass
class ManifestRow:
    path: Path
    label: int
    split: str
    fold: int | None


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, MANIFEST_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in MANIFEST_HEADER})


def read_manifest(path: str | Path, data_root: str | Path | None = None) -> list[ManifestRow]:
    """Rows with resolved audio paths; relative paths resolve against data_root,
    then $HEAR_DATA_ROOT, then the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = Path(data_root or os.environ.get(DATA_ROOT_ENV) or path.parent)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise DataError(f"manifest {path} must have header {','.join(MANIFEST_HEADER)}")
        rows = []
        for r in reader:
            p = Path(r["path"])
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise DataError(f"audio file missing: {p}")
            try:
                label = int(r["label"])
            except ValueError:
                raise DataError(f"non-integer label {r['label']!r}") from None
            fold = r.get("fold") or ""
            fold_v = int(fold) if fold.strip() else None
            if fold_v is not None and not 1 <= fold_v <= 5:
                raise DataError(f"fold {fold_v} outside 1..5")
            rows.append(ManifestRow(p, label, (r.get("split") or "train").strip(), fold_v))
    if not rows:
        raise DataError(f"manifest {path} is empty")
    labels = sorted({r.label for r in rows})
    if labels != list(range(len(labels))):
        raise DataError(f"labels must be dense in [0, num_classes); got {labels}")
    return rows


def num_classes(rows: list[ManifestRow]) -> int:
    return max(r.label for r in rows) + 1


def pretrain_segments(rows: list[ManifestRow], fe: FrontendConfig, dtype=torch.float32) -> list[torch.Tensor]:
    """Per-file normalised patches cut into <= chunk_seconds blocks (short blocks dropped)."""
    segments = []
    for r in rows:
        patches = compute_patches(load_wav(r.path, fe.sample_rate), fe).tokens
        layout = layout_chunks(len(patches), "pretrain", fe)
        segments.extend(torch.as_tensor(patches[s:e], dtype=dtype) for s, e in layout.bounds)
    if not segments:
        raise DataError("corpus yields no segments of at least the minimum length")
    return segments


def sample_batch(segments: list[torch.Tensor], batch_size: int, generator: torch.Generator):
    """Random segments (with replacement), right-padded; pad_mask is None when nothing is padded."""
    idx = torch.randint(len(segments), (batch_size,), generator=generator).tolist()
    chosen = [segments[i] for i in idx]
    n = max(s.shape[0] for s in chosen)
    batch = chosen[0].new_zeros(batch_size, n, chosen[0].shape[1])
    pad = torch.ones(batch_size, n, dtype=torch.bool)
    for i, s in enumerate(chosen):
        batch[i, : s.shape[0]] = s
        pad[i, : s.shape[0]] = False
    return batch, (pad if bool(pad.any()) else None)


def load_waveforms(rows: list[ManifestRow], fe: FrontendConfig) -> list[Waveform]:
    return [load_wav(r.path, fe.sample_rate) for r in rows]
