"""Delimited summaries of metrics/cost files and the matplotlib figures written next to them."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "svg.hashsalt": "hear",
}

# keys that index rows rather than being plotted
INDEX_KEYS = ("step", "epoch")


def figure(width=5.0, ratio=(math.sqrt(5) - 1) / 2):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, width * ratio))
    return fig, ax


def save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        # fixed metadata keeps repeated renders byte-identical
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Creator": None, "Date": None})
    plt.close(fig)
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def numeric_columns(rows: list[dict]) -> list[str]:
    cols = []
    for r in rows:
        for k, v in r.items():
            if k not in cols and k not in INDEX_KEYS and isinstance(v, (int, float)) and not isinstance(v, bool):
                cols.append(k)
    return cols


def summarize(rows: list[dict], source: str) -> list[dict]:
    """One record per numeric column: count, first, last, min, max."""
    out = []
    for col in numeric_columns(rows):
        vals = [r[col] for r in rows if isinstance(r.get(col), (int, float)) and r.get(col) is not None]
        if not vals:
            continue
        out.append({
            "source": source, "metric": col, "count": len(vals),
            "first": vals[0], "last": vals[-1], "min": min(vals), "max": max(vals),
        })
    return out


def to_delimited(records: list[dict], delimiter: str = "\t") -> str:
    if not records:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(records[0]), delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def plot_metrics(rows: list[dict], path: Path, title: str = "") -> Path:
    """One panel per numeric column against step/epoch; rows with a ``split`` get one line per split."""
    cols = numeric_columns(rows)
    xkey = next((k for k in INDEX_KEYS if any(k in r for r in rows)), None)
    n = max(len(cols), 1)
    ncols = min(3, n)
    nrows = math.ceil(n / ncols)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.4 * nrows), squeeze=False)
        groups = sorted({(r.get("run", ""), r.get("split", "")) for r in rows})
        for ax, col in zip(axes.flat, cols):
            for run, split in groups:
                sel = [r for r in rows if r.get("run", "") == run and r.get("split", "") == split and col in r]
                if not sel:
                    continue
                xs = [r.get(xkey, i) for i, r in enumerate(sel)]
                label = "/".join(s for s in (run, split) if s) or None
                ax.plot(xs, [r[col] for r in sel], lw=1, label=label)
            ax.set_xlabel(xkey or "row")
            ax.set_ylabel(col)
            if len(groups) > 1 and len(groups) <= 8:
                ax.legend(frameon=False)
        for ax in list(axes.flat)[len(cols):]:
            ax.set_visible(False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return save(fig, path)


def plot_cost_breakdown(report: dict, path: Path) -> Path:
    flops = report["flops"]
    cats = [k for k in ("embedding", "attention_linear", "attention_quadratic", "ffn", "elementwise", "gating", "task", "head")]
    fig, ax = figure()
    with plt.rc_context(RC):
        ax.barh(cats[::-1], [flops[c] / 1e9 for c in cats[::-1]], color="0.4")
        ax.axvline(0, color="k", lw=0.5)
        ax.set_xlabel("GFLOPs")
        ax.set_title(f"{report['duration_s']:g} s clip: {report['gflops_total']:.2f} GFLOPs "
                     f"(ref {report['reference']['gflops']})")
    return save(fig, path)


def plot_scaling(durations, chunked, monolithic, path: Path) -> Path:
    """Acoustic-model GFLOPs against clip length, chunked versus one global attention window."""
    fig, ax = figure()
    with plt.rc_context(RC):
        ax.plot(durations, [c / 1e9 for c in chunked], "o-", ms=3, lw=1, label="6 s chunks")
        ax.plot(durations, [m / 1e9 for m in monolithic], "s--", ms=3, lw=1, label="global attention")
        ax.set_xlabel("audio duration (s)")
        ax.set_ylabel("acoustic GFLOPs")
        ax.legend(frameon=False)
    return save(fig, path)


def report(paths, out_dir: Path | None = None, delimiter: str = "\t") -> str:
    """Summarise metrics JSONL (or cost-report JSON) files; figures go to out_dir when given."""
    records = []
    for p in map(Path, paths):
        if p.suffix == ".json":
            data = json.loads(p.read_text())
            if "flops" in data:
                rows = [{"metric": k, "value": v} for k, v in data["flops"].items()]
                records += [{"source": p.name, "metric": f"flops.{r['metric']}", "count": 1, "first": r["value"],
                             "last": r["value"], "min": r["value"], "max": r["value"]} for r in rows]
                if out_dir:
                    plot_cost_breakdown(data, Path(out_dir) / f"{p.stem}.png")
                continue
            rows = [data]
        else:
            rows = read_jsonl(p)
        records += summarize(rows, p.name)
        if out_dir and rows:
            plot_metrics(rows, Path(out_dir) / f"{p.stem}.png", title=p.stem)
    return to_delimited(records, delimiter)
