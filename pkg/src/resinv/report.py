"""Tables and figures from command outputs.

Every figure is backed by a CSV or JSON file written next to it; the PNGs
are a convenience rendering of the same numbers. matplotlib is imported
lazily so the library itself never needs it.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .glyphs import image_grid, write_pgm

BENCH_COLUMNS = ("method", "T", "inner_iters", "latency_s", "max_abs_err", "mse")
ABLATION_COLUMNS = ("stage", "identity_error", "identity_error_median", "diversity", "latency_s")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def rows_to_markdown(rows: Sequence[dict], columns: Sequence[str]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) or "-" for c in columns) + " |")
    return "\n".join(lines) + "\n"


def latency_markdown(rows: Sequence[dict]) -> str:
    """Latency table with each method's slowdown relative to ResInversion."""
    res = next((r["latency_s"] for r in rows if r["method"] == "res"), None)
    out = []
    for r in rows:
        rel = None if not res else r["latency_s"] / res
        out.append({**r, "x_res": None if rel is None else round(rel, 2)})
    return rows_to_markdown(out, (*BENCH_COLUMNS, "x_res"))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a x + b``; returns ``(a, b, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def write_grid(path, images, ncols=None) -> None:
    write_pgm(path, image_grid(images, ncols))


# -- figures ------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "figure.figsize": (4.2, 2.8),
        "font.size": 8,
        "axes.labelsize": 8,
        "axes.linewidth": 0.6,
        "lines.linewidth": 1.0,
        "lines.markersize": 3.5,
        "savefig.dpi": 150,
        "svg.hashsalt": "resinv",
    })
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path


def plot_latency(rows: Sequence[dict], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots()
    names = [r["method"] if r["method"] != "nti" or not r.get("inner_iters")
             else f"nti/{r['inner_iters']}" for r in rows]
    vals = [float(r["latency_s"]) for r in rows]
    ax.bar(names, vals, color="#4eb3d3")
    ax.set_yscale("log")
    ax.set_ylabel("latency per image (s)")
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3g}", ha="center", va="bottom", fontsize=7)
    return _save(fig, path)


def plot_nti_scaling(iters: Sequence[int], latencies: Sequence[float], path) -> Path:
    plt = _pyplot()
    a, b, r2 = linear_fit(iters, latencies)
    fig, ax = plt.subplots()
    ax.plot(iters, latencies, "o", color="#08589e", label="measured")
    xs = np.linspace(0, max(iters), 50)
    ax.plot(xs, a * xs + b, "--", color="#7bccc4", label=f"fit, R$^2$={r2:.3f}")
    ax.set_xlabel("NTI inner iterations")
    ax.set_ylabel("latency (s)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots()
    names = [r["stage"] for r in rows]
    ax.bar(names, [float(r["identity_error_median"]) for r in rows], color="#2b8cbe")
    ax.set_ylabel("identity-fit error (median)")
    ax.tick_params(axis="x", labelsize=7)
    return _save(fig, path)


def plot_fusion(mss: Sequence[int], curves: Sequence[Sequence[float]], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots()
    arr = np.asarray(curves, dtype=np.float64)
    for c in arr:
        ax.plot(mss, c, color="#a8ddb5", lw=0.6)
    ax.plot(mss, np.median(arr, axis=0), "o-", color="#08589e", label="median")
    ax.set_xlabel("manipulation starting step")
    ax.set_ylabel("anchor-box MSE to source")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_loss(losses: Sequence[float], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots()
    ax.plot(np.arange(1, len(losses) + 1), losses, color="#08589e")
    ax.set_xlabel("epoch")
    ax.set_ylabel("denoising loss")
    if min(losses) > 0 and max(losses) / min(losses) > 10:
        ax.set_yscale("log")
    return _save(fig, path)


def render_report(run_dirs: Sequence, out_dir) -> list[Path]:
    """Scan command output directories and draw whatever figures they support."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    summary: list[str] = []
    for d in map(Path, run_dirs):
        tag = d.name or "run"
        bench = d / "bench.json"
        if bench.exists():
            doc = json.loads(bench.read_text())
            written.append(plot_latency(doc["rows"], out / f"{tag}-latency.png"))
            summary.append(f"## {tag}: inversion latency\n\n" + latency_markdown(doc["rows"]))
            sweep = doc.get("nti_sweep") or []
            if len(sweep) >= 2:
                written.append(plot_nti_scaling([r["inner_iters"] for r in sweep],
                                                [r["latency_s"] for r in sweep],
                                                out / f"{tag}-nti-scaling.png"))
        abl = d / "ablation.json"
        if abl.exists():
            doc = json.loads(abl.read_text())
            written.append(plot_ablation(doc["rows"], out / f"{tag}-ablation.png"))
            summary.append(f"## {tag}: ablation\n\n" + rows_to_markdown(doc["rows"], ABLATION_COLUMNS))
        fus = d / "fusion.json"
        if fus.exists():
            doc = json.loads(fus.read_text())
            curves = [run["box_mse_to_source"] for run in doc["runs"]]
            written.append(plot_fusion(doc["mss_sweep"], curves, out / f"{tag}-fusion.png"))
        loss = d / "loss.csv"
        if loss.exists():
            vals = [float(r["loss"]) for r in read_csv(loss)]
            if vals:
                written.append(plot_loss(vals, out / f"{tag}-loss.png"))
    if not written:
        raise FileNotFoundError("no bench.json, ablation.json, fusion.json or loss.csv found")
    md = out / "report.md"
    md.write_text("\n".join(summary) + ("\n" if summary else ""))
    written.append(md)
    return written
