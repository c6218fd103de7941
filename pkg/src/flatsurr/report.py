"""CSV tables, seed aggregates and deterministic SVG line plots."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TRANSFER_COLUMNS = ("epoch", "target", "seed", "success_rate")
AGGREGATE_COLUMNS = ("epoch", "target", "n_seeds", "mean", "std", "lo", "hi")
ARGMAX_COLUMNS = ("target", "epoch", "mean")
SHARPNESS_COLUMNS = ("epoch", "lambda_max", "trace", "trace_se")
TECHNIQUE_COLUMNS = ("technique", "base", "epsilon", "success_rate")
ALL_TARGETS = "ALL"


class MissingColumns(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV


def csv_text(columns: Sequence[str], rows: Iterable[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[Mapping]):
    from .models import atomic_write

    atomic_write(path, csv_text(columns, rows).encode())


def read_csv(path, required: Sequence[str] = ()) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingColumns(f"{path}: missing columns {missing}")
        return list(reader)


def read_transfer(path) -> list[dict]:
    rows = read_csv(path, TRANSFER_COLUMNS)
    return [{"epoch": int(r["epoch"]), "target": r["target"], "seed": int(r["seed"]),
             "success_rate": float(r["success_rate"])} for r in rows]


# ---------------------------------------------------------------------------
# aggregates


def _stats(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    mean = float(a.mean())
    std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return mean, std


def aggregate(rows: Iterable[Mapping]) -> list[dict]:
    """Per (epoch, target) mean and ±2σ band over seeds.

    The ``ALL`` target first averages the targets within each seed, then
    aggregates those per-seed means. Rows are sorted by epoch, then target.
    """
    rows = list(rows)
    by_key: dict = defaultdict(list)
    per_seed: dict = defaultdict(list)
    for r in rows:
        if not 0.0 <= r["success_rate"] <= 1.0:
            raise ValueError(f"success rate {r['success_rate']} outside [0, 1]")
        by_key[(r["epoch"], r["target"])].append((r["seed"], r["success_rate"]))
        per_seed[(r["epoch"], r["seed"])].append((r["target"], r["success_rate"]))
    # values are sorted before summation so row order cannot change the floats
    for (epoch, seed), vals in sorted(per_seed.items()):
        by_key[(epoch, ALL_TARGETS)].append((seed, float(np.mean([v for _, v in sorted(vals)]))))
    out = []
    for (epoch, target), pairs in sorted(by_key.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        vals = [v for _, v in sorted(pairs)]
        mean, std = _stats(vals)
        out.append({"epoch": epoch, "target": target, "n_seeds": len(vals), "mean": mean,
                    "std": std, "lo": mean - 2 * std, "hi": mean + 2 * std})
    return out


def argmax_epochs(agg: Iterable[Mapping]) -> list[dict]:
    """Epoch of the highest mean per target; ties go to the earliest epoch."""
    best: dict = {}
    for r in sorted(agg, key=lambda r: r["epoch"]):
        t = r["target"]
        if t not in best or r["mean"] > best[t]["mean"]:
            best[t] = {"target": t, "epoch": r["epoch"], "mean": r["mean"]}
    return [best[t] for t in sorted(best)]


def curve(agg: Iterable[Mapping], target: str = ALL_TARGETS, key: str = "mean") -> dict:
    return {r["epoch"]: r[key] for r in agg if r["target"] == target}


# ---------------------------------------------------------------------------
# SVG

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 150, "top": 40, "bottom": 50}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def color_for(name: str) -> str:
    h = int(hashlib.sha256(name.encode()).hexdigest(), 16)
    return PALETTE[h % len(PALETTE)]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot_svg(series: Mapping[str, Sequence[tuple[float, float]]], title: str = "",
                  xlabel: str = "", ylabel: str = "",
                  bands: Mapping[str, Sequence[tuple[float, float, float]]] | None = None,
                  markers: Mapping[str, tuple[float, float]] | None = None) -> str:
    """Render named (x, y) series on a fixed 640x400 canvas.

    Output depends only on the inputs, so identical data gives identical
    bytes. Series without points are skipped; with no points at all the
    axes carry a "no data" annotation.
    """
    bands = bands or {}
    markers = markers or {}
    pts = [(x, y) for s in series.values() for x, y in s]
    pts += [(x, v) for b in bands.values() for x, lo, hi in b for v in (lo, hi)]
    x0, y0 = MARGIN["left"], HEIGHT - MARGIN["bottom"]
    x1, y1 = WIDTH - MARGIN["right"], MARGIN["top"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
           f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
           f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
           f'font-size="12">{_esc(xlabel)}</text>',
           f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{_esc(ylabel)}</text>']
    finite = [(x, y) for x, y in pts if math.isfinite(x) and math.isfinite(y)]
    if not finite:
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{(y0 + y1) / 2:.1f}" '
                   f'text-anchor="middle" font-size="16" fill="#888">no data</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
    xmin, xmax = min(p[0] for p in finite), max(p[0] for p in finite)
    ymin, ymax = min(p[1] for p in finite), max(p[1] for p in finite)
    if xmax == xmin:
        xmin, xmax = xmin - 1, xmax + 1
    if ymax == ymin:
        ymin, ymax = ymin - 0.5, ymax + 0.5

    def sx(x):
        return x0 + (x - xmin) / (xmax - xmin) * (x1 - x0)

    def sy(y):
        return y0 - (y - ymin) / (ymax - ymin) * (y0 - y1)

    for t in _ticks(xmin, xmax):
        out.append(f'<line x1="{sx(t):.2f}" y1="{y0}" x2="{sx(t):.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{y0 + 18}" text-anchor="middle" '
                   f'font-size="10">{t:.4g}</text>')
    for t in _ticks(ymin, ymax):
        out.append(f'<line x1="{x0 - 5}" y1="{sy(t):.2f}" x2="{x0}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{sy(t) + 3:.2f}" text-anchor="end" '
                   f'font-size="10">{t:.4g}</text>')
    for name in sorted(bands):
        b = sorted(bands[name])
        if not b:
            continue
        upper = " ".join(f"{sx(x):.2f},{sy(hi):.2f}" for x, _, hi in b)
        lower = " ".join(f"{sx(x):.2f},{sy(lo):.2f}" for x, lo, _ in reversed(b))
        out.append(f'<polygon points="{upper} {lower}" fill="{color_for(name)}" '
                   f'fill-opacity="0.15" stroke="none"/>')
    legend_y = MARGIN["top"] + 10
    for name in sorted(series):
        s = sorted(series[name])
        if not s:
            continue
        c = color_for(name)
        path = " ".join(("M" if i == 0 else "L") + f"{sx(x):.2f},{sy(y):.2f}"
                        for i, (x, y) in enumerate(s))
        out.append(f'<path d="{path}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        out.append(f'<line x1="{x1 + 10}" y1="{legend_y}" x2="{x1 + 30}" y2="{legend_y}" '
                   f'stroke="{c}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 35}" y="{legend_y + 4}" font-size="11">{_esc(name)}</text>')
        legend_y += 16
    for name in sorted(markers):
        x, y = markers[name]
        px, py = sx(x), sy(y)
        out.append(f'<polygon points="{px:.2f},{py - 6:.2f} {px - 5:.2f},{py + 3:.2f} '
                   f'{px + 5:.2f},{py + 3:.2f}" fill="{color_for(name)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# artifact directory report


def emit_report(artifact_dir) -> list[Path]:
    """Recompute aggregates and plots from the raw CSVs in ``artifact_dir``."""
    from .models import atomic_write

    d = Path(artifact_dir)
    written = []
    tpath = d / "transfer.csv"
    rows = read_transfer(tpath) if tpath.exists() else []
    agg = aggregate(rows)
    write_csv(d / "aggregate.csv", AGGREGATE_COLUMNS, agg)
    write_csv(d / "argmax.csv", ARGMAX_COLUMNS, argmax_epochs(agg))
    written += [d / "aggregate.csv", d / "argmax.csv"]
    targets = sorted({r["target"] for r in agg})
    series = {t: [(r["epoch"], r["mean"]) for r in agg if r["target"] == t] for t in targets}
    bands = {ALL_TARGETS: [(r["epoch"], r["lo"], r["hi"]) for r in agg
                           if r["target"] == ALL_TARGETS]} if agg else {}
    marks = {a["target"]: (a["epoch"], a["mean"]) for a in argmax_epochs(agg)}
    atomic_write(d / "transfer.svg", line_plot_svg(series, "transfer success rate", "epoch",
                                                   "success rate", bands, marks).encode())
    written.append(d / "transfer.svg")

    sharp = {}
    for p in sorted(d.glob("surrogates/seed*/sharpness.csv")):
        recs = read_csv(p, SHARPNESS_COLUMNS)
        seed = p.parent.name
        sharp[f"lambda_max {seed}"] = [(int(r["epoch"]), float(r["lambda_max"])) for r in recs]
        sharp[f"trace {seed}"] = [(int(r["epoch"]), float(r["trace"])) for r in recs]
    if sharp or (d / "surrogates").exists():
        atomic_write(d / "sharpness.svg", line_plot_svg(sharp, "Hessian sharpness", "epoch",
                                                        "value").encode())
        written.append(d / "sharpness.svg")
    tech = d / "techniques.csv"
    if tech.exists():
        read_csv(tech, TECHNIQUE_COLUMNS)
    return written
