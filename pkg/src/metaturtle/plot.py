"""Standalone SVG learning curves from ``metrics.csv`` files."""
from __future__ import annotations

import csv
import glob
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import MetaTurtleError

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 20, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotInputError(MetaTurtleError):
    pass


def expand_inputs(spec: str) -> list[list[Path]]:
    """Comma-separated entries; each is a CSV file, a run directory tree, or a glob.

    Every entry becomes one curve averaged over the CSV files it names.
    """
    groups = []
    for entry in (s for s in spec.split(",") if s.strip()):
        p = Path(entry.strip())
        if p.is_dir():
            files = sorted(p.rglob("metrics.csv"))
        elif any(ch in entry for ch in "*?["):
            files = sorted(Path(f) for f in glob.glob(entry.strip(), recursive=True))
        else:
            files = [p]
        if not files:
            raise PlotInputError(f"{entry}: no metrics.csv files found")
        groups.append(files)
    return groups


def read_validation_curve(path: Path) -> dict[int, float]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise PlotInputError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["tasks_seen", "split", "mse"]:
            raise PlotInputError(f"{path}:1: expected header tasks_seen,split,mse")
        curve = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise PlotInputError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            try:
                t, split, mse = int(row[0]), row[1], float(row[2])
            except ValueError:
                raise PlotInputError(f"{path}:{line}: cannot parse {','.join(row)!r}") from None
            if split not in ("val", "test"):
                raise PlotInputError(f"{path}:{line}: unknown split {split!r}")
            if split == "val":
                curve[t] = mse
    return curve


def mean_curve(paths: list[Path]) -> list[tuple[int, float]]:
    """Mean validation MSE over runs at each tasks_seen present in every run that has it."""
    acc: dict[int, list[float]] = {}
    for p in paths:
        for t, m in read_validation_curve(p).items():
            acc.setdefault(t, []).append(m)
    return [(t, math.fsum(v) / len(v)) for t, v in sorted(acc.items())]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(step))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= step), default=step)
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def _num(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def render_svg(curves: list[tuple[str, list[tuple[int, float]]]]) -> str:
    pts = [p for _, c in curves for p in c]
    if not pts:
        raise PlotInputError("nothing to plot")
    x_lo, x_hi = 0.0, max(float(t) for t, _ in pts)
    y_lo, y_hi = 0.0, max(m for _, m in pts)
    x_hi = x_hi if x_hi > x_lo else x_lo + 1.0
    y_hi = y_hi if y_hi > y_lo else y_lo + 1.0
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN["top"] + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<path d="M{x0},{MARGIN["top"]} V{y0} H{x0 + pw}" stroke="black" fill="none"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{sx(t):.2f}" y="{y0 + 16}" text-anchor="middle">{_num(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 6}" y="{sy(t) + 4:.2f}" text-anchor="end">{_num(t)}</text>')
    out.append(f'<text x="{x0 + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">tasks seen</text>')
    out.append(f'<text transform="translate(16 {MARGIN["top"] + ph / 2}) rotate(-90)" '
               f'text-anchor="middle">mean validation MSE</text>')
    for i, (label, curve) in enumerate(curves):
        color = COLORS[i % len(COLORS)]
        coords = [(sx(t), sy(m)) for t, m in curve]
        if len(coords) == 1:
            cx, cy = coords[0]
            out.append(f'<circle class="series" cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}"/>')
        elif coords:
            d = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords)
            out.append(f'<polyline class="series" points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN["top"] + 14 + 18 * i
        lx = WIDTH - MARGIN["right"] + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(inputs: str, labels: str | None, out_path) -> int:
    """Write the SVG and return the number of curves drawn."""
    groups = expand_inputs(inputs)
    if not groups:
        raise PlotInputError("no input files given")
    names = [s.strip() for s in labels.split(",")] if labels else [str(g[0].parent.name or g[0]) for g in groups]
    if len(names) != len(groups):
        raise PlotInputError(f"{len(names)} labels for {len(groups)} inputs")
    curves = [(name, mean_curve(g)) for name, g in zip(names, groups)]
    Path(out_path).write_text(render_svg(curves))
    return len(curves)
