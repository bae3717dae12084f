"""Render a bundle into SVG charts and a text summary.

Every number is recomputed from the bundle's CSV files; nothing is read
from checkpoints or cached summaries. All inputs are read and every output
is rendered in memory before the first file is written, so a failing
report leaves no partial output behind. SVG is written by hand with fixed
number formatting, so identical CSVs give byte-identical files.
"""
from __future__ import annotations

import math
import os
from collections import defaultdict
from html import escape

import numpy as np

from .errors import ReportError
from .metrics import robust_accuracy
from .pipeline import UTILITY_NOTE, read_csv

REQUIRED = ("metrics.csv", "attacks.csv", "heatmap.csv", "lambda_sweep.csv",
            "taskvec/coords.csv")
PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#7b4b94", "#00798c", "#6c757d",
           "#8c564b")


def _f(x) -> str:
    return f"{x:.2f}"


def _num(text):
    return float(text) if text not in ("", None) else math.nan


# --- bundle parsing ------------------------------------------------------------

def load_bundle(bundle) -> dict:
    if not os.path.isdir(bundle):
        raise ReportError(f"bundle directory {bundle} does not exist")
    data = {}
    for name in REQUIRED:
        path = os.path.join(bundle, name)
        if not os.path.exists(path):
            raise ReportError(f"bundle is missing {name} ({path})")
        if name.endswith("coords.csv"):
            with open(path, encoding="utf-8") as fh:
                data[name] = fh.read()
        else:
            data[name] = read_csv(path)
    if not data["metrics.csv"]:
        raise ReportError(f"metrics.csv in {bundle} has no rows")
    return data


def attack_curves(metrics_rows):
    """``{(approach, task): {seed: [(epoch, fq, fa), ...]}}`` for downstream attacks."""
    out = defaultdict(dict)
    for r in metrics_rows:
        if r["phase"] != "attack":
            continue
        parts = r["run_id"].split("/")
        if len(parts) != 4 or parts[2] != "attack":
            continue
        seed, approach, _, task = parts
        out[(approach, task)].setdefault(seed, []).append(
            (int(r["step_or_epoch"]), _num(r["fq"]), _num(r["fa"])))
    for curves in out.values():
        for seed in curves:
            curves[seed].sort()
    return out


def summary_table(metrics_rows):
    """Per approach: FQ before attack, RA and final FA (downstream), relearn drop, utility.

    Means run over seeds and evaluation tasks; RA comes from the per-epoch
    FQ values through :func:`robust_accuracy`.
    """
    curves = attack_curves(metrics_rows)
    per = defaultdict(lambda: defaultdict(list))
    for (approach, _task), seeds in curves.items():
        for seed, pts in seeds.items():
            fq = [p[1] for p in pts]
            per[approach]["fq_before"].append(fq[0])
            if len(pts) > 1:
                per[approach]["ra"].append(robust_accuracy([p[1] for p in pts if p[0] >= 1]))
            per[approach]["fa"].append(pts[-1][2])
    relearn = defaultdict(dict)
    for r in metrics_rows:
        parts = r["run_id"].split("/")
        if r["phase"] == "relearn" and len(parts) == 3:
            relearn[(parts[1], parts[0])][int(r["step_or_epoch"])] = _num(r["fq"])
        if r["phase"] in ("unlearn", "eval") and len(parts) == 3 and r["utility"] != "":
            per[parts[1]].setdefault("_util", {})
            per[parts[1]]["_util"][parts[0]] = (int(r["step_or_epoch"]), _num(r["utility"]))
    for (approach, _seed), traj in relearn.items():
        epochs = sorted(traj)
        per[approach]["relearn_drop"].append(traj[epochs[0]] - traj[epochs[-1]])
    table = {}
    for approach, d in per.items():
        util = d.get("_util", {})
        table[approach] = {
            "fq_before": _mean(d["fq_before"]), "ra": _mean(d["ra"]), "fa": _mean(d["fa"]),
            "relearn_drop": _mean(d["relearn_drop"]),
            "utility": _mean([u for _step, u in util.values()]),
            "n": len(d["fq_before"])}
    return table


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else math.nan


def _order(names):
    """``Original`` first, then methods with each method's ILU rows after it."""
    def key(n):
        if n == "Original":
            return ("", 0)
        method, _, variant = n.partition("+")
        return (method, {"": 1, "ILU(single)": 2, "ILU(multi)": 3}.get(variant, 4))
    return sorted(names, key=key)


def format_summary(table) -> str:
    lines = [f"# {UTILITY_NOTE}",
             "# RA = mean FQ at the quartile, median and final attack epochs; means over "
             "seeds and evaluation tasks",
             f"{'approach':<18} {'FQ(no attack)':>13} {'RA':>8} {'FA':>8} "
             f"{'relearn drop':>12} {'utility':>8} {'attacks':>7}"]
    for name in _order(table):
        t = table[name]
        lines.append(f"{name:<18} {_cell(t['fq_before']):>13} {_cell(t['ra']):>8} "
                     f"{_cell(t['fa']):>8} {_cell(t['relearn_drop']):>12} "
                     f"{_cell(t['utility']):>8} {t['n']:>7}")
    return "\n".join(lines) + "\n"


def _cell(x):
    return "-" if math.isnan(x) else f"{x:.4f}"


# --- SVG primitives ------------------------------------------------------------------

class Svg:
    def __init__(self, width, height, title):
        self.width, self.height = width, height
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                      f'height="{height}" viewBox="0 0 {width} {height}" '
                      f'font-family="sans-serif" font-size="11">',
                      f'<rect width="{width}" height="{height}" fill="white"/>',
                      f'<text x="{_f(width / 2)}" y="16" text-anchor="middle" '
                      f'font-size="13">{escape(title)}</text>']

    def text(self, x, y, s, anchor="start", size=None, rotate=None, color="black"):
        extra = f' font-size="{size}"' if size else ""
        if rotate is not None:
            extra += f' transform="rotate({rotate} {_f(x)} {_f(y)})"'
        self.parts.append(f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" '
                          f'fill="{color}"{extra}>{escape(str(s))}</text>')

    def line(self, x1, y1, x2, y2, color="#444", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                          f'stroke="{color}" stroke-width="{width}"{d}/>')

    def polyline(self, pts, color, width=1.5):
        p = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.parts.append(f'<polyline points="{p}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"/>')

    def circle(self, x, y, r, color):
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{r}" fill="{color}"/>')

    def rect(self, x, y, w, h, fill, stroke="none"):
        self.parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class Axes:
    """Linear mapping of a data box onto a pixel box, with ticks and labels."""

    def __init__(self, svg, box, xlim, ylim, xlabel, ylabel):
        self.svg, self.box = svg, box
        self.xlim, self.ylim = _pad(xlim), _pad(ylim)
        x0, y0, w, h = box
        svg.line(x0, y0 + h, x0 + w, y0 + h)
        svg.line(x0, y0, x0, y0 + h)
        for i in range(5):
            fx = self.xlim[0] + (self.xlim[1] - self.xlim[0]) * i / 4
            fy = self.ylim[0] + (self.ylim[1] - self.ylim[0]) * i / 4
            px, py = self.x(fx), self.y(fy)
            svg.line(px, y0 + h, px, y0 + h + 4)
            svg.text(px, y0 + h + 15, _tick(fx), anchor="middle", size=9)
            svg.line(x0 - 4, py, x0, py)
            svg.line(x0, py, x0 + w, py, color="#e6e6e6")
            svg.text(x0 - 6, py + 3, _tick(fy), anchor="end", size=9)
        svg.text(x0 + w / 2, y0 + h + 30, xlabel, anchor="middle")
        svg.text(x0 - 38, y0 + h / 2, ylabel, anchor="middle", rotate=-90)

    def x(self, v):
        x0, _, w, _ = self.box
        return x0 + (v - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * w

    def y(self, v):
        _, y0, _, h = self.box
        return y0 + h - (v - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * h


def _pad(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return (0.0, 1.0)
    if hi - lo < 1e-9:
        return (lo - 0.5, hi + 0.5)
    return (lo, hi)


def _tick(v):
    return f"{v:.2f}" if abs(v) < 100 else f"{v:.0f}"


def _legend(svg, x, y, names):
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        svg.line(x, y + 14 * i, x + 18, y + 14 * i, color=color, width=2.5)
        svg.text(x + 24, y + 14 * i + 4, name, size=10)


# --- charts ----------------------------------------------------------------------

def attack_chart(task, curves) -> str:
    """FQ and FA against fine-tuning epoch for every approach (mean over seeds)."""
    names = _order({a for a, t in curves if t == task})
    mean = {}
    for name in names:
        seeds = curves[(name, task)]
        epochs = max(len(v) for v in seeds.values())
        fq = [_mean([v[e][1] for v in seeds.values() if len(v) > e]) for e in range(epochs)]
        fa = [_mean([v[e][2] for v in seeds.values() if len(v) > e]) for e in range(epochs)]
        mean[name] = (fq, fa)
    emax = max(len(v[0]) for v in mean.values()) - 1
    svg = Svg(860, 340, f"Downstream fine-tuning attack on {task}: mean over seeds")
    for panel, (label, k) in enumerate((("forget quality (FQ)", 0), ("task accuracy (FA)", 1))):
        ax = Axes(svg, (70 + panel * 330, 40, 260, 240), (0, max(emax, 1)), (0, 1), "epoch", label)
        for i, name in enumerate(names):
            ys = mean[name][k]
            svg.polyline([(ax.x(e), ax.y(v)) for e, v in enumerate(ys) if math.isfinite(v)],
                         PALETTE[i % len(PALETTE)])
    _legend(svg, 690, 50, names)
    return svg.render()


def heatmap_chart(rows) -> str:
    cols = [c for c in rows[0] if c != "approach"]
    svg = Svg(130 + 90 * len(cols) + 20, 60 + 30 * len(rows) + 40,
              "FQ after fine-tuning (rows: approach, columns: setting)")
    x0, y0 = 130, 50
    for j, c in enumerate(cols):
        svg.text(x0 + 90 * j + 45, y0 - 6, c, anchor="middle")
    for i, r in enumerate(rows):
        svg.text(x0 - 8, y0 + 30 * i + 19, r["approach"], anchor="end")
        for j, c in enumerate(cols):
            v = _num(r[c])
            shade = 255 if math.isnan(v) else int(round(255 - 180 * min(max(v, 0.0), 1.0)))
            fill = f"rgb({shade},{shade},255)"
            svg.rect(x0 + 90 * j, y0 + 30 * i, 90, 30, fill, stroke="white")
            svg.text(x0 + 90 * j + 45, y0 + 30 * i + 19, _cell(v), anchor="middle",
                     color="white" if v > 0.6 else "black")
    return svg.render()


def parse_coords(text):
    """Blocks of the coords CSV: ``[(title, [(name, x, y), ...]), ...]``."""
    blocks, cur = [], None
    for line in text.splitlines():
        if line.startswith("# seed="):
            cur = (line[2:], [])
            blocks.append(cur)
        elif line.startswith("#") or line.startswith("vector,") or not line.strip():
            continue
        elif cur is not None:
            name, x, y, _norm = line.split(",")
            cur[1].append((name, float(x), float(y)))
    return blocks


def taskvec_chart(blocks) -> str:
    """One small panel per (seed, method, task); origin marks the start checkpoint."""
    cols = 3
    n = max(len(blocks), 1)
    rows = math.ceil(n / cols)
    svg = Svg(cols * 290 + 20, rows * 270 + 40, "Task vectors in the (unlearning, fine-tuning) plane")
    for k, (title, pts) in enumerate(blocks):
        bx, by = 60 + (k % cols) * 290, 50 + (k // cols) * 270
        xs = [0.0] + [p[1] for p in pts]
        ys = [0.0] + [p[2] for p in pts]
        span = max(max(map(abs, xs)), max(map(abs, ys)), 1e-12) * 1.1
        ax = Axes(svg, (bx, by, 200, 180), (-span, span), (-span, span), "x", "y")
        svg.text(bx + 100, by - 6, title, anchor="middle", size=9)
        for i, (name, x, y) in enumerate(pts):
            color = PALETTE[i % len(PALETTE)]
            svg.line(ax.x(0), ax.y(0), ax.x(x), ax.y(y), color=color, width=1.5)
            svg.circle(ax.x(x), ax.y(y), 2.5, color)
            svg.text(ax.x(x) + 3, ax.y(y) - 3, name, size=8, color=color)
    return svg.render()


def sweep_chart(rows) -> str:
    pts = [(float(r["lam"]), _num(r.get("fq_before")), _num(r.get("fq_after")),
            _num(r.get("utility"))) for r in rows]
    pts.sort()
    svg = Svg(560, 340, "Lambda sweep (x axis: log10 lambda)")
    lx = [math.log10(p[0]) if p[0] > 0 else -3.0 for p in pts] or [0.0, 1.0]
    ax = Axes(svg, (70, 40, 330, 240), (min(lx), max(lx)), (0, 1), "log10(lambda)", "value")
    series = (("FQ before attack", 1), ("FQ after attack", 2), ("utility", 3))
    for i, (name, k) in enumerate(series):
        xy = [(ax.x(x), ax.y(p[k])) for x, p in zip(lx, pts) if math.isfinite(p[k])]
        svg.polyline(xy, PALETTE[i])
        for x, y in xy:
            svg.circle(x, y, 2.5, PALETTE[i])
    _legend(svg, 420, 50, [s[0] for s in series])
    return svg.render()


# --- entry point ------------------------------------------------------------------

def build_report(bundle) -> dict:
    """Render every output in memory: ``{relative path: text}``."""
    data = load_bundle(bundle)
    curves = attack_curves(data["metrics.csv"])
    if not curves:
        raise ReportError(f"metrics.csv in {bundle} has no downstream attack rows")
    files = {}
    for task in sorted({t for _a, t in curves}):
        files[f"report/attack_{task}.svg"] = attack_chart(task, curves)
    if data["heatmap.csv"]:
        files["report/heatmap.svg"] = heatmap_chart(data["heatmap.csv"])
    files["report/taskvec.svg"] = taskvec_chart(parse_coords(data["taskvec/coords.csv"]))
    if data["lambda_sweep.csv"]:
        files["report/lambda_sweep.svg"] = sweep_chart(data["lambda_sweep.csv"])
    files["report/summary.txt"] = format_summary(summary_table(data["metrics.csv"]))
    return files


def render_report(bundle) -> list:
    files = build_report(bundle)
    written = []
    for rel, text in sorted(files.items()):
        path = os.path.join(bundle, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(path)
    return written
