"""Grid reports: CSV matrices, heatmaps and a trend summary.

Heatmap colours are relative to the source-only baseline ``b`` (percent)::

    value < b               red
    b      <= value < b+10  orange
    b+10   <= value < b+20  yellow
    b+20   <= value < b+30  yellow-green
    b+30   <= value < b+40  green
    value >= b+40           dark green

A value exactly on a boundary belongs to the band above it.
"""

import csv
import json
import math
import os
from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import spearmanr

from .exceptions import ReportError

BANDS = (
    ("red", "#e0412f", 196),
    ("orange", "#f39c34", 208),
    ("yellow", "#f4e04d", 226),
    ("yellowgreen", "#b5e051", 154),
    ("green", "#4cae4f", 34),
    ("darkgreen", "#1e6b2e", 22),
)


def band_index(value, baseline):
    """Index into ``BANDS`` for a percentage ``value`` against ``baseline``."""
    # rounding keeps b + 10k on its boundary despite float error in the sum
    diff = round(float(value) - float(baseline), 9)
    if diff < 0:
        return 0
    return min(1 + int(math.floor(diff / 10.0)), len(BANDS) - 1)


def band_name(value, baseline):
    return BANDS[band_index(value, baseline)][0]


def grid_matrix(cells, scenario, loss):
    """``(quantities, qualities, matrix)`` of mean primary metrics in percent.

    Raises :class:`ReportError` naming the missing cells when the results do
    not cover a full rectangle.
    """
    sel = {(c.quantity, c.quality): 100.0 * c.mean
           for c in cells if c.scenario == scenario and c.loss == loss}
    if not sel:
        raise ReportError(f"no results for {scenario}/{loss}")
    quantities = sorted({k[0] for k in sel})
    qualities = sorted({k[1] for k in sel})
    missing = [(q, a) for q in quantities for a in qualities if (q, a) not in sel]
    if missing:
        listed = ", ".join(f"(quantity {q:g}, quality {a:g})" for q, a in missing)
        raise ReportError(f"grid for {scenario}/{loss} is not rectangular; missing {listed}")
    m = np.array([[sel[q, a] for a in qualities] for q in quantities])
    return quantities, qualities, m


def write_csv(path, quantities, qualities, matrix):
    """Header row holds the quality values, first column the quantity values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity\\quality"] + [f"{a:g}" for a in qualities])
        for q, row in zip(quantities, matrix):
            w.writerow([f"{q:g}"] + [repr(float(v)) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ReportError(f"{path} is empty")
    qualities = [float(v) for v in rows[0][1:]]
    quantities = [float(r[0]) for r in rows[1:]]
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return quantities, qualities, matrix


def render_svg(quantities, qualities, matrix, baseline, title=""):
    cw, ch, left, top = 56, 28, 80, 60
    width = left + cw * len(qualities) + 20
    height = top + ch * len(quantities) + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>',
        f'<text x="{left}" y="40">quality (%), baseline {baseline:.1f}</text>',
        f'<text x="10" y="{top - 6}">quantity</text>',
    ]
    for j, a in enumerate(qualities):
        out.append(f'<text x="{left + j * cw + cw / 2}" y="{top - 6}" '
                   f'text-anchor="middle">{a:g}</text>')
    for i, q in enumerate(quantities):
        y = top + i * ch
        out.append(f'<text x="{left - 8}" y="{y + ch / 2 + 4}" text-anchor="end">{q:g}</text>')
        for j, v in enumerate(matrix[i]):
            name, colour, _ = BANDS[band_index(v, baseline)]
            x = left + j * cw
            out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{colour}" '
                       f'stroke="white" data-band="{name}"/>')
            out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" '
                       f'text-anchor="middle">{v:.1f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_ansi(quantities, qualities, matrix, baseline, title=""):
    lines = [f"{title}  (baseline {baseline:.1f})" if title else f"baseline {baseline:.1f}"]
    lines.append("q\\a  " + "".join(f"{a:>7g}" for a in qualities))
    for q, row in zip(quantities, matrix):
        cells = []
        for v in row:
            code = BANDS[band_index(v, baseline)][2]
            cells.append(f"\x1b[48;5;{code}m\x1b[30m{v:7.1f}\x1b[0m")
        lines.append(f"{q:<5g}" + "".join(cells))
    return "\n".join(lines) + "\n"


def baseline_means(baselines):
    """Scenario -> mean source-only metric in percent."""
    return {k: 100.0 * float(np.mean(list(v.values()))) for k, v in baselines.items()}


def _lookup(cells):
    return {c.key: 100.0 * c.mean for c in cells}


def trend_summary(cells, baselines, tolerance=2.0):
    """Qualitative trend checks over a finished grid.

    Each check reports the compared numbers and ``passed``; a check whose
    cells are absent from the grid is reported with ``passed = None``.
    """
    T = _lookup(cells)
    base = baseline_means(baselines)
    scenarios = sorted({c.scenario for c in cells})
    losses = sorted({c.loss for c in cells})
    checks = {"upper_bound": [], "loss_comparison": [], "quality_vs_quantity": [],
              "monotonicity": []}

    for s in scenarios:
        for l in losses:
            v = T.get((s, l, 100.0, 100.0))
            checks["upper_bound"].append({
                "scenario": s, "loss": l, "value": v, "baseline": base.get(s),
                "passed": None if v is None else bool(v >= base[s] + 10.0),
            })
            row = [(a, T[s, l, a, q]) for (s2, l2, a, q) in T
                   if (s2, l2, q) == (s, l, 100.0)]
            row.sort()
            # undefined for fewer than 3 points or a constant row
            vals = [v for _, v in row]
            rho = (float(spearmanr(*zip(*row))[0])
                   if len(row) >= 3 and max(vals) > min(vals) else None)
            checks["monotonicity"].append({
                "scenario": s, "loss": l, "spearman": rho,
                "passed": None if rho is None or np.isnan(rho) else bool(rho >= 0.8),
            })

    if {"contrastive", "cross_entropy"} <= set(losses):
        for s in scenarios:
            ce, con = T.get((s, "cross_entropy", 100.0, 100.0)), T.get((s, "contrastive", 100.0, 100.0))
            checks["loss_comparison"].append({
                "scenario": s, "quality": 100.0, "expect": "cross_entropy >= contrastive",
                "cross_entropy": ce, "contrastive": con,
                "passed": None if ce is None or con is None else bool(ce >= con - tolerance),
            })
            if s == "PDA":
                continue
            for a in sorted({c.quality for c in cells if c.quality <= 40.0}):
                ce, con = T.get((s, "cross_entropy", a, 100.0)), T.get((s, "contrastive", a, 100.0))
                checks["loss_comparison"].append({
                    "scenario": s, "quality": a, "expect": "contrastive >= cross_entropy",
                    "cross_entropy": ce, "contrastive": con,
                    "passed": None if ce is None or con is None else bool(con >= ce - tolerance),
                })

    dq, dn = [], []
    for s in scenarios:
        for l in losses:
            top = T.get((s, l, 100.0, 100.0))
            lo_q, lo_n = T.get((s, l, 50.0, 100.0)), T.get((s, l, 100.0, 50.0))
            if None not in (top, lo_q, lo_n):
                dq.append(top - lo_q)
                dn.append(top - lo_n)
    if dq:
        checks["quality_vs_quantity"].append({
            "quality_drop": float(np.mean(dq)), "quantity_drop": float(np.mean(dn)),
            "passed": bool(np.mean(dq) > np.mean(dn)),
        })

    flags = [c["passed"] for group in checks.values() for c in group if c["passed"] is not None]
    return {"baselines": base, "checks": checks, "all_passed": bool(flags) and all(flags)}


def emit_reports(cells, baselines, out_dir):
    """Write CSV, SVG and ANSI heatmaps per (scenario, loss) plus ``trends.json``.

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    base = baseline_means(baselines)
    written = []
    pairs = sorted({(c.scenario, c.loss) for c in cells})
    for s, l in pairs:
        quantities, qualities, m = grid_matrix(cells, s, l)
        stem = os.path.join(out_dir, f"{s}_{l}")
        write_csv(stem + ".csv", quantities, qualities, m)
        title = f"{s} / {l}"
        with open(stem + ".svg", "w") as fh:
            fh.write(render_svg(quantities, qualities, m, base[s], title))
        with open(stem + ".ansi", "w") as fh:
            fh.write(render_ansi(quantities, qualities, m, base[s], title))
        written += [stem + ".csv", stem + ".svg", stem + ".ansi"]
    with open(os.path.join(out_dir, "baselines.json"), "w") as fh:
        json.dump({k: {str(s): v for s, v in d.items()} for k, d in baselines.items()},
                  fh, indent=2, sort_keys=True)
    path = os.path.join(out_dir, "trends.json")
    with open(path, "w") as fh:
        json.dump(trend_summary(cells, baselines), fh, indent=2, sort_keys=True)
    written += [os.path.join(out_dir, "baselines.json"), path]
    return written
