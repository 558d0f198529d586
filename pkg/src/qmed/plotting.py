"""Minimal dependency-free SVG line/scatter charts for QQ and power plots."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

_COLORS = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d")


def svg_chart(series, title="", xlabel="", ylabel="", diagonal=False, width=480, height=360,
              xlim=None, ylim=None, lines=True):
    """``series`` maps a legend label to ``(x, y)`` arrays."""
    pad_l, pad_r, pad_t, pad_b = 56, 130, 30, 46
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.r_[0, 1]
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.r_[0, 1]
    x0, x1 = xlim or (float(np.nanmin(xs)), float(np.nanmax(xs)))
    y0, y1 = ylim or (float(np.nanmin(ys)), float(np.nanmax(ys)))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def py(v):
        return pad_t + ph - (v - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{escape(ylabel)}</text>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{px(xv):.1f}" y="{pad_t + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{pad_l - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    if diagonal:
        lo, hi = max(x0, y0), min(x1, y1)
        out.append(f'<line x1="{px(lo):.1f}" y1="{py(lo):.1f}" x2="{px(hi):.1f}" y2="{py(hi):.1f}" '
                   f'stroke="#999" stroke-dasharray="4 3"/>')
    for i, (label, (x, y)) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        if lines:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        else:
            out += [f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="1.6" fill="{c}"/>' for a, b in zip(x, y)]
        ly = pad_t + 14 * (i + 1)
        out.append(f'<rect x="{pad_l + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{c}"/>')
        out.append(f'<text x="{pad_l + pw + 24}" y="{ly + 1}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def qq_svg(report, label):
    """Uniform QQ plot of every method's p-values for one study cell."""
    series = {}
    for key, ps in report.pvalues.items():
        lab, method = key.split("|")
        if lab != label:
            continue
        ps = np.sort(np.asarray(ps))
        series[method] = ((np.arange(1, ps.size + 1) - 0.5) / ps.size, ps)
    return svg_chart(series, title=f"QQ: {label}", xlabel="uniform quantile", ylabel="p-value",
                     diagonal=True, xlim=(0, 1), ylim=(0, 1), lines=False)


def power_svg(report):
    """Rejection rate against ``alpha_S`` (or grid position) per method."""
    series = {}
    for row in report.rows:
        series.setdefault(row["method"], ([], []))
        series[row["method"]][0].append(row.get("alpha_S", len(series[row["method"]][0])))
        series[row["method"]][1].append(row["rejection_rate"])
    return svg_chart(series, title="power", xlabel="alpha_S", ylabel="rejection rate", ylim=(0, 1))
