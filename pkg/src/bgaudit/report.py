"""CSV tables and SVG bar charts for audit reports."""

from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from xml.sax.saxutils import escape

PLOT_HEIGHT = 300.0
BAR_WIDTH = 36.0
GROUP_GAP = 24.0
LEFT, RIGHT, TOP, BOTTOM = 60.0, 20.0, 30.0, 110.0


def _num(v: float) -> str:
    # fixed precision keeps the bytes stable across platforms
    return f"{v:.2f}"


def report_csv(report) -> str:
    """One row per condition x seed."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["condition", "seed", "accuracy", "n", "correct", "p_value", "chance", "ratio", "flagged", "status"])
    for c in report.conditions:
        if not c.seeds:
            writer.writerow([c.name, "", "", "", "", "", repr(c.chance), "", "False", c.status])
        for s in c.seeds:
            writer.writerow([
                c.name, s.seed, repr(float(s.accuracy)), s.n, s.correct, repr(float(s.p_value)),
                repr(float(c.chance)), repr(float(s.accuracy / c.chance)), str(bool(s.flagged)), c.status,
            ])
    return out.getvalue()


def chart_svg(report) -> str:
    """Grouped bars of mean accuracy per condition with per-seed ticks and a dashed chance line."""
    conds = report.conditions
    if not conds:
        raise ValueError("report has no conditions to chart")
    group = BAR_WIDTH + GROUP_GAP
    plot_w = group * len(conds)
    width = LEFT + plot_w + RIGHT
    height = TOP + PLOT_HEIGHT + BOTTOM
    base = TOP + PLOT_HEIGHT

    def y_of(acc):
        return base - max(0.0, min(1.0, acc)) * PLOT_HEIGHT

    parts = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_num(width)}" height="{_num(height)}" '
        f'viewBox="0 0 {_num(width)} {_num(height)}" font-family="sans-serif" font-size="11">',
        f'<title>{escape(str(report.dataset))}: accuracy per condition vs chance</title>',
        f'<line x1="{_num(LEFT)}" y1="{_num(TOP)}" x2="{_num(LEFT)}" y2="{_num(base)}" stroke="#000"/>',
        f'<line x1="{_num(LEFT)}" y1="{_num(base)}" x2="{_num(LEFT + plot_w)}" y2="{_num(base)}" stroke="#000"/>',
    ]
    for i in range(6):
        acc = i / 5
        y = y_of(acc)
        parts.append(f'<line x1="{_num(LEFT - 4)}" y1="{_num(y)}" x2="{_num(LEFT)}" y2="{_num(y)}" stroke="#000"/>')
        parts.append(f'<text x="{_num(LEFT - 6)}" y="{_num(y + 4)}" text-anchor="end">{int(acc * 100)}%</text>')
    parts.append(
        f'<text x="14" y="{_num(TOP + PLOT_HEIGHT / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_num(TOP + PLOT_HEIGHT / 2)})">Test accuracy</text>'
    )
    parts.append(f'<text x="{_num(LEFT + plot_w / 2)}" y="{_num(height - 8)}" text-anchor="middle">Condition</text>')
    for i, c in enumerate(conds):
        x = LEFT + GROUP_GAP / 2 + i * group
        cx = x + BAR_WIDTH / 2
        parts.append(f'<g class="condition" id="cond-{i}">')
        if c.status == "ok" and c.seeds:
            y = y_of(c.mean_accuracy)
            fill = "#c0392b" if c.flagged else "#4a79a5"
            parts.append(
                f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(BAR_WIDTH)}" height="{_num(base - y)}" fill="{fill}"/>'
            )
            for s in c.seeds:
                ys = y_of(s.accuracy)
                parts.append(
                    f'<line class="seed" x1="{_num(x + 6)}" y1="{_num(ys)}" x2="{_num(x + BAR_WIDTH - 6)}" '
                    f'y2="{_num(ys)}" stroke="#111" stroke-width="2"/>'
                )
        else:
            parts.append(f'<text x="{_num(cx)}" y="{_num(base - 4)}" text-anchor="middle">failed</text>')
        parts.append(
            f'<text x="{_num(cx)}" y="{_num(base + 12)}" text-anchor="end" '
            f'transform="rotate(-45 {_num(cx)} {_num(base + 12)})">{escape(c.name)}</text>'
        )
        parts.append("</g>")
    chance = conds[0].chance
    yc = y_of(chance)
    parts.append(
        f'<line class="chance" x1="{_num(LEFT)}" y1="{_num(yc)}" x2="{_num(LEFT + plot_w)}" y2="{_num(yc)}" '
        f'stroke="#444" stroke-dasharray="6,4"/>'
    )
    parts.append(f'<text x="{_num(LEFT + plot_w)}" y="{_num(yc - 4)}" text-anchor="end">chance {chance * 100:.2f}%</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_chart(report, out) -> None:
    out = Path(out)
    data = chart_svg(report).encode("utf-8")
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, out)
