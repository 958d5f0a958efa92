"""Static SVG Gantt charts: one row per device, x axis in cost units.

Forwards are plain boxes, backwards are hatched, update-type events are
drawn as tick marks. Preloaded forwards get a dashed outline. Every box is
labelled with its minibatch and pipeline so the chart reads in greyscale.
"""

from __future__ import annotations

from fractions import Fraction
from typing import List, Optional
from xml.sax.saxutils import escape

from .model import Kind, Timeline

ROW = 34
LEFT = 70
TOP = 40
BOX_H = 26

# light greys by pipeline; shapes and hatching carry the meaning
_FILLS = ["#ffffff", "#e6e6e6", "#cccccc", "#f2f2f2", "#d9d9d9", "#bfbfbf", "#ececec", "#b3b3b3"]


def _num(x) -> str:
    """Stable short decimal rendering for coordinates."""
    text = f"{float(x):.3f}".rstrip("0").rstrip(".")
    return text if text not in ("-0", "") else "0"


def render_svg(t: Timeline, title: Optional[str] = None, unit_px: Optional[float] = None) -> str:
    span = t.makespan if t.makespan > 0 else Fraction(1)
    if unit_px is None:
        unit_px = max(6.0, min(40.0, 1200.0 / float(span)))
    width = LEFT + float(span) * unit_px + 20
    devices = t.cluster.devices
    height = TOP + devices * ROW + 40

    def x(v) -> float:
        return LEFT + float(v) * unit_px

    out: List[str] = []
    out.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" height="{_num(height)}" '
               f'viewBox="0 0 {_num(width)} {_num(height)}" font-family="monospace">')
    out.append('<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" '
               'patternTransform="rotate(45)"><rect width="6" height="6" fill="#ffffff"/>'
               '<line x1="0" y1="0" x2="0" y2="6" stroke="#000000" stroke-width="1.2"/></pattern></defs>')
    out.append(f'<rect x="0" y="0" width="{_num(width)}" height="{_num(height)}" fill="#ffffff"/>')
    if title:
        out.append(f'<text x="{LEFT}" y="20" font-size="13">{escape(title)}</text>')

    # time axis
    step = 1
    while float(span) / step > 40:
        step *= 2
    tick = 0
    axis_y = TOP + devices * ROW + 4
    while tick <= span:
        out.append(f'<line x1="{_num(x(tick))}" y1="{TOP - 4}" x2="{_num(x(tick))}" y2="{axis_y}" '
                   f'stroke="#dddddd" stroke-width="0.5"/>')
        out.append(f'<text x="{_num(x(tick))}" y="{axis_y + 14}" font-size="9" text-anchor="middle">{tick}</text>')
        tick += step

    for dev in range(devices):
        y = TOP + dev * ROW
        out.append(f'<text x="8" y="{y + BOX_H // 2 + 4}" font-size="11">GPU {dev}</text>')

    for ev in t.events:
        y = TOP + ev.device * ROW
        if ev.kind.is_compute:
            fill = "url(#hatch)" if ev.kind is Kind.BACKWARD else _FILLS[ev.pipeline % len(_FILLS)]
            dash = ' stroke-dasharray="3,2"' if ev.preloaded else ""
            w = float(ev.duration) * unit_px
            out.append(f'<rect x="{_num(x(ev.start))}" y="{y}" width="{_num(w)}" height="{BOX_H}" '
                       f'fill="{fill}" stroke="#000000" stroke-width="1"{dash}>'
                       f'<title>{ev.kind.value} stage {ev.stage} minibatch {ev.minibatch} '
                       f'pipeline {ev.pipeline}</title></rect>')
            cx = x(ev.start) + w / 2
            out.append(f'<text x="{_num(cx)}" y="{y + 12}" font-size="10" text-anchor="middle" '
                       f'font-weight="bold" fill="#000000" stroke="#ffffff" stroke-width="2" '
                       f'paint-order="stroke">{ev.minibatch}</text>')
            out.append(f'<text x="{_num(cx)}" y="{y + 23}" font-size="7" text-anchor="middle" '
                       f'fill="#000000" stroke="#ffffff" stroke-width="2" paint-order="stroke">'
                       f'p{ev.pipeline}</text>')
        else:
            # updates: a tick at the finish time, with a small marker letter
            xe = x(ev.end)
            out.append(f'<line x1="{_num(xe)}" y1="{y - 3}" x2="{_num(xe)}" y2="{y + BOX_H + 3}" '
                       f'stroke="#000000" stroke-width="2"><title>{ev.kind.value} stage {ev.stage} '
                       f'window {ev.window}</title></line>')
            out.append(f'<text x="{_num(xe + 2)}" y="{y - 2}" font-size="7">{ev.kind.value[0]}{ev.stage}</text>')

    ly = height - 12
    out.append(f'<rect x="{LEFT}" y="{ly - 9}" width="14" height="10" fill="#ffffff" stroke="#000000"/>')
    out.append(f'<text x="{LEFT + 18}" y="{ly}" font-size="9">forward</text>')
    out.append(f'<rect x="{LEFT + 80}" y="{ly - 9}" width="14" height="10" fill="url(#hatch)" stroke="#000000"/>')
    out.append(f'<text x="{LEFT + 98}" y="{ly}" font-size="9">backward</text>')
    out.append(f'<rect x="{LEFT + 165}" y="{ly - 9}" width="14" height="10" fill="#ffffff" stroke="#000000" '
               f'stroke-dasharray="3,2"/>')
    out.append(f'<text x="{LEFT + 183}" y="{ly}" font-size="9">preloaded forward</text>')
    out.append(f'<line x1="{LEFT + 290}" y1="{ly - 10}" x2="{LEFT + 290}" y2="{ly + 1}" stroke="#000000" '
               f'stroke-width="2"/>')
    out.append(f'<text x="{LEFT + 296}" y="{ly}" font-size="9">update (U/R/B + stage)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
