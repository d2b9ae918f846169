"""Static SVG scatter of memory vs. accuracy with the frontier starred."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

W, H = 720, 480
LEFT, RIGHT, TOP, BOTTOM = 80, 30, 30, 60


def _star(x: float, y: float, r: float = 8.0) -> str:
    pts = []
    for i in range(10):
        rad = r if i % 2 == 0 else r * 0.45
        a = -math.pi / 2 + i * math.pi / 5
        pts.append(f"{x + rad * math.cos(a):.2f},{y + rad * math.sin(a):.2f}")
    return " ".join(pts)


def frontier_svg(names, memory, accuracy, on_frontier, *, baseline_accuracy: float | None = None,
                 log_x: bool = False, title: str = "memory vs. accuracy") -> str:
    """One marker per point: circles for dominated configs, stars for the frontier."""
    mem = [float(m) for m in memory]
    acc = [float(a) for a in accuracy]
    if log_x and any(m <= 0 for m in mem):
        raise ValueError("log scale needs positive memory values")
    fx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    xs = [fx(m) for m in mem] or [0.0, 1.0]
    lo_x, hi_x = min(xs), max(xs)
    if hi_x == lo_x:
        lo_x, hi_x = lo_x - 1, hi_x + 1
    ys = acc + ([baseline_accuracy] if baseline_accuracy is not None else [])
    lo_y, hi_y = min(ys + [0.0]), max(ys + [1.0])
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    px = lambda v: LEFT + (fx(v) - lo_x) / (hi_x - lo_x) * pw  # noqa: E731
    py = lambda v: TOP + (hi_y - v) / (hi_y - lo_y) * ph  # noqa: E731

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>',
           f'<text x="{LEFT + pw / 2}" y="{H - 15}" text-anchor="middle" font-size="13">'
           f'total memory (bytes{", log scale" if log_x else ""})</text>',
           f'<text x="18" y="{TOP + ph / 2}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 18 {TOP + ph / 2})">accuracy</text>']
    for i in range(5):
        yv = lo_y + (hi_y - lo_y) * i / 4
        out.append(f'<text x="{LEFT - 8}" y="{py(yv) + 4:.2f}" text-anchor="end" font-size="11">{yv:.2f}</text>')
        xv = lo_x + (hi_x - lo_x) * i / 4
        label = f"{10 ** xv:.3g}" if log_x else f"{xv:.3g}"
        out.append(f'<text x="{LEFT + pw * i / 4:.2f}" y="{TOP + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{label}</text>')
    if baseline_accuracy is not None:
        y = py(baseline_accuracy)
        out.append(f'<line class="baseline" x1="{LEFT}" y1="{y:.2f}" x2="{LEFT + pw}" y2="{y:.2f}" '
                   'stroke="gray" stroke-dasharray="6,4"/>')
    for name, m, a, f in zip(names, mem, acc, on_frontier):
        x, y = px(m), py(a)
        tip = f"<title>{escape(str(name))}</title>"
        if f:
            out.append(f'<polygon class="marker frontier" points="{_star(x, y)}" fill="crimson">{tip}</polygon>')
        else:
            out.append(f'<circle class="marker" cx="{x:.2f}" cy="{y:.2f}" r="4" fill="steelblue" '
                       f'fill-opacity="0.7">{tip}</circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
