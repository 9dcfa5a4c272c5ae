"""Minimal self-contained SVG charts.

Hand-rolled so reports carry no plotting dependency: line charts with
optional shaded bands and simple heatmaps.  Output is deterministic for
identical inputs; every figure is a complete standalone SVG document.
"""

import numpy as np

PALETTE = ["#1f6fb2", "#d1495b", "#2e933c", "#8d5a97", "#c77b2f", "#4a4a4a"]


def _fmt(x):
    return f"{x:.6g}"


def _ticks(lo, hi, target=5):
    """Round tick positions covering [lo, hi]."""
    if not np.isfinite(lo) or not np.isfinite(hi):
        return [0.0]
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** np.floor(np.log10(raw))
    for m in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    first = np.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks or [lo]


class _Frame:
    """Maps data coordinates onto a margined pixel viewport."""

    def __init__(self, xlim, ylim, width, height,
                 margins=(52, 16, 34, 44)):
        self.left, self.right, self.top, self.bottom = margins
        self.width, self.height = width, height
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 <= self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        span = self.width - self.left - self.right
        return self.left + (x - self.x0) / (self.x1 - self.x0) * span

    def py(self, y):
        span = self.height - self.top - self.bottom
        return self.height - self.bottom - (y - self.y0) / (self.y1 - self.y0) * span


def _axes(frame, xlabel, ylabel, title):
    parts = []
    x_axis_y = frame.height - frame.bottom
    parts.append(f'<rect x="0" y="0" width="{frame.width}" height="{frame.height}" '
                 'fill="white"/>')
    if title:
        parts.append(f'<text x="{frame.width / 2:.1f}" y="16" text-anchor="middle" '
                     f'font-size="13" font-family="sans-serif">{title}</text>')
    parts.append(f'<line x1="{frame.left}" y1="{x_axis_y}" '
                 f'x2="{frame.width - frame.right}" y2="{x_axis_y}" '
                 'stroke="black" stroke-width="1"/>')
    parts.append(f'<line x1="{frame.left}" y1="{frame.top}" '
                 f'x2="{frame.left}" y2="{x_axis_y}" stroke="black" stroke-width="1"/>')
    for t in _ticks(frame.x0, frame.x1):
        px = frame.px(t)
        parts.append(f'<line x1="{px:.1f}" y1="{x_axis_y}" x2="{px:.1f}" '
                     f'y2="{x_axis_y + 4}" stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{px:.1f}" y="{x_axis_y + 16}" text-anchor="middle" '
                     f'font-size="10" font-family="sans-serif">{_fmt(t)}</text>')
    for t in _ticks(frame.y0, frame.y1):
        py = frame.py(t)
        parts.append(f'<line x1="{frame.left - 4}" y1="{py:.1f}" x2="{frame.left}" '
                     f'y2="{py:.1f}" stroke="black" stroke-width="1"/>')
        parts.append(f'<text x="{frame.left - 7}" y="{py + 3.5:.1f}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif">{_fmt(t)}</text>')
    if xlabel:
        parts.append(f'<text x="{(frame.left + frame.width - frame.right) / 2:.1f}" '
                     f'y="{frame.height - 8}" text-anchor="middle" font-size="11" '
                     f'font-family="sans-serif">{xlabel}</text>')
    if ylabel:
        cy = (frame.top + frame.height - frame.bottom) / 2
        parts.append(f'<text x="14" y="{cy:.1f}" text-anchor="middle" font-size="11" '
                     f'font-family="sans-serif" transform="rotate(-90 14 {cy:.1f})">'
                     f'{ylabel}</text>')
    return parts


def render_line_chart(curves, title="", xlabel="", ylabel="",
                      bands=None, width=640, height=400):
    """Curves are dicts with x, y and an optional label; bands are dicts
    with x, lo, hi drawn as translucent fills behind their matching curve."""
    bands = bands or []
    xs = np.concatenate([np.asarray(c["x"], dtype=float) for c in curves])
    ys = [np.asarray(c["y"], dtype=float) for c in curves]
    ally = np.concatenate(ys + [np.asarray(b[k], dtype=float)
                                for b in bands for k in ("lo", "hi")])
    y_lo = min(0.0, float(np.min(ally)))
    y_hi = float(np.max(ally))
    frame = _Frame((float(np.min(xs)), float(np.max(xs))),
                   (y_lo, y_hi * 1.05 if y_hi > y_lo else y_lo + 1.0),
                   width, height)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">']
    parts += _axes(frame, xlabel, ylabel, title)
    for i, band in enumerate(bands):
        bx = np.asarray(band["x"], dtype=float)
        lo = np.asarray(band["lo"], dtype=float)
        hi = np.asarray(band["hi"], dtype=float)
        color = band.get("color", PALETTE[i % len(PALETTE)])
        pts = [f"{frame.px(x):.1f},{frame.py(v):.1f}" for x, v in zip(bx, hi)]
        pts += [f"{frame.px(x):.1f},{frame.py(v):.1f}"
                for x, v in zip(bx[::-1], lo[::-1])]
        parts.append(f'<polygon points="{" ".join(pts)}" fill="{color}" '
                     'fill-opacity="0.18" stroke="none"/>')
    for i, curve in enumerate(curves):
        cx = np.asarray(curve["x"], dtype=float)
        cy = np.asarray(curve["y"], dtype=float)
        color = curve.get("color", PALETTE[i % len(PALETTE)])
        pts = " ".join(f"{frame.px(x):.1f},{frame.py(y):.1f}"
                       for x, y in zip(cx, cy))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.6"/>')
        label = curve.get("label")
        if label:
            ly = frame.top + 14 + 14 * i
            lx = frame.width - frame.right - 150
            parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" '
                         f'y2="{ly - 4}" stroke="{color}" stroke-width="1.6"/>')
            parts.append(f'<text x="{lx + 23}" y="{ly}" font-size="10" '
                         f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _diverging_color(v):
    """Blue-white-red ramp for v in [-1, 1]."""
    v = float(np.clip(v, -1.0, 1.0))
    if v < 0.0:
        f = 1.0 + v
        r, g, b = 59 + f * 196, 108 + f * 147, 178 + f * 77
    else:
        f = 1.0 - v
        r, g, b = 209 + (1 - f) * 0 + f * 46, 73 + f * 182, 91 + f * 164
    return f"rgb({int(round(r))},{int(round(g))},{int(round(b))})"


def render_heatmap(values, title="", clim=None, cell=12):
    """Row 0 is drawn at the bottom so the picture matches grid coordinates."""
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    if clim is None:
        vmax = float(np.max(np.abs(values)))
        clim = vmax if vmax > 0.0 else 1.0
    top = 26 if title else 6
    width = nx * cell + 12
    height = ny * cell + top + 24
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" '
                     f'font-size="12" font-family="sans-serif">{title}</text>')
    for row in range(ny):
        for col in range(nx):
            color = _diverging_color(values[row, col] / clim)
            x = 6 + col * cell
            y = top + (ny - 1 - row) * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{color}"/>')
    parts.append(f'<text x="6" y="{height - 8}" font-size="10" '
                 f'font-family="sans-serif">range ±{_fmt(clim)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
