"""Minimal SVG line charts for sweep results: one panel per world kind."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PANEL_W, PANEL_H = 360, 260
MARGIN = {"left": 56, "right": 16, "top": 34, "bottom": 46}
COLOURS = {"deepgv": "#1f77b4", "mlp": "#d62728"}
FALLBACK = ("#2ca02c", "#9467bd", "#8c564b")
LABELS = {"grid_size": "grid size N", "train_size": "training samples"}


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(summary: dict[tuple[str, str, int], dict], sweep: str) -> str:
    """Mean accuracy per x with min/max whiskers, y axis fixed to [0, 1].

    ``summary`` maps ``(world_kind, model, x)`` to ``{"mean", "min", "max"}``.
    x positions are evenly spaced categories so small and large sizes stay
    readable.
    """
    kinds = sorted({k for k, _, _ in summary})
    models = sorted({m for _, m, _ in summary})
    xs = sorted({x for _, _, x in summary})
    width = PANEL_W * max(1, len(kinds))
    height = PANEL_H + 24
    inner_w = PANEL_W - MARGIN["left"] - MARGIN["right"]
    inner_h = PANEL_H - MARGIN["top"] - MARGIN["bottom"]
    colour = {m: COLOURS.get(m, FALLBACK[i % len(FALLBACK)]) for i, m in enumerate(models)}

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p, kind in enumerate(kinds):
        x0, y0 = p * PANEL_W + MARGIN["left"], MARGIN["top"]

        def px(i: int) -> float:
            return x0 + (inner_w * (i + 0.5) / len(xs))

        def py(acc: float) -> float:
            return y0 + inner_h * (1.0 - acc)

        out.append(f'<text x="{_fmt(x0 + inner_w / 2)}" y="20" text-anchor="middle" font-size="13">{escape(kind)}</text>')
        out.append(
            f'<rect x="{x0}" y="{y0}" width="{inner_w}" height="{inner_h}" fill="none" stroke="#444"/>'
        )
        for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
            y = _fmt(py(tick))
            out.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + inner_w}" y2="{y}" stroke="#ddd"/>')
            out.append(f'<text x="{x0 - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{tick:.2f}</text>')
        for i, x in enumerate(xs):
            out.append(
                f'<text x="{_fmt(px(i))}" y="{y0 + inner_h + 16}" text-anchor="middle">{x}</text>'
            )
        out.append(
            f'<text x="{_fmt(x0 + inner_w / 2)}" y="{y0 + inner_h + 34}" text-anchor="middle">'
            f"{escape(LABELS.get(sweep, sweep))}</text>"
        )
        out.append(
            f'<text x="{x0 - 42}" y="{_fmt(y0 + inner_h / 2)}" text-anchor="middle" '
            f'transform="rotate(-90 {x0 - 42} {_fmt(y0 + inner_h / 2)})">test accuracy</text>'
        )
        for m in models:
            points = [(i, summary[(kind, m, x)]) for i, x in enumerate(xs) if (kind, m, x) in summary]
            if not points:
                continue
            path = " ".join(f"{_fmt(px(i))},{_fmt(py(s['mean']))}" for i, s in points)
            out.append(f'<polyline points="{path}" fill="none" stroke="{colour[m]}" stroke-width="2"/>')
            for i, s in points:
                cx = _fmt(px(i))
                out.append(
                    f'<line x1="{cx}" y1="{_fmt(py(s["min"]))}" x2="{cx}" y2="{_fmt(py(s["max"]))}" '
                    f'stroke="{colour[m]}"/>'
                )
                out.append(f'<circle cx="{cx}" cy="{_fmt(py(s["mean"]))}" r="3" fill="{colour[m]}"/>')
    for k, m in enumerate(models):
        lx = MARGIN["left"] + 90 * k
        ly = PANEL_H + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" stroke="{colour[m]}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 24}" y="{ly}" dominant-baseline="middle">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str | Path, summary: dict, sweep: str) -> None:
    Path(path).write_text(render_svg(summary, sweep))
