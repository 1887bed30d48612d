"""Dependency-free SVG 1.1 figures: training-loss curves and trajectory overlays."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .predictor import PredictionReport
from .scene_data import Scene, fmt

SVG_OPEN = '<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'

LAYER_STYLE = {
    "lanes": ("#9e9e9e", "lane centerlines"),
    "history": ("#1f77b4", "agent history"),
    "truth": ("#2ca02c", "ground truth"),
    "prediction": ("#d62728", "prediction"),
}


def _nice_ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def loss_curve_svg(
    epochs: Sequence[int],
    series: Sequence[Tuple[str, Sequence[float]]],
    title: str = "Training loss",
    width: int = 640,
    height: int = 400,
) -> str:
    """Line chart of one or more per-epoch series (name, values)."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"]
    left, right, top, bottom = 70, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    finite = [v for _, vals in series for v in vals if np.isfinite(v)]
    ymin, ymax = (0.0, max(finite) * 1.05) if finite else (0.0, 1.0)
    xmin, xmax = min(epochs), max(max(epochs), min(epochs) + 1)

    def px(e):
        return left + (e - xmin) / (xmax - xmin) * pw

    def py(v):
        return top + ph - (v - ymin) / (ymax - ymin) * ph

    out = [SVG_OPEN.format(w=width, h=height)]
    out.append(f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>')
    out.append(f'<g id="axes" stroke="#333" fill="none"><rect x="{left}" y="{top}" width="{pw}" height="{ph}"/></g>')
    out.append('<g id="ticks" font-family="sans-serif" font-size="11" fill="#333">')
    for v in _nice_ticks(ymin, ymax):
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:g}</text>')
    for e in _nice_ticks(xmin, xmax, n=min(10, xmax - xmin)):
        if float(e).is_integer():
            out.append(f'<text x="{px(e):.1f}" y="{top + ph + 16}" text-anchor="middle">{int(e)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">epoch</text>')
    out.append("</g>")
    for k, (name, vals) in enumerate(series):
        pts = " ".join(f"{px(e):.2f},{py(v):.2f}" for e, v in zip(epochs, vals) if np.isfinite(v))
        color = colors[k % len(colors)]
        out.append(f'<g id="series-{k}" class="series"><title>{escape(name)}</title>'
                   f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/></g>')
        ly = top + 16 + 16 * k
        out.append(f'<g class="legend"><line x1="{left + pw - 150}" y1="{ly - 4}" x2="{left + pw - 130}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{left + pw - 125}" y="{ly}" font-family="sans-serif" '
                   f'font-size="11">{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _polyline(points: np.ndarray, color: str, width: float = 1.5, dash: Optional[str] = None) -> str:
    coords = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}" vector-effect="non-scaling-stroke"'
            f'{dash_attr} points="{coords}"/>')


def trajectory_svg(scene: Scene, report: PredictionReport, width: int = 640, height: int = 640) -> str:
    """Overlay lanes, histories, ground truth (if present) and the prediction.

    Polylines carry world coordinates; one group transform maps them to the
    canvas, so the plotted points can be read back exactly.
    """
    layers = {
        "lanes": [scene.lanes[q][scene.lane_mask[q]] for q in range(scene.lanes.shape[0]) if scene.lane_mask[q].any()],
        "history": [scene.agents[i] for i in range(scene.agents.shape[0]) if scene.agent_mask[i]],
    }
    if scene.future is not None:
        layers["truth"] = [np.vstack([scene.ego_position, scene.future])]
    layers["prediction"] = [report.predicted]

    focus = np.vstack([p for name in ("history", "truth", "prediction") for p in layers.get(name, [])])
    lo, hi = focus.min(axis=0), focus.max(axis=0)
    span = max(float(np.max(hi - lo)), 10.0)
    center = (lo + hi) / 2
    lo, hi = center - 0.65 * span, center + 0.65 * span
    pad = 20
    s = min((width - 2 * pad) / (hi[0] - lo[0]), (height - 2 * pad - 60) / (hi[1] - lo[1]))
    tx, ty = pad - s * lo[0], pad + 60 + s * hi[1]

    out = [SVG_OPEN.format(w=width, h=height)]
    out.append(f'<defs><clipPath id="plot-area"><rect x="0" y="60" width="{width}" height="{height - 60}"/></clipPath></defs>')
    out.append(f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{escape(report.scene_id)}</text>')
    out.append(f'<g clip-path="url(#plot-area)"><g id="world" transform="matrix({fmt(s)} 0 0 {fmt(-s)} {fmt(tx)} {fmt(ty)})">')
    for name, polylines in layers.items():
        color, _ = LAYER_STYLE[name]
        width_px = 3 if name in ("truth", "prediction") else 1.5
        dash = "4 3" if name == "lanes" else None
        body = "".join(_polyline(p, color, width_px, dash) for p in polylines)
        out.append(f'<g id="layer-{name}" class="layer">{body}</g>')
    out.append("</g></g>")
    out.append('<g id="legend" font-family="sans-serif" font-size="12">')
    for k, name in enumerate(layers):
        color, label = LAYER_STYLE[name]
        x = pad + 150 * k
        out.append(f'<line x1="{x}" y1="42" x2="{x + 20}" y2="42" stroke="{color}" stroke-width="3"/>'
                   f'<text x="{x + 25}" y="46">{escape(label)}</text>')
    out.append("</g>")
    if report.ade:
        h = max(report.ade)
        out.append(f'<text x="{width - pad}" y="20" text-anchor="end" font-family="sans-serif" font-size="12">'
                   f'ADE@{h:g}s {report.ade[h]:.3f} m, FDE@{h:g}s {report.fde[h]:.3f} m</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
