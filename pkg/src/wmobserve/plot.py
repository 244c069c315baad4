"""Self-contained SVG line charts of report metrics.

Coordinates map linearly from data to pixels; the output references no
external fonts, stylesheets or scripts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence
from xml.sax.saxutils import escape

from .errors import EmptyReport, MetricMissing

WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 64, 170, 36, 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")

# x axes taken from the config echo rather than from the metric rows
CONFIG_AXES = {"n_entities": ("n_entities",), "delta": ("scheme", "delta")}


@dataclass(frozen=True)
class AxisSpec:
    """What to draw: ``metrics`` from ``observer`` rows against ``x``.

    ``x`` is ``samples_per_entity`` (one series per report and metric) or a
    config field from ``CONFIG_AXES`` (one series per metric across reports).
    """

    metrics: tuple[str, ...] = ("top1",)
    observer: str = "EXTERNAL"
    x: str = "samples_per_entity"
    title: str = ""
    y_label: str = "accuracy"


@dataclass
class Series:
    label: str
    points: list[tuple[float, float]]


def _as_dict(report: Any) -> dict:
    return report if isinstance(report, dict) else report.to_dict()


def _config_value(cfg: dict, x: str) -> float:
    value: Any = cfg
    for part in CONFIG_AXES[x]:
        value = value[part]
    return float(value)


def collect_series(reports: Sequence[Any], spec: AxisSpec) -> tuple[list[Series], list[int]]:
    """Series to draw plus the entity counts that set the chance lines."""
    if not reports:
        raise EmptyReport("no reports to plot")
    if spec.x != "samples_per_entity" and spec.x not in CONFIG_AXES:
        raise ValueError(f"unsupported x axis {spec.x!r}")
    docs = [_as_dict(r) for r in reports]
    series: list[Series] = []
    for metric in spec.metrics:
        across = Series(metric, [])
        for doc in docs:
            rows = [m for m in doc["metrics"] if m["metric"] == metric and m["observer"] == spec.observer]
            if not rows:
                continue
            if spec.x == "samples_per_entity":
                label = f"{doc['scenario_id']} {metric}" if len(docs) > 1 else metric
                series.append(Series(label, [(float(m["samples_per_entity"]), float(m["value"])) for m in rows]))
            else:
                across.points.append((_config_value(doc["config"], spec.x), float(rows[0]["value"])))
        if spec.x != "samples_per_entity" and across.points:
            series.append(across)
    if not series:
        raise MetricMissing(f"no {spec.observer} rows for metrics {list(spec.metrics)}")
    chance = sorted({int(doc["config"]["n_entities"]) for doc in docs})
    return series, chance


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if v != int(v) else str(int(v))


def render_svg(series: Sequence[Series], chance_ns: Sequence[int], spec: AxisSpec) -> str:
    xs = [x for s in series for x, _ in s.points]
    ys = [y for s in series for _, y in s.points]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x: float) -> float:
        return MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if spec.title:
        out.append(f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">'
                   f"{escape(spec.title)}</text>")
    x0, y0 = MARGIN_LEFT, MARGIN_TOP + plot_h
    out.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{px(t):.2f}" y="{y0 + 16}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text class="x-label" x="{x0 + plot_w / 2:.2f}" y="{HEIGHT - 14}" text-anchor="middle">'
               f"{escape(spec.x.replace('_', ' '))}</text>")
    out.append(f'<text class="y-label" x="16" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN_TOP + plot_h / 2:.2f})">{escape(spec.y_label)}</text>')
    for n in chance_ns:
        y = py(1.0 / n)
        out.append(f'<line class="chance" x1="{x0}" y1="{y:.2f}" x2="{x0 + plot_w}" y2="{y:.2f}" '
                   f'stroke="gray" stroke-dasharray="6,4"/>')
        out.append(f'<text x="{x0 + plot_w - 4}" y="{y - 4:.2f}" text-anchor="end" fill="gray">'
                   f"chance 1/{n}</text>")
    legend_x = x0 + plot_w + 16
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in sorted(s.points))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = MARGIN_TOP + 10 + 18 * i
        out.append(f'<line class="legend" x1="{legend_x}" y1="{ly}" x2="{legend_x + 18}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{legend_x + 24}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_curves(reports: Sequence[Any], spec: AxisSpec = AxisSpec()) -> str:
    """SVG document for ``reports`` (RunReport objects or their JSON dicts)."""
    series, chance = collect_series(reports, spec)
    return render_svg(series, chance, spec)
