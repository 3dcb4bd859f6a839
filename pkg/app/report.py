"""
Audit reports and heatmaps.

Reports are emitted as JSON (lossless, round-trips into AuditReport), CSV
(wide Phi-tilde) or markdown. Heatmaps are plain SVG 1.1 rendered from a
jinja2 template. All emitters are byte-stable for identical input.
"""

import os
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from jinja2 import Environment, StrictUndefined

from app.exceptions import AxisMismatchError
from app.logger import logger
from app.matrix import ScoreMatrix, StandardizedMatrix, diagonal_zscores, philautia_scores
from app.schemas import AuditReport

Z_FLAG_THRESHOLD = 2.0

REPORT_FORMATS = ("json", "csv", "markdown")

_env = Environment(autoescape=False, undefined=StrictUndefined, keep_trailing_newline=True,
                   trim_blocks=True, lstrip_blocks=True)
_svg_env = Environment(autoescape=True, undefined=StrictUndefined, keep_trailing_newline=True,
                       trim_blocks=True, lstrip_blocks=True)


MARKDOWN_TEMPLATE = _env.from_string("""\
# Philautia audit ({{ report.setting.value }})

{{ report.generators | length }} generators x {{ report.evaluators | length }} evaluators.

## Philautia scores

| Model | Philautia | Column mean | Column std | z |
|---|---:|---:|---:|---:|
{% for row in rows %}
{% if row.flagged %}
| **{{ row.model }}** | **{{ row.diag }}** | {{ row.col_mean }} | {{ row.col_std }} | **{{ row.z }}** |
{% else %}
| {{ row.model }} | {{ row.diag }} | {{ row.col_mean }} | {{ row.col_std }} | {{ row.z }} |
{% endif %}
{% endfor %}

Bold rows sit more than {{ threshold }} standard deviations above their column mean.
{% if report.notes %}

## Notes

{% for note in report.notes %}
- {{ note }}
{% endfor %}
{% endif %}

## Standardized matrix

Rows are generators, columns are evaluators.

| | {{ report.evaluators | join(" | ") }} |
|---|{% for _ in report.evaluators %}---:|{% endfor %}

{% for generator, cells in matrix_rows %}
| {{ generator }} | {{ cells | join(" | ") }} |
{% endfor %}
""")


SVG_TEMPLATE = _svg_env.from_string("""\
<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{{ width }}" height="{{ height }}" viewBox="0 0 {{ width }} {{ height }}" font-family="Helvetica, Arial, sans-serif">
<defs>
<linearGradient id="legend-scale" x1="0" y1="1" x2="0" y2="0">
{% for stop in legend_stops %}
<stop offset="{{ stop.offset }}" stop-color="{{ stop.color }}"/>
{% endfor %}
</linearGradient>
</defs>
<rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#ffffff"/>
{% if title %}
<text x="{{ left }}" y="18" font-size="14" font-weight="bold">{{ title }}</text>
{% endif %}
{% for label in col_labels %}
<text x="{{ label.x }}" y="{{ label.y }}" font-size="11" text-anchor="start" transform="rotate(-45 {{ label.x }} {{ label.y }})">{{ label.text }}</text>
{% endfor %}
{% for label in row_labels %}
<text x="{{ label.x }}" y="{{ label.y }}" font-size="11" text-anchor="end" dominant-baseline="middle">{{ label.text }}</text>
{% endfor %}
{% for cell in cells %}
<rect x="{{ cell.x }}" y="{{ cell.y }}" width="{{ size }}" height="{{ size }}" fill="{{ cell.fill }}" stroke="#ffffff" stroke-width="1"/>
<text x="{{ cell.cx }}" y="{{ cell.cy }}" font-size="10" text-anchor="middle" dominant-baseline="middle" fill="{{ cell.ink }}">{{ cell.text }}</text>
{% endfor %}
<rect x="{{ legend.x }}" y="{{ legend.y }}" width="{{ legend.width }}" height="{{ legend.height }}" fill="url(#legend-scale)" stroke="#888888" stroke-width="0.5"/>
<text x="{{ legend.text_x }}" y="{{ legend.y }}" font-size="10" dominant-baseline="hanging">{{ legend.high }}</text>
<text x="{{ legend.text_x }}" y="{{ legend.y + legend.height }}" font-size="10">{{ legend.low }}</text>
</svg>
""")


BLUE = (33, 102, 172)
WHITE = (247, 247, 247)
RED = (178, 24, 43)


def _fmt(value: Optional[float], digits: int = 2) -> str:
    if value is None:
        return "n/a"
    text = f"{value:.{digits}f}"
    return text[1:] if text.startswith("-") and float(text) == 0 else text


def _mix(low, high, t: float) -> str:
    rgb = [int(round(a + (b - a) * t)) for a, b in zip(low, high)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def diverging_color(value: float, vmax: float) -> str:
    """Blue for negative, white at 0, red for positive; |value| = vmax is full colour"""
    if vmax <= 0:
        return _mix(WHITE, WHITE, 0.0)
    t = max(-1.0, min(1.0, value / vmax))
    return _mix(WHITE, RED, t) if t >= 0 else _mix(WHITE, BLUE, -t)


def sequential_color(value: float, vmin: float, vmax: float) -> str:
    """White at vmin to blue at vmax"""
    t = 0.0 if vmax <= vmin else (value - vmin) / (vmax - vmin)
    return _mix(WHITE, BLUE, max(0.0, min(1.0, t)))


def build_audit_report(phi: ScoreMatrix, phi_tilde: StandardizedMatrix) -> AuditReport:
    """Collect philautia scores, diagonal z-scores and degeneracy notes for one setting.

    Args:
        phi (ScoreMatrix): raw means
        phi_tilde (StandardizedMatrix): standardized matrix built from phi

    Raises:
        AxisMismatchError: phi and phi_tilde have different axes

    Returns:
        AuditReport: report ready for emit_report
    """
    if phi.generators != phi_tilde.generators or phi.evaluators != phi_tilde.evaluators:
        raise AxisMismatchError("Phi and Phi-tilde have different axes")

    notes: List[str] = []
    for model in sorted(phi_tilde.degenerate_columns):
        notes.append(f"Evaluator {model} gives every generator the same mean score; its column was set to 0.")
    for model in sorted(phi_tilde.degenerate_rows):
        notes.append(f"Generator {model} is rated identically by every evaluator after column scaling; its row was set to 0.")

    zscores = diagonal_zscores(phi_tilde)
    for model, entry in zscores.items():
        if entry.z is None:
            notes.append(f"z-score for {model} is undefined (zero-variance column).")

    expected = int(phi.counts.max()) if phi.counts.size else 0
    for i, generator in enumerate(phi.generators):
        for j, evaluator in enumerate(phi.evaluators):
            if phi.counts[i, j] < expected:
                notes.append(
                    f"Cell ({generator}, {evaluator}) averages {int(phi.counts[i, j])} of {expected} images."
                )

    return AuditReport(
        setting=phi.setting,
        generators=list(phi.generators),
        evaluators=list(phi.evaluators),
        phi=phi.values.tolist(),
        counts=phi.counts.tolist(),
        phi_tilde=phi_tilde.values.tolist(),
        degenerate_rows=sorted(phi_tilde.degenerate_rows),
        degenerate_columns=sorted(phi_tilde.degenerate_columns),
        philautia=philautia_scores(phi_tilde),
        zscores=zscores,
        notes=notes,
    )


def _write_bytes(out: str, payload: bytes) -> int:
    directory = os.path.dirname(os.path.abspath(out))
    os.makedirs(directory, exist_ok=True)
    with open(out, "wb") as out_file:
        out_file.write(payload)
    logger.info(f"Wrote {len(payload)} bytes to {out}")
    return len(payload)


def render_markdown(report: AuditReport) -> str:
    ordered = sorted(report.philautia.items(), key=lambda item: (-item[1], item[0]))
    rows = []
    for model, diag in ordered:
        entry = report.zscores.get(model)
        z = entry.z if entry else None
        rows.append({
            "model": model,
            "diag": _fmt(diag),
            "col_mean": _fmt(entry.col_mean if entry else None),
            "col_std": _fmt(entry.col_std if entry else None),
            "z": _fmt(z),
            "flagged": z is not None and z > Z_FLAG_THRESHOLD,
        })
    matrix_rows = [
        (generator, [_fmt(value) for value in row])
        for generator, row in zip(report.generators, report.phi_tilde)
    ]
    return MARKDOWN_TEMPLATE.render(
        report=report, rows=rows, matrix_rows=matrix_rows, threshold=_fmt(Z_FLAG_THRESHOLD, 0),
    )


def emit_report(report: AuditReport, fmt: str, out: str) -> int:
    """Write a report as json, csv or markdown.

    Args:
        report (AuditReport): report to write
        fmt (str): "json", "csv" or "markdown"
        out (str): output path

    Returns:
        int: bytes written
    """
    if fmt == "json":
        payload = report.model_dump_json(indent=2).encode("utf-8") + b"\n"
    elif fmt == "csv":
        frame = pd.DataFrame(report.phi_tilde, index=report.generators, columns=report.evaluators)
        payload = frame.to_csv(float_format="%.17g", index_label="generator", lineterminator="\n").encode("utf-8")
    elif fmt == "markdown":
        payload = render_markdown(report).encode("utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    try:
        return _write_bytes(out, payload)
    except OSError as e:
        logger.error(f"Could not write report to {out}: {e}")
        raise e


def load_report(path: str) -> AuditReport:
    with open(path, "rb") as report_file:
        return AuditReport.model_validate_json(report_file.read())


def render_heatmap_svg(
            values: np.ndarray,
            row_labels: Sequence[str],
            col_labels: Sequence[str],
            out: str,
            centered: bool = True,
            title: Optional[str] = None
        ) -> int:
    """Render a labeled matrix as an SVG heatmap.

    Args:
        values (np.ndarray): rows x columns finite values
        row_labels (Sequence[str]): one label per row (generators)
        col_labels (Sequence[str]): one label per column (evaluators)
        out (str): output .svg path
        centered (bool, optional): diverging scale around 0 for standardized
            matrices; False gives a min-max sequential scale for raw means. Defaults to True.
        title (Optional[str], optional): heading above the grid. Defaults to None.

    Raises:
        ValueError: shape mismatch or non-finite values

    Returns:
        int: bytes written
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape != (len(row_labels), len(col_labels)):
        raise ValueError(f"values shape {values.shape} does not match {len(row_labels)}x{len(col_labels)} labels")
    if not np.isfinite(values).all():
        raise ValueError("heatmap values must be finite")

    size = 44
    left = 12 + 7 * max(len(label) for label in row_labels)
    top = 28 + int(5 * max(len(label) for label in col_labels))
    n_rows, n_cols = values.shape
    legend_gap = 24
    legend_width = 14
    width = left + n_cols * size + legend_gap + legend_width + 48
    height = top + n_rows * size + 16

    if centered:
        vmax = float(np.abs(values).max())
        vmin = -vmax
        color = lambda value: diverging_color(value, vmax)  # noqa: E731
        legend_stops = [
            {"offset": "0", "color": diverging_color(-1.0, 1.0)},
            {"offset": "0.5", "color": diverging_color(0.0, 1.0)},
            {"offset": "1", "color": diverging_color(1.0, 1.0)},
        ]
    else:
        vmin, vmax = float(values.min()), float(values.max())
        color = lambda value: sequential_color(value, vmin, vmax)  # noqa: E731
        legend_stops = [
            {"offset": "0", "color": sequential_color(0.0, 0.0, 1.0)},
            {"offset": "1", "color": sequential_color(1.0, 0.0, 1.0)},
        ]

    cells = []
    for i in range(n_rows):
        for j in range(n_cols):
            value = float(values[i, j])
            x, y = left + j * size, top + i * size
            strength = abs(value) / vmax if centered and vmax > 0 else (
                (value - vmin) / (vmax - vmin) if vmax > vmin else 0.0
            )
            cells.append({
                "x": x,
                "y": y,
                "cx": x + size // 2,
                "cy": y + size // 2,
                "fill": color(value),
                "ink": "#ffffff" if strength > 0.6 else "#222222",
                "text": _fmt(value),
            })

    payload = SVG_TEMPLATE.render(
        width=width,
        height=height,
        size=size,
        left=left,
        title=title,
        cells=cells,
        col_labels=[{"x": left + j * size + size // 2, "y": top - 6, "text": label} for j, label in enumerate(col_labels)],
        row_labels=[{"x": left - 6, "y": top + i * size + size // 2, "text": label} for i, label in enumerate(row_labels)],
        legend_stops=legend_stops,
        legend={
            "x": left + n_cols * size + legend_gap,
            "y": top,
            "width": legend_width,
            "height": n_rows * size,
            "text_x": left + n_cols * size + legend_gap + legend_width + 4,
            "high": _fmt(vmax),
            "low": _fmt(vmin),
        },
    ).encode("utf-8")
    try:
        return _write_bytes(out, payload)
    except OSError as e:
        logger.error(f"Could not write heatmap to {out}: {e}")
        raise e
