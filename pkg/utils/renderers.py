"""Rendering utilities for run results: console tables, CSV files, SVG charts and HTML.

CSV floats are written with ``%.12g`` so two identical runs give byte-identical
files. Charts are plain SVG produced from Jinja2 templates.
"""
import csv
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from jinja2 import Environment
from tabulate import tabulate

from utils.logger import setup_logger

logger = setup_logger(__name__)

_ENV = Environment(autoescape=True, trim_blocks=True, lstrip_blocks=True)


def format_float(value: Any) -> str:
    """Stable text form of a CSV cell."""
    if isinstance(value, (float, np.floating)):
        return "%.12g" % float(value)
    return str(value)


def to_table(
    rows: List[Dict[str, Any]],
    columns: Optional[List[str]] = None,
    tablefmt: str = "github",
    floatfmt: str = ".4f"
) -> str:
    """
    Render result rows as a formatted table.

    Args:
        rows: List of dicts, one per row
        columns: Keys to include (default: keys of the first row)
        tablefmt: Table format (github, grid, plain, html)
        floatfmt: Float format for numeric cells

    Returns:
        Formatted table string
    """
    if not rows:
        return "No rows"
    if columns is None:
        columns = list(rows[0].keys())
    data = [[row.get(col, "") for col in columns] for row in rows]
    return tabulate(data, headers=columns, tablefmt=tablefmt, floatfmt=floatfmt)


def matrix_table(labels: Sequence[str], matrix: np.ndarray, tablefmt: str = "github",
                 floatfmt: str = "+.4f") -> str:
    data = [[label] + list(map(float, matrix[i])) for i, label in enumerate(labels)]
    return tabulate(data, headers=[""] + list(labels), tablefmt=tablefmt, floatfmt=floatfmt)


# ----------------------------------------------------------------------
# CSV
# ----------------------------------------------------------------------

def write_csv(path: Union[str, Path], rows: List[Dict[str, Any]], columns: Sequence[str]) -> Path:
    """Write rows with a fixed column order; floats use %.12g."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_float(row.get(col, "")) for col in columns])
    logger.info(f"Wrote {path} ({len(rows)} rows)")
    return path


def write_matrix_csv(path: Union[str, Path], labels: Sequence[str], matrix: np.ndarray) -> Path:
    """Square labelled matrix: header row of labels, one row per label."""
    rows = [{"": label, **{col: float(matrix[i, j]) for j, col in enumerate(labels)}}
            for i, label in enumerate(labels)]
    return write_csv(path, rows, [""] + list(labels))


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


# ----------------------------------------------------------------------
# SVG charts
# ----------------------------------------------------------------------

_BAR_TEMPLATE = _ENV.from_string("""<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" font-family="sans-serif" font-size="12">
<text x="{{ width / 2 }}" y="20" text-anchor="middle" font-size="14">{{ title }}</text>
<line x1="{{ left }}" y1="{{ base }}" x2="{{ width - 10 }}" y2="{{ base }}" stroke="#333"/>
{% for bar in bars %}
<rect x="{{ bar.x }}" y="{{ bar.y }}" width="{{ bar.w }}" height="{{ bar.h }}" fill="#3498db"/>
{% if bar.err %}<line x1="{{ bar.x + bar.w / 2 }}" y1="{{ bar.err[0] }}" x2="{{ bar.x + bar.w / 2 }}" y2="{{ bar.err[1] }}" stroke="#2c3e50"/>{% endif %}
<text x="{{ bar.x + bar.w / 2 }}" y="{{ bar.y - 6 }}" text-anchor="middle">{{ bar.value }}</text>
<text x="{{ bar.x + bar.w / 2 }}" y="{{ base + 16 }}" text-anchor="middle">{{ bar.label }}</text>
{% endfor %}
</svg>
""")

_HEATMAP_TEMPLATE = _ENV.from_string("""<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" font-family="sans-serif" font-size="12">
<text x="{{ width / 2 }}" y="20" text-anchor="middle" font-size="14">{{ title }}</text>
{% for cell in cells %}
<rect x="{{ cell.x }}" y="{{ cell.y }}" width="{{ size }}" height="{{ size }}" fill="{{ cell.fill }}" stroke="#fff"/>
<text x="{{ cell.x + size / 2 }}" y="{{ cell.y + size / 2 + 4 }}" text-anchor="middle">{{ cell.text }}</text>
{% endfor %}
{% for label in row_labels %}
<text x="{{ left - 6 }}" y="{{ label.y }}" text-anchor="end">{{ label.text }}</text>
{% endfor %}
{% for label in col_labels %}
<text x="{{ label.x }}" y="{{ top - 8 }}" text-anchor="middle">{{ label.text }}</text>
{% endfor %}
</svg>
""")


def render_bar_chart(labels: Sequence[str], values: Sequence[float], title: str,
                     errors: Optional[Sequence[float]] = None, value_format: str = "{:.3f}") -> str:
    """Vertical bar chart scaled to [0, max(values)]."""
    left, top, bar_w, gap, plot_h = 40, 40, 70, 30, 220
    width = left + len(labels) * (bar_w + gap) + 10
    base = top + plot_h
    peak = max((float(v) + (float(errors[i]) if errors is not None else 0.0) for i, v in enumerate(values)),
               default=0.0) or 1e-12
    bars = []
    for i, (label, value) in enumerate(zip(labels, values)):
        h = plot_h * max(float(value), 0.0) / peak
        x = left + i * (bar_w + gap)
        err = None
        if errors is not None:
            spread = plot_h * float(errors[i]) / peak
            err = (round(base - h - spread, 2), round(base - h + spread, 2))
        bars.append({"x": x, "y": round(base - h, 2), "w": bar_w, "h": round(h, 2), "err": err,
                     "label": label, "value": value_format.format(float(value))})
    return _BAR_TEMPLATE.render(width=width, height=base + 30, left=left, base=base, title=title, bars=bars)


def _diverging(value: float, scale: float) -> str:
    t = max(-1.0, min(1.0, value / scale)) if scale > 0 else 0.0
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t * 0.7)), int(255 * (1 - t * 0.7))
    else:
        r, g, b = int(255 * (1 + t * 0.7)), int(255 * (1 + t * 0.7)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap(labels: Sequence[str], matrix: np.ndarray, title: str,
                   value_format: str = "{:+.3f}") -> str:
    """Square labelled heatmap on a blue-white-red scale centred at 0."""
    size, left, top = 70, 110, 50
    n = len(labels)
    scale = float(np.abs(matrix).max()) if matrix.size else 0.0
    cells = [
        {"x": left + j * size, "y": top + i * size, "fill": _diverging(float(matrix[i, j]), scale),
         "text": value_format.format(float(matrix[i, j]))}
        for i in range(n) for j in range(n)
    ]
    row_labels = [{"y": top + i * size + size / 2 + 4, "text": label} for i, label in enumerate(labels)]
    col_labels = [{"x": left + j * size + size / 2, "text": label} for j, label in enumerate(labels)]
    return _HEATMAP_TEMPLATE.render(width=left + n * size + 10, height=top + n * size + 10, size=size,
                                    left=left, top=top, title=title, cells=cells,
                                    row_labels=row_labels, col_labels=col_labels)


# ----------------------------------------------------------------------
# HTML
# ----------------------------------------------------------------------

_HTML_TEMPLATE = _ENV.from_string("""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{{ title }}</title>
    <style>
        body { font-family: -apple-system, 'Segoe UI', Roboto, Arial, sans-serif; color: #333;
               max-width: 1100px; margin: 0 auto; padding: 20px; background-color: #f5f5f5; }
        .container { background: white; padding: 30px; border-radius: 8px; box-shadow: 0 2px 4px rgba(0,0,0,0.1); }
        h1 { color: #2c3e50; border-bottom: 3px solid #3498db; padding-bottom: 10px; }
        h2 { color: #34495e; margin-top: 30px; }
        table { border-collapse: collapse; margin: 16px 0; }
        th, td { border: 1px solid #ddd; padding: 6px 10px; text-align: right; }
        th { background-color: #3498db; color: white; }
        .footer { margin-top: 40px; padding-top: 20px; border-top: 1px solid #ddd; color: #7f8c8d; font-size: 0.9em; }
    </style>
</head>
<body>
    <div class="container">
        <h1>{{ title }}</h1>
        {% for section in sections %}
        <h2>{{ section.heading }}</h2>
        {{ section.body | safe }}
        {% endfor %}
        <div class="footer">
            <p>Generated: {{ generated_at }}</p>
        </div>
    </div>
</body>
</html>
""")


def to_html_report(title: str, sections: List[Tuple[str, str]],
                   generated_at: Optional[str] = None) -> str:
    """
    Assemble an HTML summary page.

    Args:
        title: Page title
        sections: (heading, trusted HTML/SVG body) pairs
        generated_at: Timestamp text (default: now)

    Returns:
        HTML string
    """
    return _HTML_TEMPLATE.render(
        title=title,
        sections=[{"heading": h, "body": b} for h, b in sections],
        generated_at=generated_at or datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    )


def csv_to_html_table(path: Union[str, Path]) -> str:
    rows = read_csv(path)
    return to_table(rows, tablefmt="html") if rows else "<p>(empty)</p>"
