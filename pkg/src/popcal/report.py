"""Report emission: correlation tables, calibration accuracy tables,
popularity-binned curves as CSV and standalone SVG, and the listing of
samples whose prediction flipped between the confidence-only and the
popularity-augmented calibrators.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Mapping, Sequence

from .calibration import ProtocolReport
from .metrics import BinnedCurve, CorrelationReport

CURVE_SERIES = ("mean_accuracy", "mean_confidence", "mean_alignment")
SERIES_COLORS = {"mean_accuracy": "#1f77b4", "mean_confidence": "#d62728", "mean_alignment": "#2ca02c"}
SERIES_LABELS = {"mean_accuracy": "accuracy", "mean_confidence": "confidence", "mean_alignment": "alignment"}


def _atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def write_correlation_csv(report: CorrelationReport, path: str | Path) -> None:
    """One row per cell: the three dataset means, then the 5x3 rho matrix."""
    rows: list[list] = [
        ["mean", "", "accuracy", report.mean_accuracy],
        ["mean", "", "confidence", report.mean_confidence],
        ["mean", "", "alignment", report.mean_alignment],
    ]
    for cell in report.rows():
        for outcome in ("accuracy", "confidence", "alignment"):
            rows.append(["rho", cell["signal"], outcome, cell[f"rho_{outcome}"]])
    _atomic_write_text(path, _csv_text(["kind", "signal", "outcome", "value"], rows))


def write_correlation_json(report: CorrelationReport, path: str | Path) -> None:
    payload = {
        "mean_accuracy": report.mean_accuracy,
        "mean_confidence": report.mean_confidence,
        "mean_alignment": report.mean_alignment,
        "rho": report.rho,
    }
    _atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_curve_csv(curve: BinnedCurve, path: str | Path) -> None:
    rows = [
        [
            r["signal"], r["bin"], r["pop_lo"], r["pop_hi"], r["count"],
            r["mean_accuracy"], r["mean_confidence"], r["mean_alignment"],
        ]
        for r in curve.rows()
    ]
    header = ["signal", "bin", "pop_lo", "pop_hi", "count",
              "mean_accuracy", "mean_confidence", "mean_alignment"]
    _atomic_write_text(path, _csv_text(header, rows))


def write_table4_csv(
    reports: Mapping[str, ProtocolReport], path: str | Path
) -> None:
    """Calibration accuracy table: one row per predictor, one column block
    per popularity source (e.g. corpus, self)."""
    if not reports:
        raise ValueError("no protocol reports to write")
    sources = list(reports)
    first = reports[sources[0]]
    header = ["row"]
    for source in sources:
        for seed in reports[source].seeds:
            header.append(f"{source}_seed_{seed}")
        header.append(f"{source}_mean")
    rows = []
    for name in first.per_seed:
        row: list = [name]
        for source in sources:
            rep = reports[source]
            for seed in rep.seeds:
                row.append(rep.per_seed.get(name, {}).get(seed))
            row.append(rep.mean(name))
        rows.append(row)
    _atomic_write_text(path, _csv_text(header, rows))


def flip_rows(report: ProtocolReport, flip_rows_names: tuple[str, str] = ("PC", "PC+ALL")) -> list[dict]:
    """Samples misclassified by the first predictor and corrected by the
    second, grouped into overconfidence (wrongly trusted) and
    conservativeness (wrongly doubted) cases."""
    details = report.flip_details
    if details is None:
        return []
    base, augmented = flip_rows_names
    out = []
    for i, label in enumerate(details["labels"]):
        p_base = details["predictions"][base][i]
        p_aug = details["predictions"][augmented][i]
        if p_base == p_aug or p_aug != label:
            continue
        group = "Overc." if (label == 0 and p_base == 1) else "Conse."
        record = details["records"][i]
        out.append(
            {
                "group": group,
                "question": record.get("question", ""),
                "answer": record.get("answer", ""),
                "label": label,
                "PC": record.get("PC"),
                "Pop_Q": record.get("Pop_Q"),
                "Pop_Ge": record.get("Pop_Ge"),
                "RPop_Ge": record.get("RPop_Ge"),
                "base_prediction": p_base,
                "augmented_prediction": p_aug,
            }
        )
    out.sort(key=lambda r: (r["group"], r["question"]))
    return out


FLIP_HEADER = [
    "group", "question", "answer", "label", "PC", "Pop_Q", "Pop_Ge", "RPop_Ge",
    "base_prediction", "augmented_prediction",
]


def write_flips_csv(rows: Sequence[dict], path: str | Path) -> None:
    _atomic_write_text(
        path, _csv_text(FLIP_HEADER, [[r[k] for k in FLIP_HEADER] for r in rows])
    )


def render_curve_svg(curve: BinnedCurve, path: str | Path, title: str | None = None) -> None:
    """Standalone SVG line chart: accuracy, confidence, and alignment per
    popularity bin."""
    width, height = 640, 420
    margin_l, margin_r, margin_t, margin_b = 60, 20, 40, 50
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    n = max(1, curve.n_bins)

    def x_at(i: int) -> float:
        return margin_l + (plot_w * i / max(1, n - 1) if n > 1 else plot_w / 2)

    def y_at(v: float) -> float:
        return margin_t + plot_h * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{title or curve.signal}</text>',
    ]
    # axes and horizontal gridlines at 0, 0.25, ..., 1
    for k in range(5):
        v = k / 4
        y = y_at(v)
        parts.append(
            f'<line x1="{margin_l}" y1="{y:.1f}" x2="{width - margin_r}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{margin_l - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{v:.2f}</text>'
        )
    for i, b in enumerate(curve.bins):
        parts.append(
            f'<text x="{x_at(i):.1f}" y="{height - margin_b + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{b.lo:g}..{b.hi:g}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">popularity bins (ascending)</text>'
    )
    for series in CURVE_SERIES:
        points = " ".join(
            f"{x_at(i):.1f},{y_at(getattr(b, series)):.1f}" for i, b in enumerate(curve.bins)
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{SERIES_COLORS[series]}" '
            f'stroke-width="2"/>'
        )
        for i, b in enumerate(curve.bins):
            parts.append(
                f'<circle cx="{x_at(i):.1f}" cy="{y_at(getattr(b, series)):.1f}" r="3" '
                f'fill="{SERIES_COLORS[series]}"/>'
            )
    for j, series in enumerate(CURVE_SERIES):
        lx = margin_l + 10 + j * 130
        ly = margin_t - 12
        parts.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" '
            f'stroke="{SERIES_COLORS[series]}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 28}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="12">{SERIES_LABELS[series]}</text>'
        )
    parts.append("</svg>")
    _atomic_write_text(path, "\n".join(parts) + "\n")
