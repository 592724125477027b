"""Report assembly and file emission: canonical JSON documents, curve and
confusion-matrix CSVs, and a dependency-free SVG renderer for curves.

Reports are byte-deterministic: dictionaries are built in a fixed key order,
floats serialize via their shortest repr, and no timestamps are embedded
unless explicitly requested. Each report carries a hash of its resolved
configuration and content digests of its input files so any output can be
traced to exactly one (config, inputs) pair.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

from .data import CLASS_ORDER
from .metrics import CurveSeries, MetricReport

__all__ = [
    "REPORT_SCHEMA_ID",
    "sha256_bytes",
    "sha256_file",
    "config_hash",
    "build_report_doc",
    "dump_json",
    "cm_csv",
    "curves_svg",
    "training_log_csv",
    "load_report_schema",
    "curve_filenames",
]

REPORT_SCHEMA_ID = "gjeval-report-v1"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def config_hash(config: dict) -> str:
    """Digest of the resolved run configuration (order-insensitive)."""
    return sha256_bytes(json.dumps(config, sort_keys=True, separators=(",", ":")).encode())


def build_report_doc(
    kind: str,
    config: dict,
    inputs: dict[str, str | Path],
    results: dict,
    stamp: str | None = None,
) -> dict:
    """Assemble the top-level report document in canonical key order."""
    doc = {
        "schema": REPORT_SCHEMA_ID,
        "kind": kind,
        "config": config,
        "config_sha256": config_hash(config),
        "inputs": {
            name: {"path": str(path), "sha256": sha256_file(path)}
            for name, path in inputs.items()
        },
    }
    if stamp is not None:
        doc["generated_at"] = stamp
    doc["results"] = results
    return doc


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def cm_csv(report: MetricReport) -> str:
    names = [c.display for c in CLASS_ORDER]
    lines = ["truth\\pred," + ",".join(names)]
    for c, row in zip(CLASS_ORDER, report.cm.counts):
        lines.append(c.display + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def curve_filenames(report: MetricReport) -> dict[str, CurveSeries]:
    """Mapping of output file name to curve, in canonical emission order."""
    out: dict[str, CurveSeries] = {}
    if report.roc_micro is not None:
        out["roc_micro.csv"] = report.roc_micro
        out["pr_micro.csv"] = report.pr_micro
    for c in CLASS_ORDER:
        if c.slug in report.roc_per_class:
            out[f"roc_{c.slug}.csv"] = report.roc_per_class[c.slug]
        if c.slug in report.pr_per_class:
            out[f"pr_{c.slug}.csv"] = report.pr_per_class[c.slug]
    return out


_SVG_COLORS = ("#1f5fa8", "#c44f4f", "#4f9a58", "#8a6fb8")


def curves_svg(title: str, named_series: list[tuple[str, CurveSeries]]) -> str:
    """Minimal standalone SVG: unit-square axes plus one polyline per curve."""
    size, margin = 420, 50
    plot = size - 2 * margin

    def px(x: float) -> float:
        return margin + x * plot

    def py(y: float) -> float:
        return size - margin - y * plot

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.1f}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title}</text>',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" '
        f'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{px(frac):.1f}" y="{size - margin + 18}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{frac:g}</text>'
        )
        parts.append(
            f'<text x="{margin - 8}" y="{py(frac) + 4:.1f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{frac:g}</text>'
        )
    for i, (label, series) in enumerate(named_series):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(series.x, series.y))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{margin + 10}" y="{margin + 18 + 16 * i}" font-size="12" '
            f'font-family="sans-serif" fill="{color}">{label} (area={series.area:.4f})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def training_log_csv(log: tuple[dict, ...]) -> str:
    lines = ["epoch,train_loss,train_acc,holdout_acc"]
    for entry in log:
        lines.append(
            f"{entry['epoch']},{entry['train_loss']!r},{entry['train_acc']!r},{entry['holdout_acc']!r}"
        )
    return "\n".join(lines) + "\n"


def load_report_schema() -> dict:
    """The versioned JSON schema shipped with the package."""
    text = resources.files("gjeval").joinpath("schemas/report-v1.json").read_text()
    return json.loads(text)
