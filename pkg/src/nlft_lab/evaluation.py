"""Accuracy evaluation, run comparison, and token-level saliency reports.

Charts are dependency-free SVG strings computed purely from the tabulated
data, so regenerating them from the same CSV yields byte-identical files.
"""

from __future__ import annotations

import csv
import html
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .collection import ConditionProbTable
from .corpus import Dataset, score_answer
from .generation import DecodeConfig, OutputGenerator
from .instrumentation import Counters
from .saliency import SaliencyAssignment
from .scales import ScaleVector


@dataclass(frozen=True)
class EvalResult:
    split_id: str
    accuracy: float
    records: tuple[dict, ...]
    decode: DecodeConfig

    def __post_init__(self):
        n_correct = sum(1 for r in self.records if r["correct"])
        if self.records and abs(self.accuracy - n_correct / len(self.records)) > 1e-12:
            raise ValueError("accuracy does not match per-example records")


def evaluate(
    generator: OutputGenerator,
    dataset: Dataset,
    decode: DecodeConfig = DecodeConfig(),
    counter: Optional[Counters] = None,
) -> EvalResult:
    """Generate an output per example and score it against the exact answer."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    records = []
    n_correct = 0
    for i, example in enumerate(dataset):
        text = generator.generate_output(example, decode, i)
        extracted = score_answer(text)
        correct = extracted is not None and extracted == example.standard_answer
        n_correct += int(correct)
        records.append(
            {
                "id": example.id,
                "extracted": None if extracted is None else str(extracted),
                "correct": correct,
            }
        )
    return EvalResult(
        split_id=str(dataset.provenance.get("split", "unknown")),
        accuracy=n_correct / len(dataset),
        records=tuple(records),
        decode=decode,
    )


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = ("run", "epoch", "accuracy", "loss", "lr", "forwards")


def compare_runs(
    manifest_paths: Sequence[str | Path],
    out_csv: Optional[str | Path] = None,
    out_svg: Optional[str | Path] = None,
) -> list[dict]:
    """Align runs by epoch into one table, optionally writing CSV and chart."""
    if not manifest_paths:
        raise ValueError("need at least one run manifest")
    manifests = [json.loads(Path(p).read_text(encoding="utf-8")) for p in manifest_paths]
    splits = {m.get("eval_split") for m in manifests if m.get("eval_split") is not None}
    if len(splits) > 1:
        raise ValueError(f"mismatched eval splits across runs: {sorted(splits)}")
    rows = []
    for manifest in manifests:
        for row in manifest["epoch_rows"]:
            forwards = (
                row["forwards_collection"]
                + row["forwards_generation"]
                + row["forwards_training"]
            )
            rows.append(
                {
                    "run": manifest["run_name"],
                    "epoch": row["epoch"],
                    "accuracy": row["accuracy"],
                    "loss": row["loss"],
                    "lr": row["lr"],
                    "forwards": forwards,
                }
            )
    if out_csv is not None:
        with Path(out_csv).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(COMPARE_COLUMNS)
            for row in rows:
                writer.writerow(
                    [
                        row["run"],
                        row["epoch"],
                        "" if row["accuracy"] is None else repr(row["accuracy"]),
                        repr(row["loss"]),
                        repr(row["lr"]),
                        row["forwards"],
                    ]
                )
    if out_svg is not None:
        Path(out_svg).write_text(accuracy_chart_svg(rows), encoding="utf-8")
    return rows


def rows_from_csv(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        for record in csv.DictReader(handle):
            rows.append(
                {
                    "run": record["run"],
                    "epoch": int(record["epoch"]),
                    "accuracy": float(record["accuracy"]) if record["accuracy"] else None,
                    "loss": float(record["loss"]),
                    "lr": float(record["lr"]),
                    "forwards": int(record["forwards"]),
                }
            )
    return rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(value: float) -> str:
    return format(value, ".6g")


def accuracy_chart_svg(rows: Sequence[dict]) -> str:
    """Accuracy-versus-epoch line chart as a self-contained SVG string."""
    width, height = 640, 400
    left, right, top, bottom = 60, 20, 30, 40
    plot_w, plot_h = width - left - right, height - top - bottom

    series: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        if row["accuracy"] is None:
            continue
        series.setdefault(row["run"], []).append((row["epoch"], row["accuracy"]))
    epochs = [e for pts in series.values() for e, _ in pts] or [0]
    x_min, x_max = min(epochs), max(epochs)
    x_span = max(1, x_max - x_min)

    def sx(e: float) -> float:
        return left + (e - x_min) / x_span * plot_w

    def sy(a: float) -> float:
        return top + (1.0 - a) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" '
        'stroke="black"/>',
        f'<text x="{left - 10}" y="{top + 5}" text-anchor="end" font-size="12">1.0</text>',
        f'<text x="{left - 10}" y="{top + plot_h + 5}" text-anchor="end" '
        'font-size="12">0.0</text>',
        f'<text x="{_fmt(sx(x_min))}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">{x_min}</text>',
        f'<text x="{_fmt(sx(x_max))}" y="{height - 12}" text-anchor="middle" '
        f'font-size="12">{x_max}</text>',
        f'<text x="{left + plot_w // 2}" y="{height - 12}" text-anchor="middle" '
        'font-size="12">epoch</text>',
        f'<text x="16" y="{top + plot_h // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {top + plot_h // 2})">accuracy</text>',
    ]
    for idx, (run, pts) in enumerate(sorted(series.items())):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = sorted(pts)
        coords = " ".join(f"{_fmt(sx(e))},{_fmt(sy(a))}" for e, a in pts)
        parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        for e, a in pts:
            parts.append(
                f'<circle cx="{_fmt(sx(e))}" cy="{_fmt(sy(a))}" r="3" fill="{color}"/>'
            )
        parts.append(
            f'<text x="{left + plot_w - 4}" y="{top + 16 + 16 * idx}" text-anchor="end" '
            f'font-size="12" fill="{color}">{html.escape(run)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Token-level saliency report
# ---------------------------------------------------------------------------

_REPORT_CSS = """
body { font-family: sans-serif; margin: 2em; }
.tokens { line-height: 2.2; max-width: 60em; }
span.tok { padding: 2px 3px; border-radius: 3px; margin: 1px; display: inline-block; }
span.saliency { background: #7fb3ff; }
span.sub_saliency { background: #c4dcff; }
span.irrelevant { background: #f0f0f0; }
.meta { color: #444; margin-bottom: 1em; }
.legend span { margin-right: 1em; }
"""


def saliency_report(
    example,
    table: ConditionProbTable,
    assignment: SaliencyAssignment,
    scale_vec: ScaleVector,
    path: Optional[str | Path] = None,
) -> str:
    """Self-contained HTML rendering of one output's token-level analysis.

    Each token is colored by its label and carries a tooltip with its
    per-condition probabilities, ratios (incorrect branch), and scale.
    """
    n = len(table)
    if len(assignment) != n or len(scale_vec.values) != n:
        raise ValueError(
            f"length mismatch: table={n} labels={len(assignment)} "
            f"scales={len(scale_vec.values)}"
        )
    spans = []
    for t in range(n):
        label = assignment.labels[t]
        tip = [f"p_base={table.p_base[t]:.6g}"]
        if table.p_judge is not None:
            tip.append(f"p_judge={table.p_judge[t]:.6g}")
        tip.append(f"p_standard={table.p_standard[t]:.6g}")
        if assignment.ratios is not None:
            pair = assignment.ratios[t]
            tip.append(f"r1={pair.r1:.6g}")
            tip.append(f"r2={pair.r2:.6g}")
        tip.append(f"S={scale_vec.values[t]:.6g}")
        spans.append(
            f'<span class="tok {label.value}" title="{html.escape(" ".join(tip), quote=True)}">'
            f"{html.escape(table.tokens[t])}</span>"
        )
    filtered = " (filtered out of training)" if assignment.filtered_out else ""
    n_salient = len(assignment.saliency_indices())
    doc = f"""<!DOCTYPE html>
<html xmlns="http://www.w3.org/1999/xhtml">
<head>
<meta charset="utf-8"/>
<title>Token saliency: {html.escape(table.example_id)}</title>
<style>{_REPORT_CSS}</style>
</head>
<body>
<h1>Token saliency: {html.escape(table.example_id)}</h1>
<div class="meta">branch: {assignment.branch}{filtered}; salient tokens: {n_salient} of {n}</div>
<div class="meta">question: {html.escape(example.question)}</div>
<div class="legend">
<span class="tok saliency">saliency</span>
<span class="tok sub_saliency">sub-saliency</span>
<span class="tok irrelevant">irrelevant</span>
</div>
<div class="tokens">{"".join(spans)}</div>
</body>
</html>
"""
    if path is not None:
        Path(path).write_text(doc, encoding="utf-8")
    return doc


# ---------------------------------------------------------------------------
# Forward-pass accounting
# ---------------------------------------------------------------------------

def _forward_counts(source) -> dict:
    if isinstance(source, Counters):
        return source.snapshot()["forwards"]
    if isinstance(source, dict):
        return source.get("forwards", source)
    raise TypeError(f"expected Counters or a snapshot dict, got {type(source)!r}")


def forward_ratio(counters, baseline_counters) -> float:
    """Collection-plus-training forward passes relative to a baseline run."""
    ours = _forward_counts(counters)
    base = _forward_counts(baseline_counters)
    numer = ours.get("collection", 0) + ours.get("training", 0)
    denom = base.get("collection", 0) + base.get("training", 0)
    if denom == 0:
        raise ValueError("baseline performed no collection or training forwards")
    return numer / denom
