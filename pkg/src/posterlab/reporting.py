"""Report tables (CSV) and simple SVG charts built from finished runs.

Fractions stay fractions in CSV files; SVG labels show percentages.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import QUADRANTS, Corpus, FestivalStats
from .descriptors import EXPRESSIONS, AnnotationError, emotion_histogram, load_face_annotations
from .imageops import image_size
from .protocol import FestivalScore, WinnerPrediction

ACCURACY_HEADER = ("festival", "channel", "recall", "hit_rate", "baseline")
SLATE_HEADER = ("title", "score", "rank")
SUMMARY_HEADER = ("festival", "years", "n_years", "winners", "nominates", "mean_per_year")
EMOTION_HEADER = ("festival", "group", "n_posters") + tuple(
    f"{q}_{e}" for q in QUADRANTS for e in EXPRESSIONS
)
QUADRANT_HEADER = ("festival", "group", "quadrant") + EXPRESSIONS


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class Report:
    kind: str
    header: tuple[str, ...]
    rows: list[tuple]
    chart: str | None = None
    tables: dict[str, tuple[tuple[str, ...], list[tuple]]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        return csv_text(self.header, self.rows)

    def write(self, directory: Path | str, stem: str | None = None) -> list[Path]:
        """Write ``<stem>.csv``, any sub-tables and the chart; return the paths written."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        written = [directory / f"{stem}.csv"]
        written[0].write_text(self.to_csv(), encoding="utf-8", newline="\n")
        for name, (header, rows) in sorted(self.tables.items()):
            path = directory / f"{stem}_{name}.csv"
            path.write_text(csv_text(header, rows), encoding="utf-8", newline="\n")
            written.append(path)
        if self.chart is not None:
            path = directory / f"{stem}.svg"
            path.write_text(self.chart, encoding="utf-8", newline="\n")
            written.append(path)
        return written


# --- accuracy (per-feature comparison) -------------------------------------


def accuracy_table(scores: Sequence[FestivalScore]) -> Report:
    """Rows (festival, channel, recall, hit rate, baseline), sorted by festival then channel."""
    rows = sorted(
        (s.festival.value, s.channel, s.winner_recall, s.hit_rate, s.random_baseline) for s in scores
    )
    rows = [tuple(r) for r in rows]
    return Report("accuracy_table", ACCURACY_HEADER, rows, chart=accuracy_chart(rows) if rows else None)


_PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f")


def accuracy_chart(rows: Sequence[tuple]) -> str:
    """Grouped bars: one group per festival, one bar per channel (recall)."""
    festivals = sorted({r[0] for r in rows})
    channels = sorted({r[1] for r in rows})
    recall = {(r[0], r[1]): r[2] for r in rows}
    bar, gap, plot_h, left, top = 18, 24, 200, 50, 20
    group_w = bar * len(channels) + gap
    width = left + group_w * len(festivals) + 160
    height = top + plot_h + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="10">',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + group_w * len(festivals)}" '
        f'y2="{top + plot_h}" stroke="black"/>',
    ]
    for tick in (0, 25, 50, 75, 100):
        y = top + plot_h - plot_h * tick / 100
        out.append(f'<text x="{left - 6}" y="{y + 3:.1f}" text-anchor="end">{tick}%</text>')
    for gi, fest in enumerate(festivals):
        x0 = left + gi * group_w + gap / 2
        for ci, ch in enumerate(channels):
            if (fest, ch) not in recall:
                continue
            value = recall[(fest, ch)]
            h = plot_h * value
            x = x0 + ci * bar
            out.append(
                f'<rect x="{x:.1f}" y="{top + plot_h - h:.1f}" width="{bar - 2}" height="{h:.1f}" '
                f'fill="{_PALETTE[ci % len(_PALETTE)]}"><title>{escape(ch)}: {100 * value:.1f}%</title></rect>'
            )
        out.append(
            f'<text x="{x0 + bar * len(channels) / 2:.1f}" y="{top + plot_h + 16}" '
            f'text-anchor="middle">{escape(fest)}</text>'
        )
    legend_x = left + group_w * len(festivals) + 20
    for ci, ch in enumerate(channels):
        y = top + ci * 16
        out.append(f'<rect x="{legend_x}" y="{y}" width="10" height="10" fill="{_PALETTE[ci % len(_PALETTE)]}"/>')
        out.append(f'<text x="{legend_x + 14}" y="{y + 9}">{escape(ch)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- expression histograms -------------------------------------------------


def poster_faces(corpus: Corpus) -> tuple[dict[str, tuple[list, tuple[int, int]]], list[str]]:
    """Load every poster's faces and image size; return them plus the ids that could not be read.

    Posters without an annotation path count as having no faces.
    """
    out, missing = {}, []
    for rec in corpus:
        if rec.annotations_path is None:
            faces = []
        else:
            try:
                faces = load_face_annotations(rec.annotations_path)
            except (OSError, AnnotationError):
                missing.append(rec.id)
                continue
        try:
            size = image_size(rec.image_path)
        except (OSError, ValueError):
            missing.append(rec.id)
            continue
        out[rec.id] = (faces, size)
    return out, missing


def expression_report(corpus: Corpus, annotations: Mapping[str, tuple[list, tuple[int, int]]] | None = None) -> Report:
    """Mean 32-bin expression histogram of winners and of nominees, per festival.

    ``annotations`` maps poster id to ``(faces, (width, height))``; when
    omitted the sidecar files named in the corpus are read. Posters without
    usable annotations are left out of the means and counted in ``warnings``.
    """
    missing: list[str] = []
    if annotations is None:
        annotations, missing = poster_faces(corpus)
    rows, quad_rows = [], []
    any_face = False
    for fest in corpus.festivals():
        for group, want in (("winner", True), ("nominee", False)):
            hists = []
            for rec in corpus.festival_records(fest):
                if rec.winner != want or rec.id not in annotations:
                    continue
                faces, size = annotations[rec.id]
                any_face = any_face or bool(faces)
                hists.append(emotion_histogram(faces, size))
            mean = np.mean(hists, axis=0) if hists else np.zeros(4 * len(EXPRESSIONS))
            rows.append((fest.value, group, len(hists), *(float(v) for v in mean)))
            for q, name in enumerate(QUADRANTS):
                block = mean[q * len(EXPRESSIONS) : (q + 1) * len(EXPRESSIONS)]
                quad_rows.append((fest.value, group, name, *(float(v) for v in block)))
    warnings = []
    if missing:
        warnings.append(f"{len(missing)} poster(s) with unreadable annotations or images: {', '.join(missing[:10])}")
    if rows and not any_face:
        warnings.append("no annotated faces in the corpus")
    return Report(
        "expression_histograms",
        EMOTION_HEADER,
        rows,
        tables={"quadrants": (QUADRANT_HEADER, quad_rows)},
        warnings=warnings,
    )


# --- slate ranking ---------------------------------------------------------


def slate_ranking(prediction: WinnerPrediction, titles: Mapping[str, str] | None = None) -> Report:
    """Rows (title, score to 3 decimals, rank) in the prediction's ranked order."""
    if not prediction.ranked:
        raise ValueError("empty prediction")
    titles = titles or {}
    rows = [
        (titles.get(pid) or pid, f"{p:.3f}", rank)
        for rank, (pid, p) in enumerate(prediction.ranked, start=1)
    ]
    return Report("slate_ranking", SLATE_HEADER, rows)


def format_slate(report: Report) -> str:
    width = max([len("title")] + [len(r[0]) for r in report.rows])
    lines = [f"{'rank':>4}  {'title':<{width}}  score"]
    lines += [f"{rank:>4}  {title:<{width}}  {score}" for title, score, rank in report.rows]
    return "\n".join(lines) + "\n"


# --- corpus summary --------------------------------------------------------


def corpus_summary(stats: Sequence[FestivalStats]) -> Report:
    rows = [
        (s.festival.display, s.year_span, len(s.years), s.winners, s.nominates, f"{s.mean_per_year:.1f}")
        for s in stats
    ]
    return Report("corpus_summary", SUMMARY_HEADER, rows)


def format_table(report: Report) -> str:
    """Fixed-width plain-text rendering of a report (for the terminal)."""
    cells = [list(report.header)] + [[_fmt(v) for v in row] for row in report.rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(report.header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells) + "\n"
