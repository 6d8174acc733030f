"""Manifest fixtures replaying the festival corpus cardinalities and the Academy 2017 slate."""

from __future__ import annotations

import json
from pathlib import Path

# festival -> (years as inclusive ranges, winners, non-winning nominees)
CORPUS_COUNTS = {
    "academy": ([(1929, 1932), (1934, 2016)], 88, 440),
    "berlin": ([(1951, 2016)], 63, 905),
    "cannes": ([(1939, 1939), (1946, 1947), (1949, 1949), (1951, 1968), (1969, 2016)], 91, 1335),
    "venice": ([(1932, 1932), (1934, 1942), (1946, 1972), (1979, 2016)], 53, 869),
}

SLATE_2017 = [
    ("Moonlight", 0.167),
    ("Lion", 0.163),
    ("Hell or High Water", 0.162),
    ("Arrival", 0.151),
    ("Hacksaw Ridge", 0.142),
    ("Fences", 0.138),
    ("Hidden Figures", 0.114),
    ("Manchester by the Sea", 0.112),
    ("La La Land", 0.093),
]


def expand_years(ranges) -> list[int]:
    return [y for lo, hi in ranges for y in range(lo, hi + 1)]


def _spread(total: int, slots: int) -> list[int]:
    """Split ``total`` items over ``slots`` as evenly as possible, front-loaded."""
    base, extra = divmod(total, slots)
    return [base + (i < extra) for i in range(slots)]


def corpus_counts_lines() -> list[str]:
    lines = []
    for fest, (ranges, winners, nominees) in CORPUS_COUNTS.items():
        years = expand_years(ranges)
        for year, w, n in zip(years, _spread(winners, len(years)), _spread(nominees, len(years))):
            for i in range(w + n):
                lines.append(json.dumps({
                    "festival": fest, "year": year, "id": f"{fest[:2]}{year}-{i:02d}",
                    "title": f"{fest} {year} #{i}", "image": f"posters/{fest}/{year}-{i}.png",
                    "winner": i < w,
                }))
    return lines


def write_corpus_counts_manifest(directory: Path) -> Path:
    path = Path(directory) / "corpus_counts.jsonl"
    path.write_text("\n".join(corpus_counts_lines()) + "\n", encoding="utf-8")
    return path


def slug(title: str) -> str:
    return title.lower().replace(" ", "-")


def slate_2017_posteriors() -> dict[str, float]:
    return {slug(title): p for title, p in SLATE_2017}


def slate_2017_titles() -> dict[str, str]:
    return {slug(title): title for title, _ in SLATE_2017}


def loyo_lines(years: int = 10, per_year: int = 6, winners_per_year=1, first_year: int = 2000) -> list[str]:
    """Image-free manifest lines for planning tests."""
    lines = []
    for y in range(years):
        year = first_year + y
        w = winners_per_year(year) if callable(winners_per_year) else winners_per_year
        for i in range(per_year):
            lines.append(json.dumps({
                "festival": "venice", "year": year, "id": f"v{year}{i}",
                "image": f"p/{year}{i}.png", "winner": i < w,
            }))
    return lines
