"""Poster manifest loading, leave-one-year-out fold planning and quadrant augmentation."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MIN_YEAR = 1925
MAX_YEAR = 2100

# Quadrant order shared by augmentation and the emotion histogram.
QUADRANTS = ("UL", "UR", "LL", "LR")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest content."""


class Festival(str, enum.Enum):
    ACADEMY = "academy"
    BERLIN = "berlin"
    CANNES = "cannes"
    VENICE = "venice"

    @property
    def display(self) -> str:
        return self.value.capitalize()

    @classmethod
    def parse(cls, name: str | Festival) -> Festival:
        if isinstance(name, Festival):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ManifestError(f"unknown festival {name!r}") from None


@dataclass(frozen=True)
class PosterRecord:
    festival: Festival
    year: int
    id: str
    title: str
    image_path: Path
    winner: bool
    annotations_path: Path | None = None


@dataclass(frozen=True)
class AugmentedSample:
    parent_id: str
    crop_index: int
    label: bool

    @property
    def id(self) -> str:
        return augmented_id(self.parent_id, self.crop_index)


@dataclass
class FoldPlan:
    festival: Festival
    test_year: int
    train_ids: list[str]
    test_ids: list[str]
    winner_count_k: int

    @property
    def skipped(self) -> bool:
        return self.winner_count_k == 0


def augmented_id(parent_id: str, crop_index: int) -> str:
    return f"{parent_id}#{crop_index}"


def parent_of(sample_id: str) -> str:
    """Map a training sample id (original or crop) back to its poster id."""
    return sample_id.split("#", 1)[0]


@dataclass
class Corpus:
    records: list[PosterRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id: dict[str, PosterRecord] = {}
        self._index: dict[tuple[Festival, int], list[PosterRecord]] = defaultdict(list)
        for rec in self.records:
            if rec.id in self._by_id:
                raise ManifestError(f"duplicate id {rec.id!r}")
            self._by_id[rec.id] = rec
            self._index[(rec.festival, rec.year)].append(rec)
        self._index = dict(self._index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, poster_id: str) -> PosterRecord:
        return self._by_id[poster_id]

    def __contains__(self, poster_id: str) -> bool:
        return poster_id in self._by_id

    def lookup(self, festival: Festival | str, year: int) -> list[PosterRecord]:
        return list(self._index.get((Festival.parse(festival), year), []))

    def festivals(self) -> list[Festival]:
        present = {rec.festival for rec in self.records}
        return [f for f in Festival if f in present]

    def years(self, festival: Festival | str) -> list[int]:
        fest = Festival.parse(festival)
        return sorted(year for (f, year) in self._index if f == fest)

    def festival_records(self, festival: Festival | str) -> list[PosterRecord]:
        fest = Festival.parse(festival)
        return [rec for rec in self.records if rec.festival == fest]

    def subset(self, festival: Festival | str) -> Corpus:
        return Corpus(self.festival_records(festival))


def _parse_record(obj: dict, root: Path, lineno: int) -> PosterRecord:
    def fail(msg: str):
        raise ManifestError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("expected a JSON object")
    for key in ("festival", "year", "id", "image", "winner"):
        if key not in obj:
            fail(f"missing field {key!r}")
    try:
        festival = Festival.parse(obj["festival"])
    except ManifestError as exc:
        fail(str(exc))
    year = obj["year"]
    if isinstance(year, bool) or not isinstance(year, int):
        fail(f"year must be an integer, got {year!r}")
    if not MIN_YEAR <= year <= MAX_YEAR:
        fail(f"year {year} outside {MIN_YEAR}..{MAX_YEAR}")
    poster_id = obj["id"]
    if not isinstance(poster_id, str) or not poster_id.strip():
        fail("id must be a nonempty string")
    if "#" in poster_id:
        fail(f"id {poster_id!r} may not contain '#' (reserved for crop ids)")
    image = obj["image"]
    if not isinstance(image, str) or not image:
        fail("image must be a nonempty path")
    winner = obj["winner"]
    if not isinstance(winner, bool):
        fail(f"winner must be true/false, got {winner!r}")
    annotations = obj.get("annotations")
    if annotations is not None and not isinstance(annotations, str):
        fail("annotations must be a path or null")
    title = obj.get("title") or poster_id
    return PosterRecord(
        festival=festival,
        year=year,
        id=poster_id,
        title=str(title),
        image_path=root / image,
        winner=winner,
        annotations_path=(root / annotations) if annotations else None,
    )


def parse_manifest(lines: Iterable[str], root: Path | str = ".") -> Corpus:
    root = Path(root)
    records: list[PosterRecord] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        rec = _parse_record(obj, root, lineno)
        if rec.id in seen:
            raise ManifestError(
                f"line {lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})"
            )
        seen[rec.id] = lineno
        records.append(rec)
    return Corpus(records)


def load_manifest(path: Path | str) -> Corpus:
    """Read a JSON-lines poster manifest.

    Relative image and annotation paths are resolved against the manifest's
    directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh, root=path.parent)


def record_to_json(rec: PosterRecord, root: Path | str | None = None) -> str:
    def rel(p: Path | None) -> str | None:
        if p is None:
            return None
        if root is not None:
            try:
                return Path(p).relative_to(root).as_posix()
            except ValueError:
                pass
        return Path(p).as_posix()

    obj = {
        "festival": rec.festival.value,
        "year": rec.year,
        "id": rec.id,
        "title": rec.title,
        "image": rel(rec.image_path),
        "winner": rec.winner,
    }
    if rec.annotations_path is not None:
        obj["annotations"] = rel(rec.annotations_path)
    return json.dumps(obj, ensure_ascii=False)


def write_manifest(records: Iterable[PosterRecord], path: Path | str) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec, root=path.parent) + "\n")


def plan_loyo(corpus: Corpus, festival: Festival | str, augment: bool = True) -> list[FoldPlan]:
    """One fold per distinct year of ``festival``; that year tests, all others train.

    Training ids list every original poster followed by its four quadrant crops
    when ``augment`` is set. Test ids are originals only.
    """
    fest = Festival.parse(festival)
    records = corpus.festival_records(fest)
    if not records:
        raise ManifestError(f"festival {fest.value!r} has no records in corpus")
    years = sorted({rec.year for rec in records})
    folds = []
    for year in years:
        test = [rec for rec in records if rec.year == year]
        train_ids: list[str] = []
        for rec in records:
            if rec.year == year:
                continue
            train_ids.append(rec.id)
            if augment:
                train_ids.extend(augmented_id(rec.id, q) for q in range(4))
        folds.append(
            FoldPlan(
                festival=fest,
                test_year=year,
                train_ids=train_ids,
                test_ids=[rec.id for rec in test],
                winner_count_k=sum(rec.winner for rec in test),
            )
        )
    return folds


def quadrant_boxes(width: int, height: int) -> list[tuple[int, int, int, int]]:
    """(x, y, w, h) of the UL, UR, LL, LR quadrants; odd extra pixel goes right/bottom."""
    if width < 2 or height < 2:
        raise ValueError(f"image too small to split into quadrants: {width}x{height}")
    left, top = width // 2, height // 2
    right, bottom = width - left, height - top
    return [
        (0, 0, left, top),
        (left, 0, right, top),
        (0, top, left, bottom),
        (left, top, right, bottom),
    ]


def augment_quadrants(
    record: PosterRecord, image: np.ndarray
) -> list[tuple[AugmentedSample, np.ndarray]]:
    """Split a training poster into four labelled quadrant crops."""
    height, width = image.shape[:2]
    out = []
    for idx, (x, y, w, h) in enumerate(quadrant_boxes(width, height)):
        crop = image[y : y + h, x : x + w].copy()
        out.append((AugmentedSample(record.id, idx, record.winner), crop))
    return out


@dataclass(frozen=True)
class FestivalStats:
    festival: Festival
    years: list[int]
    winners: int
    nominates: int
    mean_per_year: float

    @property
    def year_span(self) -> str:
        return format_year_ranges(self.years)


def format_year_ranges(years: Iterable[int]) -> str:
    """Compress sorted years into a '1929-1932,1934-2016' style string."""
    years = sorted(set(years))
    if not years:
        return ""
    parts = []
    start = prev = years[0]
    for y in years[1:] + [None]:
        if y is not None and y == prev + 1:
            prev = y
            continue
        parts.append(str(start) if start == prev else f"{start}-{prev}")
        if y is not None:
            start = prev = y
    return ",".join(parts)


def summarize(corpus: Corpus) -> list[FestivalStats]:
    """Per-festival counts. ``nominates`` counts the non-winning nominees."""
    stats = []
    for fest in corpus.festivals():
        recs = corpus.festival_records(fest)
        years = sorted({r.year for r in recs})
        winners = sum(r.winner for r in recs)
        stats.append(
            FestivalStats(
                festival=fest,
                years=years,
                winners=winners,
                nominates=len(recs) - winners,
                mean_per_year=len(recs) / len(years),
            )
        )
    return stats
