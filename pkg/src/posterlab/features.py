"""Corpus-level feature extraction and the per-fold feature sources the protocol trains on.

A *sample* is either an original poster (id ``tt001``) or one of its quadrant
crops (id ``tt001#0`` .. ``tt001#3``). Stored features are rounded through
float32 so that values read back from PFV files are identical to the ones
that were used in memory.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import pfv
from .codebook import Codebook, kmeans_fit
from .dataset import PosterRecord, augment_quadrants, augmented_id, quadrant_boxes
from .descriptors import (
    AnnotationError,
    FaceAnnotation,
    bof_histogram,
    canonical_gray,
    crop_faces,
    dense_sift,
    extract_channel,
    load_face_annotations,
)
from .imageops import ImageDecodeError, decode

log = logging.getLogger(__name__)


class FeatureError(RuntimeError):
    """Features needed for a fold are missing or could not be computed."""


def pool_map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``map`` in input order, optionally over a process pool."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def load_poster(record: PosterRecord) -> tuple[np.ndarray, list[FaceAnnotation]]:
    """Decode a poster image and its face sidecar (no sidecar means no faces)."""
    image = decode(record.image_path)
    faces: list[FaceAnnotation] = []
    if record.annotations_path is not None:
        faces = load_face_annotations(record.annotations_path)
    return image, faces


def sample_images(
    record: PosterRecord, image: np.ndarray, faces: list[FaceAnnotation], augment: bool
) -> list[tuple[str, np.ndarray, list[FaceAnnotation]]]:
    """The original followed, if ``augment``, by its four crops with faces remapped."""
    out = [(record.id, image, faces)]
    if augment:
        h, w = image.shape[:2]
        boxes = quadrant_boxes(w, h)
        for (sample, crop), box in zip(augment_quadrants(record, image), boxes):
            out.append((sample.id, crop, crop_faces(faces, box)))
    return out


@dataclass
class FeatureTable:
    """Feature matrix for one channel, rows keyed by sample id."""

    channel: str
    ids: list[str]
    values: np.ndarray
    _row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).astype(np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise FeatureError(f"{self.channel}: {len(self.ids)} ids for matrix {self.values.shape}")
        self._row = {pid: i for i, pid in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise FeatureError(f"{self.channel}: duplicate sample ids")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def has_crops(self) -> bool:
        return any("#" in pid for pid in self.ids)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._row

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        ids = list(ids)
        missing = [pid for pid in ids if pid not in self._row]
        if missing:
            raise FeatureError(f"{self.channel}: no features for {', '.join(missing[:5])}"
                               + (f" and {len(missing) - 5} more" if len(missing) > 5 else ""))
        return self.values[[self._row[pid] for pid in ids]]

    def save(self, path: Path | str, originals_only: bool = False) -> None:
        keep = [i for i, pid in enumerate(self.ids) if not (originals_only and "#" in pid)]
        pfv.write(path, self.channel, [self.ids[i] for i in keep], self.values[keep])

    @classmethod
    def concat(cls, tables: Sequence[FeatureTable]) -> FeatureTable:
        filled = [t for t in tables if t.ids]
        if not filled:
            return cls(tables[0].channel, [], np.zeros((0, 0)))
        ids = [pid for t in filled for pid in t.ids]
        return cls(tables[0].channel, ids, np.concatenate([t.values for t in filled]))

    @classmethod
    def load(cls, path: Path | str) -> FeatureTable:
        channel, ids, mat = pfv.read(path)
        return cls(channel, ids, mat)


def _extract_one(task) -> tuple[str, dict[str, list[tuple[str, np.ndarray]]] | None, str | None]:
    record, channels, augment, codebook = task
    try:
        image, faces = load_poster(record)
        out: dict[str, list[tuple[str, np.ndarray]]] = {ch: [] for ch in channels}
        for sample_id, img, sample_faces in sample_images(record, image, faces, augment):
            for ch in channels:
                vec = extract_channel(ch, img, sample_faces, codebook)
                out[ch].append((sample_id, vec))
        return record.id, out, None
    except (OSError, ImageDecodeError, AnnotationError, ValueError) as exc:
        return record.id, None, f"{type(exc).__name__}: {exc}"


def extract_corpus(
    records: Sequence[PosterRecord],
    channels: Sequence[str],
    augment: bool = True,
    jobs: int = 1,
    codebook: Codebook | None = None,
) -> tuple[dict[str, FeatureTable], dict[str, str]]:
    """Compute built-in channels for every record (and its crops if ``augment``).

    Returns one table per channel plus ``{poster_id: error message}`` for the
    posters that could not be processed; those posters have no rows.
    """
    tasks = [(rec, tuple(channels), augment, codebook) for rec in records]
    results = pool_map(_extract_one, tasks, jobs)
    failures: dict[str, str] = {}
    collected: dict[str, tuple[list[str], list[np.ndarray]]] = {ch: ([], []) for ch in channels}
    for poster_id, out, err in results:
        if err is not None:
            log.warning("feature extraction failed for %s: %s", poster_id, err)
            failures[poster_id] = err
            continue
        for ch in channels:
            for sample_id, vec in out[ch]:
                collected[ch][0].append(sample_id)
                collected[ch][1].append(vec)
    tables = {}
    for ch in channels:
        ids, vecs = collected[ch]
        mat = np.stack(vecs) if vecs else np.zeros((0, 0))
        tables[ch] = FeatureTable(ch, ids, mat)
    return tables, failures


def _sift_one(task) -> tuple[str, list[tuple[str, np.ndarray]] | None, str | None]:
    record, augment = task
    try:
        image, faces = load_poster(record)
        out = [
            (sample_id, dense_sift(canonical_gray(img)).astype(np.float32))
            for sample_id, img, _ in sample_images(record, image, faces, augment)
        ]
        return record.id, out, None
    except (OSError, ImageDecodeError, AnnotationError, ValueError) as exc:
        return record.id, None, f"{type(exc).__name__}: {exc}"


def extract_sift(
    records: Sequence[PosterRecord], augment: bool = True, jobs: int = 1
) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Dense SIFT descriptor sets per sample id (float32), plus failures."""
    results = pool_map(_sift_one, [(rec, augment) for rec in records], jobs)
    descs: dict[str, np.ndarray] = {}
    failures: dict[str, str] = {}
    for poster_id, out, err in results:
        if err is not None:
            log.warning("SIFT extraction failed for %s: %s", poster_id, err)
            failures[poster_id] = err
            continue
        descs.update(out)
    return descs, failures


def train_codebook(
    descriptor_sets: Iterable[np.ndarray], k: int, seed: int, max_descriptors: int = 20000
) -> Codebook:
    """k-means codebook over pooled descriptors, subsampled to ``max_descriptors``.

    ``k`` is lowered to the number of available descriptors when there are
    fewer (tiny corpora).
    """
    sets = [np.asarray(d, dtype=np.float64) for d in descriptor_sets if len(d)]
    if not sets:
        raise FeatureError("no SIFT descriptors to train a codebook on")
    pooled = np.concatenate(sets)
    rng = np.random.default_rng(seed)
    if len(pooled) > max_descriptors:
        pooled = pooled[np.sort(rng.choice(len(pooled), max_descriptors, replace=False))]
    return kmeans_fit(pooled, k=min(k, len(pooled)), seed=seed)


class TableSource:
    """Fixed precomputed features (built-in channels or an external PFV file).

    Tables without crop rows (typical for external features) train on the
    original posters only.
    """

    def __init__(self, table: FeatureTable):
        self.table = table
        self.name = table.channel
        self.augmented = table.has_crops

    def fold_features(self, train_ids: Sequence[str], test_ids: Sequence[str]):
        if not self.augmented:
            train_ids = [pid for pid in train_ids if "#" not in pid]
        return list(train_ids), self.table.rows(train_ids), self.table.rows(test_ids)


class BofSource:
    """SIFT bag-of-features with a codebook fitted on each fold's training samples only."""

    name = "siftbof"

    def __init__(self, descriptors: dict[str, np.ndarray], k: int = 256, seed: int = 42,
                 max_descriptors: int = 20000):
        self.descriptors = descriptors
        self.k = k
        self.seed = seed
        self.max_descriptors = max_descriptors
        self.augmented = any("#" in pid for pid in descriptors)

    def _sets(self, ids: Sequence[str]) -> list[np.ndarray]:
        missing = [pid for pid in ids if pid not in self.descriptors]
        if missing:
            raise FeatureError(f"siftbof: no descriptors for {', '.join(missing[:5])}")
        return [self.descriptors[pid] for pid in ids]

    def fold_features(self, train_ids: Sequence[str], test_ids: Sequence[str]):
        if not self.augmented:
            train_ids = [pid for pid in train_ids if "#" not in pid]
        train_sets = self._sets(train_ids)
        test_sets = self._sets(test_ids)
        codebook = train_codebook(train_sets, self.k, self.seed, self.max_descriptors)

        def encode(sets):
            return np.stack([bof_histogram(d.astype(np.float64), codebook) for d in sets])

        return list(train_ids), encode(train_sets), encode(test_sets)


def crop_id_set(poster_ids: Iterable[str]) -> set[str]:
    """Every sample id derived from the given posters, originals included."""
    out = set()
    for pid in poster_ids:
        out.add(pid)
        out.update(augmented_id(pid, q) for q in range(4))
    return out
