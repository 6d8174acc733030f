"""Generated poster corpora with a known colour signal, for smoke tests and demos."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import PosterRecord, Festival, write_manifest
from .descriptors import EXPRESSIONS
from .imageops import encode_png


def synthetic_poster(rng: np.random.Generator, winner: bool, size: tuple[int, int], noise: float) -> np.ndarray:
    """Red-dominant (winner) or blue-dominant (nominee) image.

    Each pixel jitters around a per-poster base colour; a ``noise`` fraction
    of pixels is replaced by uniformly random colours.
    """
    width, height = size
    strong = rng.uniform(160, 255)
    weak = rng.uniform(0, 90, size=2)
    base = np.array([strong, weak[0], weak[1]]) if winner else np.array([weak[0], weak[1], strong])
    img = base + rng.normal(0, 20, size=(height, width, 3))
    mask = rng.random((height, width)) < noise
    img[mask] = rng.uniform(0, 256, size=(int(mask.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _random_faces(rng: np.random.Generator, size: tuple[int, int]) -> dict:
    width, height = size
    faces = []
    for _ in range(int(rng.integers(0, 4))):
        w = int(rng.integers(4, max(5, width // 3)))
        h = int(rng.integers(4, max(5, height // 3)))
        faces.append({
            "bbox": [int(rng.integers(0, width - w)), int(rng.integers(0, height - h)), w, h],
            "expression": EXPRESSIONS[int(rng.integers(len(EXPRESSIONS)))],
            "confidence": round(float(rng.uniform(0.5, 1.0)), 3),
        })
    return {"faces": faces}


def make_synthetic_corpus(
    root: Path | str,
    years: int = 20,
    winners_per_year: int = 1,
    nominees_per_year: int = 5,
    size: tuple[int, int] = (48, 72),
    noise: float = 0.1,
    seed: int = 0,
    festival: str = "academy",
    first_year: int = 1990,
    faces: bool = False,
) -> Path:
    """Write PNG posters (and optional face sidecars) plus ``manifest.jsonl``; return the manifest path."""
    root = Path(root)
    (root / "posters").mkdir(parents=True, exist_ok=True)
    if faces:
        (root / "faces").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    fest = Festival.parse(festival)
    records = []
    for y in range(years):
        year = first_year + y
        flags = [True] * winners_per_year + [False] * nominees_per_year
        for i, winner in enumerate(flags):
            pid = f"{fest.value[:2]}{year}{i:02d}"
            image_path = root / "posters" / f"{pid}.png"
            encode_png(synthetic_poster(rng, winner, size, noise), image_path)
            ann = None
            if faces:
                ann = root / "faces" / f"{pid}.json"
                ann.write_text(json.dumps(_random_faces(rng, size)) + "\n", encoding="utf-8")
            records.append(PosterRecord(fest, year, pid, f"Film {year}-{i}", image_path, winner, ann))
    manifest = root / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
