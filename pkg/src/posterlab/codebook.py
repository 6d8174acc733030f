"""k-means (k-means++ seeding, Lloyd iterations) for bag-of-features codebooks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pfv

CODEBOOK_CHANNEL = "codebook:sift"
DEFAULT_K = 256
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray
    inertia: float = 0.0
    seed: int = 0
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid index and exact squared distance for every row.

    Distances come from the |x|^2 - 2 x.c + |c|^2 expansion; rows whose two
    best candidates are within rounding of each other are recomputed with
    direct differences so that exact ties go to the lowest index.
    """
    xx = np.einsum("nd,nd->n", x, x)
    cc = np.einsum("kd,kd->k", centroids, centroids)
    d = xx[:, None] - 2.0 * (x @ centroids.T) + cc[None, :]
    labels = np.argmin(d, axis=1)
    if centroids.shape[0] > 1:
        best = d[np.arange(len(x)), labels]
        slack = _TIE_RTOL * (xx + cc.max()) + 1e-12
        near = np.flatnonzero(np.sum(d <= (best + 2 * slack)[:, None], axis=1) > 1)
        for i in near:
            diff = centroids - x[i]
            labels[i] = int(np.argmin(np.einsum("kd,kd->k", diff, diff)))
    diff = x - centroids[labels]
    return labels, np.einsum("nd,nd->n", diff, diff)


def assign_many(codebook: Codebook, vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != codebook.dim:
        raise ValueError(f"expected (n, {codebook.dim}) vectors, got {vectors.shape}")
    if vectors.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    return _nearest(vectors, codebook.centroids)[0]


def assign(codebook: Codebook, vector: np.ndarray) -> int:
    """Index of the nearest centroid (squared Euclidean, ties to the lowest index)."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (codebook.dim,):
        raise ValueError(f"vector dim {vector.shape} does not match codebook dim {codebook.dim}")
    return int(assign_many(codebook, vector[None, :])[0])


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def kmeans_fit(
    vectors: np.ndarray,
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
) -> Codebook:
    """Fit k centroids.

    Stops when the largest centroid shift falls below ``tol`` or after
    ``max_iter`` Lloyd rounds. A cluster that empties is re-seeded with the
    point currently farthest from its assigned centroid. ``Codebook.history``
    holds the inertia after every assignment step.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected an (n, d) matrix with d >= 1, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} vectors, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in k-means input")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    history = []
    for _ in range(max_iter):
        labels, best = _nearest(x, centroids)
        history.append(float(best.sum()))

        new = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        grouped = x[np.argsort(labels, kind="stable")]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for c in np.flatnonzero(counts):
            new[c] = grouped[bounds[c] : bounds[c + 1]].sum(axis=0) / counts[c]
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(best))
            new[c] = x[far]
            best[far] = 0.0
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if shift < tol:
            break

    inertia = float(_nearest(x, centroids)[1].sum())
    history.append(inertia)
    return Codebook(centroids=centroids, inertia=inertia, seed=seed, history=tuple(history))


def save(codebook: Codebook, path: Path | str) -> None:
    ids = [f"c{i:04d}" for i in range(codebook.k)]
    pfv.write(path, CODEBOOK_CHANNEL, ids, codebook.centroids)


def load(path: Path | str) -> Codebook:
    channel, _, mat = pfv.read(path)
    if channel != CODEBOOK_CHANNEL:
        raise pfv.PFVFormatError(f"{path}: channel {channel!r} is not a codebook")
    if mat.shape[0] == 0:
        raise ValueError(f"{path}: empty codebook")
    return Codebook(centroids=mat.astype(np.float64))
