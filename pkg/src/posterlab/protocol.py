"""Leave-one-year-out experiment: per-fold training, posteriors, late fusion, top-k selection, scores."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import SvmError, SvmModel, SvmParams, fit_calibrated, predict_proba
from .dataset import Corpus, Festival, FoldPlan, parent_of, plan_loyo
from .features import FeatureError, crop_id_set, pool_map

OK, SKIPPED, FAILED = "ok", "skipped", "failed"


class LeakageError(RuntimeError):
    """A test poster (or a crop of one) reached a fold's training inputs."""


class CoverageError(ValueError):
    """Channel runs to be fused do not cover the same folds and posters."""


@dataclass
class Standardizer:
    """Per-feature z-scoring fitted on training rows; constant features map to 0."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> Standardizer:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


@dataclass
class TrainedChannel:
    model: SvmModel
    standardizer: Standardizer | None

    def posteriors(self, X: np.ndarray) -> np.ndarray:
        if self.standardizer is not None:
            X = self.standardizer.transform(X)
        return np.atleast_1d(predict_proba(self.model, X))


def effective_params(params: SvmParams, dim: int, auto_gamma: bool) -> SvmParams:
    """With ``auto_gamma`` the RBF width follows the feature count (gamma = 1/dim)."""
    if auto_gamma and dim > 0:
        return replace(params, gamma=1.0 / dim)
    return params


def train_channel(
    X: np.ndarray,
    y: np.ndarray,
    groups: Sequence[str],
    params: SvmParams,
    standardize: bool = False,
    auto_gamma: bool = False,
) -> TrainedChannel:
    scaler = Standardizer.fit(X) if standardize else None
    Xt = scaler.transform(X) if scaler is not None else X
    model = fit_calibrated(Xt, y, effective_params(params, X.shape[1], auto_gamma), groups=np.asarray(groups))
    return TrainedChannel(model, scaler)


# --- per-channel runs ------------------------------------------------------


@dataclass
class FoldResult:
    year: int
    status: str
    test_ids: list[str]
    winner_count_k: int
    posteriors: dict[str, float] = field(default_factory=dict)
    n_train: int = 0
    error: str | None = None


@dataclass
class ChannelRun:
    channel: str
    festival: Festival
    folds: dict[int, FoldResult]

    def years(self) -> list[int]:
        return sorted(self.folds)

    def failed_years(self) -> list[int]:
        return [y for y in self.years() if self.folds[y].status == FAILED]


def check_leakage(fold: FoldPlan, train_ids: Iterable[str]) -> None:
    forbidden = crop_id_set(fold.test_ids)
    leaked = sorted(forbidden.intersection(train_ids))
    if leaked:
        raise LeakageError(f"fold {fold.festival.value} {fold.test_year}: test samples in training: {leaked[:5]}")


def _run_fold(task) -> FoldResult:
    fold, labels, source, params, standardize, auto_gamma = task
    base = FoldResult(fold.test_year, SKIPPED, list(fold.test_ids), fold.winner_count_k)
    if fold.skipped:
        return base
    try:
        train_ids, X_train, X_test = source.fold_features(fold.train_ids, fold.test_ids)
        check_leakage(fold, train_ids)
        y = np.array([1.0 if labels[parent_of(sid)] else -1.0 for sid in train_ids])
        groups = [parent_of(sid) for sid in train_ids]
        trained = train_channel(X_train, y, groups, params, standardize, auto_gamma)
        probs = trained.posteriors(X_test)
    except (FeatureError, SvmError) as exc:
        return replace(base, status=FAILED, error=f"{type(exc).__name__}: {exc}")
    post = {pid: float(p) for pid, p in zip(fold.test_ids, probs)}
    return replace(base, status=OK, posteriors=post, n_train=len(train_ids))


def run_channel(
    corpus: Corpus,
    festival: Festival | str,
    source,
    params: SvmParams | None = None,
    standardize: bool = False,
    augment: bool = True,
    auto_gamma: bool = False,
    jobs: int = 1,
) -> ChannelRun:
    """Leave-one-year-out over ``festival`` with features from ``source``.

    ``source.fold_features(train_ids, test_ids)`` returns the training ids it
    actually used plus the two feature matrices. A fold whose features or
    training fail is recorded as failed and the run continues.
    """
    fest = Festival.parse(festival)
    params = params or SvmParams()
    labels = {rec.id: rec.winner for rec in corpus.festival_records(fest)}
    folds = plan_loyo(corpus, fest, augment=augment)
    tasks = [(fold, labels, source, params, standardize, auto_gamma) for fold in folds]
    results = pool_map(_run_fold, tasks, jobs)
    return ChannelRun(source.name, fest, {r.year: r for r in results})


def _combine(ps: Sequence[float], w: np.ndarray, rule: str) -> float:
    ps = np.asarray(ps, dtype=np.float64)
    if rule == "mean":
        return float(np.dot(w, ps))
    log_pos = float(np.dot(w, np.log(ps)))
    log_neg = float(np.dot(w, np.log1p(-ps)))
    return 1.0 / (1.0 + math.exp(log_neg - log_pos))


def _weights(n: int, weights: Sequence[float] | None) -> np.ndarray:
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("need one nonnegative weight per channel with a positive sum")
    return w / w.sum()


def late_fuse(
    runs: Sequence[ChannelRun],
    weights: Sequence[float] | None = None,
    rule: str = "mean",
    name: str = "fused",
) -> ChannelRun:
    """Combine per-poster posteriors across channels.

    ``mean`` is the weighted arithmetic mean. ``product`` is the normalized
    weighted geometric rule ``prod p^w / (prod p^w + prod (1-p)^w)``. A fold
    that failed in any input run is failed in the result.
    """
    if not runs:
        raise CoverageError("nothing to fuse")
    if rule not in ("mean", "product"):
        raise ValueError(f"unknown fusion rule {rule!r}")
    w = _weights(len(runs), weights)
    first = runs[0]
    for run in runs[1:]:
        if run.festival != first.festival or run.years() != first.years():
            raise CoverageError(f"run {run.channel!r} covers different folds than {first.channel!r}")
        for year in first.years():
            a, b = first.folds[year], run.folds[year]
            if sorted(a.test_ids) != sorted(b.test_ids) or a.winner_count_k != b.winner_count_k:
                raise CoverageError(f"runs disagree on the posters of {first.festival.value} {year}")

    folds = {}
    for year in first.years():
        parts = [run.folds[year] for run in runs]
        base = replace(parts[0], posteriors={}, n_train=0, error=None)
        statuses = {p.status for p in parts}
        if FAILED in statuses:
            errors = "; ".join(f"{r.channel}: {p.error}" for r, p in zip(runs, parts) if p.status == FAILED)
            folds[year] = replace(base, status=FAILED, error=errors)
            continue
        if statuses != {parts[0].status}:
            raise CoverageError(f"runs disagree on whether {year} is skipped")
        if parts[0].status == SKIPPED:
            folds[year] = base
            continue
        fused = {pid: _combine([p.posteriors[pid] for p in parts], w, rule) for pid in base.test_ids}
        folds[year] = replace(base, status=OK, posteriors=fused)
    return ChannelRun(name, first.festival, folds)


# --- selection and scoring -------------------------------------------------


@dataclass(frozen=True)
class WinnerPrediction:
    festival: Festival | None
    test_year: int | None
    ranked: tuple[tuple[str, float], ...]
    selected: tuple[str, ...]


def select_winners(
    posteriors: Mapping[str, float],
    k: int,
    festival: Festival | None = None,
    year: int | None = None,
) -> WinnerPrediction:
    """Top-``k`` posters by (posterior descending, id ascending)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(posteriors):
        raise ValueError(f"cannot select {k} winners from {len(posteriors)} posters")
    ranked = tuple(sorted(((pid, float(p)) for pid, p in posteriors.items()), key=lambda t: (-t[1], t[0])))
    return WinnerPrediction(festival, year, ranked, tuple(pid for pid, _ in ranked[:k]))


def predictions(run: ChannelRun) -> dict[int, WinnerPrediction]:
    return {
        year: select_winners(f.posteriors, f.winner_count_k, run.festival, year)
        for year, f in sorted(run.folds.items())
        if f.status == OK
    }


@dataclass(frozen=True)
class FestivalScore:
    channel: str
    festival: Festival
    winner_recall: float
    hit_rate: float
    random_baseline: float
    per_year_hits: tuple[tuple[int, int, int], ...]  # (year, correct, k)
    failed_years: tuple[int, ...] = ()


def score(run: ChannelRun, corpus: Corpus) -> FestivalScore:
    """Micro winner recall and exact-hit rate over non-skipped years.

    Failed folds count as zero hits; their winners stay in the denominator.
    """
    preds = predictions(run)
    hits = []
    total_k = total_n = 0
    for year in run.years():
        fold = run.folds[year]
        if fold.status == SKIPPED:
            continue
        winners = {rec.id for rec in corpus.lookup(run.festival, year) if rec.winner}
        chosen = set(preds[year].selected) if year in preds else set()
        hits.append((year, len(chosen & winners), fold.winner_count_k))
        total_k += fold.winner_count_k
        total_n += len(fold.test_ids)
    correct = sum(h for _, h, _ in hits)
    return FestivalScore(
        channel=run.channel,
        festival=run.festival,
        winner_recall=correct / total_k if total_k else 0.0,
        hit_rate=sum(h == k for _, h, k in hits) / len(hits) if hits else 0.0,
        random_baseline=total_k / total_n if total_n else 0.0,
        per_year_hits=tuple(hits),
        failed_years=tuple(run.failed_years()),
    )


# --- application mode ------------------------------------------------------


def channel_slate_posteriors(
    corpus: Corpus,
    festival: Festival | str,
    source,
    slate_ids: Sequence[str],
    params: SvmParams | None = None,
    standardize: bool = False,
    augment: bool = True,
    auto_gamma: bool = False,
) -> tuple[dict[str, float], TrainedChannel]:
    """Train on every year of ``festival`` and score posters outside the corpus."""
    fest = Festival.parse(festival)
    params = params or SvmParams()
    records = corpus.festival_records(fest)
    if not records:
        raise FeatureError(f"no training posters for {fest.value}")
    clash = crop_id_set(slate_ids).intersection(rec.id for rec in records)
    if clash:
        raise LeakageError(f"slate posters also in the training corpus: {sorted(clash)[:5]}")
    train_ids = []
    for rec in records:
        train_ids.append(rec.id)
        if augment:
            train_ids.extend(f"{rec.id}#{q}" for q in range(4))
    labels = {rec.id: rec.winner for rec in records}
    used, X_train, X_slate = source.fold_features(train_ids, list(slate_ids))
    y = np.array([1.0 if labels[parent_of(sid)] else -1.0 for sid in used])
    trained = train_channel(X_train, y, [parent_of(s) for s in used], params, standardize, auto_gamma)
    probs = trained.posteriors(X_slate)
    return {pid: float(p) for pid, p in zip(slate_ids, probs)}, trained


def fuse_posteriors(
    per_channel: Sequence[Mapping[str, float]], weights: Sequence[float] | None = None, rule: str = "mean"
) -> dict[str, float]:
    """Late fusion of plain ``{id: p}`` maps (application mode)."""
    if rule not in ("mean", "product"):
        raise ValueError(f"unknown fusion rule {rule!r}")
    ids = sorted(per_channel[0])
    for other in per_channel[1:]:
        if sorted(other) != ids:
            raise CoverageError("channels scored different slate posters")
    w = _weights(len(per_channel), weights)
    return {pid: _combine([p[pid] for p in per_channel], w, rule) for pid in ids}


# --- run records -----------------------------------------------------------


def run_records(run: ChannelRun) -> list[dict]:
    """Flat per-poster records in (year, rank) order; unscored posters carry ``p = None``."""
    out = []
    preds = predictions(run)
    for year in run.years():
        fold = run.folds[year]
        base = {"channel": run.channel, "festival": run.festival.value, "year": year}
        if fold.status == OK:
            pred = preds[year]
            chosen = set(pred.selected)
            for pid, p in pred.ranked:
                out.append({**base, "poster_id": pid, "p": p, "selected": pid in chosen,
                            "skipped": False, "failed": False})
        else:
            for pid in sorted(fold.test_ids):
                out.append({**base, "poster_id": pid, "p": None, "selected": False,
                            "skipped": fold.status == SKIPPED, "failed": fold.status == FAILED})
    return out


def write_run_records(runs: Iterable[ChannelRun], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for run in runs:
            for rec in run_records(run):
                fh.write(json.dumps(rec, sort_keys=False) + "\n")


def read_run_records(path: Path | str, corpus: Corpus) -> list[ChannelRun]:
    """Rebuild channel runs from a record file; ``k`` per year comes from ``corpus``.

    Records of festivals absent from ``corpus`` are ignored, so a filtered
    corpus selects the matching part of a run.
    """
    grouped: dict[tuple[str, str], dict[int, list[dict]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (rec["channel"], rec["festival"])
                grouped.setdefault(key, {}).setdefault(int(rec["year"]), []).append(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad run record ({exc})") from None
    runs = []
    present = set(corpus.festivals())
    for (channel, fest_name), years in grouped.items():
        fest = Festival.parse(fest_name)
        if fest not in present:
            continue
        folds = {}
        for year, recs in sorted(years.items()):
            unknown = [r["poster_id"] for r in recs if r["poster_id"] not in corpus]
            if unknown:
                raise ValueError(f"{path}: posters not in the manifest: {', '.join(unknown[:5])}")
            k = sum(r.winner for r in corpus.lookup(fest, year))
            ids = [r["poster_id"] for r in recs]
            if recs[0].get("skipped"):
                folds[year] = FoldResult(year, SKIPPED, ids, k)
            elif recs[0].get("failed") or any(r["p"] is None for r in recs):
                folds[year] = FoldResult(year, FAILED, ids, k, error="failed in recorded run")
            else:
                folds[year] = FoldResult(year, OK, ids, k, {r["poster_id"]: float(r["p"]) for r in recs})
        runs.append(ChannelRun(channel, fest, folds))
    return runs
