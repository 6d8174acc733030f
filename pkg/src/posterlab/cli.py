"""``posterlab`` command line: summarize, extract, train-codebook, evaluate, predict, report.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then explicit flags (flags win). Exit codes: 0 success, 1 partial
failure (some posters or folds failed), 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codebook as cb
from .classifier import SvmError, SvmParams, save_model
from .dataset import Corpus, Festival, ManifestError, load_manifest, summarize
from .descriptors import BUILTIN_CHANNELS
from .features import (
    BofSource,
    FeatureError,
    FeatureTable,
    TableSource,
    extract_corpus,
    extract_sift,
    train_codebook,
)
from .protocol import (
    ChannelRun,
    channel_slate_posteriors,
    fuse_posteriors,
    late_fuse,
    read_run_records,
    run_channel,
    score,
    select_winners,
    write_run_records,
)
from .reporting import (
    accuracy_table,
    corpus_summary,
    expression_report,
    format_slate,
    format_table,
    slate_ranking,
)

log = logging.getLogger("posterlab")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
DEFAULT_SEED = 42
SEED_ENV = "POSTERLAB_SEED"

DEFAULTS = {
    "manifest": None,
    "festival": None,
    "channels": "lab",
    "svm_c": 5.0e4,
    "svm_gamma": None,  # None: 1e-5, or 1/dim with --standardize
    "kernel": "rbf",
    "no_class_weights": False,
    "standardize": False,
    "no_augment": False,
    "fusion": "mean",
    "codebook_k": 256,
    "codebook": None,
    "seed": None,
    "jobs": 1,
    "out": None,
    "inject_posteriors": None,
    "slate": None,
    "top_k": 1,
    "runs": None,
    "kind": "accuracy",
    "augment": False,
}
DEFAULT_GAMMA = 1.0e-5


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    manifest: Path | None
    festivals: list[Festival] | None
    channels: list[str]
    params: SvmParams
    standardize: bool
    auto_gamma: bool
    augment: bool
    fusion: str
    codebook_k: int
    codebook: Path | None
    seed: int
    jobs: int
    out: Path | None
    raw: dict


# --- argument handling -----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file of settings (keys as flag names, '-' or '_')")
    common.add_argument("--manifest", help="poster manifest (JSON lines)")
    common.add_argument("--festival", help="comma-separated festival filter")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help=f"random seed (default ${SEED_ENV} or {DEFAULT_SEED})")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model.add_argument("--channels", help="comma-separated built-in channels and/or .pfv feature files")
    model.add_argument("--svm-c", type=float, dest="svm_c")
    model.add_argument("--svm-gamma", type=float, dest="svm_gamma")
    model.add_argument("--kernel", choices=("rbf", "linear"))
    model.add_argument("--no-class-weights", action="store_true", dest="no_class_weights")
    model.add_argument("--standardize", action="store_true",
                       help="z-score features per fold; gamma defaults to 1/dim")
    model.add_argument("--no-augment", action="store_true", dest="no_augment")
    model.add_argument("--fusion", choices=("mean", "product"))
    model.add_argument("--codebook-k", type=int, dest="codebook_k")
    model.add_argument("--codebook", help="codebook PFV for siftbof extraction")

    parser = argparse.ArgumentParser(prog="posterlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("summarize", parents=[common], argument_default=argparse.SUPPRESS, help="per-festival corpus statistics")
    p = sub.add_parser("extract", parents=[common, model], argument_default=argparse.SUPPRESS, help="write one PFV file per channel")
    p.add_argument("--augment", action="store_true", help="also write quadrant-crop rows")
    sub.add_parser("train-codebook", parents=[common, model], argument_default=argparse.SUPPRESS, help="fit a SIFT bag-of-features codebook")
    sub.add_parser("evaluate", parents=[common, model], argument_default=argparse.SUPPRESS, help="leave-one-year-out evaluation")
    p = sub.add_parser("predict", parents=[common, model], argument_default=argparse.SUPPRESS, help="rank a new slate of posters")
    p.add_argument("--slate", help="manifest of the posters to rank")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--inject-posteriors", dest="inject_posteriors",
                   help="JSON {poster_id: p} used instead of training")
    p = sub.add_parser("report", parents=[common], argument_default=argparse.SUPPRESS, help="rebuild reports from a finished run")
    p.add_argument("--runs", help="run records written by evaluate")
    p.add_argument("--kind", choices=("accuracy", "expressions", "summary"))
    return parser


def merge_settings(args: argparse.Namespace) -> dict:
    """defaults < config file < flags."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    settings = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        for key, value in doc.items():
            norm = key.replace("-", "_")
            if norm not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            settings[norm] = value
    settings.update(flags)
    if settings["seed"] is None:
        env = os.environ.get(SEED_ENV)
        try:
            settings["seed"] = int(env) if env not in (None, "") else DEFAULT_SEED
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return settings


def _parse_festivals(value) -> list[Festival] | None:
    if not value:
        return None
    names = value if isinstance(value, list) else str(value).split(",")
    try:
        return [Festival.parse(n) for n in names if str(n).strip()]
    except ManifestError as exc:
        raise ConfigError(str(exc)) from None


def _parse_channels(value) -> list[str]:
    tokens = value if isinstance(value, list) else str(value).split(",")
    channels = [t.strip() for t in tokens if t.strip()]
    if not channels:
        raise ConfigError("at least one channel is required")
    for ch in channels:
        if ch.endswith(".pfv"):
            if not Path(ch).is_file():
                raise ConfigError(f"external feature file not found: {ch}")
        elif ch not in BUILTIN_CHANNELS:
            raise ConfigError(f"unknown channel {ch!r} (built-in: {', '.join(BUILTIN_CHANNELS)})")
    if len(set(channels)) != len(channels):
        raise ConfigError("duplicate channel")
    return channels


def resolve_config(settings: dict) -> RunConfig:
    manifest = Path(settings["manifest"]) if settings["manifest"] else None
    if manifest is not None and not manifest.is_file():
        raise ConfigError(f"manifest not found: {manifest}")
    codebook = Path(settings["codebook"]) if settings["codebook"] else None
    if codebook is not None and not codebook.is_file():
        raise ConfigError(f"codebook not found: {codebook}")
    gamma = settings["svm_gamma"]
    auto_gamma = bool(settings["standardize"]) and gamma is None
    try:
        params = SvmParams(
            C=float(settings["svm_c"]),
            gamma=float(gamma) if gamma is not None else DEFAULT_GAMMA,
            kernel=settings["kernel"],
            class_weighting=not settings["no_class_weights"],
        )
    except (SvmError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad SVM settings: {exc}") from None
    if int(settings["jobs"]) < 1:
        raise ConfigError("--jobs must be >= 1")
    if int(settings["codebook_k"]) < 1:
        raise ConfigError("--codebook-k must be >= 1")
    return RunConfig(
        manifest=manifest,
        festivals=_parse_festivals(settings["festival"]),
        channels=_parse_channels(settings["channels"]),
        params=params,
        standardize=bool(settings["standardize"]),
        auto_gamma=auto_gamma,
        augment=not settings["no_augment"],
        fusion=settings["fusion"],
        codebook_k=int(settings["codebook_k"]),
        codebook=codebook,
        seed=int(settings["seed"]),
        jobs=int(settings["jobs"]),
        out=Path(settings["out"]) if settings["out"] else None,
        raw=settings,
    )


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


def _load_corpus(cfg: RunConfig) -> Corpus:
    corpus = load_manifest(_require(cfg.manifest, "--manifest"))
    if cfg.festivals:
        corpus = Corpus([r for r in corpus if r.festival in cfg.festivals])
    return corpus


# --- feature sources -------------------------------------------------------


def build_sources(cfg: RunConfig, records, augment: bool, extra_records=()) -> tuple[list, dict[str, str]]:
    """One feature source per configured channel, in channel order.

    ``extra_records`` (a prediction slate) are extracted without crops.
    """
    builtin = [ch for ch in cfg.channels if ch in BUILTIN_CHANNELS and ch != "siftbof"]
    failures: dict[str, str] = {}
    tables: dict[str, FeatureTable] = {}
    if builtin:
        tables, failures = extract_corpus(records, builtin, augment, cfg.jobs)
        if extra_records:
            more, more_fail = extract_corpus(extra_records, builtin, False, cfg.jobs)
            failures.update(more_fail)
            tables = {ch: FeatureTable.concat([tables[ch], more[ch]]) for ch in builtin}
    sources = []
    for ch in cfg.channels:
        if ch == "siftbof":
            descs, fail = extract_sift(records, augment, cfg.jobs)
            failures.update(fail)
            if extra_records:
                more, fail = extract_sift(extra_records, False, cfg.jobs)
                failures.update(fail)
                descs.update(more)
            sources.append(BofSource(descs, k=cfg.codebook_k, seed=cfg.seed))
        elif ch in BUILTIN_CHANNELS:
            sources.append(TableSource(tables[ch]))
        else:
            try:
                sources.append(TableSource(FeatureTable.load(ch)))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read external features {ch}: {exc}") from None
    return sources, failures


def _report_failures(failures: dict[str, str]) -> None:
    for pid, msg in sorted(failures.items()):
        print(f"error: {pid}: {msg}", file=sys.stderr)


# --- commands --------------------------------------------------------------


def cmd_summarize(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    report = corpus_summary(summarize(corpus))
    sys.stdout.write(format_table(report))
    if cfg.out:
        report.write(cfg.out)
    return EXIT_OK


def cmd_extract(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    out = _require(cfg.out, "--out")
    codebook = cb.load(cfg.codebook) if cfg.codebook else None
    channels = [ch for ch in cfg.channels if ch in BUILTIN_CHANNELS]
    if len(channels) != len(cfg.channels):
        raise ConfigError("extract only computes built-in channels")
    if "siftbof" in channels and codebook is None:
        raise ConfigError("siftbof extraction needs --codebook (see train-codebook)")
    augment = bool(cfg.raw.get("augment"))
    tables, failures = extract_corpus(list(corpus), channels, augment, cfg.jobs, codebook)
    out.mkdir(parents=True, exist_ok=True)
    for ch in channels:
        table = tables[ch]
        if not table.ids:
            table = FeatureTable(ch, [], np.zeros((0, 0)))
        table.save(out / f"{ch}.pfv")
    _report_failures(failures)
    if failures:
        print(f"{len(failures)} poster(s) failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_train_codebook(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    out = _require(cfg.out, "--out")
    descs, failures = extract_sift(list(corpus), cfg.augment, cfg.jobs)
    try:
        book = train_codebook([descs[k] for k in sorted(descs)], cfg.codebook_k, cfg.seed)
    except (FeatureError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    path = out if out.suffix == ".pfv" else out / "codebook.pfv"
    path.parent.mkdir(parents=True, exist_ok=True)
    cb.save(book, path)
    print(f"codebook k={book.k} inertia={book.inertia:.6g} -> {path}")
    _report_failures(failures)
    return EXIT_PARTIAL if failures else EXIT_OK


def evaluate_runs(cfg: RunConfig, corpus: Corpus) -> tuple[list[ChannelRun], dict[str, str]]:
    runs: list[ChannelRun] = []
    sources, failures = build_sources(cfg, list(corpus), cfg.augment)
    for fest in corpus.festivals():
        fest_runs = [
            run_channel(corpus, fest, src, cfg.params, cfg.standardize, cfg.augment, cfg.auto_gamma, cfg.jobs)
            for src in sources
        ]
        runs.extend(fest_runs)
        if len(fest_runs) > 1:
            runs.append(late_fuse(fest_runs, rule=cfg.fusion))
    return runs, failures


def cmd_evaluate(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    out = _require(cfg.out, "--out")
    if not len(corpus):
        raise ConfigError("no posters to evaluate")
    runs, failures = evaluate_runs(cfg, corpus)
    out.mkdir(parents=True, exist_ok=True)
    write_run_records(runs, out / "runs.jsonl")
    report = accuracy_table([score(run, corpus) for run in runs])
    report.write(out, "accuracy")
    settings = {k: v for k, v in sorted(cfg.raw.items()) if k not in ("out", "jobs")}
    (out / "config.json").write_text(json.dumps(settings, indent=2, default=str) + "\n", encoding="utf-8")
    sys.stdout.write(format_table(report))

    problems = [f"{pid}: {msg}" for pid, msg in sorted(failures.items())]
    for run in runs:
        for year in run.failed_years():
            problems.append(f"{run.channel} {run.festival.value} {year}: {run.folds[year].error}")
    if problems:
        (out / "errors.txt").write_text("\n".join(problems) + "\n", encoding="utf-8")
        for line in problems:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _read_injected(path: str) -> dict[str, float]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read posteriors {path}: {exc}") from None
    if not isinstance(doc, dict) or not doc:
        raise ConfigError(f"{path}: expected a nonempty JSON object of poster_id -> probability")
    try:
        post = {str(k): float(v) for k, v in doc.items()}
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: probabilities must be numbers") from None
    if not all(0.0 <= p <= 1.0 for p in post.values()):
        raise ConfigError(f"{path}: probabilities must lie in [0, 1]")
    return post


def cmd_predict(cfg: RunConfig) -> int:
    settings = cfg.raw
    slate = load_manifest(settings["slate"]) if settings["slate"] else None
    titles = {r.id: r.title for r in slate} if slate is not None else {}
    top_k = int(settings["top_k"])
    failures: dict[str, str] = {}
    if settings["inject_posteriors"]:
        posteriors = _read_injected(settings["inject_posteriors"])
    else:
        if slate is None or not len(slate):
            raise ConfigError("predict needs a nonempty --slate (or --inject-posteriors)")
        corpus = _load_corpus(cfg)
        fests = cfg.festivals or sorted({r.festival for r in slate}, key=list(Festival).index)
        if len(fests) != 1:
            raise ConfigError("predict needs exactly one --festival")
        fest = fests[0]
        train = corpus.festival_records(fest)
        if not train:
            raise ConfigError(f"no training posters for {fest.value}")
        sources, failures = build_sources(cfg, train, cfg.augment, extra_records=list(slate))
        slate_ids = [r.id for r in slate]
        per_channel = []
        for src in sources:
            try:
                post, trained = channel_slate_posteriors(
                    corpus, fest, src, slate_ids, cfg.params, cfg.standardize, cfg.augment, cfg.auto_gamma
                )
            except (FeatureError, SvmError) as exc:
                _report_failures(failures)
                print(f"error: {src.name}: {exc}", file=sys.stderr)
                return EXIT_PARTIAL
            per_channel.append(post)
            if cfg.out:
                (cfg.out / "models").mkdir(parents=True, exist_ok=True)
                extra = {}
                if trained.standardizer is not None:
                    extra = {"mean": ",".join(map(repr, trained.standardizer.mean.tolist())),
                             "scale": ",".join(map(repr, trained.standardizer.scale.tolist()))}
                name = Path(src.name).stem if src.name.endswith(".pfv") else src.name
                save_model(trained.model, cfg.out / "models" / name, channel=src.name, extra=extra)
        posteriors = fuse_posteriors(per_channel, rule=cfg.fusion)
    if top_k > len(posteriors):
        raise ConfigError(f"--top-k {top_k} exceeds the {len(posteriors)} slate posters")
    prediction = select_winners(posteriors, top_k)
    report = slate_ranking(prediction, titles)
    sys.stdout.write(format_slate(report))
    if cfg.out:
        report.write(cfg.out)
    _report_failures(failures)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    corpus = _load_corpus(cfg)
    kind = cfg.raw["kind"]
    if kind == "summary":
        report = corpus_summary(summarize(corpus))
    elif kind == "expressions":
        report = expression_report(corpus)
    else:
        runs_path = _require(cfg.raw["runs"], "--runs")
        try:
            runs = read_run_records(runs_path, corpus)
        except (OSError, ValueError, ManifestError) as exc:
            raise ConfigError(str(exc)) from None
        report = accuracy_table([score(run, corpus) for run in runs])
    sys.stdout.write(format_table(report))
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if cfg.out:
        report.write(cfg.out)
    return EXIT_OK


COMMANDS = {
    "summarize": cmd_summarize,
    "extract": cmd_extract,
    "train-codebook": cmd_train_codebook,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(merge_settings(args))
        return COMMANDS[args.command](cfg)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
