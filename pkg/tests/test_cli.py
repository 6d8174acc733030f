import json

import numpy as np
import pytest

from fixtures import write_corpus_counts_manifest
from posterlab import cli
from posterlab.features import FeatureTable
from posterlab.dataset import load_manifest


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_summarize_corpus_counts(tmp_path, capsys):
    code, out, _ = run(["summarize", "--manifest", write_corpus_counts_manifest(tmp_path)], capsys)
    assert code == 0
    academy = next(line for line in out.splitlines() if line.startswith("Academy"))
    assert academy.split()[1:] == ["1929-1932,1934-2016", "87", "88", "440", "6.1"]


def test_summarize_errors(tmp_path, capsys):
    code, _, err = run(["summarize", "--manifest", tmp_path / "missing.jsonl"], capsys)
    assert code == 2 and "not found" in err
    (tmp_path / "empty.jsonl").write_text("")
    code, out, _ = run(["summarize", "--manifest", tmp_path / "empty.jsonl"], capsys)
    assert code == 0 and out.splitlines() == ["festival  years  n_years  winners  nominates  mean_per_year"]
    (tmp_path / "bad.jsonl").write_text("{}\n")
    code, _, err = run(["summarize", "--manifest", tmp_path / "bad.jsonl"], capsys)
    assert code == 2 and "line 1" in err


def test_config_precedence(tmp_path, monkeypatch):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"svm-c": 3.0, "channels": "lab,lbp"}))
    args = cli.build_parser().parse_args(["evaluate", "--config", str(config), "--channels", "hog"])
    monkeypatch.setenv(cli.SEED_ENV, "7")
    settings = cli.merge_settings(args)
    assert settings["svm_c"] == 3.0 and settings["channels"] == "hog" and settings["seed"] == 7
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.merge_settings(args)["seed"] == cli.DEFAULT_SEED
    cfg = cli.resolve_config(settings)
    assert cfg.params.gamma == 1e-5 and not cfg.auto_gamma


def test_config_errors(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"colour": 1}))
    code, _, err = run(["evaluate", "--config", config], capsys)
    assert code == 2 and "unknown config key" in err
    code, _, err = run(["evaluate", "--channels", "sift"], capsys)
    assert code == 2 and "unknown channel" in err
    code, _, err = run(["evaluate", "--svm-c", "-1"], capsys)
    assert code == 2
    code, _, err = run(["evaluate", "--festival", "toronto"], capsys)
    assert code == 2


def test_standardize_switches_gamma():
    args = cli.build_parser().parse_args(["evaluate", "--standardize"])
    assert cli.resolve_config(cli.merge_settings(args)).auto_gamma
    args = cli.build_parser().parse_args(["evaluate", "--standardize", "--svm-gamma", "0.5"])
    cfg = cli.resolve_config(cli.merge_settings(args))
    assert not cfg.auto_gamma and cfg.params.gamma == 0.5


def test_extract_is_deterministic(small_manifest, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        code, _, _ = run(["extract", "--manifest", small_manifest, "--channels", "lab,lbp", "--out", out], capsys)
        assert code == 0
    for ch in ("lab", "lbp"):
        assert (out_a / f"{ch}.pfv").read_bytes() == (out_b / f"{ch}.pfv").read_bytes()
        assert len(FeatureTable.load(out_a / f"{ch}.pfv").ids) == 24


def test_extract_reports_unreadable_image(tmp_path, capsys):
    manifest = tmp_path / "m.jsonl"
    (tmp_path / "bad.png").write_bytes(b"nope")
    from posterlab.imageops import encode_png

    encode_png(np.zeros((8, 8, 3), dtype=np.uint8), tmp_path / "good.png")
    manifest.write_text("\n".join(json.dumps({"festival": "academy", "year": 2000, "id": pid, "image": f"{pid}.png",
                                              "winner": pid == "good"}) for pid in ("good", "bad")) + "\n")
    code, _, err = run(["extract", "--manifest", manifest, "--channels", "lab", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "bad" in err
    assert FeatureTable.load(tmp_path / "o" / "lab.pfv").ids == ["good"]


def test_extract_siftbof_needs_codebook(small_manifest, tmp_path, capsys):
    code, _, err = run(["extract", "--manifest", small_manifest, "--channels", "siftbof", "--out", tmp_path], capsys)
    assert code == 2 and "codebook" in err
    code, out, _ = run(["train-codebook", "--manifest", small_manifest, "--codebook-k", "8",
                        "--no-augment", "--out", tmp_path / "cb"], capsys)
    assert code == 0 and "k=8" in out
    code, _, _ = run(["extract", "--manifest", small_manifest, "--channels", "siftbof",
                      "--codebook", tmp_path / "cb" / "codebook.pfv", "--out", tmp_path / "f"], capsys)
    assert code == 0
    assert FeatureTable.load(tmp_path / "f" / "siftbof.pfv").dim == 8


def test_evaluate_with_external_channel_and_report(small_manifest, tmp_path, capsys):
    corpus = load_manifest(small_manifest)
    rng = np.random.default_rng(0)
    ext = tmp_path / "ext.pfv"
    FeatureTable("ext", [r.id for r in corpus],
                 [rng.normal(size=3) + 3 * r.winner for r in corpus]).save(ext)
    out = tmp_path / "eval"
    code, stdout, _ = run(["evaluate", "--manifest", small_manifest, "--channels", f"lab,{ext}",
                           "--standardize", "--out", out], capsys)
    assert code == 0
    rows = (out / "accuracy.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["ext", "fused", "lab"]
    assert {"runs.jsonl", "accuracy.csv", "accuracy.svg", "config.json"} <= {p.name for p in out.iterdir()}
    assert "out" not in json.loads((out / "config.json").read_text())

    code, report_out, _ = run(["report", "--manifest", small_manifest, "--runs", out / "runs.jsonl",
                               "--out", tmp_path / "rep"], capsys)
    assert code == 0
    assert (tmp_path / "rep" / "accuracy_table.csv").read_text() == (out / "accuracy.csv").read_text()
    code, filtered, _ = run(["report", "--manifest", small_manifest, "--runs", out / "runs.jsonl",
                             "--festival", "cannes"], capsys)
    assert code == 0 and filtered.splitlines() == ["festival  channel  recall  hit_rate  baseline"]


def test_report_other_kinds(small_manifest, tmp_path, capsys):
    code, out, _ = run(["report", "--manifest", small_manifest, "--kind", "expressions", "--out", tmp_path], capsys)
    assert code == 0
    assert (tmp_path / "expression_histograms_quadrants.csv").is_file()
    code, out, _ = run(["report", "--manifest", small_manifest, "--kind", "summary"], capsys)
    assert code == 0 and out.splitlines()[1].startswith("Academy")
    code, _, err = run(["report", "--manifest", small_manifest], capsys)
    assert code == 2 and "--runs" in err


def test_predict_trains_and_saves_models(small_manifest, tmp_path, capsys):
    from posterlab.synthetic import make_synthetic_corpus

    slate = make_synthetic_corpus(tmp_path / "slate", years=1, nominees_per_year=2, seed=99, size=(24, 36),
                                  first_year=2017, festival="academy")
    lines = (slate.read_text().replace('"ac2017', '"new2017')).splitlines()
    slate.write_text("\n".join(lines) + "\n")
    code, out, _ = run(["predict", "--manifest", small_manifest, "--slate", slate, "--channels", "lab",
                        "--standardize", "--top-k", "1", "--out", tmp_path / "pred"], capsys)
    assert code == 0
    ranking = out.splitlines()[1:]
    assert len(ranking) == 3 and ranking[0].split()[0] == "1"
    assert (tmp_path / "pred" / "models" / "lab.txt").is_file()
    assert (tmp_path / "pred" / "slate_ranking.csv").is_file()


def test_predict_input_errors(tmp_path, capsys):
    code, _, err = run(["predict"], capsys)
    assert code == 2 and "slate" in err
    inject = tmp_path / "p.json"
    inject.write_text(json.dumps({"a": 0.3, "b": 0.3, "c": 0.1}))
    code, out, _ = run(["predict", "--inject-posteriors", inject, "--top-k", "2"], capsys)
    assert code == 0 and [line.split()[1] for line in out.splitlines()[1:]] == ["a", "b", "c"]
    code, _, err = run(["predict", "--inject-posteriors", inject, "--top-k", "4"], capsys)
    assert code == 2
    inject.write_text(json.dumps({"a": 1.5}))
    code, _, err = run(["predict", "--inject-posteriors", inject], capsys)
    assert code == 2 and "[0, 1]" in err


def test_evaluate_needs_output(small_manifest, capsys):
    code, _, err = run(["evaluate", "--manifest", small_manifest], capsys)
    assert code == 2 and "--out" in err


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
