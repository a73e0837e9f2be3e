import csv
import json

import pytest

from sessionlab.cli import main

KEY_HEX = "00112233445566778899aabbccddeeff" * 2


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--days", "1", "--out", root / "gen") == 0
    assert run("parse", "--input", root / "gen", "--out", root / "parsed") == 0
    assert run("sessionize", "--input", root / "parsed", "--out", root / "sess") == 0
    return root


def test_pipeline_outputs_and_provenance(corpus):
    for stage, files in (("gen", ["testbed.json", "labels.jsonl"]),
                         ("parsed", ["entries.jsonl", "parse_stats.json"]),
                         ("sess", ["sessions.jsonl", "prevalence.json"])):
        for name in files + ["run.json"]:
            assert (corpus / stage / name).exists(), (stage, name)
    run_doc = json.loads((corpus / "sess" / "run.json").read_text())
    assert run_doc["command"] == "sessionize" and run_doc["args"]["gap_seconds"] == 300.0
    assert len(run_doc["inputs"]) == 1


def test_sessionize_rerun_is_byte_identical(corpus, tmp_path):
    assert run("sessionize", "--input", corpus / "parsed", "--out", tmp_path) == 0
    for name in ("sessions.jsonl", "prevalence.json"):
        assert (tmp_path / name).read_bytes() == (corpus / "sess" / name).read_bytes()


def test_config_file_sets_stage_defaults(corpus, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sessionize": {"gap_seconds": 30}}))
    assert run("sessionize", "--config", cfg, "--input", corpus / "parsed", "--out", tmp_path / "o") == 0
    short = json.loads((tmp_path / "o" / "prevalence.json").read_text())["sessions"]
    default = json.loads((corpus / "sess" / "prevalence.json").read_text())["sessions"]
    assert short > default
    # an explicit flag beats the config file
    assert run("sessionize", "--config", cfg, "--gap-seconds", "300", "--input", corpus / "parsed",
               "--out", tmp_path / "p") == 0
    assert (tmp_path / "p" / "sessions.jsonl").read_bytes() == (corpus / "sess" / "sessions.jsonl").read_bytes()


def test_unknown_config_key_is_schema_error(corpus, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sessionize": {"gap": 30}}))
    assert run("sessionize", "--config", cfg, "--input", corpus / "parsed", "--out", tmp_path / "o") == 4
    assert json.loads(capsys.readouterr().err)["error"] == "schema_mismatch"


def test_missing_input_exit_code(tmp_path, capsys):
    assert run("sessionize", "--input", tmp_path / "nope", "--out", tmp_path / "o") == 3
    assert json.loads(capsys.readouterr().err)["error"] == "missing_input"


def test_malformed_stage_input_exit_code(tmp_path):
    (tmp_path / "entries.jsonl").write_text('{"host": "x"}\n')
    assert run("sessionize", "--input", tmp_path, "--out", tmp_path / "o") == 4


def test_usage_errors(tmp_path):
    assert run("sessionize", "--out", tmp_path) == 2
    assert run("bench", "--classifier", "oracle", "--out", tmp_path) == 2


def test_infeasible_rebalance_exit_code(corpus, tmp_path, capsys):
    assert run("build-defense", "--input", corpus / "sess", "--target-prevalence", "0.001",
               "--out", tmp_path) == 5
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "infeasible_rebalance" and err["min_achievable"] > 0.001


def test_build_defense_outputs(corpus, tmp_path):
    assert run("build-defense", "--input", corpus / "sess", "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert abs(manifest["achieved_prevalence"]["value"] - 0.35) <= 0.01
    for name in ("sessions_train.jsonl", "sessions_val.jsonl", "pairs_train.jsonl", "pairs_val.jsonl",
                 "stats.json", "hour_histogram.csv", "per_host_sessions.csv", "run.json"):
        assert (tmp_path / name).exists()
    pair = json.loads((tmp_path / "pairs_train.jsonl").read_text().splitlines()[0])
    assert set(pair) == {"prompt", "response"} and pair["prompt"]


def test_anonymize_hides_identities_and_key(corpus, tmp_path):
    key_file = tmp_path / "key.hex"
    key_file.write_text(KEY_HEX)
    assert run("anonymize", "--input", corpus / "sess", "--anon-key-file", key_file, "--out", tmp_path / "a") == 0
    text = (tmp_path / "a" / "sessions.jsonl").read_text()
    assert KEY_HEX not in text

    def users(path):
        return {e["user"] for line in open(path) for e in json.loads(line)["entries"] if e["user"]}

    original = users(corpus / "sess" / "sessions.jsonl")
    assert original and not original & users(tmp_path / "a" / "sessions.jsonl")
    assert KEY_HEX not in (tmp_path / "a" / "run.json").read_text()
    before = sum(1 for _ in open(corpus / "sess" / "sessions.jsonl"))
    assert text.count("\n") == before


def test_bench_always_normal_csv(tmp_path):
    assert run("bench", "--classifier", "always-normal", "--out", tmp_path) == 0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["accuracy"]) for r in rows] == [1.0, 0.8, 0.6, 0.4, 0.2, 0.0]
    assert all(r["true_positive"] == "0" for r in rows)
    assert [r["n_attacks"] for r in rows] == ["0", "2000", "4000", "6000", "8000", "10000"]


def test_bench_pool_too_small_is_missing_input(corpus, tmp_path):
    assert run("bench", "--classifier", "always-attack", "--input", corpus / "sess", "--out", tmp_path) == 3


def test_report_svgs_are_deterministic(corpus, tmp_path):
    assert run("bench", "--classifier", "always-normal", "--total", "1000", "--out", tmp_path / "b") == 0
    outs = []
    for name in ("r1", "r2"):
        assert run("report", "--sessions", corpus / "sess", "--sweep", tmp_path / "b", "--out", tmp_path / name) == 0
        outs.append(sorted(p.name for p in (tmp_path / name).glob("*.svg")))
    assert outs[0] == outs[1] and len(outs[0]) >= 2
    for name in outs[0]:
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_train_distill_small(corpus, tmp_path):
    assert run("build-defense", "--input", corpus / "sess", "--out", tmp_path / "d") == 0
    args = ["train-distill", "--input", tmp_path / "d", "--out", tmp_path / "t", "--d-model", "16",
            "--layers", "1", "--max-seq", "32", "--max-examples", "40", "--epochs", "1",
            "--accumulation-steps", "4", "--teacher-epochs", "1", "--save-every", "5", "--eval-every", "5"]
    assert run(*args) == 0
    out = tmp_path / "t"
    for name in ("teacher_logits.jsonl", "metrics.csv", "student.tensors", "model_config.json",
                 "summary.json", "run.json"):
        assert (out / name).exists(), name
    assert 1 <= len(list((out / "ckpt").iterdir())) <= 3
    # supplying the stored teacher logits reproduces the student bytes
    again = [a if a != out else tmp_path / "t2" for a in args]
    assert run(*again, "--teacher-logits", out / "teacher_logits.jsonl") == 0
    assert (tmp_path / "t2" / "student.tensors").read_bytes() == (out / "student.tensors").read_bytes()
    assert (tmp_path / "t2" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_seed_and_config_accepted_before_or_after_subcommand(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 7}))
    cases = {
        "a": (["--seed", "3", "bench"], 3),
        "b": (["bench", "--seed", "4"], 4),
        "c": (["--config", cfg, "bench"], 7),
        "d": (["bench", "--config", cfg, "--seed", "5"], 5),
        "e": (["--seed", "6", "--config", cfg, "bench"], 6),
    }
    for name, (head, seed) in cases.items():
        assert run(*head, "--classifier", "always-normal", "--total", "100", "--out", tmp_path / name) == 0
        assert json.loads((tmp_path / name / "run.json").read_text())["seed"] == seed, name
