import json

import pytest

from sessionlab.model import AttackTag
from sessionlab.parsers import attach_tags, hint_from_filename, parse_stream
from sessionlab.sessionizer import prevalence, sessionize, sort_entries
from sessionlab.synth import (AttackWindow, HostSpec, TestbedConfig, demo_config, generate, generate_corpus,
                              rate_profile, weekday_share)

HOSTS = [HostSpec("web01", "web"), HostSpec("vpn01", "vpn")]


def small_config(**kw):
    base = dict(hosts=HOSTS, duration_hours=24, seed=5,
                attack_windows=[AttackWindow(9.0, 10.5, AttackTag.RECONNAISSANCE, "web01")])
    base.update(kw)
    return TestbedConfig(**base)


def test_zero_duration_zero_lines():
    files, labels = generate_corpus(small_config(duration_hours=0, attack_windows=[]))
    assert sum(len(v) for v in files.values()) == 0 and labels == []


def test_byte_identical_under_seed(tmp_path):
    generate(small_config(), tmp_path / "a")
    generate(small_config(), tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert (tmp_path / "a" / "web01" / "apache_access.log").exists()
    assert (tmp_path / "a" / "labels.jsonl").exists()


def test_seed_changes_output():
    a, _ = generate_corpus(small_config(seed=1))
    b, _ = generate_corpus(small_config(seed=2))
    assert a != b


@pytest.mark.parametrize("window", [AttackWindow(20, 30, AttackTag.COMPROMISE, "web01"),
                                    AttackWindow(-1, 2, AttackTag.COMPROMISE, "web01"),
                                    AttackWindow(1, 2, AttackTag.COMPROMISE, "nope")])
def test_invalid_window_rejected(window):
    with pytest.raises(ValueError):
        small_config(attack_windows=[window])


def test_inverted_window_rejected():
    with pytest.raises(ValueError):
        small_config(attack_windows=[AttackWindow(5, 4, AttackTag.COMPROMISE, "web01")])


def test_labels_cover_exactly_window_lines():
    cfg = small_config()
    files, labels = generate_corpus(cfg)
    labeled = {(r["file"], r["line"]) for r in labels}
    w = cfg.attack_windows[0]
    n_in = 0
    for name, lines in files.items():
        entries, _ = parse_stream(lines, hint_from_filename(name), name.split("/")[0], year=2022)
        for lineno, e in enumerate(entries, 1):
            offset = (e.timestamp - cfg.start_time).total_seconds()
            inside = name.startswith("web01/") and w.start * 3600 <= offset < w.end * 3600
            n_in += inside
            assert ((name, lineno) in labeled) == inside
    assert n_in > 0


def test_rate_profile_shape():
    assert rate_profile(12, False) > rate_profile(3, False)
    assert rate_profile(22, False) > rate_profile(20, False)
    assert rate_profile(22, False) > rate_profile(23, False)
    assert max(rate_profile(h, False) for h in range(24)) == rate_profile(10, False)
    with pytest.raises(ValueError):
        rate_profile(24, False)


def test_weekday_share_in_band():
    assert 0.60 <= weekday_share() <= 0.70


def test_config_json_roundtrip(tmp_path):
    cfg = small_config()
    p = tmp_path / "tb.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TestbedConfig.from_json(p).to_dict() == cfg.to_dict()


def test_shipped_demo_testbed_matches_demo_config():
    from importlib import resources
    shipped = json.loads(resources.files("sessionlab.data").joinpath("demo_testbed.json").read_text())
    assert shipped == demo_config().to_dict()


def test_demo_session_prevalence_in_band():
    cfg = demo_config()
    files, labels = generate_corpus(cfg)
    n_lines = sum(len(v) for v in files.values())
    assert 0.015 <= len(labels) / n_lines <= 0.025
    per_file = {}
    for r in labels:
        per_file.setdefault(r["file"], {})[r["line"]] = frozenset(AttackTag(t) for t in r["labels"])
    entries = []
    for name, lines in files.items():
        parsed, stats = parse_stream(lines, hint_from_filename(name), name.split("/")[0], year=2022)
        assert stats.fallback_raw == 0
        entries.extend(attach_tags(parsed, per_file.get(name, {})))
    p = prevalence(sessionize(sort_entries(entries))).value
    assert 0.01 <= p <= 0.04
