from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from oracles import brute_force_sessions, entry, random_stream
from sessionlab.model import AttackTag, Label, dump_jsonl
from sessionlab.sessionizer import Sessionizer, UnsortedInputError, prevalence, sessionize, sort_entries


def test_just_under_gap_is_one_session():
    assert len(sessionize([entry(0), entry(299.999)])) == 1


def test_exact_gap_splits():
    assert len(sessionize([entry(0), entry(300)])) == 2


def test_custom_gap():
    assert len(sessionize([entry(0), entry(60)], gap_seconds=60)) == 2
    with pytest.raises(ValueError):
        Sessionizer(0)


def test_keys_never_merge_even_at_zero_gap():
    out = sessionize([entry(0, user="a"), entry(0, user="b"), entry(0, user=None)])
    assert len(out) == 3
    # absent user sorts first among equal timestamps and hosts
    assert [s.key.user for s in out] == [None, "a", "b"]


def test_absent_fields_share_a_key():
    out = sessionize([entry(0, process=None, user=None), entry(5, process=None, user=None)])
    assert len(out) == 1


def test_unsorted_input_reports_index():
    with pytest.raises(UnsortedInputError) as exc:
        sessionize([entry(0), entry(10), entry(5)])
    assert exc.value.index == 2


def test_ties_keep_ingestion_order():
    a = entry(0, message="first")
    b = entry(0, message="second")
    [s] = sessionize([a, b])
    assert [e.message for e in s.entries] == ["first", "second"]


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    stream = random_stream(seed, 1000, 25)
    got = [list(s.entries) for s in sessionize(stream)]
    assert got == brute_force_sessions(stream)


@given(st.lists(st.tuples(st.integers(0, 2000), st.integers(0, 4)), min_size=1, max_size=120),
       st.sampled_from([1.0, 30.0, 300.0]))
def test_partition_and_gap_properties(raw, gap):
    stream = sort_entries(entry(t, user=f"u{k}") for t, k in raw)
    sessions = sessionize(stream, gap)
    flat = [e for s in sessions for e in s.entries]
    assert sorted(map(id, flat)) == sorted(map(id, stream))
    last_end = {}
    for s in sessions:
        gaps = [(b.timestamp - a.timestamp).total_seconds() for a, b in zip(s.entries, s.entries[1:])]
        assert all(g < gap for g in gaps)
        if s.key in last_end:
            assert (s.start - last_end[s.key]).total_seconds() >= gap
        last_end[s.key] = s.end
        assert s.label is (Label.ANOMALOUS if s.tags() else Label.NORMAL)


def test_streaming_equals_batch_and_bounds_memory():
    stream = random_stream(11, 3000, 30)
    sz = Sessionizer()
    out = []
    peak = 0
    for e in stream:
        out.extend(sz.push(e))
        peak = max(peak, sz.open_sessions)
    out.extend(sz.finish())
    assert [s.entries for s in out] == [s.entries for s in sessionize(stream)]
    assert peak <= 30


def test_output_is_deterministic(tmp_path):
    stream = random_stream(5, 800, 20)
    dump_jsonl(sessionize(stream), tmp_path / "a.jsonl")
    dump_jsonl(sessionize(stream), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def _sessions(n_anom, n):
    return sessionize([entry(i * 1000, user=f"u{i}", tags=[AttackTag.COMPROMISE] if i < n_anom else [])
                       for i in range(n)])


def test_prevalence_examples():
    assert prevalence(_sessions(0, 100)).value == 0.0
    p = prevalence(_sessions(2, 100))
    assert p.value == 0.02 and p.fraction == Fraction(1, 50)
    with pytest.raises(ValueError):
        prevalence([])


@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_prevalence_recount(flags):
    sessions = sessionize([entry(i * 1000, user=f"u{i}", tags=[AttackTag.COMPROMISE] if f else [])
                           for i, f in enumerate(flags)])
    assert prevalence(sessions).fraction == Fraction(sum(flags), len(flags))
