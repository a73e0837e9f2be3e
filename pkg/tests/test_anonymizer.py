import ipaddress

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import common_prefix_bits, entry, random_stream
from sessionlab.anonymizer import AnonKey, Anonymizer, anonymize_entry, anonymize_ip, anonymize_user
from sessionlab.model import AttackTag, SourceType
from sessionlab.sessionizer import sessionize

ipv4 = st.integers(0, 2**32 - 1).map(lambda v: str(ipaddress.IPv4Address(v)))


def test_deterministic(anon_key):
    assert anonymize_ip("10.0.0.1", anon_key) == anonymize_ip("10.0.0.1", anon_key)


def test_shared_24_bit_prefix(anon_key):
    a, b = anonymize_ip("10.0.0.1", anon_key), anonymize_ip("10.0.0.2", anon_key)
    assert common_prefix_bits(a, b) >= 24 and a != b


def test_different_keys_differ(anon_key):
    other = AnonKey.from_hex("ff" * 32)
    assert anonymize_ip("10.0.0.1", anon_key) != anonymize_ip("10.0.0.1", other)


@pytest.mark.parametrize("bad", ["10.0.0", "256.1.1.1", "a.b.c.d", "", "1.2.3.4.5"])
def test_malformed_rejected(anon_key, bad):
    with pytest.raises(ValueError):
        anonymize_ip(bad, anon_key)


@given(ipv4, ipv4)
def test_prefix_preservation_exact(anon_key, a, b):
    assert common_prefix_bits(anonymize_ip(a, anon_key), anonymize_ip(b, anon_key)) == common_prefix_bits(a, b)


PRIVATE = [ipaddress.IPv4Network(n) for n in ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")]
private_ipv4 = st.sampled_from(PRIVATE).flatmap(
    lambda net: st.integers(0, net.num_addresses - 1).map(lambda off: str(net.network_address + off)))


@given(private_ipv4)
def test_private_stays_private(anon_key, a):
    out = ipaddress.IPv4Address(anonymize_ip(a, anon_key))
    src_net = next(n for n in PRIVATE if ipaddress.IPv4Address(a) in n)
    assert out in src_net


def test_injective_on_sample(anon_key):
    rng = np.random.default_rng(0)
    addrs = {str(ipaddress.IPv4Address(int(v))) for v in rng.integers(0, 2**32, size=5000)}
    addrs |= {f"192.168.1.{i}" for i in range(256)}
    assert len({anonymize_ip(a, anon_key) for a in addrs}) == len(addrs)


def test_user_examples(anon_key):
    anon = Anonymizer(anon_key)
    assert anon.user("alice") == anon.user("alice")
    assert anon.user("alice") != "alice"
    with pytest.raises(ValueError):
        anon.user("")


def test_user_distinct_on_10k_corpus(anon_key):
    anon = Anonymizer(anon_key)
    names = [f"user{i}" for i in range(10_000)]
    out = [anon.user(n) for n in names]
    assert len(set(out)) == len(names)
    assert all(o != n for o, n in zip(out, names))
    assert all(o.split("_")[0] == "u" for o in out)


def test_user_never_returns_dictionary_input(anon_key):
    anon = Anonymizer(anon_key)
    for name in anon_key.username_dictionary[:50]:
        assert anon.user(name) != name


def test_functional_user_matches_stateful(anon_key):
    assert anonymize_user("carol", anon_key) == Anonymizer(anon_key).user("carol")


def test_identifier_free_entry_unchanged(anon_key):
    e = entry(0, user=None, process="cron", message="job finished")
    out = anonymize_entry(e, anon_key)
    assert out == e and out.to_dict() == e.to_dict()


def test_tags_and_structure_preserved(anon_key):
    e = entry(0, user="bob", tags=[AttackTag.LATERAL_MOVEMENT], source=SourceType.AUTH,
              message="Accepted publickey for bob from 10.1.2.3 port 4242 ssh2")
    out = anonymize_entry(e, anon_key)
    assert out.attack_tags == e.attack_tags and out.timestamp == e.timestamp
    assert out.source_type == e.source_type
    assert out.user != "bob" and "bob" not in out.message
    assert out.message.startswith("Accepted publickey for ") and out.message.endswith(" port 4242 ssh2")
    assert out.user in out.message


def test_repeated_ip_maps_consistently(anon_key):
    e = entry(0, user=None, message="conn 10.9.8.7 -> 10.0.0.1 reply from 10.9.8.7")
    out = anonymize_entry(e, anon_key)
    mapped = anonymize_ip("10.9.8.7", anon_key)
    assert out.message.count(mapped) == 2 and "10.9.8.7" not in out.message


def test_ip_host_is_substituted(anon_key):
    e = entry(0, host="10.0.0.5", user=None, message="x")
    assert anonymize_entry(e, anon_key).host == anonymize_ip("10.0.0.5", anon_key)


def test_version_like_tokens_untouched(anon_key):
    e = entry(0, user=None, message="agent 1.2.3.4.5 build 10.0.0")
    assert anonymize_entry(e, anon_key).message == e.message


def test_anonymization_commutes_with_sessionization(anon_key):
    stream = random_stream(3, 2000, 25)
    anon = Anonymizer(anon_key)
    a = sessionize(stream)
    b = sessionize([anon.entry(e) for e in stream])
    assert [len(s.entries) for s in a] == [len(s.entries) for s in b]
    assert [(s.start, s.end) for s in a] == [(s.start, s.end) for s in b]
    assert [s.label for s in a] == [s.label for s in b]


def test_key_file(tmp_path):
    p = tmp_path / "k.hex"
    p.write_text("ab" * 32 + "\n")
    assert AnonKey.from_file(p).secret == bytes([0xAB]) * 32
    p.write_text("ab" * 10)
    with pytest.raises(ValueError):
        AnonKey.from_file(p)
