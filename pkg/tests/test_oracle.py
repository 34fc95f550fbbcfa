from __future__ import annotations

import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from peevader import corpusgen as cg
from peevader.oracle import (BIAS, WEIGHTS, BackendUnavailable, MalformedResponse, Oracle,
                             OracleConfig, builtin_score, classify, features, filter_dataset,
                             weight_digest)
from peevader.pe import parse_pe

from stubs import http_stub, json_reply, script

# published scorer, frozen here so any change to the weights is caught
W = (3.0, 2.0, 0.5, 1.5, -8.0)
B = -1.0


def hand_entropy(data: bytes) -> float:
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in Counter(data).values())


def hand_printable(data: bytes) -> float:
    ok = set(range(0x20, 0x7F)) | {9, 10, 13}
    return sum(b in ok for b in data) / len(data)


def hand_score(f) -> float:
    return 1 / (1 + math.exp(-(B + sum(w * x for w, x in zip(W, f)))))


def test_weights_frozen():
    assert tuple(WEIGHTS) == W and BIAS == B
    assert len(weight_digest()) == 16


def test_benign_hand_evaluation():
    data = cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x1000, 0x1000, cg.CODE, "low")],
                                  padding_runs=False))
    img = parse_pe(data)
    text = data[img.sections[0].raw_ptr:img.sections[0].raw_end]
    f = (hand_entropy(text) / 8, 0.0, 0.0, 0.0, hand_printable(data))
    assert features(img) == pytest.approx(f, abs=1e-12)
    assert builtin_score(img) == pytest.approx(hand_score(f), abs=1e-12)
    assert builtin_score(img) < 0.5


def test_malicious_hand_evaluation():
    spec = cg.GenSpec([cg.SectionSpec(b"UPX0", 0x1000, 0x1000, cg.CODE, "high"),
                       cg.SectionSpec(b".evil", 0x800, 0x800, cg.DATA, "high")],
                      stub=b"\x00custom stub\x00" * 4, overlay_len=0x400, seed=3)
    data = cg.generate(spec)
    img = parse_pe(data)
    text = data[img.sections[0].raw_ptr:img.sections[0].raw_end]
    f = (hand_entropy(text) / 8, 1.0, 0x400 / len(data), 1.0, hand_printable(data))
    assert features(img) == pytest.approx(f, abs=1e-12)
    assert builtin_score(img) == pytest.approx(hand_score(f), abs=1e-12)
    assert builtin_score(img) > 0.5


def test_monotone_in_stub_and_names(benign):
    img = parse_pe(benign)
    f = features(img)
    g = f.copy()
    g[1], g[3] = 1.0, 1.0
    assert hand_score(g) > hand_score(f)


def test_builtin_deterministic(malicious):
    o = Oracle()
    assert o.score(malicious) == o.score(malicious) == builtin_score(parse_pe(malicious))


def test_threshold_boundary_inclusive():
    o = Oracle(OracleConfig(threshold=0.5), score_fn=lambda _: 0.5)
    assert o.classify(b"x").detected


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 2])
def test_threshold_range(t):
    with pytest.raises(ValueError):
        OracleConfig(threshold=t)


def test_cache_and_counter():
    calls = []
    o = Oracle(score_fn=lambda d: calls.append(d) or 0.3)
    o.score(b"a"), o.score(b"a"), o.score(b"b")
    assert o.queries == 3 and len(calls) == 2


@pytest.mark.parametrize("text, backend, target", [
    ("builtin", "builtin", ""),
    ("cmd:python3 clf.py", "subprocess", "python3 clf.py"),
    ("http://h:1/s", "http", "http://h:1/s"),
    ("http:http://h:1/s", "http", "http://h:1/s"),
])
def test_from_string(text, backend, target):
    cfg = OracleConfig.from_string(text)
    assert (cfg.backend, cfg.target) == (backend, target)


def test_from_string_unknown():
    with pytest.raises(ValueError):
        OracleConfig.from_string("magic")


def test_subprocess_score(tmp_path):
    cmd = script(tmp_path, "print('score=0.7')")
    v = classify(OracleConfig("subprocess", cmd), b"whatever")
    assert v.score == 0.7 and v.detected


def test_subprocess_receives_path(tmp_path):
    cmd = script(tmp_path, "d=open(sys.argv[1],'rb').read(); print(f'score={len(d)/100}')")
    assert Oracle(OracleConfig("subprocess", cmd)).score(b"x" * 25) == 0.25


@pytest.mark.parametrize("body", [
    "print('hello')",
    "print('score=0.2'); print('score=0.3')",
    "print('score=1.5')",
    "pass",
])
def test_subprocess_malformed(tmp_path, body):
    with pytest.raises(MalformedResponse):
        Oracle(OracleConfig("subprocess", script(tmp_path, body))).score(b"x")


def test_subprocess_failure_status(tmp_path):
    with pytest.raises(BackendUnavailable):
        Oracle(OracleConfig("subprocess", script(tmp_path, "sys.exit(3)"))).score(b"x")


def test_subprocess_timeout_env(tmp_path, monkeypatch):
    monkeypatch.setenv("PEEVADER_ORACLE_TIMEOUT", "0.2")
    cmd = script(tmp_path, "import time; time.sleep(5); print('score=0.1')")
    with pytest.raises(BackendUnavailable):
        Oracle(OracleConfig("subprocess", cmd, timeout=60)).score(b"x")


def test_http_score():
    with http_stub(json_reply(0.25)) as url:
        v = Oracle(OracleConfig("http", url)).classify(b"x")
    assert v.score == 0.25 and not v.detected


def test_http_gets_body():
    seen = []
    with http_stub(lambda body: (seen.append(body), (200, b'{"score": 0.9}'))[1]) as url:
        Oracle(OracleConfig("http", url)).score(b"payload")
    assert seen == [b"payload"]


@pytest.mark.parametrize("reply", [
    json_reply(1.3),
    json_reply("0.5"),
    lambda b: (200, b"not json"),
    lambda b: (200, b'{"confidence": 0.4}'),
])
def test_http_malformed(reply):
    with http_stub(reply) as url:
        with pytest.raises(MalformedResponse):
            Oracle(OracleConfig("http", url)).score(b"x")


def test_http_error_status():
    with http_stub(lambda b: (503, b"busy")) as url:
        with pytest.raises(BackendUnavailable):
            Oracle(OracleConfig("http", url)).score(b"x")


def test_http_unreachable():
    with pytest.raises(BackendUnavailable):
        Oracle(OracleConfig("http", "http://127.0.0.1:9/none", timeout=2)).score(b"x")


def test_filter_partition(tmp_path):
    scores = {b"a": 0.9, b"b": 0.7, b"c": 0.3}
    base = cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE)]))
    for k in scores:
        (tmp_path / k.decode()).write_bytes(base + k)
    o = Oracle(score_fn=lambda d: scores[d[-1:]])
    kept, dropped = filter_dataset(tmp_path, o)
    assert [e.path.name for e in kept] == ["a", "b"]
    assert [(e.path.name, e.reason) for e in dropped] == [("c", "below-threshold")]


def test_filter_empty(tmp_path):
    assert filter_dataset(tmp_path, Oracle()) == ([], [])


def test_filter_unparseable(tmp_path, malicious):
    (tmp_path / "junk").write_bytes(b"garbage")
    (tmp_path / "mal").write_bytes(malicious)
    kept, dropped = filter_dataset(tmp_path, OracleConfig())
    assert [e.path.name for e in kept] == ["mal"]
    assert [(e.path.name, e.reason) for e in dropped] == [("junk", "parse")]


def test_filter_oracle_error(tmp_path, malicious):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "mal").write_bytes(malicious)
    o = Oracle(OracleConfig("subprocess", script(tmp_path, "print('nope')")))
    kept, dropped = filter_dataset(tmp_path / "data", o)
    assert not kept and dropped[0].reason.startswith("oracle:")


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31))
def test_property_score_in_unit_interval(seed):
    assert 0.0 <= builtin_score(parse_pe(cg.generate(cg.random_spec(seed)))) <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.floats(0.01, 0.98),
       st.floats(0.0, 0.5))
def test_property_threshold_monotone(tmp_path_factory, scores, t, bump):
    d = tmp_path_factory.mktemp("mono")
    base = cg.generate(cg.GenSpec([cg.SectionSpec(b".text", 0x200, 0x200, cg.CODE)]))
    table = {}
    for i, s in enumerate(scores):
        data = base + bytes([i])
        (d / f"f{i}").write_bytes(data)
        table[data] = s
    t2 = min(0.99, t + bump)
    k1, _ = filter_dataset(d, Oracle(OracleConfig(threshold=t), table.__getitem__))
    k2, _ = filter_dataset(d, Oracle(OracleConfig(threshold=t2), table.__getitem__))
    assert {e.path for e in k2} <= {e.path for e in k1}
