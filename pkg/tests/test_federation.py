import json
import socket
import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blipmeta.federation import (PROTOCOL_VERSION, CollectionError, Coordinator, RejectCode,
                                 SiteSummary, SummaryEntry, SummaryRejected, collect,
                                 decode_summary, encode_summary, read_summary_dir, recv_frame,
                                 send_frame, serve_site, transmitted_scalars, validate_summary,
                                 write_summary)
from blipmeta.stageone import fit_site, summarize_site

from conftest import linear_site, make_summary

DATA = Path(__file__).parent / "data"
GOLDEN = ('{"dof":114,"entries":['
          '{"estimate":4.0,"label":"a","map_row":[{"psi_index":0,"weight":1.0},'
          '{"psi_index":1,"weight":1.0},{"psi_index":3,"weight":1.0}],"sd":0.125},'
          '{"estimate":-4.5,"label":"a:x2[2]","map_row":[{"psi_index":2,"weight":1.0},'
          '{"psi_index":3,"weight":-1.0}],"sd":0.25}],'
          '"model_fingerprint":"golden-fp","n_obs":120,"protocol_version":1,"site_id":"site03"}')


def golden():
    return (DATA / "site03.summary.json").read_bytes()


def test_golden_document_decodes():
    s = decode_summary(golden())
    expected = make_summary("site03", [("a", 4.0, 0.125, {0: 1, 1: 1, 3: 1}),
                                       ("a:x2[2]", -4.5, 0.25, {2: 1, 3: -1})],
                            fingerprint="golden-fp", n_obs=120, dof=114)
    assert s == expected
    assert encode_summary(s) == GOLDEN.encode()


def test_golden_validates_with_two_entries():
    s = validate_summary(golden(), "golden-fp", n_psi=4)
    assert len(s.entries) == 2


def test_encode_decode_round_trip_is_byte_stable():
    assert encode_summary(decode_summary(GOLDEN.encode())) == GOLDEN.encode()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1e-6, 1e3)),
                min_size=1, max_size=6))
def test_round_trip_any_values(vals):
    s = make_summary("s", [(f"e{i}", e, sd, {i: 1.0}) for i, (e, sd) in enumerate(vals)])
    doc = encode_summary(s)
    assert decode_summary(doc) == s
    assert encode_summary(decode_summary(doc)) == doc


def test_entry_order_is_canonicalised():
    e = [("a", 1.0, 0.1, {0: 1}), ("a:x1", 2.0, 0.2, {1: 1})]
    assert encode_summary(make_summary("s", e)) == encode_summary(make_summary("s", e[::-1]))


@pytest.mark.parametrize("mutate, code", [
    (lambda d: d.update(model_fingerprint="other"), RejectCode.MODEL_MISMATCH),
    (lambda d: d["entries"][0].update(sd=0.0), RejectCode.DEGENERATE_SD),
    (lambda d: d["entries"][0].update(sd=-1.0), RejectCode.DEGENERATE_SD),
    (lambda d: d.update(protocol_version=2), RejectCode.VERSION_MISMATCH),
    (lambda d: d["entries"][0].update(map_row=[{"psi_index": 0, "weight": 0.0}]), RejectCode.BAD_MAP_ROW),
    (lambda d: d["entries"][0].update(map_row=[]), RejectCode.BAD_MAP_ROW),
    (lambda d: d["entries"][0].update(map_row=[{"psi_index": 9, "weight": 1.0}]), RejectCode.BAD_MAP_ROW),
    (lambda d: d.pop("entries"), RejectCode.MALFORMED),
    (lambda d: d.update(entries=[]), RejectCode.MALFORMED),
    (lambda d: d.update(protocol_version="1"), RejectCode.MALFORMED),
])
def test_reject_codes(mutate, code):
    d = json.loads(golden())
    mutate(d)
    with pytest.raises(SummaryRejected) as e:
        validate_summary(d, "golden-fp", n_psi=4)
    assert e.value.code == code


def test_not_json_is_malformed():
    with pytest.raises(SummaryRejected) as e:
        validate_summary(b"{nope", "fp")
    assert e.value.code == RejectCode.MALFORMED


def test_file_exchange(tmp_path):
    a = make_summary("s1", [("a", 1.0, 0.1, {0: 1})])
    b = make_summary("s2", [("a", 2.0, 0.1, {0: 1})])
    for s in (b, a):
        write_summary(s, tmp_path)
    (tmp_path / "ignored.json").write_text("{}")
    assert read_summary_dir(tmp_path, "fp") == [a, b]
    with pytest.raises(SummaryRejected) as e:
        read_summary_dir(tmp_path, "other")
    assert e.value.code == RejectCode.MODEL_MISMATCH


def test_file_duplicate_site(tmp_path):
    s = make_summary("s1", [("a", 1.0, 0.1, {0: 1})])
    write_summary(s, tmp_path)
    (tmp_path / "copy.summary.json").write_bytes(encode_summary(s))
    with pytest.raises(SummaryRejected) as e:
        read_summary_dir(tmp_path, "fp")
    assert e.value.code == RejectCode.DUPLICATE_SITE


def _run_collect(expected, fp, **kw):
    ready = threading.Event()
    box = {}

    def on_ready(addr):
        box["addr"] = addr
        ready.set()

    def target():
        try:
            box["result"] = collect(expected, fp, on_ready=on_ready, **kw)
        except Exception as e:  # surfaced by the caller
            box["error"] = e
            ready.set()

    t = threading.Thread(target=target)
    t.start()
    assert ready.wait(10)
    return t, box


def test_tcp_three_sites_then_file_identical(tmp_path):
    sums = [make_summary(f"s{i}", [("a", float(i), 0.1, {0: 1}), ("a:x1", -1.0, 0.2, {1: 1})])
            for i in range(3)]
    t, box = _run_collect(3, "fp", timeout=10)
    for s in sums:
        replies = serve_site(box["addr"], [s], timeout=10)
        assert [r["type"] for r in replies] == ["ACK", "ACK"]
    t.join(10)
    got = box["result"]
    for s in sums:
        write_summary(s, tmp_path)
    from_files = read_summary_dir(tmp_path, "fp")
    assert [encode_summary(s) for s in got] == [encode_summary(s) for s in from_files]


def test_tcp_duplicate_site_nacked():
    s = make_summary("s1", [("a", 1.0, 0.1, {0: 1})])
    t, box = _run_collect(2, "fp", timeout=10)
    replies = serve_site(box["addr"], [s, s], timeout=10)
    assert replies[1]["type"] == "ACK"
    assert replies[2] == {"type": "NACK", "code": RejectCode.DUPLICATE_SITE, "detail": "s1"}
    serve_site(box["addr"], [make_summary("s2", [("a", 1.0, 0.1, {0: 1})])], timeout=10)
    t.join(10)
    assert [s.site_id for s in box["result"]] == ["s1", "s2"]


def test_tcp_version_skew_refused_before_data():
    with Coordinator(1, "fp", timeout=2) as coord:
        replies = serve_site(coord.address, [make_summary("s1", [("a", 1.0, 0.1, {0: 1})])],
                             timeout=5, protocol_version=PROTOCOL_VERSION + 1)
        assert replies == [{"type": "NACK", "code": RejectCode.VERSION_MISMATCH}]
        assert coord._summaries == {}


def test_tcp_fingerprint_mismatch_refused():
    with Coordinator(1, "fp", timeout=2) as coord:
        replies = serve_site(coord.address, [make_summary("s1", [("a", 1.0, 0.1, {0: 1})], "x")],
                             timeout=5)
        assert replies[0]["code"] == RejectCode.MODEL_MISMATCH


def test_tcp_timeout_and_partial():
    with pytest.raises(CollectionError):
        collect(1, "fp", timeout=0.2)
    assert collect(1, "fp", timeout=0.2, allow_partial=True) == []


def test_frames_are_length_prefixed():
    a, b = socket.socketpair()
    with a, b:
        send_frame(a, {"type": "BYE"})
        raw = b.recv(4)
        assert int.from_bytes(raw, "big") == len(b'{"type":"BYE"}')
        send_frame(a, {"k": [1, 2]})
        b.recv(len(b'{"type":"BYE"}'))
        assert recv_frame(b) == {"k": [1, 2]}


def test_privacy_invariant(binary_spec):
    rng = np.random.default_rng(3)
    sizes = []
    for n in (50, 5000):
        x = np.column_stack([rng.normal(5, 1, n), rng.binomial(1, 0.5, n)])
        a = rng.binomial(1, 0.5, n).astype(float)
        d = linear_site(binary_spec, "s", x, ("x1", "x2"), a, np.array([4.0, 1, 1]),
                        np.array([2.5, -0.5]), 0.5, rng)
        fit = fit_site(binary_spec, d)
        s = summarize_site(binary_spec, fit.fit, fit.mapping, "s")
        doc = encode_summary(s).decode()
        for i in range(0, n, max(1, n // 50)):
            for v in (*d.covariates[i], d.outcome[i]):
                if v not in (0.0, 1.0):
                    assert repr(float(v)) not in doc
        q = binary_spec.n_psi
        sizes.append(transmitted_scalars(s))
        # estimate, sd and map weights/indices per entry, plus n_obs, dof, version
        assert transmitted_scalars(s) <= 2 * q + 2 * q * q + 3
    assert sizes[0] == sizes[1]
