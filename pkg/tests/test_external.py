import json
import sys

import numpy as np
import pytest

from helpers import make_store, random_doc, random_query
from rank_perturb.external import PROTOCOL_HELLO, ExternalRanker, ExternalRankerError
from rank_perturb.overlap_scorer import overlap

OVERLAP_CMD = [sys.executable, "-m", "rank_perturb.overlap_scorer"]

FAULT_PRELUDE = """\
import json, sys, time
lines = iter(sys.stdin)
msg = json.loads(next(lines))
assert "hello" in msg
print(json.dumps({"hello": "fault", "version": "1"}), flush=True)
for line in lines:
    req = json.loads(line)
"""


def fault_ranker(tmp_path, store, body: str, timeout: float = 5.0) -> ExternalRanker:
    """Spawn a child that handshakes correctly, then misbehaves per `body`."""
    script = tmp_path / "fault.py"
    script.write_text(FAULT_PRELUDE + "    " + body + "\n", encoding="utf-8")
    return ExternalRanker(store, [sys.executable, str(script)], timeout=timeout)


@pytest.fixture
def store(rng):
    return make_store(rng.normal(size=(30, 4)), tokens=[f"t{i}" for i in range(30)])


def test_overlap_child_matches_local_count(rng, store):
    with ExternalRanker(store, OVERLAP_CMD) as ranker:
        assert (ranker.name, ranker.version) == ("overlap-scorer", "1")
        for _ in range(100):
            q = random_query(rng, store, int(rng.integers(1, 4)))
            d = random_doc(rng, store, int(rng.integers(1, 15)))
            qwords = set(store.words(q.token_ids))
            local = sum(1 for w in store.words(d.token_ids) if w in qwords)
            assert ranker.score(q, d) == float(local)


def test_overlap_helper_counts_occurrences():
    assert overlap(["a", "b"], ["a", "a", "c", "b"]) == 3
    assert overlap(["a"], []) == 0
    assert overlap([], ["a"]) == 0


def test_request_shape_on_the_wire(tmp_path, store, rng):
    body = ('print(json.dumps({"id": req["id"], "score": float('
            'set(req) == {"id", "query", "doc"}'
            ' and isinstance(req["query"], list)'
            ' and isinstance(req["doc"], list)'
            ' and all(isinstance(w, str) for w in req["query"] + req["doc"]))}), flush=True)')
    with fault_ranker(tmp_path, store, body) as ranker:
        q = random_query(rng, store, 2)
        d = random_doc(rng, store, 5)
        assert ranker.score(q, d) == 1.0


def test_handshake_line_content(tmp_path, store):
    script = tmp_path / "echo_hello.py"
    script.write_text(
        "import json, sys\n"
        "msg = json.loads(next(iter(sys.stdin)))\n"
        'print(json.dumps({"hello": "echo", "version": msg["hello"]}), flush=True)\n',
        encoding="utf-8")
    with ExternalRanker(store, [sys.executable, str(script)]) as ranker:
        assert ranker.version == PROTOCOL_HELLO


def test_slow_child_times_out(tmp_path, store, rng):
    with fault_ranker(tmp_path, store, "time.sleep(60)", timeout=0.5) as ranker:
        with pytest.raises(ExternalRankerError, match="timed out after 0.5s"):
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))


def test_malformed_reply_carries_raw_text(tmp_path, store, rng):
    with fault_ranker(tmp_path, store, 'print("}{ not json", flush=True)') as ranker:
        with pytest.raises(ExternalRankerError, match="unparseable") as ei:
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))
    assert ei.value.raw == "}{ not json\n"
    assert "}{ not json" in str(ei.value)


def test_non_object_reply_rejected(tmp_path, store, rng):
    with fault_ranker(tmp_path, store, 'print("[1, 2]", flush=True)') as ranker:
        with pytest.raises(ExternalRankerError, match="not a JSON object"):
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))


def test_mismatched_reply_id_rejected(tmp_path, store, rng):
    body = 'print(json.dumps({"id": "bogus", "score": 1.0}), flush=True)'
    with fault_ranker(tmp_path, store, body) as ranker:
        with pytest.raises(ExternalRankerError, match="does not match"):
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))


@pytest.mark.parametrize("reply,what", [
    ('{"id": req["id"]}', "lacks a numeric score"),
    ('{"id": req["id"], "score": "high"}', "lacks a numeric score"),
    ('{"id": req["id"], "score": True}', "lacks a numeric score"),
    ('{"id": req["id"], "score": float("nan")}', "not finite"),
])
def test_bad_score_values_rejected(tmp_path, store, rng, reply, what):
    with fault_ranker(tmp_path, store, f"print(json.dumps({reply}), flush=True)") as ranker:
        with pytest.raises(ExternalRankerError, match=what):
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))


def test_handshake_missing_version_rejected(tmp_path, store):
    script = tmp_path / "halfshake.py"
    script.write_text(
        "import json, sys\n"
        "next(iter(sys.stdin))\n"
        'print(json.dumps({"hello": "x"}), flush=True)\n'
        "sys.stdin.read()\n",
        encoding="utf-8")
    with pytest.raises(ExternalRankerError, match="missing hello/version"):
        ExternalRanker(store, [sys.executable, str(script)])


def test_child_exit_reported_as_eof(tmp_path, store):
    script = tmp_path / "quitter.py"
    script.write_text("import sys\nsys.exit(3)\n", encoding="utf-8")
    with pytest.raises(ExternalRankerError, match="closed stdout"):
        ExternalRanker(store, [sys.executable, str(script)])


def test_child_dying_mid_run_reported(tmp_path, store, rng):
    with fault_ranker(tmp_path, store, "sys.exit(7)") as ranker:
        with pytest.raises(ExternalRankerError, match="closed stdout"):
            ranker.score(random_query(rng, store, 1), random_doc(rng, store, 3))


def test_constructor_validation(store):
    with pytest.raises(ExternalRankerError, match="command is empty"):
        ExternalRanker(store, [])
    with pytest.raises(ExternalRankerError, match="timeout must be positive"):
        ExternalRanker(store, OVERLAP_CMD, timeout=0.0)


def test_requests_are_replayable_in_order(store):
    # ids are assigned sequentially; an in-order child sees 0, 1, 2, ...
    q = random_query(np.random.default_rng(0), store, 2)
    with ExternalRanker(store, OVERLAP_CMD) as ranker:
        docs = [random_doc(np.random.default_rng(i), store, 4) for i in range(5)]
        first = [ranker.score(q, d) for d in docs]
        again = [ranker.score(q, d) for d in docs]
    assert first == again
