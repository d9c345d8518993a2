import os
from datetime import datetime, timezone
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from labgate.gateway.pipeline import Pipeline, dead_letter
from labgate.model import ObservationResult, RawResult
from labgate.registry import DeviceProfile, Registry, TestParameterMapping
from labgate.uploader.queue import DurableQueue, QueueLocked
from labgate.uploader.wire import loads

WHEN = datetime(2024, 3, 1, tzinfo=timezone.utc)


def make_obs(dev, seq, value="1"):
    return ObservationResult("GW", dev, f"S{seq}", "T-X", "X", Decimal(value), WHEN, seq)


def builder(dev, n):
    return lambda first: [make_obs(dev, first + i, str(i)) for i in range(n)]


@pytest.fixture
def qdir(tmp_path):
    return tmp_path / "queue"


def test_commit_assigns_contiguous_sequences(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    r1 = q.commit("D1", builder("D1", 3))
    r2 = q.commit("D1", builder("D1", 2))
    r3 = q.commit("D2", builder("D2", 1))
    assert (r1.first_sequence, r1.last_sequence, r2.first_sequence, r2.last_sequence) == (1, 3, 4, 5)
    assert r3.first_sequence == 1
    assert q.depth("D1") == 5 and q.next_sequence("D1") == 6
    q.close()


def test_commit_rejects_invalid(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    with pytest.raises(ValueError):
        q.commit("D1", lambda first: [make_obs("D1", first + 1)])
    with pytest.raises(ValueError):
        q.commit("D1", lambda first: [ObservationResult("GW", "D1", "S", "", "X", Decimal(1), WHEN, first)])
    assert q.depth("D1") == 0
    q.close()


def test_second_open_is_locked(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    with pytest.raises(QueueLocked):
        DurableQueue(qdir, "GW", fsync=False)
    q.close()
    DurableQueue(qdir, "GW", fsync=False).close()


def test_envelope_lifecycle_and_recovery(qdir):
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=2)
    q.commit("D1", builder("D1", 5))
    e1 = q.next_entry("D1", idle=999)
    assert (e1.envelope.first, e1.envelope.last) == (1, 2)
    assert e1.envelope.idempotency_key == "GW:D1:1-2"
    q.mark_acked(e1, 2)
    e2 = q.next_entry("D1", idle=999)
    q.close()
    # restart with e2 in flight: the same envelope (same key) comes back
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=2)
    again = q.next_entry("D1", idle=999)
    assert again.envelope.idempotency_key == e2.envelope.idempotency_key == "GW:D1:3-4"
    assert again.envelope.observations == e2.envelope.observations
    assert q.stats("D1")["acked"] == 2 and q.depth("D1") == 3
    q.mark_acked(again)
    # leftovers from before a restart are flushed without waiting for idle
    last = q.next_entry("D1", idle=999)
    assert last.envelope.idempotency_key == "GW:D1:5-5"
    q.mark_acked(last)
    assert q.depth("D1") == 0 and not q.has_work("D1")
    q.close()


def test_partial_batch_waits_for_idle(qdir):
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=5)
    q.commit("D1", builder("D1", 2))
    assert q.next_entry("D1", idle=999) is None
    assert q.next_entry("D1", idle=0.0).envelope.idempotency_key == "GW:D1:1-2"
    q.close()


def test_park(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    q.commit("D1", builder("D1", 2))
    e = q.next_entry("D1", force=True)
    q.mark_parked(e, "400 bad")
    q.close()
    q = DurableQueue(qdir, "GW", fsync=False)
    assert q.stats("D1")["parked"] == 2 and q.depth("D1") == 0
    assert q.parked("D1")[0][1] == "400 bad"
    q.close()


def test_dead_letters_commit_with_observations(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    dl = dead_letter("D1", b"R|1|^^^ZZ|5", "unmapped_test_code", "S1 ZZ", WHEN)
    q.commit("D1", builder("D1", 1), digest="abc", dead=[dl])
    q.close()
    # one record holds both
    from labgate.uploader.store import iter_records
    recs = [loads(p) for p in iter_records(qdir / "queue.log")]
    assert len(recs) == 1 and recs[0]["obs"] and recs[0]["dead"][0]["reason"] == "unmapped_test_code"
    q = DurableQueue(qdir, "GW", fsync=False)
    assert [d["id"] for d in q.dead_letters()] == [1]
    q.drain_dead_letters(1)
    assert q.dead_letters() == []
    q.close()
    assert DurableQueue(qdir, "GW", fsync=False).dead_letters() == []


def test_duplicate_detection(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    q.commit("D1", builder("D1", 1), digest="d1")
    assert q.is_duplicate("D1", "d1", first_in_session=True)
    assert not q.is_duplicate("D1", "d1", first_in_session=False)
    assert not q.is_duplicate("D1", "d2", first_in_session=True)
    q.commit("D1", builder("D1", 1), digest="f1", file=True)
    assert q.file_seen("D1", "f1") and q.is_duplicate("D1", "d1")
    q.close()


def test_compaction_preserves_state(qdir):
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=3)
    q.commit("D1", builder("D1", 10), digest="last")
    q.commit("D1", builder("D1", 1), digest="file", file=True)
    q.add_dead_letters("D1", [dead_letter("D1", b"x", "bad", "", WHEN)])
    e = q.next_entry("D1", force=True)
    q.mark_acked(e)
    e = q.next_entry("D1", force=True)
    q.mark_parked(e, "r")
    open_entry = q.next_entry("D1", force=True)
    before = (q.stats("D1"), q.depth("D1"), q.dead_letters(), q.next_sequence("D1"))
    q.compact()
    q.close()
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=3)
    after = (q.stats("D1"), q.depth("D1"), q.dead_letters(), q.next_sequence("D1"))
    assert {**before[0], "last_delivery": None} == {**after[0], "last_delivery": None}
    assert before[1:] == after[1:]
    assert q.next_entry("D1", idle=999).envelope.idempotency_key == open_entry.envelope.idempotency_key
    assert q.is_duplicate("D1", "last") and q.file_seen("D1", "file")
    q.close()


ops = st.lists(st.one_of(
    st.tuples(st.just("commit"), st.sampled_from(["A", "B"]), st.integers(0, 4)),
    st.tuples(st.just("send"), st.sampled_from(["A", "B"]), st.just(0)),
    st.tuples(st.just("ack"), st.sampled_from(["A", "B"]), st.just(0)),
    st.tuples(st.just("compact"), st.just("A"), st.just(0)),
), max_size=25)


@settings(max_examples=60)
@given(program=ops, data=st.data())
def test_crash_anywhere_recovers_prefix(tmp_path_factory, program, data):
    """Cut the log at any byte: recovery yields exactly the state after some prefix of writes."""
    qdir = tmp_path_factory.mktemp("q")
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=3)
    log_path = qdir / "queue.log"
    snapshots = [(0, {})]
    for op, dev, n in program:
        if op == "commit":
            q.commit(dev, builder(dev, n), digest=f"{dev}{n}") if n else None
        elif op == "send":
            q.next_entry(dev, force=True)
        elif op == "ack":
            e = q.next_entry(dev, idle=1e9)
            if e is not None:
                q.mark_acked(e)
        elif op == "compact":
            q.compact()
            snapshots = []
        state = {d: (q.depth(d), q.stats(d)["acked"], q.next_sequence(d)) for d in q.devices()}
        snapshots.append((os.path.getsize(log_path), state))
    q.close()
    size = os.path.getsize(log_path)
    cut = data.draw(st.integers(snapshots[0][0] if snapshots else 0, size))
    with open(log_path, "r+b") as fh:
        fh.truncate(cut)
    q = DurableQueue(qdir, "GW", fsync=False, batch_max=3)
    got = {d: (q.depth(d), q.stats(d)["acked"], q.next_sequence(d)) for d in q.devices()}
    q.close()
    candidates = [s for end, s in snapshots if end <= cut]
    assert candidates and got == {d: v for d, v in candidates[-1].items() if v != (0, 0, 1) or d in got}


# ---------------------------------------------------------------- pipeline

REG = Registry([DeviceProfile("D1", "D1", "astm", "unidirectional", "FMT-ASTM-01", "127.0.0.1:5001")],
               [TestParameterMapping("D1", "GLU", "T-GLU", "mmol/L", "0.0555")])


def raw(code="GLU", value="90", sample="S1"):
    return RawResult("D1", sample, code, value)


def test_pipeline_maps_and_dead_letters_together(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    p = Pipeline("GW", q)
    out = p.process(REG, "D1", [raw(), raw("ZZZ"), ValueError("boom")], b"payload")
    assert (out.emitted, out.dead_lettered, out.first_sequence) == (1, 2, 1)
    reasons = sorted(d["reason"] for d in q.dead_letters("D1"))
    assert reasons == ["parse_error", "unmapped_test_code"]
    e = q.next_entry("D1", force=True)
    assert e.envelope.observations[0]["value"] == Decimal("4.9950")
    q.close()


def test_pipeline_skips_retransmission_at_session_start(qdir):
    q = DurableQueue(qdir, "GW", fsync=False)
    p = Pipeline("GW", q)
    assert p.process(REG, "D1", [raw()], b"m1", first_in_session=True).emitted == 1
    assert p.process(REG, "D1", [raw()], b"m1", first_in_session=True).duplicate
    # mid-session repeats are real repeat measurements
    assert p.process(REG, "D1", [raw()], b"m1", first_in_session=False).emitted == 1
    assert p.process(REG, "D1", [raw()], b"f", file=True).emitted == 1
    assert p.process(REG, "D1", [raw()], b"f", file=True).duplicate
    assert q.depth("D1") == 3
    q.close()
