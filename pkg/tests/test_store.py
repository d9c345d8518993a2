import os

import pytest
from hypothesis import given, settings, strategies as st

from labgate.uploader.store import AppendLog, iter_records


def test_append_and_recover(tmp_path):
    log = AppendLog(tmp_path / "q.log")
    log.append(b"one")
    log.append(b"two")
    log.close()
    again = AppendLog(tmp_path / "q.log")
    assert again.recovered() == [b"one", b"two"] and again.truncated_bytes == 0
    again.close()


@settings(max_examples=60)
@given(payloads=st.lists(st.binary(min_size=1, max_size=50), min_size=1, max_size=8), cut=st.integers(1, 8),
       data=st.data())
def test_torn_tail_is_truncated(tmp_path_factory, payloads, cut, data):
    path = tmp_path_factory.mktemp("log") / "q.log"
    log = AppendLog(path, fsync=False)
    ends = []
    for p in payloads:
        log.append(p)
        ends.append(log.size)
    log.close()
    size = os.path.getsize(path)
    keep = data.draw(st.integers(0, size))
    with open(path, "r+b") as fh:
        fh.truncate(keep)
    again = AppendLog(path, fsync=False)
    whole = sum(1 for e in ends if e <= keep)
    assert again.recovered() == payloads[:whole]
    assert again.size == (ends[whole - 1] if whole else 0)
    again.append(b"after")
    again.close()
    assert list(iter_records(path))[-1] == b"after"


def test_corrupted_byte_stops_replay(tmp_path):
    path = tmp_path / "q.log"
    log = AppendLog(path)
    log.append(b"aaaa")
    second = log.append(b"bbbb")
    log.append(b"cccc")
    log.close()
    raw = bytearray(path.read_bytes())
    raw[second + 9] ^= 0x01
    path.write_bytes(bytes(raw))
    again = AppendLog(path)
    assert again.recovered() == [b"aaaa"] and again.truncated_bytes > 0
    again.close()


def test_rewrite(tmp_path):
    log = AppendLog(tmp_path / "q.log")
    for i in range(5):
        log.append(b"x%d" % i)
    log.rewrite([b"keep"])
    log.append(b"new")
    log.close()
    assert list(iter_records(tmp_path / "q.log")) == [b"keep", b"new"]
