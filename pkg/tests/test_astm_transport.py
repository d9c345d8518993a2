import pytest
from hypothesis import given, strategies as st

from labgate.astm.stream import AstmTokenizer
from labgate.astm.transport import (
    ENQ, EOT, MAX_TEXT, ByteReceived, Frame, FrameError, FrameReceived, Terminator, checksum, decode_frame,
    encode_frame, split_message,
)
from conformance import CASES, ROWS, run_all
from oracles import astm_checksum_oracle, astm_frame_oracle

# frame text never carries the framing control characters
text_bytes = st.binary(max_size=MAX_TEXT).filter(lambda b: not set(b) & {2, 3, 4, 5, 6, 0x15, 0x17, 10, 13})


def test_checksum_frozen():
    # '1' + 'A' + 'B' + 'C' + ETX = 0x31 + 0x41 + 0x42 + 0x43 + 0x03 = 0xFA
    assert checksum(1, b"ABC", Terminator.FINAL) == "FA"
    assert encode_frame(Frame(1, b"ABC")) == b"\x021ABC\x03FA\r\n"
    # ETB variant: 0x31 + 0xC6 + 0x17 = 0x10E -> 0E
    assert checksum(1, b"ABC", Terminator.INTERMEDIATE) == "0E"


@given(n=st.integers(0, 7), text=text_bytes, final=st.booleans())
def test_frame_matches_oracle(n, text, final):
    f = Frame(n, text, Terminator.FINAL if final else Terminator.INTERMEDIATE)
    assert f.checksum == astm_checksum_oracle(n, text, final)
    assert encode_frame(f) == astm_frame_oracle(n, text, final)


@given(n=st.integers(0, 7), text=text_bytes, final=st.booleans())
def test_frame_round_trip(n, text, final):
    f = Frame(n, text, Terminator.FINAL if final else Terminator.INTERMEDIATE)
    raw = encode_frame(f)
    assert decode_frame(raw) == f
    assert encode_frame(decode_frame(raw)) == raw


def test_lowercase_checksum_accepted():
    assert decode_frame(b"\x021ABC\x03fa\r\n").text == b"ABC"


@pytest.mark.parametrize("raw,kind", [
    (b"\x021ABC\x03FB\r\n", "checksum_mismatch"),
    (b"1ABC\x03FA\r\n", "bad_envelope"),
    (b"\x021ABC\x03FA\r", "bad_envelope"),
    (b"\x029ABC\x03FA\r\n", "bad_envelope"),
    (b"\x021ABCX\x03\r\n", "bad_envelope"),
])
def test_decode_errors(raw, kind):
    with pytest.raises(FrameError) as ei:
        decode_frame(raw)
    assert ei.value.kind == kind


def test_sequence_check():
    with pytest.raises(FrameError) as ei:
        decode_frame(encode_frame(Frame(2, b"x")), expected_number=1)
    assert ei.value.kind == "sequence_mismatch"


def test_text_limit():
    with pytest.raises(FrameError):
        encode_frame(Frame(1, b"x" * (MAX_TEXT + 1)))


@given(msg=st.binary(max_size=2000))
def test_split_message(msg):
    frames = split_message(msg)
    assert b"".join(f.text for f in frames) == msg
    assert all(len(f.text) <= MAX_TEXT for f in frames)
    assert [f.frame_number for f in frames] == [(i + 1) % 8 for i in range(len(frames))]
    assert frames[-1].terminator is Terminator.FINAL
    assert all(f.terminator is Terminator.INTERMEDIATE for f in frames[:-1])


@given(texts=st.lists(text_bytes, min_size=1, max_size=5), cuts=st.lists(st.integers(1, 50), max_size=20))
def test_tokenizer_is_chunking_invariant(texts, cuts):
    stream = bytes([ENQ]) + b"".join(encode_frame(Frame((i + 1) % 8, t)) for i, t in enumerate(texts)) + bytes([EOT])
    whole = AstmTokenizer().feed(stream)
    tok, events, pos = AstmTokenizer(), [], 0
    for c in cuts:
        events += tok.feed(stream[pos:pos + c])
        pos += c
    events += tok.feed(stream[pos:])
    assert events == whole
    assert whole[0] == ByteReceived(ENQ) and whole[-1] == ByteReceived(EOT)
    assert [e.frame.text for e in whole[1:-1]] == texts


def test_tokenizer_noise_and_corruption():
    tok = AstmTokenizer()
    good = encode_frame(Frame(1, b"abc"))
    damaged = good[:3] + b"X" + good[4:]
    events = tok.feed(b"zz" + damaged + good)
    assert tok.noise_bytes == 2
    assert isinstance(events[0], FrameReceived) and events[0].error.kind == "checksum_mismatch"
    assert events[1].frame.text == b"abc"


def test_tokenizer_cuts_runaway_frame():
    tok = AstmTokenizer()
    events = tok.feed(b"\x021" + b"a" * 400 + encode_frame(Frame(1, b"ok")))
    assert events[0].error is not None
    assert events[-1].frame.text == b"ok"


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__)
def test_conformance_case(case):
    case()


def test_conformance_covers_every_row():
    passed, failed, rows = run_all()
    assert not failed
    assert rows == set(ROWS)
