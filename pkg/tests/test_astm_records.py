import random
from datetime import datetime
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from labgate.astm.records import (
    DEFAULT_DELIMITERS, AstmParseError, Delimiters, Header, OrphanResult, Repeats, Result,
    build_no_order_message, build_order_message, build_query_message, count_results, decode_field,
    encode_field, escape, extract_results, is_complete_message, iter_results, orders_in, parse_message,
    parse_record, serialize_message, serialize_record, unescape,
)
from labgate.formats import BUILTIN
from labgate.model import Priority, WorklistOrder
from generators import random_astm_message

SAMPLE = (
    "H|\\^&|||AU2700^1.0|||||||P|1|20240301120000\r"
    "P|1||PAT-1\r"
    "O|1|S0001||^^^GLU\\^^^UREA|R\r"
    "R|1|^^^GLU|95|mg/dL|70^110|N||F||tech01||20240301121500\r"
    "C|1|I|rerun requested|G\r"
    "R|2|^^^UREA|50|mg/dL|15^45|H||F||tech01||20240301121600\r"
    "L|1|N\r"
)


def test_parse_sample_message():
    msg = parse_message(SAMPLE)
    assert [r.type for r in msg.records] == list("HPORCRL")
    o = msg.records[2]
    assert o.sample_id == "S0001" and o.tests == ("GLU", "UREA")
    results = extract_results(msg, "DEV-1")
    assert [(r.machine_test_code, r.value, r.ref_range_raw, r.abnormal_flag) for r in results] == [
        ("GLU", "95", "70^110", "N"), ("UREA", "50", "15^45", "H")]
    assert results[0].notes == ("rerun requested",)
    assert results[0].observed_at == datetime(2024, 3, 1, 12, 15)
    assert results[0].operator_id == "tech01"
    assert serialize_message(msg) == SAMPLE.encode()
    assert count_results(msg) == 2


@given(st.text(alphabet="ab|\\^&E F R S", max_size=30))
def test_escape_round_trip(s):
    assert unescape(escape(s)) == s


def test_unknown_escape_passes_through():
    assert unescape("a&X&b") == "a&X&b"
    assert unescape("&F&&S&&R&&E&") == "|^\\&"


@given(st.randoms(use_true_random=False))
def test_message_round_trips(rng):
    msg = random_astm_message(rng)
    wire = serialize_message(msg)
    again = parse_message(wire)
    assert again == msg                       # parse . serialize
    assert serialize_message(again) == wire   # serialize . parse


def test_custom_delimiters_from_header():
    text = "H!@#$\rP!1\rO!1!S9!!###1@###2\rL!1\r"
    msg = parse_message(text)
    assert msg.delimiters == Delimiters("!", "@", "#", "$")
    assert msg.records[2].tests == ("1", "2")
    assert serialize_message(msg) == text.encode()


@pytest.mark.parametrize("text,kind", [
    ("P|1\rL|1\r", "missing_header"),
    ("H|\\^&\rP|1\r", "missing_terminator"),
    ("H|\\^&\rR|1|^^^A|1\rL|1\r", "hierarchy_violation"),
    ("H|\\^&\rP|1\rO|1|S\rQ|1\rL|1\r", "hierarchy_violation"),
    ("H|\\^&\rP|2\rL|1\r", "hierarchy_violation"),
    ("H|\\^&\rP|1\rO|1|S\rR|1|^^^A|1\rR|3|^^^B|2\rL|1\r", "hierarchy_violation"),
    ("H|\\^&\rX|1\rL|1\r", "unknown_record_type"),
    ("H|\\^&\rL|1\rP|1\r", "missing_terminator"),
])
def test_hierarchy_errors(text, kind):
    with pytest.raises(AstmParseError) as ei:
        parse_message(text)
    assert ei.value.kind == kind


def test_sequence_restarts_under_new_parent():
    parse_message("H|\\^&\rP|1\rO|1|A\rR|1|^^^X|1\rO|2|B\rR|1|^^^Y|2\rP|2\rO|1|C\rL|1\r")


def test_orphan_result_yields_error_item():
    msg = parse_message("H|\\^&\rP|1\rO|1|\rR|1|^^^X|1\rL|1\r")
    items = list(iter_results(msg, "D"))
    assert isinstance(items[0], OrphanResult)
    with pytest.raises(AstmParseError):
        extract_results(msg, "D")


def test_is_complete_message():
    assert is_complete_message(b"H|\\^&\rL|1\r")
    assert not is_complete_message(b"H|\\^&\rP|1\r")
    assert not is_complete_message(b"H|\\^&\rL|1")


def test_field_codec_shapes():
    assert decode_field("a^b\\c") == Repeats((("a", "b"), "c"))
    assert encode_field(decode_field("a^b\\c")) == "a^b\\c"
    assert decode_field("a&S&b") == "a^b"
    assert Result("R", (("x",),)).fields == ("x",)      # 1-tuples collapse


def test_class_layouts_move_fields():
    class_a = BUILTIN["FMT-CLASSA-02"].layout
    class_b = BUILTIN["FMT-CLASSB-03"].layout
    a = parse_message("H|\\^&\rP|1\rO|1||S77|^^^GLU\rR|1|GLU|5\rL|1\r", layout=class_a)
    assert a.records[2].sample_id == "S77"
    assert extract_results(a, "D")[0].machine_test_code == "GLU"
    b = parse_message("H|\\^&\rP|1\rO|1|RACK^S88\rR|1|X^GLU|5\rL|1\r", layout=class_b)
    assert extract_results(b, "D")[0].sample_id == "S88"
    assert extract_results(b, "D")[0].machine_test_code == "GLU"


def test_order_message_round_trip():
    order = WorklistOrder("S0042", ("GLU", "CREA"), Priority.STAT, "PAT-9")
    msg = build_order_message(order, sender_name="GW")
    wire = serialize_message(msg)
    assert wire.startswith(b"H|\\^&|||GW")
    back = parse_message(wire)
    assert orders_in(back) == [WorklistOrder("S0042", ("GLU", "CREA"), Priority.STAT)]


@pytest.mark.parametrize("fmt", ["FMT-CLASSA-02", "FMT-CLASSB-03"])
def test_order_message_in_class_layout(fmt):
    layout = BUILTIN[fmt].layout
    msg = build_order_message(WorklistOrder("S1", ("GLU",)), layout=layout)
    back = parse_message(serialize_message(msg), layout=layout)
    assert orders_in(back)[0].sample_id == "S1"


def test_query_and_no_order():
    q = parse_message(serialize_message(build_query_message("S0007")))
    assert q.is_query and q.records[1].sample_id == "S0007"
    no = parse_message(serialize_message(build_no_order_message()))
    assert orders_in(no) == [] and no.records[-1].code == "I"


def test_header_record_round_trip():
    h = parse_record("H|\\^&|||X^1|||||||P|1")
    assert isinstance(h, Header) and h.delimiters == DEFAULT_DELIMITERS
    assert serialize_record(h) == "H|\\^&|||X^1|||||||P|1"
