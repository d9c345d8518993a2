from datetime import datetime, timezone
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from labgate.gateway.normalize import map_flag, map_status, normalize
from labgate.model import RawResult, ResultStatus, validate_observation
from labgate.registry import TestParameterMapping
from oracles import convert_oracle

WHEN = datetime(2024, 3, 1, tzinfo=timezone.utc)


def raw(value="95", **kw):
    base = dict(device_id="D1", sample_id="S1", machine_test_code="GLU", value=value, unit="mg/dL",
                ref_range_raw="70^110", abnormal_flag="N", result_status="F")
    base.update(kw)
    return RawResult(**base)


GLU = TestParameterMapping("D1", "GLU", "T-GLU-SER", "mmol/L", "0.0555")


def test_frozen_conversion():
    # 95 mg/dL * 0.0555 = 5.2725 mmol/L; range 70..110 -> 3.885..6.105
    o = normalize(raw(), GLU, "GW", 7, WHEN)
    assert o.value == Decimal("5.2725") and o.unit == "mmol/L"
    assert (o.ref_low, o.ref_high) == (Decimal("3.8850"), Decimal("6.1050"))
    assert o.test_id == "T-GLU-SER" and o.sequence == 7 and o.received_at == WHEN
    assert validate_observation(o) == []


def test_identity_mapping_keeps_text_precision():
    m = TestParameterMapping("D1", "GLU", "T-GLU")
    o = normalize(raw("95.10"), m, "GW", 1, WHEN)
    assert o.value == Decimal("95.10") and str(o.value) == "95.10" and o.unit == "mg/dL"


def test_non_numeric_value_passes_through_with_note():
    o = normalize(raw("POS", ref_range_raw=None), GLU, "GW", 1, WHEN)
    assert o.value == "POS" and o.unit == "mg/dL"
    assert any("not converted" in n for n in o.notes)


@pytest.mark.parametrize("flag,want", [("<", "L"), (">", "H"), ("hh", "HH"), ("", None), (None, None), ("Q", None)])
def test_flags(flag, want):
    assert map_flag(flag, []) == want


@pytest.mark.parametrize("code,want", [("F", ResultStatus.FINAL), ("", ResultStatus.FINAL), (None, ResultStatus.FINAL),
                                       ("C", ResultStatus.CORRECTED), ("P", ResultStatus.PRELIMINARY),
                                       ("X", ResultStatus.PRELIMINARY)])
def test_status(code, want):
    notes = []
    assert map_status(code, notes) is want
    assert bool(notes) == (code == "X")


def test_bad_range_becomes_note():
    o = normalize(raw(ref_range_raw="high"), GLU, "GW", 1, WHEN)
    assert o.ref_low is None and o.ref_high is None and o.notes


@given(value=st.decimals(0, 100000, places=3), factor=st.decimals("0.0001", 1000, places=4).filter(lambda d: d > 0))
def test_conversion_matches_oracle(value, factor):
    m = TestParameterMapping("D1", "GLU", "T", "u", factor)
    o = normalize(raw(str(value), ref_range_raw=None), m, "GW", 1, WHEN)
    assert o.value == convert_oracle(str(value), str(factor))
