import json
from datetime import datetime
from decimal import Decimal

import httpx
import pytest
from hypothesis import given, strategies as st

from labgate.astm.transport import Frame, Terminator, encode_frame
from labgate.model import ObservationResult
from labgate.simkit.analyzer import astm_frame, generic_frame, parse_astm_frame, SimProfile, run_analyzer
from labgate.simkit.fleet import FleetTopology, generate_fleet, CHEMISTRY, expected_value
from labgate.simkit.his_stub import FaultProfile, HisStub
from labgate.simkit.script import SimScript
from labgate.uploader.wire import UploadEnvelope, dumps, observation_to_wire

from generators import frame_text


def test_fleet_is_deterministic_per_seed():
    topo = FleetTopology(facilities=3, devices_per_facility=4, total_results=500)
    a, b = generate_fleet(topo, seed=5), generate_fleet(topo, seed=5)
    assert a.expected == b.expected and a.worklist == b.worklist
    assert [p.script.dumps() for p in a.devices] == [p.script.dumps() for p in b.devices]
    assert generate_fleet(topo, seed=6).expected != a.expected


def test_fleet_shape():
    fx = generate_fleet(FleetTopology(facilities=3, devices_per_facility=4, total_results=4000), seed=1)
    assert len(fx.devices) == 12 and len(fx.expected) == 4000
    endpoints = [p.profile.listen_endpoint for p in fx.devices if p.profile.listen_endpoint]
    assert len(endpoints) == len(set(endpoints))
    assert {p.profile.facility_id for p in fx.devices} == {"FAC-1", "FAC-2", "FAC-3"}
    assert len({p.profile.protocol for p in fx.devices}) >= 3
    assert sum(p.results for p in fx.devices) == 4000
    # every expected row has a mapping, every worklist sample is queried by exactly one script step
    for dev, sample, test_id, _ in fx.expected:
        assert any(m.test_id == test_id for (d, _c), m in fx.registry.mappings.items() if d == dev)
    queried = [s["sample_id"] for p in fx.devices for s in p.script.steps if s["step"] == "query"]
    assert sorted(queried) == sorted(o["sample_id"] for o in fx.worklist)


def test_expected_value_oracle():
    glu = CHEMISTRY[0]
    assert expected_value("95", glu) == Decimal("5.2725")
    assert expected_value("100", CHEMISTRY[1]) == Decimal("100")


def test_script_round_trip(tmp_path):
    s = (SimScript().add("send_control", byte="ENQ").add("expect_control", byte="ACK", timeout_ms=100)
         .add("fault", kind="corrupt_next_frame", count=2).add("send_frame", frame_number=1, text="H|\\^&\r"))
    p = tmp_path / "s.jsonl"
    s.save(p)
    assert SimScript.load(p).steps == s.steps
    assert SimScript.loads("# comment\n\n" + s.dumps()).steps == s.steps
    with pytest.raises(ValueError, match="unknown step"):
        SimScript.of([{"step": "dance"}])
    with pytest.raises(ValueError, match="line 2"):
        SimScript.loads('{"step": "pause"}\n{not json\n')


@given(st.randoms(use_true_random=False), st.booleans(), st.integers(0, 7))
def test_simulator_framing_agrees_with_library(rnd, last, number):
    # the simulator has its own frame code; both sides must agree byte for byte
    text = frame_text(rnd)
    sim = astm_frame(number, text, last)
    lib = encode_frame(Frame(number, text, Terminator.FINAL if last else Terminator.INTERMEDIATE))
    assert sim == lib
    assert parse_astm_frame(sim) == (number, text, last)


def test_generic_frame_bcc_oracle():
    fmt = {"field_order": ["sample_id", "test_code", "value"], "field_separator": 59, "has_bcc": True,
           "bcc_kind": "xor"}
    f = generic_frame({"sample_id": "S1", "test_code": "WBC", "value": "7.5"}, fmt)
    assert f == b"\x02S1;WBC;7.5\x03" + bytes((0x18,))
    f = generic_frame({"sample_id": "S1", "test_code": "WBC", "value": "7.5"}, dict(fmt, bcc_kind="sum_mod_256"))
    assert f[-1] == sum(b"S1;WBC;7.5") % 256


def _body(seq=1, **over):
    o = observation_to_wire(ObservationResult("GW", "D", "S", "T", "X", Decimal(1), datetime(2024, 1, 1), seq))
    body = UploadEnvelope("GW", "D", (o,)).to_body()
    body.update(over)
    return body


def test_his_stub_validation_and_idempotency():
    with HisStub() as his:
        post = lambda b: httpx.post(his.url + "/api/v1/results", content=dumps(b))
        r = post(_body())
        assert r.status_code == 200 and r.json() == {"accepted": 1, "duplicates": 0}
        assert post(_body()).json() == {"accepted": 0, "duplicates": 1}
        assert post(_body(idempotency_key="GW:D:9-9")).status_code == 400
        assert post(_body(schema_version=2)).status_code == 400
        bad = _body()
        del bad["observations"][0]["unit"]
        assert post(bad).status_code == 400
        assert httpx.get(his.url + "/api/v1/worklist/none").status_code == 404
        assert his.ledger.count() == 1 and his.ledger.duplicates == 1


def test_his_stub_faults_are_seeded():
    def run(seed):
        with HisStub(faults=FaultProfile(drop_rate=0.3, ack_loss_rate=0.3), seed=seed) as his:
            codes = []
            for i in range(1, 30):
                try:
                    codes.append(httpx.post(his.url + "/api/v1/results", content=dumps(_body(i))).status_code)
                except httpx.HTTPError:
                    codes.append(None)
            return codes, his.ledger.count(), his.dropped, his.acks_lost
    a = run(4)
    assert a == run(4)
    codes, count, dropped, lost = a
    assert dropped and lost
    assert count == 29 - dropped and codes.count(None) == dropped + lost


def test_his_stub_rejects_devices():
    with HisStub(faults=FaultProfile(reject_devices=frozenset({"D"}))) as his:
        assert httpx.post(his.url + "/api/v1/results", content=dumps(_body())).status_code == 400
        assert his.ledger.count() == 0


def test_file_sim_transcript_is_deterministic():
    calls = []

    def ingest(content):
        calls.append(content)
        return {"accepted": 1}

    script = SimScript().add("send_message", samples=[{"sample_id": "S1", "results": [{"code": "ABO", "value": "A"}]}])
    r1 = run_analyzer(SimProfile("file", "F"), "", script, 3, ingest=ingest)
    r2 = run_analyzer(SimProfile("file", "F"), "", script, 3, ingest=ingest)
    assert calls[0] == calls[1] and r1.acks == r2.acks == [{"accepted": 1}]
    strip = lambda r: [{k: v for k, v in json.loads(l).items() if k != "t"} for l in r.transcript.lines()]
    assert strip(r1) == strip(r2)
