import json
import socket
import time
from decimal import Decimal

import pytest

from labgate.astm.transport import Timers
from labgate.simkit.analyzer import hl7_oru
from labgate.simkit.script import SimScript
from labgate.simkit.his_stub import FaultProfile

from lab import (
    RESULTS, Lab, ack_per_frame_script, contention_script, corruption_script, timer_abort_script,
)


def msg_script(sample="S1", results=RESULTS, **kw):
    return SimScript().add("send_message", sample_id=sample, results=results, **kw)


def values(ledger):
    return [(o["device_id"], o["sample_id"], o["test_id"], o["value"]) for o in ledger]


@pytest.mark.parametrize("fmt", ["FMT-ASTM-01", "FMT-CLASSA-02", "FMT-CLASSB-03", "FMT-HL7-ORU",
                                 "FMT-GEN-CLASSA", "FMT-GEN-CLASSB"])
def test_each_protocol_reaches_the_his(tmp_path, fmt):
    with Lab(tmp_path, {"D1": (fmt, "unidirectional")}) as lab:
        res = lab.sim("D1", msg_script())
        assert res.error is None
        ledger = lab.wait_delivered(2)
        assert values(ledger) == [("D1", "S1", "T-GLU", Decimal("5.2725")), ("D1", "S1", "T-NA", 140)]
        assert [o["sequence"] for o in ledger] == [1, 2]
        st = lab.status("D1")
        assert st["counters"]["results_emitted"] == 2 and st["delivered"] == 2


def test_astm_ack_per_frame_byte_level(tmp_path):
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}) as lab:
        res = lab.sim("D1", ack_per_frame_script())
        assert res.error is None, res.transcript.lines()
        assert len(lab.wait_delivered(2)) == 2


def test_astm_six_corruptions_then_recovery(tmp_path):
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}) as lab:
        res = lab.sim("D1", corruption_script(6))
        assert res.error is None, res.transcript.lines()
        assert len(lab.wait_delivered(1)) == 1
        c = lab.status("D1")["counters"]
        assert (c["frames_nak"], c["frames_ok"], c["results_emitted"]) == (6, 1, 1)


def test_astm_sim_with_random_corruption_and_drops(tmp_path):
    from labgate.simkit.analyzer import SimFaults
    script = SimScript()
    for s in range(30):
        script.add("send_message", sample_id=f"S{s}", results=RESULTS)
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}) as lab:
        res = lab.sim("D1", script, faults=SimFaults(frame_corruption=0.2, connection_drop=0.2), seed=1)
        assert res.error is None
        assert res.stats["naks"] > 0 and res.stats["drops"] > 0
        ledger = lab.wait_delivered(60)
        got = [(o["sample_id"], o["test_id"]) for o in sorted(ledger, key=lambda o: o["sequence"])]
        assert got == [(f"S{s}", t) for s in range(30) for t in ("T-GLU", "T-NA")]


def test_astm_receive_timer_aborts_partial_message(tmp_path):
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}, receive_ms=300) as lab:
        res = lab.sim("D1", timer_abort_script())
        assert res.error is None, res.transcript.lines()
        st = lab.status("D1")
        assert st["counters"]["aborts"] == 1 and st["counters"]["results_emitted"] == 0


def test_astm_query_contention_yields_to_instrument(tmp_path):
    worklist = [{"sample_id": "S1", "tests": ["T-GLU", "T-NA"]}]
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "bidirectional")}, worklist=worklist,
             timers=Timers(backoff=0.3)) as lab:
        res = lab.sim("D1", contention_script("S1"))
        assert res.error is None, res.transcript.lines()
        # the HIS names canonical test ids; the instrument gets its own codes
        assert res.orders[0][0]["tests"] == ["GLU", "NA"]
        assert len(lab.wait_delivered(1)) == 1
        c = lab.status("D1")["counters"]
        assert (c["orders_sent"], c["queries"]) == (1, 1)


def test_query_no_order_reply(tmp_path):
    script = SimScript().add("query", sample_id="NOPE", expect_tests=None)
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "bidirectional")}) as lab:
        res = lab.sim("D1", script)
        assert res.error is None and res.orders == [[]]
        assert lab.status("D1")["counters"]["no_order_replies"] == 1


def test_query_when_his_is_down_gets_no_order(tmp_path):
    script = SimScript().add("query", sample_id="S1", expect_tests=None)
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "bidirectional")}, his=False) as lab:
        res = lab.sim("D1", script)
        assert res.error is None and res.orders == [[]]
        assert lab.status("D1")["counters"]["his_unreachable"] == 1


def test_second_connection_is_refused(tmp_path):
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}) as lab:
        host, _, port = lab.endpoint("D1").rpartition(":")
        first = socket.create_connection((host, int(port)))
        time.sleep(0.2)
        second = socket.create_connection((host, int(port)))
        second.settimeout(2)
        assert second.recv(10) == b""
        st = lab.status("D1")
        assert st["refused_connections"] == 1 and st["session_active"]
        first.close()
        second.close()


def test_bind_failure_is_reported(tmp_path):
    from labgate.simkit.harness import free_port_block
    port = free_port_block(2)
    blocker = socket.socket()
    blocker.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    blocker.bind(("127.0.0.1", port))
    blocker.listen()
    try:
        devices = {"A": ("FMT-ASTM-01", "unidirectional"), "B": ("FMT-HL7-ORU", "unidirectional")}
        with Lab(tmp_path, devices, base_port=port) as lab:
            st = lab.status()
            assert st["bind_failures"] == 1 and st["listeners_live"] == 1
            assert st["devices"]["A"]["listener"] == "bind_failure"
            assert st["devices"]["A"]["listener_error"]
            # the other device is unaffected
            assert lab.sim("B", msg_script()).error is None
    finally:
        blocker.close()


def test_hl7_unmapped_code_is_dead_lettered_and_acked(tmp_path):
    results = [{"code": "ZZZ", "value": "1"}, {"code": "GLU", "value": "90"}]
    with Lab(tmp_path, {"H": ("FMT-HL7-ORU", "unidirectional")}) as lab:
        res = lab.sim("H", msg_script(results=results))
        assert res.acks == ["AA"]
        assert len(lab.wait_delivered(1)) == 1
        st = lab.status("H")
        assert st["dead_letters"] == 1 and st["counters"]["dead_lettered"] == 1
        out = tmp_path / "dl.jsonl"
        assert lab.gateway.call(lab.gateway.service.export_deadletters, out) == 1
        letter = json.loads(out.read_text())
        assert letter["reason"] == "unmapped_test_code" and letter["device_id"] == "H"
        assert lab.gateway.call(lab.gateway.service.export_deadletters, out) == 0
        assert out.read_text() == ""


def test_hl7_wrong_type_and_garbage(tmp_path):
    oru = hl7_oru("C1", "S1", RESULTS).decode("latin-1")
    adt = oru.replace("ORU^R01", "ADT^A01")
    script = (SimScript().add("send_message", raw=adt, expect_ack="AR")
              .add("send_message", raw="garbage", expect_ack="AR")
              .add("send_message", sample_id="S1", results=RESULTS, expect_ack="AA"))
    with Lab(tmp_path, {"H": ("FMT-HL7-ORU", "unidirectional")}) as lab:
        res = lab.sim("H", script)
        assert res.error is None and res.acks == ["AR", "AR", "AA"]


def test_retransmitted_message_after_reconnect_is_not_duplicated(tmp_path):
    # the same message opens the next session: the instrument never saw the final ACK
    script = (msg_script("S1").add("fault", kind="disconnect").add("connect")
              .add("send_message", sample_id="S1", results=RESULTS))
    with Lab(tmp_path, {"D1": ("FMT-ASTM-01", "unidirectional")}) as lab:
        res = lab.sim("D1", script)
        assert res.error is None
        time.sleep(0.5)
        c = lab.status("D1")["counters"]
        assert c["results_emitted"] == 2 and c["duplicates"] == 1
        assert len(lab.wait_delivered(2)) == 2


def test_file_ingest_and_counters_conserve(tmp_path):
    from labgate.simkit.analyzer import upl_file
    content = upl_file([{"sample_id": "S1", "code": "GLU", "value": "90"},
                        {"sample_id": "S1", "code": "ZZZ", "value": "1"}]) + b"broken line\n"
    with Lab(tmp_path, {"F": ("FMT-UPL-01", "unidirectional")}) as lab:
        rep = lab.gateway.call(lab.gateway.service.ingest_file, "F", content, "tech01")
        assert (rep.accepted, rep.dead_lettered, len(rep.rejected)) == (1, 1, 1)
        assert rep.rejected[0]["line"] == 4
        again = lab.gateway.call(lab.gateway.service.ingest_file, "F", content, "tech01")
        assert again.duplicate and again.accepted == 0
        ledger = lab.wait_delivered(1)
        st = lab.status()
        c = st["devices"]["F"]["counters"]
        assert (c["results_emitted"], c["dead_lettered"], c["duplicates"], c["messages"]) == (1, 1, 1, 2)
        assert st["devices"]["F"]["delivered"] + st["devices"]["F"]["queue_depth"] == len(ledger) == 1
