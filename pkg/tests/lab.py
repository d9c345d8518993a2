"""A small gateway setup for integration tests: registry, HIS stub, gateway thread."""
import json
import logging
from dataclasses import replace
from decimal import Decimal
from pathlib import Path

from labgate.astm.transport import Timers
from labgate.formats import BUILTIN
from labgate.registry import CommSettings, DeviceProfile, Registry, TestParameterMapping, UserRecord
from labgate.simkit.analyzer import SimProfile, run_analyzer
from labgate.simkit.harness import GatewayThread, free_port_block, make_config
from labgate.simkit.his_stub import FaultProfile, HisStub

logging.getLogger("labgate").setLevel(logging.ERROR)

CODES = {"GLU": ("T-GLU", "mmol/L", "0.0555"), "NA": ("T-NA", None, "1"), "HGB": ("T-HGB", "g/L", "10")}
PROTOCOL = {"FMT-ASTM-01": "astm", "FMT-CLASSA-02": "astm", "FMT-CLASSB-03": "astm", "FMT-HL7-ORU": "hl7",
            "FMT-GEN-CLASSA": "generic", "FMT-GEN-CLASSB": "generic", "FMT-UPL-01": "file_only"}
LAYOUT = {"FMT-CLASSA-02": "class_a", "FMT-CLASSB-03": "class_b"}


def build_registry(devices: dict, base_port: int, receive_ms: int = 30000) -> Registry:
    """devices: device_id -> (format_id, mode) or (format_id, mode, file_format_id)."""
    profiles, mappings = [], []
    for i, (dev, spec) in enumerate(sorted(devices.items())):
        fmt, mode = spec[:2]
        proto = PROTOCOL[fmt]
        endpoint = None if proto == "file_only" else f"127.0.0.1:{base_port + i}"
        profiles.append(DeviceProfile(dev, dev, proto, mode, fmt, endpoint, CommSettings(timeout_ms=receive_ms),
                                      file_format_id=spec[2] if len(spec) > 2 else None))
        for code, (tid, unit, factor) in CODES.items():
            mappings.append(TestParameterMapping(dev, code, tid, unit, Decimal(factor)))
    return Registry(profiles, mappings, [UserRecord("tech01", "Tech", "technician")])


class Lab:
    def __init__(self, workdir: Path, devices: dict, faults: FaultProfile = FaultProfile(), worklist=(),
                 timers: Timers = Timers(), receive_ms: int = 30000, his: bool = True, base_port: int = None):
        self.workdir = Path(workdir)
        self.registry = build_registry(devices, base_port or free_port_block(len(devices)), receive_ms)
        self.registry_path = self.workdir / "registry.json"
        self.registry_path.write_text(json.dumps(self.registry.to_dict(), indent=2))
        self.his = HisStub(worklist=worklist, faults=faults).start() if his else None
        self.config = make_config(self.workdir, self.registry_path, self.his.url if self.his else None,
                                  timers=timers, fsync=False, flush_idle=0.05)
        self.gateway = GatewayThread(self.config).start()

    def endpoint(self, device_id: str) -> str:
        return self.registry.device(device_id).listen_endpoint

    def sim(self, device_id: str, script, seed: int = 0, **kw):
        """Run a simulator script; waits for the device's previous session to end first."""
        import time
        end = time.monotonic() + 10
        while self.status(device_id)["session_active"] and time.monotonic() < end:
            time.sleep(0.02)
        dev = self.registry.device(device_id)
        fmt = BUILTIN[dev.format_id]
        kind = {"astm": "astm", "hl7": "hl7", "generic": "generic", "file_only": "file"}[dev.protocol]
        profile = SimProfile(kind, device_id, LAYOUT.get(dev.format_id, "default"),
                             fmt.source.get("frame"), "tech01", timeout=5.0)
        return run_analyzer(profile, dev.listen_endpoint or "", script, seed, **kw)

    def status(self, device_id: str = None) -> dict:
        st = self.gateway.status()
        return st["devices"][device_id] if device_id else st

    def wait_delivered(self, n: int, timeout: float = 20.0) -> list:
        import time
        end = time.monotonic() + timeout
        while self.his.ledger.count() < n and time.monotonic() < end:
            time.sleep(0.05)
        return self.his.ledger.snapshot()

    def close(self):
        self.gateway.stop()
        if self.his:
            self.his.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------- byte-level transport scripts

RESULTS = [{"code": "GLU", "value": "95", "unit": "mg/dL", "ref": "70^110"},
           {"code": "NA", "value": "140", "unit": "mmol/L"}]


def _handshake(script, frames):
    script.add("send_control", byte="ENQ").add("expect_control", byte="ACK")
    for f in frames:
        script.add("send_raw", hex=f.hex()).add("expect_control", byte="ACK")
    return script.add("send_control", byte="EOT")


def ack_per_frame_script():
    """A two-result message sent frame by frame; every frame must be answered before the next."""
    from labgate.simkit.analyzer import astm_frames, astm_result_records
    from labgate.simkit.script import SimScript
    return _handshake(SimScript(), astm_frames(astm_result_records("S1", RESULTS))).add(
        "expect_silence", timeout_ms=200)


def corruption_script(corruptions: int = 6, sample_id: str = "S1"):
    """One frame damaged ``corruptions`` times in a row (each NAKed), then sent intact."""
    from labgate.simkit.analyzer import astm_result_records
    from labgate.simkit.script import SimScript
    text = "".join(r + "\r" for r in astm_result_records(sample_id, RESULTS[:1]))
    script = SimScript().add("send_control", byte="ENQ").add("expect_control", byte="ACK")
    script.add("fault", kind="corrupt_next_frame", count=corruptions)
    for _ in range(corruptions):
        script.add("send_frame", frame_number=1, text=text).add("expect_control", byte="NAK")
    script.add("send_frame", frame_number=1, text=text).add("expect_control", byte="ACK")
    return script.add("send_control", byte="EOT")


def timer_abort_script(pause_ms: int = 600):
    """An intermediate frame, then silence past the receive timer; a later frame gets no answer."""
    from labgate.simkit.analyzer import astm_result_records
    from labgate.simkit.script import SimScript
    text = "".join(r + "\r" for r in astm_result_records("S1", RESULTS[:1]))
    return (SimScript().add("send_control", byte="ENQ").add("expect_control", byte="ACK")
            .add("send_frame", frame_number=1, text=text[:10], terminator="ETB").add("expect_control", byte="ACK")
            .add("pause", ms=pause_ms)
            .add("send_frame", frame_number=2, text=text[10:]).add("expect_silence", timeout_ms=300))


def contention_script(sample_id: str = "S1"):
    """Query, then bid for the line at the moment the gateway bids to send the order."""
    from labgate.simkit.analyzer import astm_frames, astm_query_records, astm_result_records
    from labgate.simkit.script import SimScript
    script = _handshake(SimScript(), astm_frames(astm_query_records(sample_id)))
    script.add("expect_control", byte="ENQ", timeout_ms=5000)
    # the instrument wins the contention and sends its own message first
    _handshake(script, astm_frames(astm_result_records("S2", RESULTS[:1])))
    # after its backoff the gateway bids again and the download goes through
    return script.add("expect_order", sample_id=sample_id, timeout_ms=5000)
