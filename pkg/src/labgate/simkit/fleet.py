"""Fleet fixtures: m facilities x n instruments, scripts and the expected ledger.

The expected ledger is built directly from the generated results (value times
conversion factor, in send order) without going through any gateway code.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

from ..formats import BUILTIN
from ..registry import CommSettings, DeviceProfile, Registry, TestParameterMapping, UserRecord
from .analyzer import SimProfile
from .script import SimScript


@dataclass(frozen=True)
class TestDef:
    code: str
    test_id: str
    unit: str
    low: float
    high: float
    canonical_unit: Optional[str] = None
    factor: str = "1"
    decimals: int = 1
    choices: tuple = ()             # non-numeric results

    __test__ = False


CHEMISTRY = (
    TestDef("GLU", "T-GLU-SER", "mg/dL", 70, 110, "mmol/L", "0.0555", 0),
    TestDef("UREA", "T-UREA-SER", "mg/dL", 15, 45, None, "1", 0),
    TestDef("CREA", "T-CREA-SER", "mg/dL", 0.6, 1.3, "umol/L", "88.4", 2),
    TestDef("ALT", "T-ALT-SER", "U/L", 7, 56, None, "1", 0),
    TestDef("CHOL", "T-CHOL-SER", "mg/dL", 120, 200, "mmol/L", "0.02586", 0),
)
HEMATOLOGY = (
    TestDef("WBC", "T-WBC-BLD", "10^3/uL", 4, 11, None, "1", 1),
    TestDef("RBC", "T-RBC-BLD", "10^6/uL", 4.2, 5.9, None, "1", 2),
    TestDef("HGB", "T-HGB-BLD", "g/dL", 12, 17, "g/L", "10", 1),
    TestDef("PLT", "T-PLT-BLD", "10^3/uL", 150, 400, None, "1", 0),
)
IMMUNO = (
    TestDef("ABO", "T-ABO-BLD", "", 0, 0, choices=("A", "B", "AB", "O")),
    TestDef("RHD", "T-RHD-BLD", "", 0, 0, choices=("POS", "NEG")),
    TestDef("IGG", "T-IGG-SER", "mg/dL", 700, 1600, "g/L", "0.01", 0),
)


@dataclass(frozen=True)
class RosterEntry:
    model: str
    protocol: str            # astm | hl7 | generic | file_only
    mode: str
    format_id: str
    tests: tuple
    sim_layout: str = "default"


ROSTER = (
    RosterEntry("AU2700", "astm", "bidirectional", "FMT-ASTM-01", CHEMISTRY),
    RosterEntry("COBAS6000", "astm", "bidirectional", "FMT-CLASSA-02", CHEMISTRY, "class_a"),
    RosterEntry("AU600", "astm", "unidirectional", "FMT-ASTM-01", CHEMISTRY),
    RosterEntry("XP100", "generic", "unidirectional", "FMT-GEN-CLASSA", HEMATOLOGY),
    RosterEntry("QWALYS", "file_only", "unidirectional", "FMT-UPL-01", IMMUNO),
    RosterEntry("LH750", "hl7", "unidirectional", "FMT-HL7-ORU", HEMATOLOGY),
    RosterEntry("PENTRA", "astm", "unidirectional", "FMT-CLASSB-03", HEMATOLOGY, "class_b"),
    RosterEntry("MEDONIC", "generic", "unidirectional", "FMT-GEN-CLASSB", HEMATOLOGY),
)


@dataclass(frozen=True)
class FleetTopology:
    facilities: int = 1
    devices_per_facility: int = 1
    total_results: int = 100
    # share of each roster model; the default cycles through the roster
    protocol_mix: Optional[dict] = None
    tests_per_sample: tuple = (1, 4)
    query_fraction: float = 0.25          # samples on bidirectional devices that are queried first
    file_batch: int = 25                  # samples per result file
    operator_id: str = "tech01"
    base_port: int = 47000
    host: str = "127.0.0.1"

    def __post_init__(self):
        if self.facilities < 1 or self.devices_per_facility < 1:
            raise ValueError("need at least one facility and one device per facility")
        if self.total_results < 1:
            raise ValueError("total_results must be >= 1")


@dataclass
class DevicePlan:
    profile: DeviceProfile
    sim: SimProfile
    script: SimScript
    results: int = 0
    queries: int = 0


@dataclass
class FleetFixture:
    registry: Registry
    devices: list = field(default_factory=list)          # DevicePlan
    expected: list = field(default_factory=list)         # (device_id, sample_id, test_id, value) in send order
    worklist: list = field(default_factory=list)         # orders to seed into the HIS

    def expected_by_device(self) -> dict:
        out: dict = {}
        for row in self.expected:
            out.setdefault(row[0], []).append(row)
        return out


def _pick_models(topo: FleetTopology, rng: random.Random) -> list[RosterEntry]:
    n = topo.facilities * topo.devices_per_facility
    if not topo.protocol_mix:
        return [ROSTER[i % len(ROSTER)] for i in range(n)]
    by_name = {r.model: r for r in ROSTER}
    names, weights = zip(*sorted(topo.protocol_mix.items()))
    return [by_name[x] for x in rng.choices(names, weights, k=n)]


def _value(t: TestDef, rng: random.Random) -> tuple[str, Optional[str]]:
    """Raw value text and abnormal flag."""
    if t.choices:
        return rng.choice(t.choices), None
    span = t.high - t.low
    x = rng.uniform(t.low - 0.2 * span, t.high + 0.2 * span)
    text = f"{max(x, 0):.{t.decimals}f}"
    v = float(text)
    flag = "H" if v > t.high else "L" if v < t.low else "N"
    return text, flag


def _ref(t: TestDef, style: str) -> str:
    if t.choices:
        return ""
    lo, hi = f"{t.low:g}", f"{t.high:g}"
    return {"astm": f"{lo}^{hi}", "hl7": f"{lo}-{hi}", "file": f"{lo} to {hi}"}.get(style, "")


def expected_value(raw: str, t: TestDef):
    try:
        d = Decimal(raw)
    except ArithmeticError:
        return raw
    if not d.is_finite():
        return raw
    factor = Decimal(t.factor)
    return d if factor == 1 else d * factor


def generate_fleet(topo: FleetTopology, seed: int = 0) -> FleetFixture:
    rng = random.Random(seed)
    models = _pick_models(topo, rng)
    n_dev = len(models)
    quotas = [topo.total_results // n_dev + (1 if i < topo.total_results % n_dev else 0) for i in range(n_dev)]
    devices, mappings, expected, worklist = [], [], [], []
    for idx, (model, quota) in enumerate(zip(models, quotas)):
        fac = idx // topo.devices_per_facility + 1
        device_id = f"F{fac}-{model.model}-{idx % topo.devices_per_facility + 1}"
        endpoint = None if model.protocol == "file_only" else f"{topo.host}:{topo.base_port + idx}"
        profile = DeviceProfile(device_id, f"{model.model} at facility {fac}", model.protocol, model.mode,
                                model.format_id, endpoint, CommSettings(), f"FAC-{fac}")
        for t in model.tests:
            mappings.append(TestParameterMapping(device_id, t.code, t.test_id, t.canonical_unit, Decimal(t.factor)))
        kind = {"astm": "astm", "hl7": "hl7", "generic": "generic", "file_only": "file"}[model.protocol]
        fmt = BUILTIN[model.format_id].source.get("frame") if kind == "generic" else None
        sim = SimProfile(kind, device_id, model.sim_layout, fmt, topo.operator_id)
        script = SimScript()
        plan = DevicePlan(profile, sim, script)
        style = {"astm": "astm", "hl7": "hl7", "file": "file"}.get(kind, "")
        sample_no = 0
        remaining = quota
        file_samples: list = []
        while remaining > 0:
            sample_no += 1
            sample_id = f"S{idx:02d}{sample_no:05d}"
            k = min(remaining, rng.randint(*topo.tests_per_sample), len(model.tests))
            tests = rng.sample(model.tests, k)
            remaining -= k
            results = []
            for t in tests:
                value, flag = _value(t, rng)
                minute = (sample_no * 7 + len(results)) % 60
                results.append({
                    "code": t.code, "value": value, "unit": t.unit or "", "flag": flag,
                    "ref": _ref(t, style), "operator": topo.operator_id,
                    "completed": f"20240301{8 + sample_no // 60 % 10:02d}{minute:02d}00",
                })
                expected.append((device_id, sample_id, t.test_id, expected_value(value, t)))
            if model.mode == "bidirectional" and rng.random() < topo.query_fraction:
                codes = [t.code for t in tests]
                worklist.append({"sample_id": sample_id, "tests": codes, "priority": "routine",
                                 "patient_ref": f"PAT-{idx:02d}-{sample_no}"})
                script.add("query", sample_id=sample_id, expect_tests=codes)
                plan.queries += 1
            if kind == "file":
                file_samples.append({"sample_id": sample_id, "results": results})
                if len(file_samples) >= topo.file_batch:
                    script.add("send_message", samples=file_samples)
                    file_samples = []
            else:
                script.add("send_message", sample_id=sample_id, results=results)
            plan.results += k
        if file_samples:
            script.add("send_message", samples=file_samples)
        devices.append(plan)
    users = [UserRecord(topo.operator_id, "Lab technician", "technician")]
    registry = Registry([p.profile for p in devices], mappings, users)
    return FleetFixture(registry, devices, expected, worklist)
