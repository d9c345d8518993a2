"""Command line: ``labgate <command>``.

Exit codes: 0 success, 1 operation failed, 2 configuration error,
3 ingest finished with rejected lines.
"""
from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Optional

from .config import ConfigError, GatewayConfig, load_config
from .control import ControlClient, ControlError, GatewayNotRunning
from .framing import FramingError
from .registry import (
    CommSettings, DeviceProfile, RegistryError, RegistryStore, TestParameterMapping, UserRecord,
)

log = logging.getLogger("labgate")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_REJECTED = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _config(args) -> GatewayConfig:
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None


def _store(cfg: GatewayConfig, create: bool = False) -> RegistryStore:
    try:
        return RegistryStore(cfg.registry, create=create)
    except FileNotFoundError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None
    except RegistryError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None


def audit(cfg: GatewayConfig, operator: str, command: str, **details) -> None:
    path = cfg.audit_log or (cfg.data_dir / "audit.log")
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps({"ts": datetime.now(timezone.utc).isoformat(), "operator": operator,
                       "command": command, **details}, sort_keys=True, default=str)
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _operator(args) -> str:
    return args.operator or os.environ.get("GMEI_OPERATOR") or getpass.getuser()


def _print_table(rows: list[list[str]], header: list[str]) -> None:
    widths = [max(len(str(r[i])) for r in rows + [header]) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg = _config(args)
    _store(cfg)  # fail fast with exit 2 on a missing or invalid registry
    from .gateway.service import run_gateway
    try:
        run_gateway(cfg)
    except RegistryError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from None
    return EXIT_OK


def cmd_device(args) -> int:
    cfg = _config(args)
    store = _store(cfg)
    if args.action == "list":
        reg = store.snapshot()
        rows = [[d.device_id, d.protocol, d.mode, d.format_id, d.listen_endpoint or "-",
                 "yes" if d.enabled else "no"] for d in reg.devices.values()]
        if args.json:
            print(json.dumps([d.to_dict() for d in reg.devices.values()], indent=2))
        else:
            _print_table(rows, ["device_id", "protocol", "mode", "format_id", "endpoint", "enabled"])
        return EXIT_OK
    operator = _operator(args)
    if args.action == "add":
        profile = DeviceProfile(
            device_id=args.device_id, display_name=args.name or args.device_id, protocol=args.protocol,
            mode=args.mode, format_id=args.format_id, listen_endpoint=args.endpoint,
            comm_settings=CommSettings(), facility_id=args.facility or "", enabled=not args.disabled,
            file_format_id=args.file_format)
        store.register_device(profile)
        audit(cfg, operator, "device add", device=profile.to_dict())
        print(f"registered {args.device_id}")
    elif args.action == "set-format":
        msg = store.update_format(args.device_id, args.format_id)
        audit(cfg, operator, "device set-format", device_id=args.device_id, format_id=args.format_id)
        print(msg)
    return EXIT_OK


def cmd_mapping(args) -> int:
    cfg = _config(args)
    store = _store(cfg)
    if args.action == "list":
        rows = [[m.device_id, m.machine_test_code, m.test_id, m.canonical_unit or "-", str(m.conversion_factor)]
                for m in store.snapshot().mappings.values()]
        _print_table(rows, ["device_id", "code", "test_id", "unit", "factor"])
        return EXIT_OK
    try:
        factor = Decimal(args.factor)
    except InvalidOperation:
        raise CliError(f"invalid factor {args.factor!r}") from None
    m = TestParameterMapping(args.device_id, args.code, args.test_id, args.unit, factor)
    store.add_mapping(m)
    audit(cfg, _operator(args), "mapping add", mapping=m.to_dict())
    print(f"mapped {args.device_id}/{args.code} -> {args.test_id}")
    return EXIT_OK


def cmd_user(args) -> int:
    cfg = _config(args)
    store = _store(cfg)
    if args.action == "list":
        rows = [[u.operator_id, u.display_name, u.role] for u in store.snapshot().users.values()]
        _print_table(rows, ["operator_id", "name", "role"])
        return EXIT_OK
    u = UserRecord(args.operator_id, args.name or "", args.role)
    store.add_user(u)
    audit(cfg, _operator(args), "user add", operator_id=u.operator_id, role=u.role)
    print(f"added user {u.operator_id}")
    return EXIT_OK


def _offline_ingest(cfg: GatewayConfig, device_id: str, content: bytes, operator: str) -> dict:
    from .gateway.pipeline import Pipeline
    from .gateway.service import ingest_into
    from .uploader.queue import DurableQueue, QueueLocked

    store = _store(cfg)
    try:
        queue = DurableQueue(cfg.queue_dir, cfg.gateway_id, fsync=cfg.uploader.fsync,
                             batch_max=cfg.uploader.batch_max)
    except QueueLocked as exc:
        raise CliError(f"{exc}; is the control endpoint {cfg.control_endpoint} reachable?") from None
    try:
        return ingest_into(store.snapshot(), Pipeline(cfg.gateway_id, queue), device_id, content,
                           operator).to_dict()
    finally:
        queue.close()


def cmd_ingest(args) -> int:
    cfg = _config(args)
    path = Path(args.file)
    try:
        content = path.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    try:
        try:
            report = ControlClient(cfg.control_endpoint).ingest(args.device, content, args.operator)
        except GatewayNotRunning:
            log.info("gateway not running, ingesting into the local queue")
            report = _offline_ingest(cfg, args.device, content, args.operator)
    except ControlError as exc:
        raise CliError(str(exc)) from None
    except (RegistryError, FramingError) as exc:
        raise CliError(str(exc)) from None
    audit(cfg, args.operator, "ingest", device_id=args.device, file=str(path.resolve()),
          accepted=report["accepted"], rejected=len(report["rejected"]), duplicate=report["duplicate"])
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        if report["duplicate"]:
            print(f"{path.name}: already ingested, nothing enqueued")
        print(f"accepted {report['accepted']}, rejected {len(report['rejected'])}"
              + (f", dead-lettered {report['dead_lettered']}" if report["dead_lettered"] else ""))
        for r in report["rejected"]:
            print(f"  line {r['line']}: {r['reason']}")
    return EXIT_REJECTED if report["rejected"] else EXIT_OK


def render_status(status: dict) -> str:
    lines = [f"gateway {status['gateway_id']}  uptime {status['uptime_s']:.0f}s  "
             f"listeners {status['listeners_live']}  bind failures {status['bind_failures']}"]
    rows = []
    for dev, d in status["devices"].items():
        c = d["counters"]
        rows.append([dev, d["listener"], str(c["frames_ok"]), str(c["frames_nak"]), str(c["results_emitted"]),
                     str(d["dead_letters"]), str(d["queue_depth"]), str(d["delivered"]), d["last_delivery"] or "-"])
    header = ["device", "listener", "frames_ok", "nak", "results", "dead", "queued", "delivered", "last_delivery"]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    for r in [header] + rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def cmd_status(args) -> int:
    cfg = _config(args)
    try:
        status = ControlClient(cfg.control_endpoint, timeout=10).status()
    except GatewayNotRunning:
        raise CliError(f"gateway_not_running: nothing answers on {cfg.control_endpoint}") from None
    print(json.dumps(status, indent=2, sort_keys=True) if args.json else render_status(status))
    return EXIT_OK


def cmd_deadletters(args) -> int:
    cfg = _config(args)
    try:
        res = ControlClient(cfg.control_endpoint).export_deadletters(args.export)
    except GatewayNotRunning:
        from .gateway.service import export_dead_letters
        from .uploader.queue import DurableQueue, QueueLocked
        try:
            queue = DurableQueue(cfg.queue_dir, cfg.gateway_id)
        except QueueLocked as exc:
            raise CliError(str(exc)) from None
        try:
            res = {"exported": export_dead_letters(queue, args.export), "path": args.export}
        finally:
            queue.close()
    except ControlError as exc:
        raise CliError(str(exc)) from None
    audit(cfg, _operator(args), "deadletters export", path=res["path"], exported=res["exported"])
    print(f"exported {res['exported']} dead letters to {res['path']}")
    return EXIT_OK


def cmd_his_stub(args) -> int:
    from .simkit.his_stub import FaultProfile, HisStub

    worklist = []
    if args.worklist:
        with open(args.worklist) as fh:
            worklist = json.load(fh)
    faults = FaultProfile(args.drop_rate, args.ack_loss_rate, args.duplicate_ack_rate, args.delay_ms)
    stub = HisStub(args.host, args.port, worklist, faults, args.seed).start()
    print(f"HIS stub on {stub.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        ledger = stub.stop()
        if args.ledger_out:
            Path(args.ledger_out).write_text(ledger.to_json())
        print(f"ledger: {ledger.count()} observations, {ledger.duplicates} duplicates")
    return EXIT_OK


def cmd_sim(args) -> int:
    from .simkit.analyzer import ExpectationFailed, SimFaults, SimProfile, run_analyzer
    from .simkit.script import SimScript

    script = SimScript.load(args.script)
    fmt = None
    if args.kind == "generic":
        from .formats import BUILTIN
        fmt = BUILTIN[args.format].source["frame"]
    profile = SimProfile(args.kind, args.device or "SIM", args.layout, fmt)
    faults = SimFaults(args.corruption, args.drops)
    ingest = None
    if args.kind == "file":
        cfg = _config(args)
        client = ControlClient(cfg.control_endpoint)

        def ingest(content: bytes) -> dict:
            return client.ingest(args.device, content, args.operator or "")
    try:
        result = run_analyzer(profile, args.target or "127.0.0.1:0", script, args.seed, faults, ingest)
        code = EXIT_OK
    except ExpectationFailed as exc:
        print(f"expectation_failed: {exc}", file=sys.stderr)
        code = EXIT_FAIL
        result = None
    except ConnectionError as exc:
        print(f"connect_failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if result is not None:
        if args.transcript:
            result.transcript.dump(args.transcript)
        print(json.dumps({"stats": result.stats, "orders": result.orders, "acks": result.acks}, default=str))
    return code


def cmd_init(args) -> int:
    """Write a starter config and an empty registry into a directory."""
    d = Path(args.dir)
    d.mkdir(parents=True, exist_ok=True)
    cfg_path = d / "gateway.json"
    if cfg_path.exists() and not args.force:
        raise CliError(f"{cfg_path} exists (use --force)")
    cfg = {
        "gateway_id": args.gateway_id, "registry": "registry.json", "data_dir": "data",
        "control_endpoint": args.control, "audit_log": "audit.log",
        "his": {"base_url": args.his_url, "timeout": 10.0, "worklist_budget": 5.0},
        "uploader": {"batch_max": 100, "flush_idle": 2.0},
    }
    cfg_path.write_text(json.dumps(cfg, indent=2) + "\n")
    if not (d / "registry.json").exists():
        RegistryStore(d / "registry.json", create=True)
    print(f"wrote {cfg_path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labgate", description="Laboratory instrument gateway")
    p.add_argument("--config", help="gateway config file (default: $GMEI_CONFIG)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("run", help="run the gateway until SIGTERM/SIGINT").set_defaults(fn=cmd_run)

    dev = sub.add_parser("device", help="equipment master")
    dsub = dev.add_subparsers(dest="action", required=True)
    dl = dsub.add_parser("list")
    dl.add_argument("--json", action="store_true")
    da = dsub.add_parser("add")
    da.add_argument("device_id")
    da.add_argument("--name")
    da.add_argument("--protocol", required=True, choices=["astm", "hl7", "generic", "file_only"])
    da.add_argument("--mode", default="unidirectional", choices=["unidirectional", "bidirectional"])
    da.add_argument("--format", dest="format_id", required=True)
    da.add_argument("--endpoint", help="host:port the gateway listens on for this device")
    da.add_argument("--facility")
    da.add_argument("--file-format", help="file descriptor for bulk uploads from a stream device")
    da.add_argument("--disabled", action="store_true")
    da.add_argument("--operator")
    ds = dsub.add_parser("set-format")
    ds.add_argument("device_id")
    ds.add_argument("format_id")
    ds.add_argument("--operator")
    dev.set_defaults(fn=cmd_device)

    mp = sub.add_parser("mapping", help="test parameter master")
    msub = mp.add_subparsers(dest="action", required=True)
    msub.add_parser("list")
    ma = msub.add_parser("add")
    ma.add_argument("device_id")
    ma.add_argument("code", help="instrument test code")
    ma.add_argument("test_id", help="canonical test id")
    ma.add_argument("--unit", help="canonical unit")
    ma.add_argument("--factor", default="1")
    ma.add_argument("--operator")
    mp.set_defaults(fn=cmd_mapping)

    us = sub.add_parser("user", help="user master")
    usub = us.add_subparsers(dest="action", required=True)
    usub.add_parser("list")
    ua = usub.add_parser("add")
    ua.add_argument("operator_id")
    ua.add_argument("--name")
    ua.add_argument("--role", default="technician", choices=["technician", "admin"])
    ua.add_argument("--operator")
    us.set_defaults(fn=cmd_user)

    ing = sub.add_parser("ingest", help="bulk-load a result file")
    ing.add_argument("--device", required=True)
    ing.add_argument("--file", required=True)
    ing.add_argument("--operator", required=True)
    ing.add_argument("--json", action="store_true")
    ing.set_defaults(fn=cmd_ingest)

    st = sub.add_parser("status", help="status of the running gateway")
    st.add_argument("--json", action="store_true")
    st.set_defaults(fn=cmd_status)

    dlq = sub.add_parser("deadletters", help="export and drain dead letters")
    dlq.add_argument("--export", required=True, metavar="PATH")
    dlq.add_argument("--operator")
    dlq.set_defaults(fn=cmd_deadletters)

    hs = sub.add_parser("his-stub", help="run the mock HIS")
    hs.add_argument("--host", default="127.0.0.1")
    hs.add_argument("--port", type=int, default=8080)
    hs.add_argument("--worklist", help="JSON list of orders to seed")
    hs.add_argument("--drop-rate", type=float, default=0.0)
    hs.add_argument("--ack-loss-rate", type=float, default=0.0)
    hs.add_argument("--duplicate-ack-rate", type=float, default=0.0)
    hs.add_argument("--delay-ms", type=int, default=0)
    hs.add_argument("--seed", type=int, default=0)
    hs.add_argument("--ledger-out")
    hs.set_defaults(fn=cmd_his_stub)

    sm = sub.add_parser("sim", help="run an instrument simulator script")
    sm.add_argument("--kind", required=True, choices=["astm", "hl7", "generic", "file"])
    sm.add_argument("--target", help="host:port of the device endpoint")
    sm.add_argument("--script", required=True)
    sm.add_argument("--device")
    sm.add_argument("--layout", default="default", choices=["default", "class_a", "class_b"])
    sm.add_argument("--format", default="FMT-GEN-CLASSA", help="generic frame format id")
    sm.add_argument("--operator")
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--corruption", type=float, default=0.0)
    sm.add_argument("--drops", type=float, default=0.0)
    sm.add_argument("--transcript")
    sm.set_defaults(fn=cmd_sim)

    ini = sub.add_parser("init", help="write a starter config and registry")
    ini.add_argument("--dir", default=".")
    ini.add_argument("--gateway-id", default="GW-01")
    ini.add_argument("--control", default="127.0.0.1:8740")
    ini.add_argument("--his-url", default="http://127.0.0.1:8080")
    ini.add_argument("--force", action="store_true")
    ini.set_defaults(fn=cmd_init)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * args.verbose if args.command != "run" else logging.INFO - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except RegistryError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
