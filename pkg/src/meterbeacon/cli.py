"""Command-line entry point: one binary, one subcommand per concern, plus
an end-to-end pipeline (meter CSV -> beacon -> simulator -> platform ->
reports). Errors leave as machine-readable JSON on stderr; exit codes:
0 success, 1 failure, 2 usage.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path

from . import beacon as beacon_mod
from . import lora, netsim, platform, propagation
from .obis import ETX, ObisCode, parse_readout

DATA_DIR_ENV = "METERBEACON_DATA_DIR"


class CliError(Exception):
    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


def _json_default(obj):
    if isinstance(obj, Decimal):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _print_json(data, fh=None):
    print(json.dumps(data, indent=2, sort_keys=True, default=_json_default), file=fh or sys.stdout)


def _parse_time(text: str) -> int:
    """Epoch seconds from an integer or an ISO timestamp (UTC assumed)."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise CliError(f"bad time {text!r}: use epoch seconds or ISO 8601") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _strict_keys(mapping: dict, allowed: set[str], context: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise CliError(f"unknown key(s) in {context}: {', '.join(sorted(unknown))}")


def _add_radio_flags(parser: argparse.ArgumentParser, with_sf: bool = True) -> None:
    if with_sf:
        parser.add_argument("--sf", type=int, default=7)
    parser.add_argument("--bandwidth", type=int, default=125_000, help="Hz")
    parser.add_argument("--cr-idx", type=int, default=1, help="code rate 4/(4+idx)")
    parser.add_argument("--preamble", type=int, default=8)
    parser.add_argument("--no-crc", action="store_true")
    parser.add_argument("--implicit-header", action="store_true")
    parser.add_argument("--ldro", choices=("auto", "on", "off"), default="auto")
    parser.add_argument("--tx-power", type=float, default=13.0, help="dBm")


def _radio_from_args(args, sf: int | None = None) -> lora.RadioParams:
    ldro = None if args.ldro == "auto" else args.ldro == "on"
    return lora.RadioParams(sf=sf if sf is not None else args.sf,
                            bandwidth_hz=args.bandwidth, cr_idx=args.cr_idx,
                            preamble_symbols=args.preamble,
                            explicit_header=not args.implicit_header,
                            crc_on=not args.no_crc, ldro=ldro,
                            tx_power_dbm=args.tx_power)


# ---------------------------------------------------------------- commands


def _cmd_toa(args) -> int:
    params = _radio_from_args(args)
    toa = lora.time_on_air_ms(args.payload, params, overhead_ms=args.overhead_ms)
    print(f"{toa:.3f} ms")
    return 0


def _cmd_energy(args) -> int:
    params = _radio_from_args(args)
    model = lora.EnergyModel(tx_current_ma=args.tx_current_ma,
                             per_uplink_overhead_uah=args.overhead_uah)
    energy = lora.tx_energy_uah(args.payload, params, model)
    per_byte = energy / args.payload * 1000.0 if args.payload else float("nan")
    print(f"{energy:.4f} uAh ({per_byte:.2f} nAh/B at {args.payload} B)")
    return 0


def _cmd_battery(args) -> int:
    battery = lora.Battery(capacity_mah=args.capacity_mah)
    if not args.analytic and args.sf in lora.MEASURED_ENERGY_NAH_PER_BYTE:
        budget = lora.daily_budget_per_byte(
            args.daily_bytes, lora.MEASURED_ENERGY_NAH_PER_BYTE[args.sf],
            lora.MEASURED_AIRTIME_MS_PER_BYTE[args.sf], payload_len=args.payload)
        source = "measured per-byte constants"
    else:
        params = _radio_from_args(args)
        budget = lora.daily_budget(args.daily_bytes, args.payload, params, lora.EnergyModel())
        source = "analytic modem model"
    days = lora.battery_lifetime_days(budget.energy_uah_per_day, battery,
                                      sleep_current_ua=args.sleep_ua)
    years = days / 365.0
    print(f"daily budget: {budget.energy_uah_per_day:.2f} uAh, "
          f"{budget.airtime_s_per_day:.2f} s airtime, {budget.messages_per_day} messages "
          f"({source})")
    print(f"lifetime: {days:.1f} days ({years:.2f} years)")
    return 0


def _cmd_linkbudget(args) -> int:
    lb = lora.LinkBudgetParams(tx_power_dbm=args.tx_power, antenna_gain_dbi=args.antenna_gain,
                               feed_loss_db=args.feed_loss, rx_sensitivity_dbm=args.sensitivity)
    e = lora.eirp_dbm(lb)
    mcl = lora.max_coupling_loss_db(e, lb.rx_sensitivity_dbm)
    _print_json({"eirp_dbm": round(e, 4), "max_coupling_loss_db": round(mcl, 4),
                 "rx_sensitivity_dbm": lb.rx_sensitivity_dbm,
                 "transceiver_max_link_budget_db": lb.max_link_budget_db})
    return 0


def _cmd_compare_protocols(args) -> int:
    writer = csv.writer(sys.stdout)
    writer.writerow(["protocol", "frame_size_b", "messages_needed", "daily_limit_messages",
                     "exceeds_message_limit", "daily_limit_kb", "exceeds_byte_limit"])
    for row in lora.compare_protocols(args.daily_bytes):
        writer.writerow([row.name, row.frame_size_bytes, row.messages_needed,
                         row.daily_limit_messages if row.daily_limit_messages is not None else "",
                         row.exceeds_message_limit,
                         row.daily_limit_kb if row.daily_limit_kb is not None else "",
                         row.exceeds_byte_limit])
    return 0


def _cmd_sweep(args) -> int:
    params = _radio_from_args(args)
    model = lora.EnergyModel(tx_current_ma=args.tx_current_ma)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["payload_len", "toa_ms", "energy_uah"])
    for payload in range(args.min_payload, args.max_payload + 1):
        toa = lora.time_on_air_ms(payload, params, overhead_ms=args.overhead_ms)
        energy = lora.tx_energy_uah(payload, params, model) + args.overhead_ms * model.tx_current_ma / 3600.0
        writer.writerow([payload, f"{toa:.3f}", f"{energy:.6f}"])
    text = out.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_fit(args) -> int:
    dataset = propagation.load_indoor_dataset(args.fixture)
    model = propagation.fit_model(dataset.select(args.sf), kind=args.kind)
    _print_json({"sf": args.sf, "kind": model.kind,
                 "intercept_dbm": model.intercept_dbm,
                 "slope_db_per_m": model.slope_db_per_m,
                 "exponent": model.exponent,
                 "reference_distance_m": model.reference_distance_m,
                 "residual_rmse_db": model.residual_rmse_db})
    return 0


def _cmd_coverage(args) -> int:
    dataset = propagation.load_indoor_dataset(args.fixture)
    samples = dataset.select(args.sf)
    model = propagation.fit_model(samples, kind="linear")
    start_rssi = args.start_rssi
    if start_rssi is None:
        at_zero = [s.rssi_dbm for s in samples if s.distance_m == 0]
        start_rssi = at_zero[0] if at_zero else model.intercept_dbm
    geometry = propagation.BuildingGeometry.uniform(floors=args.floors,
                                                    total_height_m=args.height)
    floors = propagation.max_floors(model, start_rssi, (args.sens_lo, args.sens_hi),
                                    geometry=geometry)
    result = {
        "sf": args.sf,
        "fit": {"slope_db_per_m": model.slope_db_per_m, "intercept_dbm": model.intercept_dbm,
                "residual_rmse_db": model.residual_rmse_db},
        "start_rssi_dbm": start_rssi,
        "sensitivity_band_dbm": [args.sens_lo, args.sens_hi],
        "floor_height_m": args.height / args.floors,
        "max_floors": list(floors) if isinstance(floors, tuple) else floors,
    }
    if args.table:
        rows = []
        upper = (floors[1] if isinstance(floors, tuple) else floors or 0) + 2
        for n in range(1, upper + 1):
            d = geometry.distance_to_floor(n)
            rows.append({"floors": n, "distance_m": round(d, 3),
                         "predicted_rssi_dbm": round(start_rssi + model.slope_db_per_m * d, 2)})
        result["per_floor"] = rows
    _print_json(result)
    return 0


def _split_frames(blob: bytes) -> list[bytes]:
    """Cut a byte stream into readout frames (ident line? + STX..ETX BCC)."""
    frames = []
    pos = 0
    while pos < len(blob):
        etx = blob.find(bytes([ETX]), pos)
        if etx < 0:
            frames.append(blob[pos:])
            break
        frames.append(blob[pos : etx + 2])
        pos = etx + 2
    return [f for f in frames if f]


def _cmd_parse(args) -> int:
    if args.hex:
        blob = bytes.fromhex(args.hex.replace(" ", "").replace("\n", ""))
    elif args.file:
        blob = Path(args.file).read_bytes()
    else:
        raise CliError("parse needs --hex or --file")
    for frame in _split_frames(blob):
        message = parse_readout(frame)
        _print_json({
            "identification": None if message.identification is None else {
                "manufacturer": message.identification.manufacturer,
                "baud_char": message.identification.baud_char,
                "ident": message.identification.ident,
            },
            "lines": [{"obis": str(line.obis), "value": str(line.value), "unit": line.unit}
                      for line in message.lines],
            "bcc": f"0x{message.bcc:02X}",
        })
    return 0


def _read_meter_csv(path: str | Path) -> list[tuple[int, list[tuple[ObisCode, Decimal, str | None]]]]:
    """Rows of (timestamp, obis, value, unit) grouped chronologically."""
    groups: dict[int, list[tuple[ObisCode, Decimal, str | None]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ts = int(row["timestamp"])
            groups.setdefault(ts, []).append(
                (ObisCode.parse(row["obis"]), Decimal(row["value"]), row.get("unit") or None))
    return sorted(groups.items())


def _replay_through_beacon(rows, config: beacon_mod.BeaconConfig) -> beacon_mod.Beacon:
    device = beacon_mod.Beacon(config)
    for ts, readings in rows:
        device.poll(ts, lambda r=readings: r)
    return device


def _limits_from_args(args) -> beacon_mod.DailyLimits:
    if args.lora_limits:
        return beacon_mod.LORA_DAILY_LIMITS
    return beacon_mod.DailyLimits(max_messages_per_day=args.max_messages_per_day,
                                  max_bytes_per_day=args.max_bytes_per_day,
                                  max_airtime_s_per_day=args.max_airtime_s_per_day)


def _write_uplinks_csv(plan: beacon_mod.UplinkPlan, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["index", "send_time", "bytes", "records", "airtime_ms", "payload_hex"])
    for i, up in enumerate(plan.uplinks):
        writer.writerow([i, up.send_time, len(up.payload), up.record_count,
                         f"{up.airtime_ms:.3f}", up.payload.hex()])


def _cmd_beacon(args) -> int:
    rows = _read_meter_csv(args.meter_csv)
    config = beacon_mod.BeaconConfig(readout_interval_s=args.interval,
                                     flash_capacity=args.capacity,
                                     payload_limit=args.payload_limit)
    device = _replay_through_beacon(rows, config)
    plan = beacon_mod.plan_uplinks(device.store, _limits_from_args(args),
                                   _radio_from_args(args), payload_limit=args.payload_limit)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            _write_uplinks_csv(plan, fh)
    else:
        _write_uplinks_csv(plan, sys.stdout)
    print(f"# records={plan.total_records} uplinks={len(plan.uplinks)} "
          f"gaps={len(device.store.gaps)} overwrites={device.store.overwrites}", file=sys.stderr)
    return 0


_SIM_KEYS = {"nodes", "duration_s", "channels", "sf", "payload_len", "duty_cycle",
             "capture_effect", "capture_threshold_db", "seed", "traffic", "radio",
             "energy", "distances_m", "path_loss", "shadowing_sigma_db", "sensitivity_dbm"}
_TRAFFIC_KEYS = {"kind", "interval_s", "offset_s", "rate_per_s", "schedules"}
_RADIO_KEYS = {"bandwidth_hz", "cr_idx", "preamble_symbols", "explicit_header",
               "crc_on", "ldro", "tx_power_dbm"}
_ENERGY_KEYS = {"tx_current_ma", "sleep_current_ua", "per_uplink_overhead_uah"}
_PATH_LOSS_KEYS = {"kind", "intercept_dbm", "slope_db_per_m", "exponent",
                   "reference_distance_m", "residual_rmse_db"}


def _sim_config_from_dict(raw: dict, seed_override: int | None = None) -> netsim.SimConfig:
    _strict_keys(raw, _SIM_KEYS, "simulation config")
    traffic_raw = dict(raw.get("traffic", {"kind": "periodic"}))
    _strict_keys(traffic_raw, _TRAFFIC_KEYS, "traffic spec")
    if "schedules" in traffic_raw:
        traffic_raw["schedules"] = tuple(
            tuple((int(t), int(p)) for t, p in node) for node in traffic_raw["schedules"])
    traffic = netsim.TrafficSpec(**traffic_raw)

    radio_raw = dict(raw.get("radio", {}))
    _strict_keys(radio_raw, _RADIO_KEYS, "radio params")
    radio = lora.RadioParams(**radio_raw)

    energy_raw = dict(raw.get("energy", {}))
    _strict_keys(energy_raw, _ENERGY_KEYS, "energy model")
    energy = lora.EnergyModel(**energy_raw)

    path_loss = None
    if raw.get("path_loss") is not None:
        pl_raw = dict(raw["path_loss"])
        _strict_keys(pl_raw, _PATH_LOSS_KEYS, "path-loss model")
        path_loss = propagation.PathLossModel(**pl_raw)

    sensitivity = raw.get("sensitivity_dbm")
    if isinstance(sensitivity, dict):
        sensitivity = {int(k): float(v) for k, v in sensitivity.items()}

    sf = raw.get("sf", 7)
    if isinstance(sf, list):
        sf = tuple(sf)
    distances = raw.get("distances_m")
    if distances is not None:
        distances = tuple(float(d) for d in distances)

    return netsim.SimConfig(
        nodes=raw["nodes"], duration_s=raw["duration_s"], traffic=traffic,
        channels=raw.get("channels", 8), sf=sf, payload_len=raw.get("payload_len", 50),
        duty_cycle=raw.get("duty_cycle", 0.01),
        capture_effect=raw.get("capture_effect", False),
        capture_threshold_db=raw.get("capture_threshold_db", 6.0),
        seed=seed_override if seed_override is not None else raw.get("seed", 0),
        radio=radio, energy=energy, distances_m=distances, path_loss=path_loss,
        shadowing_sigma_db=raw.get("shadowing_sigma_db", 0.0),
        sensitivity_dbm=sensitivity)


def _write_trace_csv(report: netsim.SimReport, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["node", "start_us", "duration_us", "channel", "sf", "payload_len",
                     "rssi_dbm", "outcome", "deferred_until_us"])
    for e in report.events:
        writer.writerow([e.node, e.start_us, e.duration_us, e.channel, e.sf, e.payload_len,
                         "" if e.rssi_dbm is None else f"{e.rssi_dbm:.4f}", e.outcome,
                         "" if e.deferred_until_us is None else e.deferred_until_us])


def _cmd_simulate(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read simulation config: {exc}") from exc
    config = _sim_config_from_dict(raw, seed_override=args.seed)
    report = netsim.run(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sim_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with (out_dir / "trace.csv").open("w", newline="", encoding="utf-8") as fh:
        _write_trace_csv(report, fh)
    print(f"seed={report.seed} scheduled={report.scheduled} attempted={report.attempted} "
          f"delivered={report.delivered} pdr={report.pdr:.4f} -> {out_dir}")
    return 0


def _cmd_report(args) -> int:
    store = platform.ReadingStore(args.data_dir)
    t_from = _parse_time(args.time_from)
    t_to = _parse_time(args.time_to)
    profile = platform.consumption_profile(store, args.meter, t_from, t_to, args.interval,
                                           obis=ObisCode.parse(args.obis))
    peak_kw, peak_at = platform.max_power_demand(profile)
    result = {
        "meter": args.meter,
        "from": t_from, "to": t_to, "interval_s": args.interval,
        "register": args.obis,
        "total_energy_kwh": str(profile.total_energy_kwh),
        "max_power_demand": {"kw": str(peak_kw), "interval_start": peak_at},
    }
    if args.threshold_kw is not None:
        pct = platform.threshold_exceedance(profile, Decimal(str(args.threshold_kw)))
        result["threshold_exceedance"] = {"threshold_kw": args.threshold_kw,
                                          "percent_of_time": str(pct.quantize(Decimal("0.01")))}
    if args.tariff:
        tariff = platform.load_tariff(args.tariff)
        cost = platform.cost_estimate(profile, tariff)
        result["cost_estimate"] = {"tariff": tariff.name, "currency": tariff.currency,
                                   "amount": str(platform.format_amount(cost))}
    _print_json(result)
    if args.csv_dir:
        csv_dir = Path(args.csv_dir)
        csv_dir.mkdir(parents=True, exist_ok=True)
        with (csv_dir / "profile.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["interval_start", "duration_s", "energy_kwh", "avg_power_kw"])
            for b in profile.buckets:
                writer.writerow([b.start, b.duration_s, b.energy_kwh, b.avg_power_kw])
    return 0


# ---------------------------------------------------------------- pipeline

_PIPELINE_KEYS = {"scenario", "seed", "meter_csv", "meter_id", "radio", "energy",
                  "limits", "beacon", "sim", "tariff", "report"}
_LIMITS_KEYS = {"max_messages_per_day", "max_bytes_per_day", "max_airtime_s_per_day"}
_BEACON_KEYS = {"readout_interval_s", "flash_capacity", "payload_limit"}
_PIPE_SIM_KEYS = {"channels", "duty_cycle", "capture_effect", "capture_threshold_db"}
_REPORT_KEYS = {"interval_s", "threshold_kw", "register"}


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def pipeline(config_path: str | Path, out_dir: str | Path, seed_override: int | None = None) -> dict:
    """Run the full chain and return the manifest. Any stage failure aborts
    with the stage name attached."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    config_text = Path(config_path).read_text(encoding="utf-8")
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise _StageFailure("config", exc) from exc
    try:
        _strict_keys(raw, _PIPELINE_KEYS, "pipeline config")
        for section, keys in (("limits", _LIMITS_KEYS), ("beacon", _BEACON_KEYS),
                              ("sim", _PIPE_SIM_KEYS), ("report", _REPORT_KEYS),
                              ("radio", _RADIO_KEYS | {"sf"}), ("energy", _ENERGY_KEYS)):
            if raw.get(section):
                _strict_keys(raw[section], keys, f"pipeline config section {section!r}")
    except CliError as exc:
        raise _StageFailure("config", exc) from exc

    config_dir = Path(config_path).resolve().parent

    def _resolve(path_text: str) -> Path:
        path = Path(path_text)
        return path if path.is_absolute() else config_dir / path

    seed = seed_override if seed_override is not None else raw.get("seed", 0)
    meter_id = raw.get("meter_id", "meter-001")
    radio = lora.RadioParams(**(raw.get("radio") or {}))
    energy = lora.EnergyModel(**(raw.get("energy") or {}))
    limits = beacon_mod.DailyLimits(**(raw.get("limits") or {}))
    beacon_cfg = beacon_mod.BeaconConfig(**(raw.get("beacon") or {}))
    report_cfg = raw.get("report") or {}
    sim_cfg = raw.get("sim") or {}

    artifacts: dict[str, Path] = {}
    counts: dict[str, int] = {}

    # stage 1: meter replay through the beacon
    try:
        rows = _read_meter_csv(_resolve(raw["meter_csv"]))
        device = _replay_through_beacon(rows, beacon_cfg)
        records_path = out / "records.csv"
        with records_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp", "obis", "value", "unit"])
            for rec in device.store.records():
                for obis, value, unit in rec.readings:
                    writer.writerow([rec.timestamp, str(obis), str(value), unit or ""])
        artifacts["records.csv"] = records_path
        counts["records"] = len(device.store)
        counts["gaps"] = len(device.store.gaps)
    except Exception as exc:
        raise _StageFailure("meter-replay", exc) from exc

    # stage 2: uplink planning
    try:
        plan = beacon_mod.plan_uplinks(device.store, limits, radio,
                                       payload_limit=beacon_cfg.payload_limit)
        uplinks_path = out / "uplinks.csv"
        with uplinks_path.open("w", newline="", encoding="utf-8") as fh:
            _write_uplinks_csv(plan, fh)
        artifacts["uplinks.csv"] = uplinks_path
        counts["uplinks"] = len(plan.uplinks)
    except Exception as exc:
        raise _StageFailure("beacon", exc) from exc

    # stage 3: uplink transmission through the simulator
    try:
        if not plan.uplinks:
            raise CliError("no uplinks to simulate")
        t0 = min(up.send_time for up in plan.uplinks)
        schedule = tuple((int((up.send_time - t0) * netsim.US_PER_S), len(up.payload))
                         for up in plan.uplinks)
        last_end = max(s for s, _ in schedule) / netsim.US_PER_S + 5.0
        sim = netsim.SimConfig(
            nodes=1, duration_s=last_end,
            traffic=netsim.TrafficSpec(kind="explicit", schedules=(schedule,)),
            channels=sim_cfg.get("channels", 8),
            duty_cycle=sim_cfg.get("duty_cycle", 0.01),
            capture_effect=sim_cfg.get("capture_effect", False),
            capture_threshold_db=sim_cfg.get("capture_threshold_db", 6.0),
            sf=radio.sf, seed=seed, radio=radio, energy=energy)
        sim_report = netsim.run(sim)
        report_path = out / "sim_report.json"
        report_path.write_text(json.dumps(sim_report.to_dict(), indent=2, sort_keys=True) + "\n",
                               encoding="utf-8")
        trace_path = out / "trace.csv"
        with trace_path.open("w", newline="", encoding="utf-8") as fh:
            _write_trace_csv(sim_report, fh)
        artifacts["sim_report.json"] = report_path
        artifacts["trace.csv"] = trace_path
        counts["uplinks_delivered"] = sim_report.delivered
    except _StageFailure:
        raise
    except Exception as exc:
        raise _StageFailure("netsim", exc) from exc

    # stage 4: platform ingestion of delivered uplinks
    try:
        store = platform.ReadingStore(out / "platform")
        node_events = [e for e in sim_report.events if e.node == 0]
        added = 0
        for event, uplink in zip(node_events, plan.uplinks):
            if event.outcome != netsim.DELIVERED:
                continue
            added += platform.ingest_uplink(store, meter_id, uplink.payload,
                                            received_at=uplink.send_time + 1)
        counts["readings_ingested"] = added
        artifacts["platform/index.json"] = out / "platform" / "index.json"
    except Exception as exc:
        raise _StageFailure("platform-ingest", exc) from exc

    # stage 5: reports
    try:
        register = report_cfg.get("register", "1.8.0")
        readings = store.readings(meter_id, obis=ObisCode.parse(register))
        if not readings:
            raise CliError("nothing ingested; cannot build reports")
        t_from, t_to = readings[0].timestamp, readings[-1].timestamp
        interval = report_cfg.get("interval_s", 900)
        profile = platform.consumption_profile(store, meter_id, t_from, t_to, interval,
                                               obis=ObisCode.parse(register))
        peak_kw, peak_at = platform.max_power_demand(profile)
        reports = {
            "meter": meter_id, "register": register,
            "from": t_from, "to": t_to, "interval_s": interval,
            "total_energy_kwh": str(profile.total_energy_kwh),
            "max_power_demand": {"kw": str(peak_kw), "interval_start": peak_at},
        }
        threshold = report_cfg.get("threshold_kw")
        if threshold is not None:
            pct = platform.threshold_exceedance(profile, Decimal(str(threshold)))
            reports["threshold_exceedance"] = {"threshold_kw": threshold,
                                               "percent_of_time": str(pct.quantize(Decimal("0.01")))}
        if raw.get("tariff"):
            tariff = platform.load_tariff(_resolve(raw["tariff"]))
            cost = platform.cost_estimate(profile, tariff)
            reports["cost_estimate"] = {"tariff": tariff.name, "currency": tariff.currency,
                                        "amount": str(platform.format_amount(cost))}
        reports_path = out / "reports.json"
        reports_path.write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
        profile_path = out / "profile.csv"
        with profile_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["interval_start", "duration_s", "energy_kwh", "avg_power_kw"])
            for b in profile.buckets:
                writer.writerow([b.start, b.duration_s, b.energy_kwh, b.avg_power_kw])
        artifacts["reports.json"] = reports_path
        artifacts["profile.csv"] = profile_path
    except Exception as exc:
        raise _StageFailure("report", exc) from exc

    manifest = {
        "scenario": raw.get("scenario", Path(config_path).stem),
        "seed": seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "counts": counts,
        "artifacts": {name: _sha256(path) for name, path in sorted(artifacts.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def make_demo_inputs(directory: str | Path, seed: int = 1) -> Path:
    """Write the bundled demo scenario (one meter, one day of 15-minute
    readings, a two-zone tariff) and return its pipeline config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    meter_csv = directory / "demo_meter.csv"
    with meter_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "obis", "value", "unit"])
        register = Decimal("1000.000")
        for slot in range(96):
            ts = slot * 900
            hour = (ts // 3600) % 24
            step = Decimal("0.080") if 8 <= hour < 20 else Decimal("0.020")
            step += Decimal((slot * 7) % 5) * Decimal("0.002")
            writer.writerow([ts, "1.8.0", str(register), "kWh"])
            register += step

    tariff_path = directory / "demo_tariff.json"
    tariff_path.write_text(json.dumps({
        "name": "demo-two-zone", "currency": "PLN", "fixed_daily": "0.80",
        "zones": [
            {"name": "day", "start": "06:00", "end": "22:00", "price": "0.72"},
            {"name": "night", "start": "22:00", "end": "06:00", "price": "0.45"},
        ],
    }, indent=2) + "\n", encoding="utf-8")

    config_path = directory / "demo_pipeline.json"
    config_path.write_text(json.dumps({
        "scenario": "demo-1-meter-1-day",
        "seed": seed,
        "meter_csv": meter_csv.name,
        "meter_id": "meter-001",
        "radio": {"sf": 7},
        "limits": {"max_messages_per_day": 10, "max_bytes_per_day": 3_240_000},
        "beacon": {"readout_interval_s": 900, "flash_capacity": 512, "payload_limit": 50},
        "sim": {"channels": 8, "duty_cycle": 0.01},
        "tariff": tariff_path.name,
        "report": {"interval_s": 900, "threshold_kw": 0.3},
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return config_path


def _cmd_pipeline(args) -> int:
    out_dir = Path(args.out_dir)
    if args.demo:
        config_path = make_demo_inputs(out_dir / "inputs",
                                       seed=args.seed if args.seed is not None else 1)
    elif args.config:
        config_path = Path(args.config)
    else:
        raise CliError("pipeline needs --config or --demo")
    manifest = pipeline(config_path, out_dir, seed_override=args.seed)
    _print_json(manifest)
    return 0


# ---------------------------------------------------------------- dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meterbeacon",
        description="Meter-reading beacon toolkit: readout codec, airtime and "
                    "energy budgets, coverage fits, uplink simulation, reports.")
    parser.add_argument("--seed", type=int, default=None, help="override any configured RNG seed")
    parser.add_argument("--data-dir", default=os.environ.get(DATA_DIR_ENV, "meterdata"),
                        help=f"reading store directory (env {DATA_DIR_ENV})")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("toa", help="frame time on air")
    p.add_argument("--payload", type=int, required=True)
    _add_radio_flags(p)
    p.add_argument("--overhead-ms", type=float, default=0.0)
    p.set_defaults(func=_cmd_toa)

    p = sub.add_parser("energy", help="charge per uplink")
    p.add_argument("--payload", type=int, required=True)
    _add_radio_flags(p)
    p.add_argument("--tx-current-ma", type=float, default=35.0)
    p.add_argument("--overhead-uah", type=float, default=0.0)
    p.set_defaults(func=_cmd_energy)

    p = sub.add_parser("battery", help="daily budget and battery lifetime")
    p.add_argument("--daily-bytes", type=int, required=True)
    _add_radio_flags(p)
    p.add_argument("--capacity-mah", type=float, default=1000.0)
    p.add_argument("--payload", type=int, default=50)
    p.add_argument("--sleep-ua", type=float, default=None,
                   help="include sleep draw (e.g. 50 expected, 490 measured)")
    p.add_argument("--analytic", action="store_true",
                   help="use the modem model instead of measured per-byte constants")
    p.set_defaults(func=_cmd_battery)

    p = sub.add_parser("linkbudget", help="EIRP and maximum coupling loss")
    p.add_argument("--tx-power", type=float, default=15.0)
    p.add_argument("--antenna-gain", type=float, default=2.15)
    p.add_argument("--feed-loss", type=float, default=1.0)
    p.add_argument("--sensitivity", type=float, default=-137.0)
    p.set_defaults(func=_cmd_linkbudget)

    p = sub.add_parser("compare-protocols", help="daily-volume fit across LPWAN presets")
    p.add_argument("--daily-bytes", type=int, required=True)
    p.set_defaults(func=_cmd_compare_protocols)

    p = sub.add_parser("sweep", help="CSV of airtime/energy over payload sizes")
    _add_radio_flags(p)
    p.add_argument("--min-payload", type=int, default=1)
    p.add_argument("--max-payload", type=int, default=50)
    p.add_argument("--tx-current-ma", type=float, default=35.0)
    p.add_argument("--overhead-ms", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("fit", help="fit a path-loss model to the indoor survey")
    p.add_argument("--sf", type=int, default=7, choices=(7, 9, 11))
    p.add_argument("--kind", choices=("linear", "log-distance"), default="linear")
    p.add_argument("--fixture", default=None, help="survey CSV (default: bundled)")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("coverage", help="floors reachable for a sensitivity band")
    p.add_argument("--sf", type=int, default=7, choices=(7, 9, 11))
    p.add_argument("--fixture", default=None)
    p.add_argument("--start-rssi", type=float, default=None,
                   help="same-floor RSSI anchor (default: survey value at 0 m)")
    p.add_argument("--sens-lo", type=float, default=-140.0)
    p.add_argument("--sens-hi", type=float, default=-126.0)
    p.add_argument("--floors", type=int, default=6)
    p.add_argument("--height", type=float, default=20.0, help="building height, m")
    p.add_argument("--table", action="store_true", help="include per-floor predictions")
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("parse", help="decode readout frames to JSON")
    p.add_argument("--hex", default=None)
    p.add_argument("--file", default=None)
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("beacon", help="replay a meter CSV and plan uplinks")
    p.add_argument("--meter-csv", required=True)
    _add_radio_flags(p)
    p.add_argument("--interval", type=int, default=900)
    p.add_argument("--capacity", type=int, default=1024)
    p.add_argument("--payload-limit", type=int, default=50)
    p.add_argument("--lora-limits", action="store_true", help="published LoRa daily caps")
    p.add_argument("--max-messages-per-day", type=int, default=None)
    p.add_argument("--max-bytes-per-day", type=int, default=None)
    p.add_argument("--max-airtime-s-per-day", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_beacon)

    p = sub.add_parser("simulate", help="run the uplink network simulator")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="simout")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report", help="consumption, peak demand, exceedance, cost")
    p.add_argument("--meter", required=True)
    p.add_argument("--from", dest="time_from", required=True)
    p.add_argument("--to", dest="time_to", required=True)
    p.add_argument("--interval", type=int, default=900)
    p.add_argument("--obis", default="1.8.0")
    p.add_argument("--threshold-kw", type=float, default=None)
    p.add_argument("--tariff", default=None)
    p.add_argument("--csv-dir", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("pipeline", help="meter CSV -> beacon -> simulator -> reports")
    p.add_argument("--config", default=None)
    p.add_argument("--demo", action="store_true", help="run the bundled demo scenario")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_pipeline)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except _StageFailure as exc:
        _print_json({"error": str(exc.cause), "stage": exc.stage}, fh=sys.stderr)
        return 1
    except CliError as exc:
        _print_json({"error": str(exc), "stage": exc.stage}, fh=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        _print_json({"error": str(exc)}, fh=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
