from __future__ import annotations

import random
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from meterbeacon.beacon import (
    Beacon, BeaconConfig, DailyLimits, FlashStore, LORA_DAILY_LIMITS,
    MeterReadError, MeterRecord, PayloadError, StarvationError, UNLIMITED,
    decode_uplink, encode_uplink, plan_uplinks,
)
from meterbeacon.lora import RadioParams, time_on_air_ms
from meterbeacon.obis import ObisCode

KWH = ObisCode(1, 8, 0)


def _cumulative_reader(step=Decimal("0.050")):
    state = {"value": Decimal("1000.000")}

    def read():
        state["value"] += step
        return [(KWH, state["value"], "kWh")]

    return read


def _record(ts, value, obis=KWH, unit="kWh") -> MeterRecord:
    return MeterRecord(timestamp=ts, readings=((obis, Decimal(value), unit),))


# ------------------------------------------------------------------ scheduler

def test_poll_emits_on_interval_multiples():
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    emitted = [device.poll(t, read) for t in (0, 900, 1800)]
    assert all(r is not None for r in emitted)
    assert [r.timestamp for r in emitted] == [0, 900, 1800]


def test_24h_yields_exactly_96_records():
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    count = sum(1 for t in range(0, 86400, 900) if device.poll(t, read) is not None)
    assert count == 96
    assert len(device.store) == 96


def test_no_drift_with_offset_clock():
    # polling slightly after each slot still yields one record per slot
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    count = sum(1 for t in range(137, 86400 + 137, 900) if device.poll(t, read) is not None)
    assert count == 96


def test_repolling_within_slot_emits_nothing():
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    assert device.poll(0, read) is not None
    assert device.poll(10, read) is None
    assert device.poll(899, read) is None
    assert device.poll(900, read) is not None


def test_meter_failure_flags_gap():
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    failures = {43}

    def flaky(t):
        if t // 900 in failures:
            raise MeterReadError("no response")
        return read()

    records = sum(1 for t in range(0, 86400, 900)
                  if device.poll(t, lambda t=t: flaky(t)) is not None)
    assert records == 95
    assert device.store.gaps == [43 * 900]


def test_skipped_slots_flagged_as_gaps():
    device = Beacon(BeaconConfig())
    read = _cumulative_reader()
    device.poll(0, read)
    device.poll(2700, read)     # slots 1 and 2 skipped
    assert device.store.gaps == [900, 1800]


# ------------------------------------------------------------------ flash store

def test_flash_ring_semantics():
    store = FlashStore(capacity=4)
    for i in range(5):
        store.store(_record(i * 900, f"{i}"))
    assert len(store) == 4
    assert store.overwrites == 1
    assert [r.timestamp for r in store] == [900, 1800, 2700, 3600]


def test_flash_insert_into_empty():
    store = FlashStore(capacity=4)
    store.store(_record(0, "1"))
    assert len(store) == 1


def test_flash_chronological_after_wraparound_matches_naive_oracle():
    rng = random.Random(9)
    for _ in range(50):
        capacity = rng.randrange(1, 12)
        n = rng.randrange(0, 40)
        store = FlashStore(capacity)
        naive: list[MeterRecord] = []
        for i in range(n):
            rec = _record(i * 900, f"{i}")
            store.store(rec)
            naive.append(rec)        # oracle: unbounded list, keep last `capacity`
        assert list(store) == naive[-capacity:]
        assert store.overwrites == max(0, n - capacity)
        timestamps = [r.timestamp for r in store]
        assert timestamps == sorted(timestamps)


# ------------------------------------------------------------------ uplink codec

def test_single_record_single_register_fits_14_bytes():
    payload = encode_uplink([_record(1_600_000_000, "12345.678")], limit=50)
    assert len(payload) <= 14


def test_empty_uplink_rejected():
    with pytest.raises(PayloadError, match="empty uplink"):
        encode_uplink([], limit=50)


def test_uplink_round_trip_simple():
    records = [_record(1000 + i * 900, Decimal("100.000") + i * Decimal("0.05"))
               for i in range(10)]
    payload = encode_uplink(records, limit=60)
    assert decode_uplink(payload) == records


def test_uplink_truncation_and_version_errors():
    payload = encode_uplink([_record(0, "1.5")], limit=50)
    with pytest.raises(PayloadError, match="truncated"):
        decode_uplink(payload[:4])
    with pytest.raises(PayloadError, match="version"):
        decode_uplink(bytes([0x21]) + payload[1:])
    with pytest.raises(PayloadError, match="truncated"):
        decode_uplink(payload[:-1])


def test_uplink_rejects_bad_inputs():
    with pytest.raises(PayloadError, match="chronological"):
        encode_uplink([_record(900, "1"), _record(0, "2")], limit=50)
    with pytest.raises(PayloadError, match="register sets"):
        encode_uplink([_record(0, "1"), _record(900, "2", obis=ObisCode(2, 8, 0))], limit=50)
    with pytest.raises(PayloadError, match="unit"):
        encode_uplink([_record(0, "1", unit="furlongs")], limit=50)
    with pytest.raises(PayloadError, match="exceeding"):
        encode_uplink([_record(0, "1.5")], limit=4)
    with pytest.raises(PayloadError, match="C.D.E"):
        encode_uplink([_record(0, "1", obis=ObisCode(1, 8, 0, a=1, b=0))], limit=50)


_units = st.sampled_from([None, "kWh", "kvarh", "V", "W"])
_values = st.decimals(min_value=Decimal("-99999999"), max_value=Decimal("99999999"),
                      allow_nan=False, allow_infinity=False, places=3)


@st.composite
def record_sets(draw):
    n_registers = draw(st.integers(1, 4))
    registers = [(ObisCode(draw(st.integers(0, 255)), draw(st.integers(0, 255)),
                           draw(st.integers(0, 255))), draw(_units))
                 for _ in range(n_registers)]
    n_records = draw(st.integers(1, 8))
    base_ts = draw(st.integers(0, 2**31))
    records = []
    ts = base_ts
    for _ in range(n_records):
        readings = tuple((obis, draw(_values), unit) for obis, unit in registers)
        records.append(MeterRecord(timestamp=ts, readings=readings))
        ts += draw(st.integers(1, 100_000))
    return records


@settings(max_examples=200, deadline=None)
@given(record_sets())
def test_uplink_round_trip_randomized(records):
    payload = encode_uplink(records, limit=255)
    assert decode_uplink(payload) == records


# ------------------------------------------------------------------ planning

def _filled_store(n=96, start_ts=0) -> FlashStore:
    store = FlashStore(capacity=max(n, 1))
    value = Decimal("1000.000")
    for i in range(n):
        value += Decimal("0.050")
        store.store(_record(start_ts + i * 900, value))
    return store


def test_plan_respects_message_cap_with_deferral():
    store = _filled_store(96)
    limits = DailyLimits(max_messages_per_day=10)
    # a tiny payload limit forces one record per uplink: 96 uplinks needed
    plan = plan_uplinks(store, limits, RadioParams(sf=7), payload_limit=16)
    assert len(plan.uplinks) == 96
    per_day = plan.per_day()
    assert all(msgs <= 10 for msgs, _, _ in per_day.values())
    assert len(per_day) == 10       # 9 full days of 10 plus the remainder
    assert sum(up.record_count for up in plan.uplinks) == 96


def test_plan_unlimited_single_day_drain():
    store = _filled_store(96)
    plan = plan_uplinks(store, UNLIMITED, RadioParams(sf=7), payload_limit=50)
    assert len(plan.per_day()) == 1
    assert sum(up.record_count for up in plan.uplinks) == 96


def test_plan_under_lora_preset_limits():
    store = _filled_store(96)
    plan = plan_uplinks(store, LORA_DAILY_LIMITS, RadioParams(sf=7), payload_limit=50)
    per_day = plan.per_day()
    assert all(msgs <= 10 for msgs, _, _ in per_day.values())
    assert all(nbytes <= 3_240_000 for _, nbytes, _ in per_day.values())


def test_plan_airtime_cap_sf11():
    # 30 s/day at SF11 with 50 B frames (1.314816 s each) admits 22/day
    store = _filled_store(96)
    params = RadioParams(sf=11)
    toa_s = time_on_air_ms(50, params) / 1000.0
    assert int(30.0 / toa_s) == 22
    plan = plan_uplinks(store, DailyLimits(max_airtime_s_per_day=30.0), params,
                        payload_limit=16)    # forces 96 single-record uplinks
    per_day = plan.per_day()
    assert all(msgs <= 22 for msgs, _, _ in per_day.values())
    assert all(air <= 30.0 + 1e-9 for _, _, air in per_day.values())


def test_plan_starvation():
    store = _filled_store(4)
    with pytest.raises(StarvationError):
        plan_uplinks(store, DailyLimits(max_messages_per_day=0), RadioParams(sf=7))
    with pytest.raises(StarvationError):
        plan_uplinks(store, DailyLimits(max_bytes_per_day=4), RadioParams(sf=7))


def test_plan_send_times_never_precede_records():
    store = _filled_store(96)
    newest = store.records()[-1].timestamp
    plan = plan_uplinks(store, LORA_DAILY_LIMITS, RadioParams(sf=7), payload_limit=50)
    assert all(up.send_time >= newest for up in plan.uplinks)
    times = [up.send_time for up in plan.uplinks]
    assert times == sorted(times)


def test_plan_round_trips_all_records():
    store = _filled_store(96)
    plan = plan_uplinks(store, LORA_DAILY_LIMITS, RadioParams(sf=7), payload_limit=50)
    recovered = []
    for up in plan.uplinks:
        recovered.extend(decode_uplink(up.payload))
    assert tuple(recovered) == store.records()


def test_plan_per_day_caps_randomized():
    rng = random.Random(21)
    for _ in range(25):
        n = rng.randrange(1, 120)
        store = _filled_store(n)
        limits = DailyLimits(
            max_messages_per_day=rng.choice([None, rng.randrange(1, 20)]),
            max_bytes_per_day=rng.choice([None, rng.randrange(60, 500)]),
            max_airtime_s_per_day=rng.choice([None, rng.uniform(0.3, 5.0)]))
        params = RadioParams(sf=rng.choice([7, 9, 11]))
        try:
            plan = plan_uplinks(store, limits, params,
                                payload_limit=rng.randrange(16, 60))
        except StarvationError:
            continue
        assert sum(up.record_count for up in plan.uplinks) == n
        for msgs, nbytes, air in plan.per_day().values():
            if limits.max_messages_per_day is not None:
                assert msgs <= limits.max_messages_per_day
            if limits.max_bytes_per_day is not None:
                assert nbytes <= limits.max_bytes_per_day
            if limits.max_airtime_s_per_day is not None:
                assert air <= limits.max_airtime_s_per_day + 1e-9


# ------------------------------------------------------------------ conservation

def test_record_conservation_through_a_run():
    config = BeaconConfig(flash_capacity=40)    # smaller than a day: forces eviction
    device = Beacon(config)
    read = _cumulative_reader()
    failures = {10, 55}
    slots = range(0, 86400, 900)
    for t in slots:
        if t // 900 in failures:
            device.poll(t, lambda: (_ for _ in ()).throw(MeterReadError("fail")))
        else:
            device.poll(t, read)
    # every slot is exactly one of: in store, evicted, gap
    assert len(slots) == len(device.store) + device.store.overwrites + len(device.store.gaps)
    plan = plan_uplinks(device.store, UNLIMITED, RadioParams(sf=7))
    assert sum(up.record_count for up in plan.uplinks) == len(device.store)
