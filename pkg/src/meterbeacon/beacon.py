"""Deterministic beacon model: 15-minute meter readout on a grid, flash
ring-buffer storage, compact delta-coded uplink payloads, and uplink
scheduling under per-protocol daily limits.

Uplink payload layout (version 1):

    byte 0        version nibble (0x1) | register count R (1-15)
    bytes 1-4     base record timestamp, uint32 big-endian epoch seconds
    per register  C, D, E (3 bytes); scale/length byte (signed scale
                  nibble -8..7, mantissa length nibble 0-8); unit code
                  byte; mantissa, length bytes big-endian two's complement
    then, until the payload ends, one group per additional record:
                  zig-zag varint time delta, then R zig-zag varint
                  mantissa deltas

    value = mantissa * 10^scale; one scale per register covers every
    record in the payload, so deltas stay integral and exact.

The register set (addresses and units, in order) must be identical across
all records of one payload; a beacon reads the same registers each cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Iterable, Sequence

from .lora import RadioParams, time_on_air_ms
from .obis import ObisCode

UPLINK_VERSION = 1
SECONDS_PER_DAY = 86_400

# Wire codes for the unit vocabulary a beacon can report.
UNIT_CODES = {
    None: 0, "kWh": 1, "kvarh": 2, "kVAh": 3, "V": 4, "A": 5,
    "W": 6, "kW": 7, "var": 8, "Hz": 9, "Wh": 10, "varh": 11,
}
_UNIT_BY_CODE = {v: k for k, v in UNIT_CODES.items()}


class BeaconError(ValueError):
    pass


class PayloadError(BeaconError):
    pass


class StarvationError(BeaconError):
    """Daily limits so tight that not even one record per day can leave."""


class MeterReadError(RuntimeError):
    """Raised by a readout source when the optical exchange fails."""


@dataclass(frozen=True)
class DailyLimits:
    """Per-day transmission caps; None means unlimited."""

    max_messages_per_day: int | None = None
    max_bytes_per_day: int | None = None
    max_airtime_s_per_day: float | None = None

    def __post_init__(self):
        for name in ("max_messages_per_day", "max_bytes_per_day", "max_airtime_s_per_day"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise BeaconError(f"{name} must be nonnegative, got {v}")


# Published LoRa daily caps: 3240 kB and 10 messages. At a 255 B frame the
# two are mutually inconsistent; both are carried and the message cap
# governs by default.
LORA_DAILY_LIMITS = DailyLimits(max_messages_per_day=10, max_bytes_per_day=3_240_000)

UNLIMITED = DailyLimits()


@dataclass(frozen=True)
class MeterRecord:
    """One readout: grid timestamp plus (address, value, unit) registers."""

    timestamp: int
    readings: tuple[tuple[ObisCode, Decimal, str | None], ...]

    def __post_init__(self):
        object.__setattr__(self, "readings", tuple(tuple(r) for r in self.readings))


@dataclass(frozen=True)
class BeaconConfig:
    readout_interval_s: int = 900
    flash_capacity: int = 1024
    payload_limit: int = 50

    def __post_init__(self):
        if self.readout_interval_s <= 0:
            raise BeaconError(f"readout interval must be positive, got {self.readout_interval_s}")
        if not 1 <= self.payload_limit <= 255:
            raise BeaconError(f"payload limit must be 1-255 bytes, got {self.payload_limit}")
        if self.flash_capacity <= 0:
            raise BeaconError(f"flash capacity must be positive, got {self.flash_capacity}")


class FlashStore:
    """Fixed-capacity ring of records; the oldest entry is overwritten
    first and iteration yields insertion (chronological) order."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise BeaconError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._records: list[MeterRecord] = []
        self.writes = 0
        self.overwrites = 0
        self.gaps: list[int] = []      # grid timestamps of missed readouts

    def store(self, record: MeterRecord) -> None:
        if len(self._records) >= self.capacity:
            self._records.pop(0)
            self.overwrites += 1
        self._records.append(record)
        self.writes += 1

    def flag_gap(self, timestamp: int) -> None:
        self.gaps.append(timestamp)

    def records(self) -> tuple[MeterRecord, ...]:
        return tuple(self._records)

    def clear(self) -> tuple[MeterRecord, ...]:
        drained = tuple(self._records)
        self._records.clear()
        return drained

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(tuple(self._records))


class Beacon:
    """Readout scheduler plus flash store.

    :meth:`poll` emits a record exactly when the clock crosses a multiple
    of the readout interval (epoch-anchored grid, so a day is always 96
    slots at the 15-minute default). Slots skipped between polls and
    failed reads are flagged as gaps in the store.
    """

    def __init__(self, config: BeaconConfig | None = None):
        self.config = config or BeaconConfig()
        self.store = FlashStore(self.config.flash_capacity)
        self._last_slot: int | None = None

    def poll(self, clock: int,
             read_meter: Callable[[], Sequence[tuple[ObisCode, Decimal, str | None]]]
             ) -> MeterRecord | None:
        interval = self.config.readout_interval_s
        slot = clock // interval
        if self._last_slot is not None:
            if slot <= self._last_slot:
                return None
            for missed in range(self._last_slot + 1, slot):
                self.store.flag_gap(missed * interval)
        self._last_slot = slot
        try:
            readings = read_meter()
        except MeterReadError:
            self.store.flag_gap(slot * interval)
            return None
        record = MeterRecord(timestamp=slot * interval, readings=tuple(readings))
        self.store.store(record)
        return record


def _zigzag(n: int) -> int:
    return n * 2 if n >= 0 else -n * 2 - 1


def _unzigzag(u: int) -> int:
    return u // 2 if u % 2 == 0 else -(u // 2) - 1


def _write_varint(out: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varint(payload: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(payload):
            raise PayloadError("truncated payload inside varint")
        byte = payload[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise PayloadError("varint too long")


def _register_set(record: MeterRecord) -> tuple[tuple[ObisCode, str | None], ...]:
    return tuple((obis, unit) for obis, _, unit in record.readings)


def _mantissa_and_scale(values: Sequence[Decimal]) -> tuple[list[int], int]:
    exponents = []
    for v in values:
        if not v.is_finite():
            raise PayloadError(f"non-finite register value {v}")
        exponents.append(v.as_tuple().exponent)
    scale = min(min(exponents), 7)
    if scale < -8:
        raise PayloadError("register values carry more than 8 decimal places")
    mantissas = [int(v.scaleb(-scale)) for v in values]
    return mantissas, scale


def encode_uplink(records: Sequence[MeterRecord], limit: int = 50) -> bytes:
    """Pack chronological records into one payload of at most ``limit`` bytes."""
    if not records:
        raise PayloadError("empty uplink")
    timestamps = [r.timestamp for r in records]
    if any(timestamps[i] >= timestamps[i + 1] for i in range(len(timestamps) - 1)):
        raise PayloadError("records must be strictly chronological")
    if not 0 <= records[0].timestamp < 2**32:
        raise PayloadError(f"base timestamp {records[0].timestamp} does not fit 32 bits")

    registers = _register_set(records[0])
    if not 1 <= len(registers) <= 15:
        raise PayloadError(f"register count must be 1-15, got {len(registers)}")
    for rec in records[1:]:
        if _register_set(rec) != registers:
            raise PayloadError("records carry differing register sets")

    columns = []    # per register: (mantissas across records, scale)
    for j, (obis, unit) in enumerate(registers):
        if obis.a is not None or obis.b is not None:
            raise PayloadError(f"uplink format carries C.D.E addresses only, got {obis}")
        if unit not in UNIT_CODES:
            supported = ", ".join(str(u) for u in UNIT_CODES if u)
            raise PayloadError(f"unit {unit!r} not in the uplink vocabulary ({supported})")
        columns.append(_mantissa_and_scale([rec.readings[j][1] for rec in records]))

    out = bytearray()
    out.append((UPLINK_VERSION << 4) | len(registers))
    out += records[0].timestamp.to_bytes(4, "big")
    for (obis, unit), (mantissas, scale) in zip(registers, columns):
        out += bytes((obis.c, obis.d, obis.e))
        m0 = mantissas[0]
        length = 0 if m0 == 0 else (m0.bit_length() + 8) // 8
        if length > 8:
            raise PayloadError(f"register base value needs {length} mantissa bytes (max 8)")
        out.append(((scale & 0xF) << 4) | length)
        out.append(UNIT_CODES[unit])
        if length:
            out += m0.to_bytes(length, "big", signed=True)

    for i in range(1, len(records)):
        _write_varint(out, _zigzag(records[i].timestamp - records[i - 1].timestamp))
        for mantissas, _ in columns:
            _write_varint(out, _zigzag(mantissas[i] - mantissas[i - 1]))

    if len(out) > limit:
        raise PayloadError(f"encoded payload is {len(out)} bytes, exceeding the {limit} B limit")
    return bytes(out)


def decode_uplink(payload: bytes) -> list[MeterRecord]:
    """Exact inverse of :func:`encode_uplink`."""
    if len(payload) < 5:
        raise PayloadError(f"payload truncated: {len(payload)} bytes")
    version = payload[0] >> 4
    if version != UPLINK_VERSION:
        raise PayloadError(f"unknown payload version {version}")
    n_registers = payload[0] & 0xF
    if n_registers == 0:
        raise PayloadError("payload declares zero registers")
    timestamp = int.from_bytes(payload[1:5], "big")
    pos = 5

    registers = []      # (obis, unit, scale, mantissa)
    for _ in range(n_registers):
        if pos + 5 > len(payload):
            raise PayloadError("truncated payload inside register descriptor")
        obis = ObisCode(payload[pos], payload[pos + 1], payload[pos + 2])
        scale_nibble = payload[pos + 3] >> 4
        scale = scale_nibble - 16 if scale_nibble >= 8 else scale_nibble
        length = payload[pos + 3] & 0xF
        if length > 8:
            raise PayloadError(f"mantissa length {length} exceeds 8 bytes")
        unit_code = payload[pos + 4]
        if unit_code not in _UNIT_BY_CODE:
            raise PayloadError(f"unknown unit code {unit_code}")
        pos += 5
        if pos + length > len(payload):
            raise PayloadError("truncated payload inside register value")
        mantissa = int.from_bytes(payload[pos:pos + length], "big", signed=True) if length else 0
        pos += length
        registers.append((obis, _UNIT_BY_CODE[unit_code], scale, mantissa))

    def make_record(ts: int, mantissas: list[int]) -> MeterRecord:
        readings = tuple(
            (obis, Decimal(m).scaleb(scale), unit)
            for (obis, unit, scale, _), m in zip(registers, mantissas))
        return MeterRecord(timestamp=ts, readings=readings)

    mantissas = [reg[3] for reg in registers]
    records = [make_record(timestamp, mantissas)]
    while pos < len(payload):
        delta, pos = _read_varint(payload, pos)
        timestamp += _unzigzag(delta)
        new_mantissas = []
        for prev in mantissas:
            delta, pos = _read_varint(payload, pos)
            new_mantissas.append(prev + _unzigzag(delta))
        mantissas = new_mantissas
        records.append(make_record(timestamp, mantissas))
    return records


@dataclass(frozen=True)
class ScheduledUplink:
    send_time: int          # epoch seconds
    payload: bytes
    record_count: int
    airtime_ms: float

    @property
    def day(self) -> int:
        return self.send_time // SECONDS_PER_DAY


@dataclass
class UplinkPlan:
    uplinks: list[ScheduledUplink]
    total_records: int

    def per_day(self) -> dict[int, tuple[int, int, float]]:
        """day -> (messages, bytes, airtime seconds)."""
        usage: dict[int, tuple[int, int, float]] = {}
        for up in self.uplinks:
            msgs, nbytes, air = usage.get(up.day, (0, 0, 0.0))
            usage[up.day] = (msgs + 1, nbytes + len(up.payload), air + up.airtime_ms / 1000.0)
        return usage


def _pack_records(records: Sequence[MeterRecord], limit: int) -> list[bytes]:
    payloads = []
    start = 0
    while start < len(records):
        end = start + 1
        payload = encode_uplink(records[start:end], limit)   # single record must fit
        while end < len(records):
            try:
                payload = encode_uplink(records[start:end + 1], limit)
            except PayloadError:
                break
            end += 1
        payloads.append(payload)
        start = end
    return payloads


def plan_uplinks(store: FlashStore, limits: DailyLimits, params: RadioParams,
                 payload_limit: int = 50, start: int | None = None) -> UplinkPlan:
    """Schedule every stored record for transmission under the daily caps.

    Records are packed chronologically (newest last) into payloads of at
    most ``payload_limit`` bytes; payloads that exceed a day's remaining
    message, byte or airtime budget roll over to the next day. Days are
    anchored at UTC midnight. Sending begins at ``start`` (default: the
    newest record's timestamp, so nothing is scheduled before it was
    recorded) and the first day only uses its remaining span.
    """
    records = store.records()
    if not records:
        return UplinkPlan(uplinks=[], total_records=0)
    payloads = _pack_records(records, payload_limit)

    anchor = start if start is not None else records[-1].timestamp
    day_start = (anchor // SECONDS_PER_DAY) * SECONDS_PER_DAY

    by_day: list[list[tuple[bytes, int, float]]] = [[]]
    day_msgs, day_bytes, day_air = 0, 0, 0.0
    record_counts = _payload_record_counts(records, payloads)
    for payload, count in zip(payloads, record_counts):
        toa_s = time_on_air_ms(len(payload), params) / 1000.0
        if _violates_fresh_day(limits, len(payload), toa_s):
            raise StarvationError(
                "daily limits admit zero uplinks per day "
                f"(payload {len(payload)} B, airtime {toa_s:.3f} s)")
        while not _fits(limits, day_msgs + 1, day_bytes + len(payload), day_air + toa_s):
            by_day.append([])
            day_msgs, day_bytes, day_air = 0, 0, 0.0
        by_day[-1].append((payload, count, toa_s))
        day_msgs += 1
        day_bytes += len(payload)
        day_air += toa_s

    uplinks = []
    for day_index, entries in enumerate(by_day):
        if day_index == 0:
            base = anchor
            span = day_start + SECONDS_PER_DAY - anchor
        else:
            base = day_start + day_index * SECONDS_PER_DAY
            span = SECONDS_PER_DAY
        for k, (payload, count, toa_s) in enumerate(entries):
            send_time = base + (k * span) // len(entries)
            uplinks.append(ScheduledUplink(send_time=send_time, payload=payload,
                                           record_count=count, airtime_ms=toa_s * 1000.0))
    return UplinkPlan(uplinks=uplinks, total_records=len(records))


def _payload_record_counts(records: Sequence[MeterRecord], payloads: Iterable[bytes]) -> list[int]:
    return [len(decode_uplink(p)) for p in payloads]


def _fits(limits: DailyLimits, msgs: int, nbytes: int, airtime_s: float) -> bool:
    if limits.max_messages_per_day is not None and msgs > limits.max_messages_per_day:
        return False
    if limits.max_bytes_per_day is not None and nbytes > limits.max_bytes_per_day:
        return False
    if limits.max_airtime_s_per_day is not None and airtime_s > limits.max_airtime_s_per_day:
        return False
    return True


def _violates_fresh_day(limits: DailyLimits, nbytes: int, airtime_s: float) -> bool:
    return not _fits(limits, 1, nbytes, airtime_s)
