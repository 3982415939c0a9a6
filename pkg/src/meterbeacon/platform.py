"""File-backed metering data platform: uplink ingestion into per-meter
append-only logs, consumption profiles, maximum power demand, threshold
exceedance, and tariff-based cost estimation.

Storage is newline-delimited JSON per meter in a data directory plus an
index file. All register and money arithmetic uses exact decimals;
currency is rounded (banker's rounding, 2 places) only at presentation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from . import beacon
from .obis import ObisCode

DEFAULT_ENERGY_REGISTER = ObisCode(1, 8, 0)

# A drop of more than this fraction of the register span counts as a
# natural rollover rather than corrupt data.
ROLLOVER_FRACTION = Decimal("0.9")
DEFAULT_REGISTER_SPAN = Decimal(1_000_000)

_METER_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class PlatformError(ValueError):
    pass


class IngestError(PlatformError):
    pass


class DataQualityError(PlatformError):
    def __init__(self, message: str, timestamps: list[int] | None = None):
        super().__init__(message)
        self.timestamps = timestamps or []


class TariffError(PlatformError):
    pass


@dataclass(frozen=True)
class Reading:
    timestamp: int
    obis: ObisCode
    value: Decimal
    unit: str | None

    def key(self) -> tuple[int, str]:
        return (self.timestamp, str(self.obis))


class ReadingStore:
    """Per-meter append-only reading logs with a (timestamp, register)
    dedupe index; re-ingesting a payload changes nothing."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, list[Reading]] = {}
        self._keys: dict[str, set[tuple[int, str]]] = {}

    def _check_meter_id(self, meter_id: str) -> str:
        if not _METER_ID_RE.match(meter_id):
            raise PlatformError(f"invalid meter id {meter_id!r}")
        return meter_id

    def _log_path(self, meter_id: str) -> Path:
        return self.data_dir / f"{meter_id}.ndjson"

    def _quarantine_path(self, meter_id: str) -> Path:
        return self.data_dir / f"{meter_id}.quarantine.ndjson"

    def _load(self, meter_id: str) -> None:
        if meter_id in self._cache:
            return
        readings: list[Reading] = []
        keys: set[tuple[int, str]] = set()
        path = self._log_path(meter_id)
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                row = json.loads(line)
                reading = Reading(timestamp=row["ts"], obis=ObisCode.parse(row["obis"]),
                                  value=Decimal(row["value"]), unit=row.get("unit"))
                readings.append(reading)
                keys.add(reading.key())
        self._cache[meter_id] = readings
        self._keys[meter_id] = keys

    def _write_index(self) -> None:
        index = {}
        for meter_id, readings in sorted(self._cache.items()):
            if not readings:
                continue
            ts = [r.timestamp for r in readings]
            index[meter_id] = {"count": len(readings), "first_ts": min(ts), "last_ts": max(ts)}
        (self.data_dir / "index.json").write_text(
            json.dumps({"meters": index}, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def meters(self) -> list[str]:
        ids = {p.name[: -len(".ndjson")] for p in self.data_dir.glob("*.ndjson")
               if not p.name.endswith(".quarantine.ndjson")}
        return sorted(ids | set(self._cache))

    def add(self, meter_id: str, readings: list[Reading]) -> int:
        """Append readings that are not already present; returns how many
        were new."""
        self._check_meter_id(meter_id)
        self._load(meter_id)
        fresh = [r for r in readings if r.key() not in self._keys[meter_id]]
        if not fresh:
            return 0
        with self._log_path(meter_id).open("a", encoding="utf-8") as fh:
            for r in fresh:
                self._keys[meter_id].add(r.key())
                self._cache[meter_id].append(r)
                fh.write(json.dumps({"ts": r.timestamp, "obis": str(r.obis),
                                     "value": str(r.value), "unit": r.unit}) + "\n")
        self._write_index()
        return len(fresh)

    def quarantine(self, meter_id: str, readings: list[Reading], reason: str) -> None:
        self._check_meter_id(meter_id)
        with self._quarantine_path(meter_id).open("a", encoding="utf-8") as fh:
            for r in readings:
                fh.write(json.dumps({"ts": r.timestamp, "obis": str(r.obis),
                                     "value": str(r.value), "unit": r.unit,
                                     "reason": reason}) + "\n")

    def readings(self, meter_id: str, t_from: int | None = None, t_to: int | None = None,
                 obis: ObisCode | None = None) -> list[Reading]:
        """Chronological readings, optionally filtered by time and register."""
        self._check_meter_id(meter_id)
        self._load(meter_id)
        rows = self._cache[meter_id]
        out = [r for r in rows
               if (t_from is None or r.timestamp >= t_from)
               and (t_to is None or r.timestamp <= t_to)
               and (obis is None or r.obis == obis)]
        return sorted(out, key=lambda r: r.timestamp)


def ingest_uplink(store: ReadingStore, meter_id: str, payload: bytes, received_at: int,
                  max_future_skew_s: int = 300) -> int:
    """Decode an uplink payload and append its readings; duplicates are
    skipped silently. Readings timestamped further than the skew bound
    into the future are quarantined. Returns the count actually added."""
    try:
        records = beacon.decode_uplink(payload)
    except beacon.PayloadError as exc:
        raise IngestError(f"undecodable uplink: {exc}") from exc

    accepted: list[Reading] = []
    skewed: list[Reading] = []
    for record in records:
        for obis, value, unit in record.readings:
            reading = Reading(timestamp=record.timestamp, obis=obis, value=value, unit=unit)
            if record.timestamp > received_at + max_future_skew_s:
                skewed.append(reading)
            else:
                accepted.append(reading)
    if skewed:
        store.quarantine(meter_id, skewed,
                         reason=f"timestamp beyond received_at+{max_future_skew_s}s")
    return store.add(meter_id, accepted)


@dataclass(frozen=True)
class ProfileBucket:
    start: int
    duration_s: int
    energy_kwh: Decimal
    avg_power_kw: Decimal


@dataclass(frozen=True)
class ConsumptionProfile:
    meter_id: str
    obis: ObisCode
    t_from: int
    t_to: int
    interval_s: int
    buckets: tuple[ProfileBucket, ...]

    @property
    def total_energy_kwh(self) -> Decimal:
        return sum((b.energy_kwh for b in self.buckets), Decimal(0))


def _unwrap(readings: list[Reading], register_span: Decimal) -> list[tuple[int, Decimal]]:
    """Cumulative register series with rollovers unwound; a decrease that
    is not a rollover is a data-quality error naming the timestamps."""
    series: list[tuple[int, Decimal]] = []
    offset = Decimal(0)
    bad: list[int] = []
    prev: Decimal | None = None
    for r in readings:
        value = r.value
        if prev is not None and value < prev:
            if prev - value > ROLLOVER_FRACTION * register_span:
                offset += register_span
            else:
                bad.append(r.timestamp)
        prev = value
        series.append((r.timestamp, value + offset))
    if bad:
        raise DataQualityError(
            f"register decreased without rollover at {len(bad)} timestamp(s)", timestamps=bad)
    return series


def _interpolate(series: list[tuple[int, Decimal]], t: int) -> Decimal:
    """Linear interpolation between adjacent readings (exact endpoints)."""
    lo, hi = 0, len(series) - 1
    if t <= series[0][0]:
        return series[0][1]
    if t >= series[-1][0]:
        return series[-1][1]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if series[mid][0] <= t:
            lo = mid
        else:
            hi = mid
    t1, v1 = series[lo]
    t2, v2 = series[hi]
    if t == t1:
        return v1
    return v1 + (v2 - v1) * Decimal(t - t1) / Decimal(t2 - t1)


def consumption_profile(store: ReadingStore, meter_id: str, t_from: int, t_to: int,
                        interval_s: int, obis: ObisCode = DEFAULT_ENERGY_REGISTER,
                        register_span: Decimal = DEFAULT_REGISTER_SPAN) -> ConsumptionProfile:
    """Per-interval energy from cumulative register deltas, with linear
    interpolation where readings sit off the interval grid. Bucket sums
    telescope exactly to the register delta over the range."""
    if t_to <= t_from:
        raise PlatformError(f"empty range: {t_from}..{t_to}")
    if interval_s <= 0:
        raise PlatformError(f"interval must be positive, got {interval_s}")
    readings = store.readings(meter_id, obis=obis)
    if not readings:
        raise PlatformError(f"no readings for meter {meter_id!r} register {obis}")
    if readings[0].timestamp > t_from or readings[-1].timestamp < t_to:
        raise PlatformError(
            f"readings cover {readings[0].timestamp}..{readings[-1].timestamp}, "
            f"not the requested {t_from}..{t_to}")
    series = _unwrap(readings, register_span)

    boundaries = list(range(t_from, t_to, interval_s)) + [t_to]
    values = [_interpolate(series, t) for t in boundaries]
    buckets = []
    for i in range(len(boundaries) - 1):
        duration = boundaries[i + 1] - boundaries[i]
        energy = values[i + 1] - values[i]
        power = energy * 3600 / Decimal(duration)
        buckets.append(ProfileBucket(start=boundaries[i], duration_s=duration,
                                     energy_kwh=energy, avg_power_kw=power))
    return ConsumptionProfile(meter_id=meter_id, obis=obis, t_from=t_from, t_to=t_to,
                              interval_s=interval_s, buckets=tuple(buckets))


def max_power_demand(profile: ConsumptionProfile) -> tuple[Decimal, int]:
    """Highest interval-average power and when it started; ties go to the
    earliest interval."""
    if not profile.buckets:
        raise PlatformError("profile has no intervals")
    best = profile.buckets[0]
    for bucket in profile.buckets[1:]:
        if bucket.avg_power_kw > best.avg_power_kw:
            best = bucket
    return best.avg_power_kw, best.start


def threshold_exceedance(profile: ConsumptionProfile, threshold_kw: Decimal) -> Decimal:
    """Percent of the profile's time span with average power strictly
    above the threshold."""
    total = profile.t_to - profile.t_from
    over = sum(b.duration_s for b in profile.buckets if b.avg_power_kw > threshold_kw)
    return Decimal(over * 100) / Decimal(total)


@dataclass(frozen=True)
class TariffZone:
    name: str
    start_s: int        # seconds since midnight, inclusive
    end_s: int          # exclusive
    price_per_kwh: Decimal

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s <= beacon.SECONDS_PER_DAY:
            raise TariffError(f"zone {self.name!r} has bad bounds {self.start_s}..{self.end_s}")
        if self.price_per_kwh < 0:
            raise TariffError(f"zone {self.name!r} has a negative price")


@dataclass(frozen=True)
class Tariff:
    """Time-of-day price zones partitioning the 24 h day, an optional fixed
    daily charge, and an optional validity window."""

    name: str
    zones: tuple[TariffZone, ...]
    fixed_daily: Decimal = Decimal(0)
    currency: str = ""
    valid_from: int | None = None
    valid_to: int | None = None

    def __post_init__(self):
        zones = sorted(self.zones, key=lambda z: z.start_s)
        if not zones:
            raise TariffError("tariff needs at least one zone")
        if zones[0].start_s != 0 or zones[-1].end_s != beacon.SECONDS_PER_DAY:
            raise TariffError("zones must cover the full day from 00:00 to 24:00")
        for a, b in zip(zones, zones[1:]):
            if a.end_s != b.start_s:
                raise TariffError(f"zones {a.name!r} and {b.name!r} leave a gap or overlap")
        object.__setattr__(self, "zones", tuple(zones))

    @classmethod
    def flat(cls, price_per_kwh: Decimal, name: str = "flat", **kwargs) -> "Tariff":
        return cls(name=name, zones=(TariffZone("all-day", 0, beacon.SECONDS_PER_DAY,
                                                price_per_kwh),), **kwargs)


def _parse_hhmm(text: str) -> int:
    m = re.fullmatch(r"([0-9]{1,2}):([0-9]{2})", text)
    if not m:
        raise TariffError(f"bad time of day {text!r}, expected hh:mm")
    hours, minutes = int(m.group(1)), int(m.group(2))
    if hours > 24 or minutes > 59 or (hours == 24 and minutes != 0):
        raise TariffError(f"bad time of day {text!r}")
    return hours * 3600 + minutes * 60


def load_tariff(path: str | Path) -> Tariff:
    """Read a tariff file: JSON with a zone list (start hh:mm, end hh:mm,
    price per kWh); zones crossing midnight are split automatically."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"), parse_float=Decimal)
    except (OSError, json.JSONDecodeError) as exc:
        raise TariffError(f"cannot read tariff file {path}: {exc}") from exc
    try:
        zones = []
        for z in raw["zones"]:
            start = _parse_hhmm(z["start"])
            end = _parse_hhmm(z["end"])
            price = Decimal(str(z["price"]))
            name = z.get("name", f"{z['start']}-{z['end']}")
            if end == 0:
                end = beacon.SECONDS_PER_DAY
            if start < end:
                zones.append(TariffZone(name, start, end, price))
            else:        # wraps midnight: split
                zones.append(TariffZone(name, start, beacon.SECONDS_PER_DAY, price))
                zones.append(TariffZone(name, 0, end, price))
        return Tariff(name=raw.get("name", Path(path).stem), zones=tuple(zones),
                      fixed_daily=Decimal(str(raw.get("fixed_daily", "0"))),
                      currency=raw.get("currency", ""),
                      valid_from=raw.get("valid_from"), valid_to=raw.get("valid_to"))
    except (KeyError, TypeError) as exc:
        raise TariffError(f"malformed tariff file {path}: {exc}") from exc


def _zone_overlap_s(zone: TariffZone, start: int, end: int) -> int:
    """Seconds of [start, end) falling inside the zone's daily window."""
    total = 0
    day = (start // beacon.SECONDS_PER_DAY) * beacon.SECONDS_PER_DAY
    while day < end:
        z_start = day + zone.start_s
        z_end = day + zone.end_s
        total += max(0, min(end, z_end) - max(start, z_start))
        day += beacon.SECONDS_PER_DAY
    return total


def cost_estimate(profile: ConsumptionProfile, tariff: Tariff) -> Decimal:
    """Energy cost over the profile: each interval's energy is priced by
    the zone containing it, split proportionally by time when the interval
    straddles a zone boundary; fixed daily charges are added per calendar
    day touched. Exact decimal arithmetic, unrounded."""
    if tariff.valid_from is not None and profile.t_from < tariff.valid_from:
        raise TariffError("profile starts before the tariff's validity window")
    if tariff.valid_to is not None and profile.t_to > tariff.valid_to:
        raise TariffError("profile ends after the tariff's validity window")

    total = Decimal(0)
    for bucket in profile.buckets:
        b_end = bucket.start + bucket.duration_s
        for zone in tariff.zones:
            overlap = _zone_overlap_s(zone, bucket.start, b_end)
            if overlap == 0:
                continue
            share = bucket.energy_kwh * Decimal(overlap) / Decimal(bucket.duration_s)
            total += share * zone.price_per_kwh

    first_day = profile.t_from // beacon.SECONDS_PER_DAY
    last_day = (profile.t_to - 1) // beacon.SECONDS_PER_DAY
    total += tariff.fixed_daily * (last_day - first_day + 1)
    return total


def format_amount(amount: Decimal) -> Decimal:
    """Presentation rounding: two places, banker's rounding."""
    return amount.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)
