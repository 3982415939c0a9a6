"""Deterministic discrete-event simulator of beacons uplinking through one
gateway: per-node traffic, uniform channel choice, binary collision model
with SF orthogonality and optional capture, sliding-window duty-cycle
gating, and delivery/energy accounting.

Time is integer microseconds throughout so event ordering never depends
on floating-point ties; remaining ties break by node id.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from random import Random
from typing import Mapping, Sequence

from .lora import (EnergyModel, RadioParams, SENSITIVITY_DBM_125KHZ,
                   time_on_air_ms, tx_energy_uah)
from .propagation import PathLossModel, predict_rssi

US_PER_S = 1_000_000
WINDOW_US = 3_600 * US_PER_S     # regulatory duty-cycle window: one hour

DELIVERED = "delivered"
COLLIDED = "collided"
BELOW_SENSITIVITY = "below-sensitivity"
DEFERRED = "deferred-duty-cycle"


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficSpec:
    """Per-node uplink arrivals.

    ``periodic``: one frame every ``interval_s``; ``offset_s`` None draws a
    per-node random phase. ``poisson``: exponential inter-arrival times at
    ``rate_per_s``. ``explicit``: caller-provided per-node schedules of
    (start_us, payload_len).
    """

    kind: str = "periodic"
    interval_s: float = 900.0
    offset_s: float | None = None
    rate_per_s: float = 0.0
    schedules: tuple[tuple[tuple[int, int], ...], ...] = ()

    def __post_init__(self):
        if self.kind not in ("periodic", "poisson", "explicit"):
            raise SimConfigError(f"unknown traffic kind {self.kind!r}")
        if self.kind == "periodic" and self.interval_s <= 0:
            raise SimConfigError("periodic traffic needs a positive interval")
        if self.kind == "poisson" and self.rate_per_s <= 0:
            raise SimConfigError("poisson traffic needs a positive rate")
        if self.kind == "explicit" and not self.schedules:
            raise SimConfigError("explicit traffic needs per-node schedules")


@dataclass(frozen=True)
class SimConfig:
    nodes: int
    duration_s: float
    traffic: TrafficSpec
    channels: int = 8
    sf: int | tuple[int, ...] = 7
    payload_len: int = 50
    duty_cycle: float = 0.01
    capture_effect: bool = False
    capture_threshold_db: float = 6.0
    seed: int = 0
    radio: RadioParams = field(default_factory=RadioParams)
    energy: EnergyModel = field(default_factory=EnergyModel)
    distances_m: tuple[float, ...] | None = None
    path_loss: PathLossModel | None = None
    shadowing_sigma_db: float = 0.0
    sensitivity_dbm: float | Mapping[int, float] | None = None

    def __post_init__(self):
        if self.nodes < 1:
            raise SimConfigError(f"need at least one node, got {self.nodes}")
        if self.duration_s <= 0:
            raise SimConfigError(f"duration must be positive, got {self.duration_s}")
        if self.channels < 1:
            raise SimConfigError(f"need at least one channel, got {self.channels}")
        if not 0 < self.duty_cycle <= 1:
            raise SimConfigError(f"duty cycle must be in (0, 1], got {self.duty_cycle}")
        if not 1 <= self.payload_len <= 255:
            raise SimConfigError(f"payload length must be 1-255, got {self.payload_len}")
        if isinstance(self.sf, tuple) and len(self.sf) != self.nodes:
            raise SimConfigError("per-node SF list length must match node count")
        if self.path_loss is not None and self.distances_m is None:
            raise SimConfigError("a path-loss model needs per-node distances")
        if self.distances_m is not None and len(self.distances_m) != self.nodes:
            raise SimConfigError("distance list length must match node count")

    def sf_of(self, node: int) -> int:
        return self.sf[node] if isinstance(self.sf, tuple) else self.sf

    def sensitivity_of(self, sf: int) -> float:
        if self.sensitivity_dbm is None:
            return SENSITIVITY_DBM_125KHZ[sf]
        if isinstance(self.sensitivity_dbm, (int, float)):
            return float(self.sensitivity_dbm)
        try:
            return float(self.sensitivity_dbm[sf])
        except KeyError as exc:
            raise SimConfigError(f"no sensitivity entry for SF{sf}") from exc


@dataclass
class TransmissionEvent:
    node: int
    start_us: int
    duration_us: int
    channel: int
    sf: int
    payload_len: int
    rssi_dbm: float | None
    outcome: str
    deferred_until_us: int | None = None


@dataclass
class NodeStats:
    node: int
    scheduled: int = 0
    attempted: int = 0
    delivered: int = 0
    collided: int = 0
    below_sensitivity: int = 0
    deferred: int = 0
    energy_uah: float = 0.0


@dataclass
class SimReport:
    seed: int
    duration_s: float
    nodes: int
    node_stats: list[NodeStats]
    events: list[TransmissionEvent]
    airtime_s_by_channel: list[float]

    def _total(self, name: str) -> int:
        return sum(getattr(s, name) for s in self.node_stats)

    @property
    def scheduled(self) -> int:
        return self._total("scheduled")

    @property
    def attempted(self) -> int:
        return self._total("attempted")

    @property
    def delivered(self) -> int:
        return self._total("delivered")

    @property
    def collided(self) -> int:
        return self._total("collided")

    @property
    def below_sensitivity(self) -> int:
        return self._total("below_sensitivity")

    @property
    def deferred(self) -> int:
        return self._total("deferred")

    @property
    def pdr(self) -> float:
        return self.delivered / self.attempted if self.attempted else 1.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "nodes": self.nodes,
            "totals": {
                "scheduled": self.scheduled,
                "attempted": self.attempted,
                "delivered": self.delivered,
                "collided": self.collided,
                "below_sensitivity": self.below_sensitivity,
                "deferred": self.deferred,
                "pdr": self.pdr,
            },
            "airtime_s_by_channel": list(self.airtime_s_by_channel),
            "per_node": [{
                "node": s.node, "scheduled": s.scheduled, "attempted": s.attempted,
                "delivered": s.delivered, "collided": s.collided,
                "below_sensitivity": s.below_sensitivity, "deferred": s.deferred,
                "energy_uah": s.energy_uah,
            } for s in self.node_stats],
        }

    def digest(self) -> str:
        """Stable hash over the summary and the full event trace."""
        trace = [(e.node, e.start_us, e.duration_us, e.channel, e.sf, e.payload_len,
                  e.rssi_dbm, e.outcome, e.deferred_until_us) for e in self.events]
        blob = json.dumps([self.to_dict(), trace], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def collision_check(a: TransmissionEvent, b: TransmissionEvent) -> bool:
    """Binary collision rule: same channel, same SF, time overlap."""
    if a.channel != b.channel or a.sf != b.sf:
        return False
    return a.start_us < b.start_us + b.duration_us and b.start_us < a.start_us + a.duration_us


def duty_cycle_gate(history: Sequence[tuple[int, int]], start_us: int, duration_us: int,
                    duty_cycle: float, window_us: int = WINDOW_US) -> tuple[bool, int | None]:
    """Check a proposed transmission against the sliding-window duty cycle.

    ``history`` holds this node's past (start_us, end_us) airtime. The
    constraint: cumulative airtime within any window of ``window_us`` must
    not exceed ``duty_cycle * window_us``. Returns (True, start_us) when
    compliant, else (False, earliest compliant start) — or (False, None)
    when the frame alone exceeds the whole budget.
    """
    if not 0 < duty_cycle <= 1:
        raise SimConfigError(f"duty cycle must be in (0, 1], got {duty_cycle}")
    if duration_us <= 0 or duration_us > window_us:
        raise SimConfigError(f"duration {duration_us} us outside (0, {window_us}]")
    budget = duty_cycle * window_us
    if duration_us > budget:
        return False, None

    events = [(s, e) for s, e in history if e > start_us - window_us]

    def used(window_end: int) -> int:
        lo = window_end - window_us
        return sum(min(e, window_end) - max(s, lo)
                   for s, e in events if e > lo and s < window_end)

    def compliant(t: int) -> bool:
        return used(t + duration_us) + duration_us <= budget + 1e-6

    if compliant(start_us):
        return True, start_us
    # Airtime-in-window is piecewise linear in the start time; its slope
    # only changes where a window edge crosses an event boundary. Scan the
    # segments in order and binary-search the first compliant instant
    # inside the first segment whose right end complies.
    breaks = set()
    for s, e in events:
        for b in (s + window_us - duration_us, e + window_us - duration_us,
                  s - duration_us, e - duration_us):
            if b > start_us:
                breaks.add(b)
    horizon = max(e for _, e in events) + window_us
    prev = start_us
    for c in sorted(breaks) + [horizon]:
        if compliant(c):
            lo, hi = prev, c
            while lo < hi:
                mid = (lo + hi) // 2
                if compliant(mid):
                    hi = mid
                else:
                    lo = mid + 1
            return False, lo
        prev = c
    return False, horizon


def assign_rssi(distance_m: float, model: PathLossModel, shadowing_sigma_db: float,
                rng: Random) -> float:
    """Mean path-loss prediction plus an optional shadowing draw."""
    rssi = predict_rssi(model, distance_m)
    if shadowing_sigma_db > 0:
        rssi += rng.gauss(0.0, shadowing_sigma_db)
    return rssi


def _node_schedule(config: SimConfig, node: int, rng: Random) -> list[tuple[int, int]]:
    spec = config.traffic
    duration_us = int(config.duration_s * US_PER_S)
    if spec.kind == "explicit":
        if node >= len(spec.schedules):
            return []
        return [(int(t), int(plen)) for t, plen in spec.schedules[node]]
    starts: list[int] = []
    if spec.kind == "periodic":
        offset = spec.offset_s if spec.offset_s is not None else rng.uniform(0, spec.interval_s)
        t = offset
        while t * US_PER_S < duration_us:
            starts.append(int(t * US_PER_S))
            t += spec.interval_s
    else:    # poisson
        t = rng.expovariate(spec.rate_per_s)
        while t * US_PER_S < duration_us:
            starts.append(int(t * US_PER_S))
            t += rng.expovariate(spec.rate_per_s)
    return [(s, config.payload_len) for s in starts]


def run(config: SimConfig) -> SimReport:
    """Execute one simulation; identical config and seed give a
    bit-identical report."""
    stats = [NodeStats(node=i) for i in range(config.nodes)]
    events: list[TransmissionEvent] = []

    for node in range(config.nodes):
        rng = Random(config.seed * 1_000_003 + node + 1)
        node_sf = config.sf_of(node)
        params = replace(config.radio, sf=node_sf)
        toa_cache: dict[int, int] = {}
        history: list[tuple[int, int]] = []

        for start_us, payload_len in _node_schedule(config, node, rng):
            stats[node].scheduled += 1
            if payload_len not in toa_cache:
                toa_cache[payload_len] = round(time_on_air_ms(payload_len, params) * 1000)
            duration_us = toa_cache[payload_len]

            allowed, earliest = duty_cycle_gate(history, start_us, duration_us,
                                                config.duty_cycle)
            if not allowed:
                stats[node].deferred += 1
                events.append(TransmissionEvent(
                    node=node, start_us=start_us, duration_us=duration_us,
                    channel=-1, sf=node_sf, payload_len=payload_len, rssi_dbm=None,
                    outcome=DEFERRED, deferred_until_us=earliest))
                continue

            channel = rng.randrange(config.channels)
            rssi = None
            if config.path_loss is not None:
                rssi = assign_rssi(config.distances_m[node], config.path_loss,
                                   config.shadowing_sigma_db, rng)
            stats[node].attempted += 1
            stats[node].energy_uah += tx_energy_uah(payload_len, params, config.energy)
            history.append((start_us, start_us + duration_us))
            # prune airtime history that can no longer affect any window
            cutoff = start_us - WINDOW_US
            while history and history[0][1] < cutoff:
                history.pop(0)
            events.append(TransmissionEvent(
                node=node, start_us=start_us, duration_us=duration_us,
                channel=channel, sf=node_sf, payload_len=payload_len,
                rssi_dbm=rssi, outcome=DELIVERED))

    events.sort(key=lambda e: (e.start_us, e.node))

    # Sensitivity first: frames the gateway cannot hear are noise-floor
    # level and do not act as colliders.
    contenders: list[TransmissionEvent] = []
    for ev in events:
        if ev.outcome == DEFERRED:
            continue
        if ev.rssi_dbm is not None and ev.rssi_dbm < config.sensitivity_of(ev.sf):
            ev.outcome = BELOW_SENSITIVITY
            continue
        contenders.append(ev)

    lost: set[int] = set()
    active: list[TransmissionEvent] = []
    for ev in contenders:
        active = [a for a in active if a.start_us + a.duration_us > ev.start_us]
        for other in active:
            if not collision_check(ev, other):
                continue
            if (config.capture_effect and ev.rssi_dbm is not None
                    and other.rssi_dbm is not None
                    and abs(ev.rssi_dbm - other.rssi_dbm) >= config.capture_threshold_db):
                weaker = ev if ev.rssi_dbm < other.rssi_dbm else other
                lost.add(id(weaker))
            else:
                lost.add(id(ev))
                lost.add(id(other))
        active.append(ev)

    airtime_by_channel = [0.0] * config.channels
    for ev in events:
        if ev.outcome == DEFERRED:
            continue
        airtime_by_channel[ev.channel] += ev.duration_us / US_PER_S
        if ev.outcome == BELOW_SENSITIVITY:
            stats[ev.node].below_sensitivity += 1
        elif id(ev) in lost:
            ev.outcome = COLLIDED
            stats[ev.node].collided += 1
        else:
            stats[ev.node].delivered += 1

    return SimReport(seed=config.seed, duration_s=config.duration_s, nodes=config.nodes,
                     node_stats=stats, events=events,
                     airtime_s_by_channel=airtime_by_channel)
