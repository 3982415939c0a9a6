"""meterbeacon: optical meter-reading beacons over LoRaWAN, as an
executable model — readout codec, beacon storage and uplink planning,
modem airtime/energy budgets, coverage fitting, network simulation, and
a file-backed metering data platform with reports."""

__version__ = "0.1.0"

from . import beacon, lora, netsim, obis, platform, propagation  # noqa: F401
