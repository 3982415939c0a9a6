"""IEC 62056-21 mode-C optical readout codec and LED impulse counting.

Implements the request/response variant with baud negotiation used by
bottle-cap optical probes: sign-on, identification, acknowledgement and
the STX/ETX-framed data message closed by an XOR block check character.
Register values are kept as exact decimals end to end; nothing here ever
touches binary floating point.
"""

from __future__ import annotations

import re
from bisect import bisect_left
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum

SOH = 0x01
STX = 0x02
ETX = 0x03
ACK = 0x06
NAK = 0x15
CRLF = b"\r\n"

SIGN_ON = b"/?!\r\n"

# SML transmissions open with this escape/version sequence. SML is a
# different protocol entirely; we only detect it to reject it cleanly.
SML_ESCAPE = b"\x1b\x1b\x1b\x1b\x01\x01\x01\x01"

# Mode-C baud identification: character '0' selects 300 Bd, each step doubles.
BAUD_TABLE = {chr(ord("0") + k): 300 * 2**k for k in range(7)}

_MODE_B_BAUD_CHARS = "ABCDEFGHI"

_VALUE_RE = re.compile(r"^-?[0-9]+(\.[0-9]+)?$")
_UNIT_RE = re.compile(r"^[A-Za-z0-9%/°µΩ]+$")


class ProtocolError(ValueError):
    """Malformed frame or data line; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class BccMismatchError(ProtocolError):
    """Recomputed block check differs from the one in the frame."""


class UnsupportedProtocolError(ProtocolError):
    """Recognizably a different protocol (SML) or readout mode (A/B/D/E)."""


@dataclass(frozen=True)
class ObisCode:
    """Register address, C.D.E with optional A (medium) / B (channel) groups."""

    c: int
    d: int
    e: int
    a: int | None = None
    b: int | None = None

    def __post_init__(self):
        for name in ("c", "d", "e", "a", "b"):
            v = getattr(self, name)
            if v is None:
                continue
            if not isinstance(v, int) or not 0 <= v <= 255:
                raise ValueError(f"OBIS group {name.upper()} out of range 0-255: {v!r}")

    def __str__(self) -> str:
        cde = f"{self.c}.{self.d}.{self.e}"
        if self.a is not None or self.b is not None:
            return f"{0 if self.a is None else self.a}-{0 if self.b is None else self.b}:{cde}"
        return cde

    @classmethod
    def parse(cls, text: str) -> "ObisCode":
        """Parse 'C.D.E' or 'A-B:C.D.E'."""
        a = b = None
        body = text
        if ":" in body:
            prefix, body = body.split(":", 1)
            m = re.fullmatch(r"([0-9]{1,3})-([0-9]{1,3})", prefix)
            if not m:
                raise ProtocolError(f"malformed OBIS medium/channel prefix {prefix!r}")
            a, b = int(m.group(1)), int(m.group(2))
        m = re.fullmatch(r"([0-9]{1,3})\.([0-9]{1,3})\.([0-9]{1,3})", body)
        if not m:
            raise ProtocolError(f"malformed OBIS address {text!r}")
        try:
            return cls(int(m.group(1)), int(m.group(2)), int(m.group(3)), a=a, b=b)
        except ValueError as exc:
            raise ProtocolError(str(exc)) from exc


@dataclass
class DataLine:
    """One 'ADDRESS(VALUE*UNIT)' entry of a readout.

    ``int_width`` records how many integer digits the frame carried so a
    round trip reproduces the meter's zero padding; it does not take part
    in equality.
    """

    obis: ObisCode
    value: Decimal
    unit: str | None = None
    int_width: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Identification:
    """Identification message content: '/MAN<baud><ident>CRLF'."""

    manufacturer: str
    baud_char: str
    ident: str

    def to_bytes(self) -> bytes:
        return b"/" + (self.manufacturer + self.baud_char + self.ident).encode("ascii") + CRLF


@dataclass
class DataMessage:
    """Parsed readout: optional identification, data lines, block check."""

    lines: list[DataLine]
    identification: Identification | None = None
    bcc: int = 0


class Phase(str, Enum):
    IDLE = "idle"
    SIGN_ON_SENT = "sign-on-sent"
    IDENT_RECEIVED = "ident-received"
    ACK_SENT = "ack-sent"
    DATA_RECEIVING = "data-receiving"
    DONE = "done"
    ERROR = "error"


@dataclass(frozen=True)
class HandshakeState:
    """Explicit mode-C reader state; advance with :func:`handshake_next`."""

    phase: Phase = Phase.IDLE
    negotiated_baud: int | None = None
    identification: Identification | None = None
    message: DataMessage | None = None
    buffer: bytes = b""
    error: str | None = None


@dataclass(frozen=True)
class ImpulseStream:
    """Pulse timestamps from a meter's blinking LED plus its impulse constant."""

    timestamps: tuple[float, ...]
    meter_constant: int    # impulses per kWh

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if self.meter_constant <= 0:
            raise ValueError(f"meter constant must be positive, got {self.meter_constant}")
        ts = self.timestamps
        if any(ts[i] >= ts[i + 1] for i in range(len(ts) - 1)):
            raise ValueError("pulse timestamps must be strictly increasing")


def compute_bcc(payload: bytes) -> int:
    """XOR-fold of the checked span (after SOH/STX through ETX inclusive)."""
    bcc = 0
    for byte in payload:
        bcc ^= byte
    return bcc


def parse_data_line(text: str, offset: int = 0) -> DataLine:
    """Parse one data line, e.g. ``1.8.0(012345.678*kWh)``.

    ``offset`` is the byte position of the line inside its frame; it is
    folded into error messages so corrupt frames can be located.
    """
    open_idx = text.find("(")
    if open_idx < 0:
        raise ProtocolError("data line has no '(' value delimiter", offset + len(text))
    if open_idx == 0:
        raise ProtocolError("data line has empty address", offset)
    address = text[:open_idx]
    try:
        obis = ObisCode.parse(address)
    except ProtocolError as exc:
        raise ProtocolError(f"bad address {address!r}: {exc}", offset) from exc

    close_idx = text.find(")", open_idx)
    if close_idx < 0:
        raise ProtocolError("unbalanced parentheses in data line", offset + len(text))
    if close_idx != len(text) - 1:
        raise ProtocolError("trailing data after ')'", offset + close_idx + 1)

    body = text[open_idx + 1 : close_idx]
    value_text, star, unit = body.partition("*")
    if not value_text:
        raise ProtocolError("empty value", offset + open_idx + 1)
    if not _VALUE_RE.match(value_text):
        raise ProtocolError(f"malformed decimal value {value_text!r}", offset + open_idx + 1)
    if star and not unit:
        raise ProtocolError("empty unit after '*'", offset + open_idx + 1 + len(value_text) + 1)
    if unit and not _UNIT_RE.match(unit):
        raise ProtocolError(f"malformed unit {unit!r}", offset + open_idx + 1 + len(value_text) + 1)

    digits = value_text.lstrip("-")
    int_width = len(digits.split(".", 1)[0])
    return DataLine(obis=obis, value=Decimal(value_text), unit=unit or None, int_width=int_width)


def serialize_data_line(line: DataLine) -> str:
    """Render a data line; pads the integer part to the width seen at parse
    time, or to the 6.3 default for lines that were never parsed."""
    exponent = line.value.as_tuple().exponent
    frac = -exponent if exponent < 0 else 0
    int_width = line.int_width
    if int_width <= 0:      # new line: default 6.3 padding
        int_width = 6
        frac = max(frac, 3)
    width = int_width + (frac + 1 if frac else 0) + (1 if line.value < 0 else 0)
    value_text = f"{line.value:0{width}.{frac}f}"
    unit_part = f"*{line.unit}" if line.unit else ""
    return f"{line.obis}({value_text}{unit_part})"


def _parse_identification(msg: bytes) -> Identification:
    if not msg.startswith(b"/") or not msg.endswith(CRLF):
        raise ProtocolError("malformed identification message")
    body = msg[1:-2]
    if len(body) < 4:
        raise ProtocolError("identification message too short")
    try:
        text = body.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ProtocolError("identification message is not ASCII") from exc
    manufacturer, baud_char, ident = text[:3], text[3], text[4:]
    if not manufacturer.isalpha():
        raise ProtocolError(f"malformed manufacturer tag {manufacturer!r}")
    return Identification(manufacturer=manufacturer, baud_char=baud_char, ident=ident)


def parse_readout(frame: bytes) -> DataMessage:
    """Parse a readout frame and verify its block check.

    Accepts either a bare data message ``STX <lines> ! CRLF ETX BCC`` or a
    full session capture where the identification line precedes the STX.
    """
    if frame.startswith(SML_ESCAPE):
        raise UnsupportedProtocolError("SML transmission detected; only IEC 62056-21 mode C is supported")

    identification = None
    rest = frame
    base = 0
    if rest.startswith(b"/"):
        nl = rest.find(CRLF)
        if nl < 0:
            raise ProtocolError("identification line not terminated", len(rest))
        identification = _parse_identification(rest[: nl + 2])
        base = nl + 2
        rest = frame[base:]

    if not rest or rest[0] != STX:
        raise ProtocolError("frame does not start with STX", base)
    etx_idx = rest.find(bytes([ETX]))
    if etx_idx < 0:
        raise ProtocolError("frame has no ETX", base + len(rest))
    if len(rest) < etx_idx + 2:
        raise ProtocolError("frame truncated before block check", base + len(rest))
    if len(rest) > etx_idx + 2:
        raise ProtocolError("trailing bytes after block check", base + etx_idx + 2)

    checked_span = rest[1 : etx_idx + 1]
    stored_bcc = rest[etx_idx + 1]
    computed = compute_bcc(checked_span)
    if computed != stored_bcc:
        raise BccMismatchError(
            f"block check mismatch: computed 0x{computed:02X}, frame carries 0x{stored_bcc:02X}"
        )

    block = rest[1:etx_idx]
    if not block.endswith(b"!" + CRLF):
        raise ProtocolError("data block does not end with '!' terminator", base + etx_idx)
    try:
        block_text = block[:-3].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ProtocolError("data block is not ASCII") from exc

    lines: list[DataLine] = []
    pos = base + 1
    for index, raw in enumerate(block_text.split("\r\n")):
        if raw == "":
            pos += 2
            continue
        try:
            lines.append(parse_data_line(raw, offset=pos))
        except ProtocolError as exc:
            raise ProtocolError(f"data line {index}: {exc}") from exc
        pos += len(raw) + 2
    return DataMessage(lines=lines, identification=identification, bcc=stored_bcc)


def serialize_readout(message: DataMessage, include_identification: bool = True) -> bytes:
    """Build frame bytes for a data message; the block check is recomputed."""
    block = "".join(serialize_data_line(line) + "\r\n" for line in message.lines)
    body = block.encode("ascii") + b"!" + CRLF + bytes([ETX])
    frame = bytes([STX]) + body + bytes([compute_bcc(body)])
    if include_identification and message.identification is not None:
        frame = message.identification.to_bytes() + frame
    return frame


def build_data_message(lines: list[DataLine], identification: Identification | None = None) -> DataMessage:
    """Construct a message with its block check already computed."""
    msg = DataMessage(lines=list(lines), identification=identification)
    frame = serialize_readout(msg, include_identification=False)
    msg.bcc = frame[-1]
    return msg


def _ack_option_message(baud_char: str) -> bytes:
    # ACK, protocol control '0' (normal), baud character, mode '0' (data readout).
    return bytes([ACK]) + b"0" + baud_char.encode("ascii") + b"0" + CRLF


def handshake_next(state: HandshakeState, data: bytes) -> tuple[HandshakeState, bytes]:
    """Advance the mode-C handshake one step.

    ``data`` is the peer's next message, or empty to initiate. Terminal
    states (done, error) never produce output.
    """
    if state.phase in (Phase.DONE, Phase.ERROR):
        return state, b""

    if state.phase == Phase.IDLE:
        if data:
            return replace(state, phase=Phase.ERROR, error="unexpected input before sign-on"), b""
        return replace(state, phase=Phase.SIGN_ON_SENT), SIGN_ON

    if state.phase == Phase.SIGN_ON_SENT:
        try:
            ident = _parse_identification(data)
        except ProtocolError as exc:
            return replace(state, phase=Phase.ERROR, error=str(exc)), b""
        ch = ident.baud_char
        if ch in _MODE_B_BAUD_CHARS:
            return replace(state, phase=Phase.ERROR,
                           error=f"mode B baud character {ch!r}: only mode C is supported"), b""
        if ch not in BAUD_TABLE:
            return replace(state, phase=Phase.ERROR,
                           error=f"unknown baud character {ch!r} (modes A/D/E unsupported)"), b""
        new = replace(state, phase=Phase.ACK_SENT, negotiated_baud=BAUD_TABLE[ch],
                      identification=ident)
        return new, _ack_option_message(ch)

    if state.phase in (Phase.ACK_SENT, Phase.DATA_RECEIVING, Phase.IDENT_RECEIVED):
        buffer = state.buffer + data
        etx_idx = buffer.find(bytes([ETX]))
        if etx_idx < 0 or len(buffer) < etx_idx + 2:
            return replace(state, phase=Phase.DATA_RECEIVING, buffer=buffer), b""
        try:
            parsed = parse_readout(buffer)
        except ProtocolError as exc:
            return replace(state, phase=Phase.ERROR, buffer=buffer, error=str(exc)), b""
        done = replace(state, phase=Phase.DONE, buffer=b"",
                       message=DataMessage(lines=parsed.lines,
                                           identification=parsed.identification or state.identification,
                                           bcc=parsed.bcc))
        return done, b""

    return replace(state, phase=Phase.ERROR, error=f"no transition from phase {state.phase}"), b""


def count_impulses(stream: ImpulseStream, start: float, end: float) -> Decimal:
    """Energy in kWh for pulses in the half-open window [start, end).

    Half-open windows make the count additive over adjacent windows.
    """
    if end < start:
        raise ValueError(f"window end {end} precedes start {start}")
    if stream.meter_constant <= 0:
        raise ValueError("meter constant must be positive")
    lo = bisect_left(stream.timestamps, start)
    hi = bisect_left(stream.timestamps, end)
    return Decimal(hi - lo) / Decimal(stream.meter_constant)
