from __future__ import annotations

import random
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from meterbeacon.obis import (
    BAUD_TABLE, BccMismatchError, DataLine, DataMessage, HandshakeState,
    Identification, ImpulseStream, ObisCode, Phase, ProtocolError,
    SML_ESCAPE, UnsupportedProtocolError, build_data_message, compute_bcc,
    count_impulses, handshake_next, parse_data_line, parse_readout,
    serialize_data_line, serialize_readout,
)


# ------------------------------------------------------------------ bcc

def test_bcc_empty_span_is_zero():
    assert compute_bcc(b"") == 0x00


def test_bcc_known_bytes():
    # XOR oracle computed by hand: 0x31 ^ 0x2E ^ 0x38 = 0x27
    assert compute_bcc(bytes([0x31, 0x2E, 0x38])) == 0x27


def test_bcc_self_inverse_property():
    rng = random.Random(7)
    for _ in range(200):
        frame = bytes(rng.randrange(256) for _ in range(rng.randrange(64)))
        assert compute_bcc(frame + bytes([compute_bcc(frame)])) == 0x00


def test_bcc_detects_any_single_byte_corruption():
    rng = random.Random(11)
    frame = bytes(rng.randrange(256) for _ in range(32))
    reference = compute_bcc(frame)
    for i in range(len(frame)):
        flip = frame[i] ^ (1 << rng.randrange(8))
        corrupted = frame[:i] + bytes([flip]) + frame[i + 1 :]
        assert compute_bcc(corrupted) != reference


# ------------------------------------------------------------------ obis codes

def test_obis_code_text_round_trip():
    code = ObisCode(1, 8, 0)
    assert str(code) == "1.8.0"
    assert ObisCode.parse("1.8.0") == code
    full = ObisCode(1, 8, 1, a=1, b=0)
    assert ObisCode.parse(str(full)) == full


def test_obis_code_bounds():
    with pytest.raises(ValueError):
        ObisCode(256, 8, 0)
    with pytest.raises(ProtocolError):
        ObisCode.parse("1.8")
    with pytest.raises(ProtocolError):
        ObisCode.parse("1.8.999")


# ------------------------------------------------------------------ data lines

def test_parse_data_line_example():
    line = parse_data_line("1.8.0(012345.678*kWh)")
    assert line.obis == ObisCode(1, 8, 0)
    assert line.value == Decimal("12345.678")
    assert line.unit == "kWh"
    assert line.int_width == 6


def test_parse_data_line_zero_register():
    line = parse_data_line("2.8.0(000000.000*kWh)")
    assert line.value == Decimal(0)


def test_parse_data_line_rejects_trailing_garbage():
    with pytest.raises(ProtocolError):
        parse_data_line("1.8.0(12)(34)")


def test_parse_data_line_error_offsets():
    with pytest.raises(ProtocolError, match="byte 21"):
        parse_data_line("1.8.0(012345.678*kWh)x", offset=0)
    with pytest.raises(ProtocolError, match="byte 106"):
        parse_data_line("1.8.0()", offset=100)
    with pytest.raises(ProtocolError, match="bad address"):
        parse_data_line("nonsense(1)")


def test_serialize_data_line_default_padding():
    assert serialize_data_line(DataLine(ObisCode(1, 8, 0), Decimal("12345.678"), "kWh")) \
        == "1.8.0(012345.678*kWh)"
    assert serialize_data_line(DataLine(ObisCode(2, 8, 0), Decimal(0), "kWh")) \
        == "2.8.0(000000.000*kWh)"


def test_serialize_preserves_parsed_width():
    text = "1.8.1(0042.5*kWh)"
    assert serialize_data_line(parse_data_line(text)) == text


_units = st.sampled_from([None, "kWh", "kvarh", "V", "A", "W", "Hz"])
_values = st.decimals(min_value=Decimal("-999999999"), max_value=Decimal("999999999"),
                      allow_nan=False, allow_infinity=False, places=3)


@st.composite
def data_lines(draw):
    code = ObisCode(draw(st.integers(0, 255)), draw(st.integers(0, 255)),
                    draw(st.integers(0, 255)))
    return DataLine(code, draw(_values), draw(_units))


@given(data_lines())
def test_data_line_round_trip(line):
    assert parse_data_line(serialize_data_line(line)) == line


# ------------------------------------------------------------------ readout frames

def _three_line_message() -> DataMessage:
    return build_data_message(
        [DataLine(ObisCode(1, 8, 0), Decimal("12345.678"), "kWh"),
         DataLine(ObisCode(2, 8, 0), Decimal("0.000"), "kWh"),
         DataLine(ObisCode(3, 8, 1), Decimal("17.5"), "kvarh")],
        identification=Identification("MBX", "5", "TESTMETER"))


def test_parse_readout_three_lines():
    message = _three_line_message()
    parsed = parse_readout(serialize_readout(message))
    assert len(parsed.lines) == 3
    assert parsed == message
    assert parsed.identification.manufacturer == "MBX"


def test_parse_readout_flipped_bit_fails_bcc():
    frame = bytearray(serialize_readout(_three_line_message(), include_identification=False))
    idx = frame.index(b"678") + 1
    frame[idx] ^= 0x01
    with pytest.raises(BccMismatchError):
        parse_readout(bytes(frame))


def test_parse_readout_empty_block():
    frame = serialize_readout(DataMessage(lines=[]), include_identification=False)
    parsed = parse_readout(frame)
    assert parsed.lines == []


def test_parse_readout_trailing_bytes_rejected():
    frame = serialize_readout(_three_line_message(), include_identification=False)
    with pytest.raises(ProtocolError, match="trailing"):
        parse_readout(frame + b"\x00")


def test_sml_detected_and_rejected():
    with pytest.raises(UnsupportedProtocolError, match="SML"):
        parse_readout(SML_ESCAPE + b"\x76\x05")


@given(st.lists(data_lines(), max_size=6))
def test_readout_round_trip(lines):
    message = build_data_message(lines)
    assert parse_readout(serialize_readout(message)) == message


# ------------------------------------------------------------------ handshake

def test_handshake_sign_on():
    state, out = handshake_next(HandshakeState(), b"")
    assert out == b"/?!\r\n"
    assert state.phase == Phase.SIGN_ON_SENT


def test_handshake_baud_negotiation():
    state, _ = handshake_next(HandshakeState(), b"")
    state, out = handshake_next(state, b"/MBX5A1B2C3\r\n")
    assert state.negotiated_baud == 9600
    assert state.phase == Phase.ACK_SENT
    assert out == b"\x06" + b"050\r\n"


def test_handshake_baud_table():
    # mode C: '0'..'6' select 300 * 2^k
    for k in range(7):
        char = chr(ord("0") + k)
        assert BAUD_TABLE[char] == 300 * 2**k
        state, _ = handshake_next(HandshakeState(), b"")
        state, _ = handshake_next(state, f"/MBX{char}IDENT\r\n".encode())
        assert state.negotiated_baud == 300 * 2**k


def test_handshake_malformed_ident_errors():
    state, _ = handshake_next(HandshakeState(), b"")
    state, out = handshake_next(state, b"garbage")
    assert state.phase == Phase.ERROR
    assert out == b""


def test_handshake_mode_b_rejected():
    state, _ = handshake_next(HandshakeState(), b"")
    state, _ = handshake_next(state, b"/MBXBIDENT\r\n")
    assert state.phase == Phase.ERROR
    assert "mode B" in state.error


def test_handshake_completes_on_data_frame():
    message = _three_line_message()
    frame = serialize_readout(message, include_identification=False)
    state, _ = handshake_next(HandshakeState(), b"")
    state, _ = handshake_next(state, b"/MBX5TESTMETER\r\n")
    # feed the frame in two chunks to exercise buffering
    state, out = handshake_next(state, frame[:10])
    assert state.phase == Phase.DATA_RECEIVING and out == b""
    state, out = handshake_next(state, frame[10:])
    assert state.phase == Phase.DONE
    assert out == b""
    assert state.message.lines == message.lines


def test_handshake_terminal_states_emit_nothing():
    message = _three_line_message()
    frame = serialize_readout(message, include_identification=False)
    state, _ = handshake_next(HandshakeState(), b"")
    state, _ = handshake_next(state, b"/MBX5X\r\n")
    state, _ = handshake_next(state, frame)
    for terminal in (state, HandshakeState(phase=Phase.ERROR, error="x")):
        after, out = handshake_next(terminal, b"anything")
        assert out == b""
        assert after.phase == terminal.phase


# ------------------------------------------------------------------ impulse counting

def test_count_impulses_direct_division():
    stream = ImpulseStream(timestamps=tuple(float(i) for i in range(250)), meter_constant=1000)
    assert count_impulses(stream, 0, 250) == Decimal("0.25")


def test_count_impulses_empty_window():
    stream = ImpulseStream(timestamps=(1.0, 2.0), meter_constant=1000)
    assert count_impulses(stream, 10, 20) == 0


def test_count_impulses_uniform_hour():
    stream = ImpulseStream(timestamps=tuple(float(i) for i in range(3600)), meter_constant=3600)
    assert count_impulses(stream, 0, 3600) == Decimal(1)


def test_count_impulses_additive_over_disjoint_windows():
    rng = random.Random(3)
    times = sorted(rng.sample(range(100_000), 500))
    stream = ImpulseStream(timestamps=tuple(float(t) for t in times), meter_constant=800)
    cuts = sorted(rng.sample(range(100_001), 7))
    total = sum((count_impulses(stream, a, b) for a, b in zip(cuts, cuts[1:])), Decimal(0))
    assert total == count_impulses(stream, cuts[0], cuts[-1])


def test_impulse_stream_validation():
    with pytest.raises(ValueError):
        ImpulseStream(timestamps=(1.0, 1.0), meter_constant=1000)
    with pytest.raises(ValueError):
        ImpulseStream(timestamps=(1.0,), meter_constant=0)
    stream = ImpulseStream(timestamps=(1.0,), meter_constant=10)
    with pytest.raises(ValueError):
        count_impulses(stream, 5, 2)
