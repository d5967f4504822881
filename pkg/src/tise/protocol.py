"""Binary wire format shared by the host library and the device.

A frame on the wire is::

    0x7E | LEN | SEQ | OPCODE | PAYLOAD (0-64 bytes) | CRC8

``LEN`` counts ``SEQ``, ``OPCODE`` and the payload, so it ranges over 2..66.
The checksum is CRC-8 (polynomial 0x07, init 0, unreflected) over ``LEN``
through the end of the payload.  There is no byte stuffing; a receiver that
loses sync scans for the next 0x7E and relies on the CRC to reject false
starts.  Multi-byte integers are little-endian.
"""

import enum
import struct
from dataclasses import dataclass
from typing import ClassVar, FrozenSet, Tuple

from tise.catalog import (
    Analog,
    ChannelValue,
    Digital,
    Scalar,
    Text,
    ValueKind,
)
from tise.errors import (
    InvalidField,
    MalformedPayload,
    PayloadTooLong,
    UnknownOpcode,
    VersionMismatch,
)

SOF = 0x7E
MAX_PAYLOAD = 64
PROTOCOL_VERSION = 1
REPLY_FLAG = 0x80
# SOF + LEN + seq/opcode/payload; the CRC byte completes a frame and is never held
MAX_BUFFERED = 1 + 1 + 2 + MAX_PAYLOAD


class Opcode(enum.IntEnum):
    PING = 0x01
    HELLO = 0x02
    ATTACH = 0x03
    DETACH = 0x04
    READ = 0x05
    WRITE = 0x06
    SUBSCRIBE = 0x07
    UNSUBSCRIBE = 0x08
    ACK_PING = 0x81
    ACK_HELLO = 0x82
    ACK_ATTACH = 0x83
    ACK_DETACH = 0x84
    VALUE = 0x85
    ACK_WRITE = 0x86
    ACK_SUBSCRIBE = 0x87
    ACK_UNSUBSCRIBE = 0x88
    EVENT = 0xC5
    ERROR = 0xFF


class ErrorCode(enum.IntEnum):
    UNKNOWN_OPCODE = 0x01
    MALFORMED_PAYLOAD = 0x02
    UNKNOWN_MODULE_TYPE = 0x03
    PIN_CONFLICT = 0x04
    BAD_CHANNEL = 0x05
    BAD_VALUE = 0x06
    WRONG_DIRECTION = 0x07
    TABLE_FULL = 0x08
    BAD_SUBSCRIPTION = 0x09


# -- CRC ------------------------------------------------------------------------

def _crc8_table():
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return bytes(table)


_CRC8_TABLE = _crc8_table()


def crc8(data):
    crc = 0
    for b in data:
        crc = _CRC8_TABLE[crc ^ b]
    return crc


# -- frames ---------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    seq: int
    opcode: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "payload", bytes(self.payload))


def encode_frame(frame):
    if len(frame.payload) > MAX_PAYLOAD:
        raise PayloadTooLong(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    if not (0 <= frame.seq <= 0xFF and 0 <= frame.opcode <= 0xFF):
        raise InvalidField("seq and opcode must be single bytes")
    body = bytes((2 + len(frame.payload), frame.seq, frame.opcode)) + frame.payload
    return bytes((SOF,)) + body + bytes((crc8(body),))


@dataclass(frozen=True)
class BadCrc:
    """A complete frame arrived but its checksum did not match; it was dropped."""

    raw: bytes


@dataclass(frozen=True)
class Resync:
    """``skipped`` bytes were discarded while hunting for a start-of-frame."""

    skipped: int


class FrameDecoder:
    """Incremental frame parser that tolerates arbitrary chunking and noise.

    :meth:`feed` returns a list of outcomes: :class:`Frame` for each valid
    frame, :class:`BadCrc` for a checksum failure and :class:`Resync` for
    skipped garbage.  After a checksum failure the decoder rescans from the
    byte following the rejected start-of-frame, so a real frame hidden behind
    a false start is still found.
    """

    def __init__(self):
        self._pending = b""
        self._skipped = 0

    @property
    def buffered(self):
        """Bytes currently held for an in-progress frame."""
        return len(self._pending)

    def _flush_skipped(self, out):
        if self._skipped:
            out.append(Resync(self._skipped))
            self._skipped = 0

    def feed(self, chunk):
        data = self._pending + bytes(chunk)
        n = len(data)
        out = []
        i = 0
        while i < n:
            if data[i] != SOF:
                j = data.find(SOF, i)
                if j < 0:
                    self._skipped += n - i
                    i = n
                    break
                self._skipped += j - i
                i = j
            if i + 1 >= n:
                break
            length = data[i + 1]
            if not 2 <= length <= 2 + MAX_PAYLOAD:
                self._skipped += 1
                i += 1
                continue
            end = i + 2 + length + 1
            if end > n:
                break
            body = data[i + 1:end - 1]
            if crc8(body) != data[end - 1]:
                self._flush_skipped(out)
                out.append(BadCrc(data[i:end]))
                i += 1
                continue
            self._flush_skipped(out)
            out.append(Frame(body[1], body[2], body[3:]))
            i = end
        self._pending = data[i:]
        return out

    def idle(self):
        """Signal that the line went quiet.

        A start-of-frame still waiting for its bytes can then only be a false
        start: it is dropped and the held bytes are rescanned, which releases
        any real frame the false start had swallowed.
        """
        out = []
        while self._pending:
            held = self._pending
            self._pending = b""
            self._skipped += 1
            out += self.feed(held[1:])
        return out

    def flush(self):
        """Report garbage skipped so far without waiting for the next frame."""
        out = self.idle()
        self._flush_skipped(out)
        return out


DecoderState = FrameDecoder


def feed_decoder(state, data):
    """Functional form of :meth:`FrameDecoder.feed`: ``(state, outcomes)``.

    ``state`` may be ``None`` to start fresh.  It is updated in place and
    returned for convenience.
    """
    state = state if state is not None else FrameDecoder()
    return state, state.feed(data)


def decode_frames(data):
    """Decode a complete byte string, returning only the valid frames."""
    return [o for o in FrameDecoder().feed(data) if isinstance(o, Frame)]


# -- channel values on the wire -----------------------------------------------

def encode_value(value):
    kind = value.kind
    if kind == ValueKind.DIGITAL:
        body = bytes((value.value,))
    elif kind == ValueKind.ANALOG:
        body = struct.pack("<H", value.value)
    elif kind == ValueKind.SCALAR:
        body = struct.pack("<i", value.value)
    else:
        body = value.value.encode("ascii")
    return bytes((kind,)) + body


def decode_value(data):
    if not data:
        raise MalformedPayload("missing value kind")
    kind, body = data[0], bytes(data[1:])
    try:
        if kind == ValueKind.DIGITAL:
            if len(body) != 1:
                raise MalformedPayload("digital value takes one byte")
            return Digital(body[0])
        if kind == ValueKind.ANALOG:
            if len(body) != 2:
                raise MalformedPayload("analog value takes two bytes")
            return Analog(struct.unpack("<H", body)[0])
        if kind == ValueKind.SCALAR:
            if len(body) != 4:
                raise MalformedPayload("scalar value takes four bytes")
            return Scalar(struct.unpack("<i", body)[0])
        if kind == ValueKind.TEXT:
            return Text(body.decode("ascii"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(str(exc)) from None
    raise MalformedPayload(f"unknown value kind {kind}")


# -- commands -------------------------------------------------------------------

def _u8(name, v):
    if not isinstance(v, int) or not 0 <= v <= 0xFF:
        raise InvalidField(f"{name} must fit in one byte, got {v!r}")
    return v


def _u16(name, v):
    if not isinstance(v, int) or not 0 <= v <= 0xFFFF:
        raise InvalidField(f"{name} must fit in two bytes, got {v!r}")
    return struct.pack("<H", v)


def _expect_len(payload, n):
    if len(payload) != n:
        raise MalformedPayload(f"expected {n} payload bytes, got {len(payload)}")


class Command:
    OPCODE: ClassVar[int]

    def payload(self):
        return b""

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 0)
        return cls()


@dataclass(frozen=True)
class Ping(Command):
    OPCODE: ClassVar[int] = Opcode.PING


@dataclass(frozen=True)
class PingAck(Command):
    OPCODE: ClassVar[int] = Opcode.ACK_PING


@dataclass(frozen=True)
class Hello(Command):
    OPCODE: ClassVar[int] = Opcode.HELLO
    protocol_version: int = PROTOCOL_VERSION

    def payload(self):
        return bytes((_u8("protocol_version", self.protocol_version),))

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 1)
        return cls(payload[0])


@dataclass(frozen=True)
class DeviceInfo(Command):
    """Handshake acknowledgment: who the device is and what it supports."""

    OPCODE: ClassVar[int] = Opcode.ACK_HELLO
    protocol_version: int = PROTOCOL_VERSION
    firmware_version: int = 0
    capabilities: FrozenSet[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))

    def payload(self):
        mask = 0
        for cap in self.capabilities:
            if not isinstance(cap, int) or not 0 <= cap < 32:
                raise InvalidField(f"capability id {cap!r} outside 0..31")
            mask |= 1 << cap
        return (
            bytes((_u8("protocol_version", self.protocol_version),))
            + _u16("firmware_version", self.firmware_version)
            + struct.pack("<I", mask)
        )

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 7)
        version, firmware, mask = struct.unpack("<BHI", payload)
        return cls(version, firmware, frozenset(i for i in range(32) if mask >> i & 1))


@dataclass(frozen=True)
class Attach(Command):
    OPCODE: ClassVar[int] = Opcode.ATTACH
    module_type: int
    pins: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pins", tuple(self.pins))

    def payload(self):
        if len(self.pins) > MAX_PAYLOAD - 2:
            raise InvalidField("too many pins")
        return bytes(
            (_u8("module_type", self.module_type), len(self.pins))
            + tuple(_u8("pin", p) for p in self.pins)
        )

    @classmethod
    def from_payload(cls, payload):
        if len(payload) < 2 or len(payload) != 2 + payload[1]:
            raise MalformedPayload("attach payload is [module_type, pin_count, pins...]")
        return cls(payload[0], tuple(payload[2:]))


@dataclass(frozen=True)
class _ChannelOnly(Command):
    channel: int

    def payload(self):
        return bytes((_u8("channel", self.channel),))

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 1)
        return cls(payload[0])


@dataclass(frozen=True)
class AttachAck(_ChannelOnly):
    OPCODE: ClassVar[int] = Opcode.ACK_ATTACH


@dataclass(frozen=True)
class Detach(_ChannelOnly):
    OPCODE: ClassVar[int] = Opcode.DETACH


@dataclass(frozen=True)
class DetachAck(_ChannelOnly):
    OPCODE: ClassVar[int] = Opcode.ACK_DETACH


@dataclass(frozen=True)
class Read(_ChannelOnly):
    OPCODE: ClassVar[int] = Opcode.READ


@dataclass(frozen=True)
class WriteAck(_ChannelOnly):
    OPCODE: ClassVar[int] = Opcode.ACK_WRITE


@dataclass(frozen=True)
class _ChannelValue(Command):
    channel: int
    value: ChannelValue

    def payload(self):
        payload = bytes((_u8("channel", self.channel),)) + encode_value(self.value)
        if len(payload) > MAX_PAYLOAD:
            raise InvalidField("value too long for one frame")
        return payload

    @classmethod
    def from_payload(cls, payload):
        if not payload:
            raise MalformedPayload("missing channel")
        return cls(payload[0], decode_value(payload[1:]))


@dataclass(frozen=True)
class Write(_ChannelValue):
    OPCODE: ClassVar[int] = Opcode.WRITE


@dataclass(frozen=True)
class Value(_ChannelValue):
    OPCODE: ClassVar[int] = Opcode.VALUE


@dataclass(frozen=True)
class Subscribe(Command):
    OPCODE: ClassVar[int] = Opcode.SUBSCRIBE
    channel: int
    period_ms: int

    def payload(self):
        return bytes((_u8("channel", self.channel),)) + _u16("period_ms", self.period_ms)

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 3)
        return cls(payload[0], payload[1] | payload[2] << 8)


@dataclass(frozen=True)
class _SubscriptionOnly(Command):
    subscription: int

    def payload(self):
        return bytes((_u8("subscription", self.subscription),))

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 1)
        return cls(payload[0])


@dataclass(frozen=True)
class SubscribeAck(_SubscriptionOnly):
    OPCODE: ClassVar[int] = Opcode.ACK_SUBSCRIBE


@dataclass(frozen=True)
class Unsubscribe(_SubscriptionOnly):
    OPCODE: ClassVar[int] = Opcode.UNSUBSCRIBE


@dataclass(frozen=True)
class UnsubscribeAck(_SubscriptionOnly):
    OPCODE: ClassVar[int] = Opcode.ACK_UNSUBSCRIBE


@dataclass(frozen=True)
class Event(Command):
    """Unsolicited sample; the frame's seq byte carries the subscription id."""

    OPCODE: ClassVar[int] = Opcode.EVENT
    subscription: int
    value: ChannelValue

    def payload(self):
        payload = encode_value(self.value)
        if len(payload) > MAX_PAYLOAD:
            raise InvalidField("value too long for one frame")
        return payload


@dataclass(frozen=True)
class Error(Command):
    OPCODE: ClassVar[int] = Opcode.ERROR
    code: int
    offending_opcode: int

    def payload(self):
        return bytes((_u8("code", self.code), _u8("offending_opcode", self.offending_opcode)))

    @classmethod
    def from_payload(cls, payload):
        _expect_len(payload, 2)
        return cls(payload[0], payload[1])


COMMANDS = {
    cls.OPCODE: cls
    for cls in (
        Ping, PingAck, Hello, DeviceInfo, Attach, AttachAck, Detach, DetachAck,
        Read, Value, Write, WriteAck, Subscribe, SubscribeAck, Unsubscribe,
        UnsubscribeAck, Event, Error,
    )
}


def encode_command(seq, cmd):
    """Lay out ``cmd`` as a frame.  EVENT frames take their seq from the subscription id."""
    if isinstance(cmd, Event):
        seq = _u8("subscription", cmd.subscription)
    return Frame(_u8("seq", seq), cmd.OPCODE, cmd.payload())


def decode_command(frame):
    cls = COMMANDS.get(frame.opcode)
    if cls is None:
        raise UnknownOpcode(frame.opcode)
    if cls is Event:
        return Event(frame.seq, decode_value(frame.payload))
    return cls.from_payload(frame.payload)


def build_handshake_request(seq=0):
    return encode_command(seq, Hello(PROTOCOL_VERSION))


def parse_handshake_reply(frame):
    if frame.opcode != Opcode.ACK_HELLO:
        raise MalformedPayload(f"expected ACK_HELLO, got opcode 0x{frame.opcode:02X}")
    if not frame.payload:
        raise MalformedPayload("empty handshake reply")
    if frame.payload[0] != PROTOCOL_VERSION:
        raise VersionMismatch(frame.payload[0])
    return decode_command(frame)


def reply_opcode(opcode):
    return opcode | REPLY_FLAG
