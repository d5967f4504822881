"""Virtual controller board.

:class:`Device` runs the same loop as the firmware template: bytes come in,
frames are parsed, each request is dispatched to exactly one handler and the
reply goes back out.  Sensors read from scriptable :class:`SignalSource`
objects and actuators keep inspectable state.  Time is a virtual millisecond
clock that only moves when :meth:`Device.tick` is called, so periodic
subscriptions are fully deterministic.
"""

import heapq
import json
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

from tise.catalog import (
    ModuleType,
    descriptor_of,
    raw_value,
    validate_write,
)
from tise.errors import (
    BadChannel,
    CatalogError,
    MalformedPayload,
    UnknownModuleType,
    UnknownOpcode,
    WrongDirection,
)
from tise.protocol import (
    Attach,
    AttachAck,
    Detach,
    DetachAck,
    DeviceInfo,
    Error,
    ErrorCode,
    Event,
    Frame,
    FrameDecoder,
    Hello,
    Ping,
    PingAck,
    Read,
    Subscribe,
    SubscribeAck,
    Unsubscribe,
    UnsubscribeAck,
    Value,
    Write,
    WriteAck,
    decode_command,
    encode_command,
    encode_frame,
)

MAX_SUBSCRIPTIONS = 16
MIN_PERIOD_MS = 10
MAX_PERIOD_MS = 60000
DEFAULT_CAPABILITIES = frozenset(int(t) for t in ModuleType)


# -- signal sources -----------------------------------------------------------------
# ``sample(t)`` takes milliseconds since the source was installed.

@dataclass(frozen=True)
class Constant:
    raw: int

    def sample(self, t):
        return self.raw

    def bounds(self):
        return self.raw, self.raw


@dataclass(frozen=True)
class Sine:
    """``round((min+max)/2 + (max-min)/2 * sin(2*pi*t/period))``, ties to even."""

    min: int
    max: int
    period_ms: int

    def __post_init__(self):
        if self.min > self.max or self.period_ms <= 0:
            raise ValueError("sine needs min <= max and a positive period")

    def sample(self, t):
        mid = (self.min + self.max) / 2
        amp = (self.max - self.min) / 2
        return round(mid + amp * math.sin(2 * math.pi * t / self.period_ms))

    def bounds(self):
        return self.min, self.max


@dataclass(frozen=True)
class Step:
    """Cycles through ``values``, holding each for ``dwell_ms``."""

    values: Tuple[int, ...]
    dwell_ms: int

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values or self.dwell_ms <= 0:
            raise ValueError("step needs values and a positive dwell")

    def sample(self, t):
        return self.values[(t // self.dwell_ms) % len(self.values)]

    def bounds(self):
        return min(self.values), max(self.values)


@dataclass(frozen=True)
class Trace:
    """Piecewise-constant playback of ``(t_ms, raw)`` samples.

    Before the first sample the first value applies; after the last one the
    last value holds, unless ``loop_ms`` is given, in which case playback
    restarts every ``loop_ms`` milliseconds.
    """

    samples: Tuple[Tuple[int, int], ...]
    loop_ms: Optional[int] = None

    def __post_init__(self):
        samples = tuple((int(t), int(v)) for t, v in self.samples)
        object.__setattr__(self, "samples", samples)
        if not samples:
            raise ValueError("trace needs at least one sample")
        times = [t for t, _ in samples]
        if times != sorted(times) or times[0] < 0:
            raise ValueError("trace times must be non-negative and non-decreasing")
        if self.loop_ms is not None and self.loop_ms <= times[-1]:
            raise ValueError("loop_ms must exceed the last sample time")
        object.__setattr__(self, "_times", times)

    def sample(self, t):
        if self.loop_ms is not None:
            t %= self.loop_ms
        i = max(0, bisect_right(self._times, t) - 1)
        return self.samples[i][1]

    def bounds(self):
        values = [v for _, v in self.samples]
        return min(values), max(values)


@dataclass
class Manual:
    """Reading set from outside, e.g. by a test or a UI slider."""

    raw: int = 0

    def sample(self, t):
        return self.raw

    def bounds(self):
        return self.raw, self.raw


SOURCE_TYPES = {"constant": Constant, "sine": Sine, "step": Step, "trace": Trace, "manual": Manual}


def source_from_dict(spec):
    spec = dict(spec)
    kind = spec.pop("type")
    try:
        cls = SOURCE_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown signal type {kind!r}") from None
    if cls is Trace:
        spec["samples"] = [tuple(s) for s in spec["samples"]]
    return cls(**spec)


# -- actuator state -----------------------------------------------------------------

@dataclass(frozen=True)
class Led:
    on: bool = False


@dataclass(frozen=True)
class Buzzer:
    on: bool = False


@dataclass(frozen=True)
class IrLed:
    on: bool = False


@dataclass(frozen=True)
class Servo:
    milli_deg: int = 0


@dataclass(frozen=True)
class Motor:
    milli_pwm: int = 0


@dataclass(frozen=True)
class Lcd:
    lines: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SevenSeg:
    digit: str = "0"


@dataclass(frozen=True)
class Generic:
    """State of a user-defined actuator: the last value written."""

    value: object = None


_INITIAL_STATE = {
    ModuleType.LED_5MM: Led(),
    ModuleType.BUZZER_YL44: Buzzer(),
    ModuleType.IR_LED: IrLed(),
    ModuleType.SERVO_SG90: Servo(),
    ModuleType.DC_MOTOR: Motor(),
    ModuleType.LCD_16X2: Lcd(),
    ModuleType.LCD_16X4: Lcd(),
    ModuleType.SEVEN_SEGMENT: SevenSeg(),
}


def _apply_write(module_type, value):
    if module_type in (ModuleType.LED_5MM, ModuleType.BUZZER_YL44, ModuleType.IR_LED):
        return type(_INITIAL_STATE[module_type])(on=bool(value.value))
    if module_type == ModuleType.SERVO_SG90:
        return Servo(value.value)
    if module_type == ModuleType.DC_MOTOR:
        return Motor(value.value)
    if module_type in (ModuleType.LCD_16X2, ModuleType.LCD_16X4):
        return Lcd(tuple(value.value.split("\n")))
    if module_type == ModuleType.SEVEN_SEGMENT:
        return SevenSeg(value.value)
    return Generic(value)


# -- device -------------------------------------------------------------------------

@dataclass
class ChannelSpec:
    module_type: int
    pins: Tuple[int, ...]
    signal: Optional[object] = None


@dataclass
class DeviceConfig:
    protocol_version: int = 1
    firmware_version: int = 0x0100
    capabilities: FrozenSet[int] = DEFAULT_CAPABILITIES
    # extension module ids (0x40..0x7F) this device also accepts
    extensions: FrozenSet[int] = frozenset()
    channels: List[ChannelSpec] = field(default_factory=list)
    # virtual milliseconds added after every dispatched frame; 0 = clock moves only on tick()
    step_per_frame_ms: int = 0


def load_config(source):
    """Build a :class:`DeviceConfig` from a JSON document (path, text or dict).

    See ``docs/simulator.md`` for the schema.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        doc = json.loads(text)
    known = {"protocol_version", "firmware_version", "capabilities", "extensions",
             "channels", "step_per_frame_ms"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown simulator config keys: {sorted(unknown)}")
    cfg = DeviceConfig()
    if "protocol_version" in doc:
        cfg.protocol_version = int(doc["protocol_version"])
    if "firmware_version" in doc:
        cfg.firmware_version = int(doc["firmware_version"])
    if "capabilities" in doc:
        cfg.capabilities = frozenset(int(ModuleType.parse(c)) for c in doc["capabilities"])
    if "extensions" in doc:
        cfg.extensions = frozenset(int(e, 0) if isinstance(e, str) else int(e) for e in doc["extensions"])
    cfg.step_per_frame_ms = int(doc.get("step_per_frame_ms", 0))
    for ch in doc.get("channels", []):
        mod = ch["module"]
        module_type = int(mod, 0) if isinstance(mod, str) and mod[:1].isdigit() else int(ModuleType.parse(mod))
        signal = source_from_dict(ch["signal"]) if "signal" in ch else None
        cfg.channels.append(ChannelSpec(module_type, tuple(ch.get("pins", ())), signal))
    return cfg


def new_device(config=None):
    """A fresh device from a :class:`DeviceConfig`, a config dict, JSON text or a path."""
    if config is not None and not isinstance(config, DeviceConfig):
        config = load_config(config)
    return Device(config)


@dataclass
class _Channel:
    module_type: int
    pins: Tuple[int, ...]
    source: Optional[object] = None
    source_start: int = 0
    state: Optional[object] = None


@dataclass
class _Subscription:
    id: int
    channel: int
    period_ms: int
    next_due_ms: int


class Device:
    """Single-threaded virtual board.  Callers serialize access."""

    def __init__(self, config=None):
        self.config = config or DeviceConfig()
        self.clock_ms = 0
        self.pin_table: Dict[int, int] = {}
        self.channel_table: Dict[int, _Channel] = {}
        self.subscription_table: Dict[int, _Subscription] = {}
        self._next_channel = 0
        self._next_sub = 0
        self._decoder = FrameDecoder()
        # opcode -> number of valid frames received
        self.received = Counter()
        for spec in self.config.channels:
            channel = self._attach(spec.module_type, tuple(spec.pins))
            if isinstance(channel, Error):
                raise ValueError(f"cannot pre-attach {spec}: {ErrorCode(channel.code).name}")
            if spec.signal is not None:
                self.set_signal(channel, spec.signal)

    # -- inspection ---------------------------------------------------------------

    def info(self):
        return DeviceInfo(self.config.protocol_version, self.config.firmware_version,
                          frozenset(c for c in self.config.capabilities if c < 32))

    def actuator_snapshot(self):
        return {ch: entry.state for ch, entry in self.channel_table.items()
                if entry.state is not None}

    def channel_module(self, channel):
        return self._entry(channel).module_type

    def table_violations(self):
        """Describe every broken table invariant; an empty list means healthy."""
        problems = []
        for pin, ch in self.pin_table.items():
            if ch not in self.channel_table:
                problems.append(f"pin {pin} maps to missing channel {ch}")
            elif pin not in self.channel_table[ch].pins:
                problems.append(f"pin {pin} not listed by channel {ch}")
        for ch, entry in self.channel_table.items():
            if not 0 <= ch < self._next_channel:
                problems.append(f"channel {ch} outside allocated range")
            for pin in entry.pins:
                if self.pin_table.get(pin) != ch:
                    problems.append(f"channel {ch} pin {pin} not owned in pin table")
            if len(set(entry.pins)) != len(entry.pins):
                problems.append(f"channel {ch} lists a pin twice")
        if len(self.subscription_table) > MAX_SUBSCRIPTIONS:
            problems.append("subscription table overflow")
        for sub in self.subscription_table.values():
            if sub.channel not in self.channel_table:
                problems.append(f"subscription {sub.id} on missing channel {sub.channel}")
        return problems

    # -- instrumentation ------------------------------------------------------------

    def _entry(self, channel):
        try:
            return self.channel_table[channel]
        except KeyError:
            raise BadChannel(f"no channel {channel}") from None

    def set_signal(self, channel, source):
        entry = self._entry(channel)
        d = descriptor_of(entry.module_type)
        if not d.is_sensor:
            raise WrongDirection(f"channel {channel} drives an actuator")
        lo, hi = source.bounds()
        limit = d.raw_max
        if lo < 0 or hi > limit:
            raise ValueError(f"signal range {lo}..{hi} outside 0..{limit} for {d.name}")
        entry.source = source
        entry.source_start = self.clock_ms

    def set_manual(self, channel, raw):
        """Shortcut for installing or updating a :class:`Manual` source."""
        self.set_signal(channel, Manual(raw))

    def sample(self, channel, at_ms=None):
        entry = self._entry(channel)
        t = self.clock_ms if at_ms is None else at_ms
        return entry.source.sample(t - entry.source_start)

    # -- main loop ------------------------------------------------------------------

    def run_step(self, inbound):
        """Parse inbound bytes and return the encoded replies."""
        return self._respond(self._decoder.feed(inbound))

    def idle(self):
        """The serial line went quiet; answer any frame a false start was hiding."""
        return self._respond(self._decoder.idle())

    def _respond(self, outcomes):
        out = bytearray()
        for outcome in outcomes:
            if not isinstance(outcome, Frame):
                continue
            self.received[outcome.opcode] += 1
            seq, reply = self.dispatch(outcome)
            out += encode_frame(encode_command(seq, reply))
            if self.config.step_per_frame_ms:
                out += self.tick(self.config.step_per_frame_ms)
        return bytes(out)

    def dispatch(self, frame):
        """Run the routine for one request frame; returns ``(seq, reply)``."""
        try:
            cmd = decode_command(frame)
        except UnknownOpcode:
            return frame.seq, Error(ErrorCode.UNKNOWN_OPCODE, frame.opcode)
        except MalformedPayload:
            return frame.seq, Error(ErrorCode.MALFORMED_PAYLOAD, frame.opcode)
        handler = self._HANDLERS.get(type(cmd))
        if handler is None:
            # a reply or event opcode sent to the device
            return frame.seq, Error(ErrorCode.UNKNOWN_OPCODE, frame.opcode)
        return frame.seq, handler(self, cmd)

    def _hello(self, cmd):
        # a new host session: streams belonging to a previous one are stale
        self.subscription_table.clear()
        return self.info()

    def _ping(self, cmd):
        return PingAck()

    def _attach(self, module_type, pins):
        err = lambda code: Error(code, Attach.OPCODE)
        allowed = (module_type in self.config.capabilities
                   or module_type in self.config.extensions)
        try:
            d = descriptor_of(module_type)
        except UnknownModuleType:
            allowed = False
        if not allowed:
            return err(ErrorCode.UNKNOWN_MODULE_TYPE)
        if len(pins) != d.pin_count:
            return err(ErrorCode.BAD_VALUE)
        if len(set(pins)) != len(pins) or any(p in self.pin_table for p in pins):
            return err(ErrorCode.PIN_CONFLICT)
        if self._next_channel > 0xFF:
            return err(ErrorCode.TABLE_FULL)
        channel = self._next_channel
        self._next_channel += 1
        entry = _Channel(module_type, pins)
        if d.is_sensor:
            entry.source = Constant(0)
            entry.source_start = self.clock_ms
        else:
            entry.state = _INITIAL_STATE.get(module_type, Generic())
        self.channel_table[channel] = entry
        for p in pins:
            self.pin_table[p] = channel
        return channel

    def _on_attach(self, cmd):
        result = self._attach(cmd.module_type, cmd.pins)
        return result if isinstance(result, Error) else AttachAck(result)

    def _on_detach(self, cmd):
        entry = self.channel_table.pop(cmd.channel, None)
        if entry is None:
            return Error(ErrorCode.BAD_CHANNEL, Detach.OPCODE)
        for p in entry.pins:
            del self.pin_table[p]
        for sid in [s.id for s in self.subscription_table.values() if s.channel == cmd.channel]:
            del self.subscription_table[sid]
        return DetachAck(cmd.channel)

    def _on_read(self, cmd):
        entry = self.channel_table.get(cmd.channel)
        if entry is None:
            return Error(ErrorCode.BAD_CHANNEL, Read.OPCODE)
        d = descriptor_of(entry.module_type)
        if not d.is_sensor:
            return Error(ErrorCode.WRONG_DIRECTION, Read.OPCODE)
        return Value(cmd.channel, raw_value(d, self.sample(cmd.channel)))

    def _on_write(self, cmd):
        entry = self.channel_table.get(cmd.channel)
        if entry is None:
            return Error(ErrorCode.BAD_CHANNEL, Write.OPCODE)
        if descriptor_of(entry.module_type).is_sensor:
            return Error(ErrorCode.WRONG_DIRECTION, Write.OPCODE)
        try:
            validate_write(entry.module_type, cmd.value)
        except CatalogError:
            return Error(ErrorCode.BAD_VALUE, Write.OPCODE)
        entry.state = _apply_write(entry.module_type, cmd.value)
        return WriteAck(cmd.channel)

    def _on_subscribe(self, cmd):
        entry = self.channel_table.get(cmd.channel)
        if entry is None:
            return Error(ErrorCode.BAD_CHANNEL, Subscribe.OPCODE)
        if not descriptor_of(entry.module_type).is_sensor:
            return Error(ErrorCode.WRONG_DIRECTION, Subscribe.OPCODE)
        if not MIN_PERIOD_MS <= cmd.period_ms <= MAX_PERIOD_MS:
            return Error(ErrorCode.BAD_VALUE, Subscribe.OPCODE)
        if len(self.subscription_table) >= MAX_SUBSCRIPTIONS:
            return Error(ErrorCode.TABLE_FULL, Subscribe.OPCODE)
        sid = self._next_sub
        while sid in self.subscription_table:
            sid = (sid + 1) & 0xFF
        self._next_sub = (sid + 1) & 0xFF
        self.subscription_table[sid] = _Subscription(
            sid, cmd.channel, cmd.period_ms, self.clock_ms + cmd.period_ms)
        return SubscribeAck(sid)

    def _on_unsubscribe(self, cmd):
        if self.subscription_table.pop(cmd.subscription, None) is None:
            return Error(ErrorCode.BAD_SUBSCRIPTION, Unsubscribe.OPCODE)
        return UnsubscribeAck(cmd.subscription)

    _HANDLERS = {
        Hello: _hello,
        Ping: _ping,
        Attach: _on_attach,
        Detach: _on_detach,
        Read: _on_read,
        Write: _on_write,
        Subscribe: _on_subscribe,
        Unsubscribe: _on_unsubscribe,
    }

    def tick(self, advance_ms):
        """Advance the virtual clock and return the EVENT frames that fell due.

        Events come out in due-time order, ties broken by subscription id.
        Each one samples its channel at its own due time.
        """
        target = self.clock_ms + advance_ms
        heap = [(s.next_due_ms, s.id) for s in self.subscription_table.values()
                if s.next_due_ms <= target]
        heapq.heapify(heap)
        out = bytearray()
        while heap:
            due, sid = heapq.heappop(heap)
            sub = self.subscription_table[sid]
            self.clock_ms = due
            d = descriptor_of(self.channel_table[sub.channel].module_type)
            value = raw_value(d, self.sample(sub.channel))
            out += encode_frame(encode_command(sid, Event(sid, value)))
            sub.next_due_ms = due + sub.period_ms
            if sub.next_due_ms <= target:
                heapq.heappush(heap, (sub.next_due_ms, sid))
        self.clock_ms = target
        return bytes(out)
