"""Host-side session: handshake, request/reply correlation and event delivery.

A session runs stop-and-wait: one request is in flight at a time, matched to
its reply by sequence number, and re-sent with the same sequence number when
the reply does not arrive in time.  A background reader thread decodes
incoming bytes, hands replies to the waiting caller and routes EVENT frames
to subscription sinks or to a bounded queue drained by :meth:`Session.poll_events`.
"""

import collections
import enum
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from tise.catalog import (
    ChannelValue,
    Text,
    convert_raw,
    descriptor_of,
    validate_write,
)
from tise.errors import (
    DeviceError,
    HandshakeTimeout,
    NotReady,
    ProtocolError,
    SessionClosed,
    Timeout,
    TransportError,
    VersionMismatch,
    WrongDirection,
)
from tise.protocol import (
    PROTOCOL_VERSION,
    Attach,
    Detach,
    Error,
    Frame,
    FrameDecoder,
    Hello,
    Opcode,
    Ping,
    Read,
    Subscribe,
    SubscribeAck,
    Unsubscribe,
    UnsubscribeAck,
    Write,
    decode_command,
    encode_command,
    encode_frame,
    reply_opcode,
)

log = logging.getLogger(__name__)

DEFAULT_REPLY_TIMEOUT_MS = 250
DEFAULT_RETRIES = 3
EVENT_QUEUE_SIZE = 1024
MAX_SUBSCRIPTIONS = 16
_READ_SLICE = 0.02


class SessionState(enum.Enum):
    DISCONNECTED = "disconnected"
    HELLO_SENT = "hello-sent"
    READY = "ready"
    CLOSED = "closed"
    FAILED = "failed"


@dataclass(eq=False)
class Subscription:
    id: int
    channel: int
    period_ms: int
    sink: Optional[Callable[[int, ChannelValue], None]] = None
    module_type: Optional[int] = None
    active: bool = True
    # events delivered so far
    received: int = 0


@dataclass
class _Pending:
    seq: int
    opcode: int
    cmd: object
    sink: Optional[Callable] = None
    reply: Optional[Frame] = None


class Session:
    """Connection to one device over a :class:`~tise.transport.Transport`.

    Construct and call :meth:`connect`, or use :func:`open_session`.
    """

    def __init__(self, transport, reply_timeout_ms=DEFAULT_REPLY_TIMEOUT_MS,
                 retries=DEFAULT_RETRIES, queue_size=EVENT_QUEUE_SIZE):
        if retries < 1:
            raise ValueError("retries counts attempts and must be at least 1")
        self.transport = transport
        self.reply_timeout_ms = reply_timeout_ms
        self.retries = retries
        self.state = SessionState.DISCONNECTED
        self.failure = None
        self.info = None
        self.dropped_events = 0
        self.stray_frames = 0
        self.channels = {}
        self.subscriptions = {}

        self._seq = 0
        self._request_lock = threading.Lock()
        self._cond = threading.Condition()
        self._pending = None
        self._broken = None
        self._events = collections.deque()
        self._queue_size = queue_size
        self._events_lock = threading.Lock()
        self._stop = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name="tise-reader", daemon=True)

    # -- lifecycle ------------------------------------------------------------------

    def connect(self):
        """Perform the handshake; on success the session is READY."""
        if self.state is not SessionState.DISCONNECTED:
            raise NotReady(f"cannot connect from state {self.state.value}")
        self._reader.start()
        self.state = SessionState.HELLO_SENT
        try:
            info = self._exchange(Hello(PROTOCOL_VERSION))
        except Timeout:
            self._fail("no handshake reply")
            raise HandshakeTimeout(
                f"no ACK_HELLO after {self.retries} attempts of {self.reply_timeout_ms} ms"
            ) from None
        except (DeviceError, TransportError, ProtocolError) as exc:
            self._fail(str(exc))
            raise
        if info.protocol_version != PROTOCOL_VERSION:
            self._fail("protocol version mismatch")
            raise VersionMismatch(info.protocol_version)
        self.info = info
        self.state = SessionState.READY
        return self

    def _fail(self, reason):
        self.state = SessionState.FAILED
        self.failure = reason

    def close(self):
        """Release the transport.  Nothing is sent to the device."""
        if self.state is SessionState.CLOSED:
            return
        self.state = SessionState.CLOSED
        self._shutdown()

    def _shutdown(self):
        self._stop.set()
        self.transport.close()
        if self._reader.is_alive() and threading.current_thread() is not self._reader:
            self._reader.join(1.0)
        with self._cond:
            self._cond.notify_all()

    close_session = close

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- request machinery ----------------------------------------------------------

    def _require_ready(self):
        if self.state is SessionState.CLOSED:
            raise SessionClosed("session is closed")
        if self.state is not SessionState.READY:
            raise NotReady(f"session is {self.state.value}")

    def _next_seq(self):
        seq = self._seq
        self._seq = (self._seq + 1) & 0xFF
        return seq

    def _exchange(self, cmd, sink=None):
        """Send ``cmd`` and wait for its reply, retrying on timeout."""
        with self._request_lock:
            seq = self._next_seq()
            data = encode_frame(encode_command(seq, cmd))
            pending = _Pending(seq, reply_opcode(cmd.OPCODE), cmd, sink)
            timeout = self.reply_timeout_ms / 1000
            try:
                for _ in range(self.retries):
                    with self._cond:
                        self._pending = pending
                    self.transport.write(data)
                    with self._cond:
                        self._cond.wait_for(
                            lambda: pending.reply is not None or self._broken or self._stop.is_set(),
                            timeout,
                        )
                        if pending.reply is not None:
                            break
                        if self._broken:
                            raise TransportError(self._broken)
                        if self._stop.is_set():
                            raise SessionClosed("session closed while waiting")
                else:
                    raise Timeout(f"no reply to {type(cmd).__name__} after {self.retries} attempts")
            finally:
                with self._cond:
                    self._pending = None
        reply = decode_command(pending.reply)
        if isinstance(reply, Error):
            raise DeviceError(reply.code, reply.offending_opcode)
        return reply

    def _read_loop(self):
        decoder = FrameDecoder()
        while not self._stop.is_set():
            try:
                data = self.transport.read(_READ_SLICE)
            except TransportError as exc:
                if not self._stop.is_set():
                    with self._cond:
                        self._broken = str(exc) or "transport failed"
                        self._cond.notify_all()
                return
            outcomes = decoder.feed(data) if data else decoder.idle()
            for outcome in outcomes:
                if isinstance(outcome, Frame):
                    self._on_frame(outcome)

    def _on_frame(self, frame):
        if frame.opcode == Opcode.EVENT:
            self._on_event(frame)
            return
        with self._cond:
            pending = self._pending
            if (pending is None or pending.reply is not None or frame.seq != pending.seq
                    or frame.opcode not in (pending.opcode, Opcode.ERROR)):
                # late duplicate of an answered request, or noise
                self.stray_frames += 1
                return
            try:
                reply = decode_command(frame)
            except ProtocolError:
                self.stray_frames += 1
                return
            # register/unregister streams before any following EVENT is handled
            if isinstance(reply, SubscribeAck):
                cmd = pending.cmd
                self.subscriptions[reply.subscription] = Subscription(
                    reply.subscription, cmd.channel, cmd.period_ms,
                    pending.sink, self.channels.get(cmd.channel))
            elif isinstance(reply, UnsubscribeAck):
                sub = self.subscriptions.pop(reply.subscription, None)
                if sub is not None:
                    sub.active = False
            pending.reply = frame
            self._cond.notify_all()

    def _on_event(self, frame):
        try:
            event = decode_command(frame)
        except ProtocolError:
            self.stray_frames += 1
            return
        sub = self.subscriptions.get(event.subscription)
        if sub is None:
            self.stray_frames += 1
            return
        value = self._convert(sub.module_type, event.value)
        sub.received += 1
        if sub.sink is not None:
            try:
                sub.sink(sub.id, value)
            except Exception:
                log.exception("subscription sink raised")
            return
        with self._events_lock:
            if len(self._events) >= self._queue_size:
                self._events.popleft()
                self.dropped_events += 1
            self._events.append((sub.id, value))

    @staticmethod
    def _convert(module_type, value):
        if module_type is None or isinstance(value, Text):
            return value
        return convert_raw(module_type, value.value)

    # -- public operations ------------------------------------------------------------

    def ping(self):
        """Round-trip a PING; returns the elapsed time in seconds."""
        self._require_ready()
        start = time.perf_counter()
        self._exchange(Ping())
        return time.perf_counter() - start

    def attach_module(self, module_type, pins):
        """Bind a module to ``pins``; returns the device-assigned channel."""
        self._require_ready()
        d = descriptor_of(module_type)
        pins = tuple(pins)
        if len(pins) != d.pin_count:
            raise ValueError(f"{d.name} needs {d.pin_count} pins, got {len(pins)}")
        ack = self._exchange(Attach(int(module_type), pins))
        self.channels[ack.channel] = int(module_type)
        return ack.channel

    def detach_module(self, channel):
        self._require_ready()
        self._exchange(Detach(channel))
        self.channels.pop(channel, None)
        with self._cond:
            for sid in [s.id for s in self.subscriptions.values() if s.channel == channel]:
                self.subscriptions.pop(sid).active = False

    def bind_channel(self, channel, module_type):
        """Declare the module behind a channel this session did not attach itself."""
        descriptor_of(module_type)
        self.channels[channel] = int(module_type)

    def _check_direction(self, channel, want_sensor):
        module_type = self.channels.get(channel)
        if module_type is None:
            return None
        if descriptor_of(module_type).is_sensor != want_sensor:
            kind = "sensor" if want_sensor else "actuator"
            raise WrongDirection(f"channel {channel} is not a {kind}")
        return module_type

    def read_channel(self, channel):
        """Sample a sensor; the raw reading is converted to engineering units.

        Channels whose module is unknown to this session come back raw.
        """
        self._require_ready()
        module_type = self._check_direction(channel, want_sensor=True)
        reply = self._exchange(Read(channel))
        return self._convert(module_type, reply.value)

    def write_channel(self, channel, value):
        self._require_ready()
        module_type = self._check_direction(channel, want_sensor=False)
        if module_type is not None:
            validate_write(module_type, value)
        self._exchange(Write(channel, value))

    def subscribe(self, channel, period_ms, sink=None):
        """Ask the device to push the channel every ``period_ms`` (10..60000).

        Events go to ``sink(subscription_id, value)`` on the reader thread when
        given, otherwise into the queue read by :meth:`poll_events`.
        """
        self._require_ready()
        if not 10 <= period_ms <= 60000:
            raise ValueError("period_ms must lie in 10..60000")
        self._check_direction(channel, want_sensor=True)
        ack = self._exchange(Subscribe(channel, period_ms), sink=sink)
        return self.subscriptions[ack.subscription]

    def unsubscribe(self, subscription):
        self._require_ready()
        sid = getattr(subscription, "id", subscription)
        self._exchange(Unsubscribe(sid))

    def poll_events(self, max_events=None):
        """Return up to ``max_events`` queued ``(subscription_id, value)`` pairs, oldest first."""
        if self.state is SessionState.CLOSED:
            raise SessionClosed("session is closed")
        with self._events_lock:
            n = len(self._events) if max_events is None else min(max_events, len(self._events))
            return [self._events.popleft() for _ in range(n)]


def open_session(transport, reply_timeout_ms=DEFAULT_REPLY_TIMEOUT_MS, retries=DEFAULT_RETRIES):
    """Create a session on ``transport`` and complete the handshake."""
    session = Session(transport, reply_timeout_ms=reply_timeout_ms, retries=retries)
    try:
        return session.connect()
    except BaseException:
        session._shutdown()
        raise
