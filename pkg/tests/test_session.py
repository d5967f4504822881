import threading
import time

import pytest

from tise.catalog import Analog, Digital, ModuleType, Scalar, Text
from tise.device import Constant, Device, DeviceConfig, Servo, Step
from tise.errors import (
    DeviceError,
    HandshakeTimeout,
    NotReady,
    OutOfRange,
    SessionClosed,
    Timeout,
    TransportError,
    VersionMismatch,
    WrongDirection,
)
from tise.hosting import DeviceRunner, SimulatorLink
from tise.protocol import (
    ErrorCode,
    FrameDecoder,
    Opcode,
    PingAck,
    encode_command,
    encode_frame,
)
from tise.session import Session, SessionState, open_session
from tise.transport import LoopbackTransport, MuteTransport, Transport


class Lossy(Transport):
    """Wraps a transport and silently drops the writes ``drop(n, data)`` selects."""

    def __init__(self, inner, drop):
        self.inner = inner
        self.drop = drop
        self.writes = 0

    def read(self, timeout):
        return self.inner.read(timeout)

    def write(self, data):
        self.writes += 1
        if not self.drop(self.writes, data):
            self.inner.write(data)

    def close(self):
        self.inner.close()


def wire(device, device_side=lambda t: t, host_side=lambda t: t, **options):
    host_end, device_end = LoopbackTransport.pair()
    runner = DeviceRunner(device, device_side(device_end)).start()
    session = open_session(host_side(host_end), **options)
    return session, runner


# -- handshake ------------------------------------------------------------------

def test_handshake_reaches_ready(link):
    assert link.session.state is SessionState.READY
    assert link.session.info.capabilities == frozenset(range(17))
    assert link.device.received[Opcode.HELLO] == 1


def test_mute_transport_fails_after_retries():
    mute = MuteTransport()
    s = Session(mute, reply_timeout_ms=30, retries=3)
    with pytest.raises(HandshakeTimeout):
        s.connect()
    assert s.state is SessionState.FAILED
    frames = FrameDecoder().feed(bytes(mute.written))
    assert [f.opcode for f in frames] == [Opcode.HELLO] * 3
    # retries reuse the sequence number
    assert {f.seq for f in frames} == {0}
    s.close()


def test_version_mismatch():
    host_end, device_end = LoopbackTransport.pair()
    runner = DeviceRunner(Device(DeviceConfig(protocol_version=2)), device_end).start()
    try:
        s = Session(host_end, reply_timeout_ms=200)
        with pytest.raises(VersionMismatch):
            s.connect()
        assert s.state is SessionState.FAILED
        with pytest.raises(NotReady):
            s.ping()
        s.close()
    finally:
        runner.stop()


def test_retries_must_be_positive():
    with pytest.raises(ValueError):
        Session(MuteTransport(), retries=0)


# -- requests -------------------------------------------------------------------

def test_attach_and_read(link):
    ch = link.session.attach_module(ModuleType.LM35, [14])
    assert ch == 0
    link.device.set_signal(0, Constant(205))
    assert link.session.read_channel(0) == Scalar(100195)


def test_read_unbound_channel_is_raw(link):
    link.session.attach_module(ModuleType.LM35, [14])
    link.device.set_signal(0, Constant(205))
    link.session.channels.clear()
    assert link.session.read_channel(0) == Analog(205)
    link.session.bind_channel(0, ModuleType.LM35)
    assert link.session.read_channel(0) == Scalar(100195)


def test_pin_conflict(link):
    link.session.attach_module(ModuleType.LDR, [3])
    with pytest.raises(DeviceError) as info:
        link.session.attach_module(ModuleType.POTENTIOMETER, [3])
    assert info.value.code is ErrorCode.PIN_CONFLICT
    assert info.value.offending_opcode == Opcode.ATTACH


def test_pin_count_checked_locally(link):
    with pytest.raises(ValueError):
        link.session.attach_module(ModuleType.HC_SR04, [7])
    assert link.device.received[Opcode.ATTACH] == 0


def test_write_and_snapshot(link):
    ch = link.session.attach_module(ModuleType.SERVO_SG90, [9])
    link.session.write_channel(ch, Scalar(90000))
    assert link.device.actuator_snapshot()[ch] == Servo(90000)


def test_direction_enforced_locally(link):
    sensor = link.session.attach_module(ModuleType.LM35, [14])
    actuator = link.session.attach_module(ModuleType.LED_5MM, [13])
    before = sum(link.device.received.values())
    with pytest.raises(WrongDirection):
        link.session.write_channel(sensor, Scalar(1))
    with pytest.raises(WrongDirection):
        link.session.read_channel(actuator)
    with pytest.raises(WrongDirection):
        link.session.subscribe(actuator, 50)
    assert sum(link.device.received.values()) == before


def test_direction_enforced_by_device(link):
    link.session.attach_module(ModuleType.LED_5MM, [13])
    link.session.channels.clear()
    with pytest.raises(DeviceError) as info:
        link.session.read_channel(0)
    assert info.value.code is ErrorCode.WRONG_DIRECTION


def test_lcd_text_too_long(link):
    ch = link.session.attach_module(ModuleType.LCD_16X2, [1, 2, 3, 4, 5, 6])
    with pytest.raises(OutOfRange):
        link.session.write_channel(ch, Text("x" * 40))
    assert link.device.received[Opcode.WRITE] == 0


def test_detach(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    sub = link.session.subscribe(ch, 50)
    link.session.detach_module(ch)
    assert not sub.active
    with pytest.raises(DeviceError) as info:
        link.session.read_channel(ch)
    assert info.value.code is ErrorCode.BAD_CHANNEL


# -- subscriptions --------------------------------------------------------------

def test_subscription_delivers_converted_events(link):
    ch = link.session.attach_module(ModuleType.LM35, [14])
    link.device.set_signal(ch, Constant(205))
    sub = link.session.subscribe(ch, 50)
    link.advance(1000)
    got = link.session.poll_events()
    assert got == [(sub.id, Scalar(100195))] * 20
    assert sub.received == 20


def test_subscription_sink(link):
    ch = link.session.attach_module(ModuleType.PUSH_BUTTON, [2])
    link.device.set_manual(ch, 1)
    seen = []
    link.session.subscribe(ch, 100, sink=lambda sid, v: seen.append(v))
    link.advance(300)
    assert seen == [Digital(1)] * 3
    assert link.session.poll_events() == []


def test_poll_is_fifo_and_bounded(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    link.device.set_signal(ch, Constant(9))
    a = link.session.subscribe(ch, 10)
    b = link.session.subscribe(ch, 20)
    link.advance(40)
    first = link.session.poll_events(max_events=2)
    rest = link.session.poll_events()
    order = [sid for sid, _ in first + rest]
    assert order == [a.id, a.id, b.id, a.id, a.id, b.id]


def test_table_full(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    for _ in range(16):
        link.session.subscribe(ch, 1000)
    with pytest.raises(DeviceError) as info:
        link.session.subscribe(ch, 1000)
    assert info.value.code is ErrorCode.TABLE_FULL


def test_period_checked_locally(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    with pytest.raises(ValueError):
        link.session.subscribe(ch, 5)


def test_unsubscribe_stops_events(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    sub = link.session.subscribe(ch, 50)
    link.advance(100)
    link.session.unsubscribe(sub)
    link.advance(500)
    assert len(link.session.poll_events()) == 2
    assert not sub.active
    with pytest.raises(DeviceError) as info:
        link.session.unsubscribe(sub.id)
    assert info.value.code is ErrorCode.BAD_SUBSCRIPTION


def test_queue_overflow_drops_oldest():
    host_end, device_end = LoopbackTransport.pair()
    device = Device()
    runner = DeviceRunner(device, device_end).start()
    s = Session(host_end, queue_size=5).connect()
    try:
        ch = s.attach_module(ModuleType.LDR, [3])
        device.set_signal(ch, Step(list(range(10)), 10))
        s.subscribe(ch, 10)
        runner.tick(100)
        s.ping()
        got = s.poll_events()
        # samples at 10..100 ms step through 1..9 then wrap to 0
        assert [v.value for _, v in got] == [6, 7, 8, 9, 0]
        assert s.dropped_events == 5
    finally:
        s.close()
        runner.stop()


# -- correlation and retries ----------------------------------------------------

def test_lost_read_reply_returns_one_value():
    device = Device()
    # drop the device's reply to the first READ (write 1 is ACK_HELLO, 2 is ACK_ATTACH)
    s, runner = wire(device, device_side=lambda t: Lossy(t, lambda n, _: n == 3),
                     reply_timeout_ms=100)
    try:
        ch = s.attach_module(ModuleType.LM35, [14])
        device.set_signal(ch, Constant(205))
        assert s.read_channel(ch) == Scalar(100195)
        assert device.received[Opcode.READ] == 2
        assert s.poll_events() == []
        assert s.read_channel(ch) == Scalar(100195)
        assert device.received[Opcode.READ] == 3
    finally:
        s.close()
        runner.stop()


def test_lost_attach_reply_is_not_deduplicated():
    # the device keeps no reply cache, so a retried ATTACH runs twice
    device = Device()
    s, runner = wire(device, device_side=lambda t: Lossy(t, lambda n, _: n == 2),
                     reply_timeout_ms=100)
    try:
        with pytest.raises(DeviceError) as info:
            s.attach_module(ModuleType.SERVO_SG90, [9])
        assert info.value.code is ErrorCode.PIN_CONFLICT
        assert device.received[Opcode.ATTACH] == 2
    finally:
        s.close()
        runner.stop()


def test_repeated_write_is_idempotent():
    device = Device()
    s, runner = wire(device, device_side=lambda t: Lossy(t, lambda n, _: n in (3, 4)),
                     reply_timeout_ms=100)
    try:
        ch = s.attach_module(ModuleType.SERVO_SG90, [9])
        s.write_channel(ch, Scalar(45000))
        assert device.received[Opcode.WRITE] == 3
        assert device.actuator_snapshot() == {ch: Servo(45000)}
    finally:
        s.close()
        runner.stop()


def test_timeout_after_all_attempts():
    device = Device()
    s, runner = wire(device, device_side=lambda t: Lossy(t, lambda n, _: n > 1),
                     reply_timeout_ms=50, retries=2)
    try:
        start = time.monotonic()
        with pytest.raises(Timeout):
            s.ping()
        assert time.monotonic() - start >= 0.09
        assert device.received[Opcode.PING] == 2
    finally:
        s.close()
        runner.stop()


def test_stray_replies_are_ignored(link):
    # an unsolicited reply with a foreign seq arrives before the real one
    link.runner._send(encode_frame(encode_command(200, PingAck())))
    link.session.ping()
    assert link.session.stray_frames == 1


def test_sequence_numbers_wrap(link):
    for _ in range(300):
        link.session.ping()
    assert link.device.received[Opcode.PING] == 300


# -- shutdown -------------------------------------------------------------------

def test_closed_session_rejects_calls():
    lk = SimulatorLink()
    lk.close()
    with pytest.raises(SessionClosed):
        lk.session.ping()
    with pytest.raises(SessionClosed):
        lk.session.poll_events()
    lk.session.close()


def test_transport_loss_surfaces():
    host_end, device_end = LoopbackTransport.pair()
    runner = DeviceRunner(Device(), device_end).start()
    s = open_session(host_end, reply_timeout_ms=1000)
    runner.stop()
    device_end.close()
    with pytest.raises(TransportError):
        s.ping()
    s.close()


def test_concurrent_callers_are_serialized(link):
    ch = link.session.attach_module(ModuleType.LDR, [3])
    link.device.set_signal(ch, Constant(77))
    results = []

    def worker():
        for _ in range(50):
            results.append(link.session.read_channel(ch))

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [Analog(77)] * 200
