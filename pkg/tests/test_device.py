import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reference import frame_bytes, schedule, sine_raw

from tise.catalog import Analog, Digital, ModuleType, Scalar, Text
from tise.device import (
    ChannelSpec,
    Constant,
    Device,
    DeviceConfig,
    Lcd,
    Led,
    Manual,
    Servo,
    Sine,
    Step,
    Trace,
    load_config,
    new_device,
    source_from_dict,
)
from tise.errors import BadChannel, WrongDirection
from tise.protocol import (
    Attach,
    AttachAck,
    Detach,
    Error,
    ErrorCode,
    Event,
    Frame,
    FrameDecoder,
    Hello,
    Opcode,
    Ping,
    Read,
    Resync,
    Subscribe,
    SubscribeAck,
    Unsubscribe,
    Value,
    Write,
    decode_command,
    encode_command,
    encode_frame,
)


def send(device, seq, cmd):
    """One request in, decoded replies out."""
    out = device.run_step(encode_frame(encode_command(seq, cmd)))
    return [(f.seq, decode_command(f)) for f in FrameDecoder().feed(out)]


def events(data):
    return [decode_command(f) for f in FrameDecoder().feed(data)]


# -- signal sources -------------------------------------------------------------

@given(st.integers(0, 1000), st.integers(0, 1023), st.integers(1, 5000), st.integers(0, 20000))
def test_sine_matches_reference(lo, span, period, t):
    hi = min(1023, lo + span)
    assert Sine(lo, hi, period).sample(t) == sine_raw(lo, hi, period, t)


def test_sine_peak():
    assert Sine(0, 1023, 1000).sample(250) == 1023
    assert Sine(0, 1023, 1000).sample(750) == 0


def test_step_cycles():
    s = Step([1, 2, 3], 100)
    assert [s.sample(t) for t in (0, 99, 100, 250, 300)] == [1, 1, 2, 3, 1]


def test_trace_hold_and_loop():
    tr = Trace([(0, 5), (100, 7)])
    assert [tr.sample(t) for t in (0, 50, 100, 9999)] == [5, 5, 7, 7]
    looped = Trace([(0, 5), (100, 7)], loop_ms=200)
    assert looped.sample(250) == 5 and looped.sample(350) == 7
    with pytest.raises(ValueError):
        Trace([(10, 1), (5, 2)])


def test_source_from_dict():
    assert source_from_dict({"type": "constant", "raw": 3}) == Constant(3)
    assert source_from_dict({"type": "trace", "samples": [[0, 1]]}) == Trace([(0, 1)])
    with pytest.raises(ValueError):
        source_from_dict({"type": "noise"})


# -- dispatch -------------------------------------------------------------------

def test_ping_reply():
    assert Device().run_step(frame_bytes(0, 0x01)) == frame_bytes(0, 0x81)


def test_hello_reply_payload():
    [(seq, info)] = send(Device(), 0, Hello(1))
    assert seq == 0
    assert info.protocol_version == 1
    assert info.capabilities == frozenset(range(17))


def test_attach_assigns_dense_channels():
    d = Device()
    assert send(d, 1, Attach(ModuleType.LM35, (14,))) == [(1, AttachAck(0))]
    assert send(d, 2, Attach(ModuleType.LED_5MM, (13,))) == [(2, AttachAck(1))]
    assert d.pin_table == {14: 0, 13: 1}


def test_attach_errors():
    d = Device()
    send(d, 0, Attach(ModuleType.LM35, (14,)))
    assert send(d, 1, Attach(ModuleType.LDR, (14,))) == [(1, Error(ErrorCode.PIN_CONFLICT, Opcode.ATTACH))]
    assert send(d, 2, Attach(0x30, (1,))) == [(2, Error(ErrorCode.UNKNOWN_MODULE_TYPE, Opcode.ATTACH))]
    assert send(d, 3, Attach(ModuleType.HC_SR04, (1,))) == [(3, Error(ErrorCode.BAD_VALUE, Opcode.ATTACH))]
    assert send(d, 4, Attach(ModuleType.HC_SR04, (1, 1))) == [(4, Error(ErrorCode.PIN_CONFLICT, Opcode.ATTACH))]


def test_capability_gate():
    d = Device(DeviceConfig(capabilities=frozenset({ModuleType.LED_5MM})))
    assert send(d, 0, Attach(ModuleType.LM35, (1,)))[0][1].code == ErrorCode.UNKNOWN_MODULE_TYPE
    assert send(d, 1, Attach(ModuleType.LED_5MM, (1,))) == [(1, AttachAck(0))]


def test_detach_releases_pins_and_subscriptions():
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    send(d, 1, Subscribe(0, 10))
    assert send(d, 2, Detach(0))[0][1].channel == 0
    assert d.pin_table == {} and d.subscription_table == {}
    assert send(d, 3, Detach(0))[0][1] == Error(ErrorCode.BAD_CHANNEL, Opcode.DETACH)
    # channel ids are never reused
    assert send(d, 4, Attach(ModuleType.LDR, (3,))) == [(4, AttachAck(1))]


def test_read_raw_values():
    d = Device()
    send(d, 0, Attach(ModuleType.LM35, (14,)))
    send(d, 0, Attach(ModuleType.HC_SR04, (7, 8)))
    send(d, 0, Attach(ModuleType.PUSH_BUTTON, (2,)))
    d.set_signal(0, Constant(205))
    d.set_signal(1, Constant(5800))
    d.set_manual(2, 1)
    assert send(d, 5, Read(0)) == [(5, Value(0, Analog(205)))]
    assert send(d, 6, Read(1)) == [(6, Value(1, Scalar(5800)))]
    assert send(d, 7, Read(2)) == [(7, Value(2, Digital(1)))]
    assert send(d, 8, Read(9)) == [(8, Error(ErrorCode.BAD_CHANNEL, Opcode.READ))]


def test_direction_errors():
    d = Device()
    send(d, 0, Attach(ModuleType.LM35, (14,)))
    send(d, 0, Attach(ModuleType.LED_5MM, (13,)))
    assert send(d, 1, Write(0, Scalar(1)))[0][1] == Error(ErrorCode.WRONG_DIRECTION, Opcode.WRITE)
    assert send(d, 2, Read(1))[0][1] == Error(ErrorCode.WRONG_DIRECTION, Opcode.READ)
    assert send(d, 3, Subscribe(1, 50))[0][1] == Error(ErrorCode.WRONG_DIRECTION, Opcode.SUBSCRIBE)
    with pytest.raises(WrongDirection):
        d.set_signal(1, Constant(1))
    with pytest.raises(BadChannel):
        d.set_signal(7, Constant(1))
    with pytest.raises(ValueError):
        d.set_signal(0, Constant(2000))


def test_write_updates_snapshot():
    d = Device()
    send(d, 0, Attach(ModuleType.LED_5MM, (13,)))
    send(d, 0, Attach(ModuleType.SERVO_SG90, (9,)))
    send(d, 0, Attach(ModuleType.LCD_16X2, (1, 2, 3, 4, 5, 6)))
    assert d.actuator_snapshot() == {0: Led(False), 1: Servo(0), 2: Lcd(())}
    send(d, 1, Write(0, Digital(1)))
    send(d, 2, Write(1, Scalar(90000)))
    send(d, 3, Write(2, Text("HELLO\nWORLD")))
    assert d.actuator_snapshot() == {0: Led(True), 1: Servo(90000), 2: Lcd(("HELLO", "WORLD"))}
    assert send(d, 4, Write(1, Scalar(200000)))[0][1] == Error(ErrorCode.BAD_VALUE, Opcode.WRITE)
    assert d.actuator_snapshot()[1] == Servo(90000)


def test_unknown_and_malformed_requests():
    d = Device()
    out = events(d.run_step(encode_frame(Frame(3, 0x42))))
    assert out == [Error(ErrorCode.UNKNOWN_OPCODE, 0x42)]
    out = events(d.run_step(encode_frame(Frame(4, Opcode.READ))))
    assert out == [Error(ErrorCode.MALFORMED_PAYLOAD, Opcode.READ)]
    # a reply opcode sent to the device is not a request
    out = events(d.run_step(encode_frame(Frame(5, Opcode.ACK_PING))))
    assert out == [Error(ErrorCode.UNKNOWN_OPCODE, Opcode.ACK_PING)]


def test_subscribe_limits():
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    assert send(d, 0, Subscribe(0, 9))[0][1].code == ErrorCode.BAD_VALUE
    assert send(d, 0, Subscribe(0, 60001))[0][1].code == ErrorCode.BAD_VALUE
    for i in range(16):
        assert send(d, i, Subscribe(0, 10)) == [(i, SubscribeAck(i))]
    assert send(d, 16, Subscribe(0, 10))[0][1] == Error(ErrorCode.TABLE_FULL, Opcode.SUBSCRIBE)
    assert send(d, 17, Unsubscribe(3))[0][1].subscription == 3
    assert send(d, 18, Unsubscribe(3))[0][1].code == ErrorCode.BAD_SUBSCRIPTION


def test_hello_clears_subscriptions():
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    send(d, 1, Subscribe(0, 10))
    send(d, 2, Hello(1))
    assert d.subscription_table == {}
    assert d.channel_table


# -- virtual clock --------------------------------------------------------------

def test_tick_emits_twenty_events():
    d = Device()
    send(d, 0, Attach(ModuleType.LM35, (14,)))
    d.set_signal(0, Constant(205))
    send(d, 1, Subscribe(0, 50))
    got = events(d.tick(1000))
    assert got == [Event(0, Analog(205))] * 20
    assert d.clock_ms == 1000


def test_tick_interleaves_by_due_time_then_id():
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    send(d, 0, Attach(ModuleType.POTENTIOMETER, (4,)))
    send(d, 1, Subscribe(0, 50))
    send(d, 2, Subscribe(1, 70))
    got = [e.subscription for e in events(d.tick(140))]
    assert got == [sid for _, sid in schedule({0: (50, 50), 1: (70, 70)}, 0, 140)] == [0, 1, 0, 1]


def test_each_event_samples_at_its_due_time():
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    d.set_signal(0, Step([1, 2, 3, 4], 50))
    send(d, 1, Subscribe(0, 50))
    assert [e.value.value for e in events(d.tick(200))] == [2, 3, 4, 1]


@settings(max_examples=50)
@given(st.lists(st.integers(10, 300), min_size=1, max_size=5),
       st.lists(st.integers(0, 400), min_size=1, max_size=8))
def test_tick_matches_brute_force_schedule(periods, advances):
    d = Device()
    send(d, 0, Attach(ModuleType.LDR, (3,)))
    for p in periods:
        send(d, 0, Subscribe(0, p))
    expected = schedule({i: (p, p) for i, p in enumerate(periods)}, 0, sum(advances))
    got = []
    for a in advances:
        got += [e.subscription for e in events(d.tick(a))]
    assert got == [sid for _, sid in expected]


def test_manual_source_updates():
    d = Device()
    send(d, 0, Attach(ModuleType.PUSH_BUTTON, (2,)))
    d.set_manual(0, 1)
    assert d.sample(0) == 1
    d.set_manual(0, 0)
    assert d.sample(0) == 0
    assert isinstance(d.channel_table[0].source, Manual)


def test_step_per_frame_advances_clock():
    d = Device(DeviceConfig(step_per_frame_ms=10))
    d.run_step(frame_bytes(0, 0x01) * 3)
    assert d.clock_ms == 30


# -- config ---------------------------------------------------------------------

def test_load_config_from_text():
    cfg = load_config("""{
        "firmware_version": 513,
        "channels": [
            {"module": "lm35", "pins": [14], "signal": {"type": "constant", "raw": 205}},
            {"module": "servo-sg90", "pins": [9]}
        ]
    }""")
    d = Device(cfg)
    assert d.info().firmware_version == 513
    assert d.channel_module(0) == ModuleType.LM35
    assert d.sample(0) == 205
    assert 1 in d.actuator_snapshot()


def test_load_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        load_config({"chanels": []})


def test_preattach_conflict_is_reported():
    cfg = DeviceConfig(channels=[ChannelSpec(ModuleType.LDR, (3,)), ChannelSpec(ModuleType.LDR, (3,))])
    with pytest.raises(ValueError):
        Device(cfg)


# -- conformance sweeps ------------------------------------------------------------

def _random_session_bytes(rng, n):
    frames = []
    for seq in range(n):
        choice = rng.randrange(7)
        if choice == 0:
            cmd = Attach(rng.choice(list(ModuleType)), tuple(rng.sample(range(20), rng.choice([1, 2, 3]))))
        elif choice == 1:
            cmd = Detach(rng.randrange(6))
        elif choice == 2:
            cmd = Read(rng.randrange(6))
        elif choice == 3:
            cmd = Write(rng.randrange(6), rng.choice([Digital(1), Scalar(1000), Text("7")]))
        elif choice == 4:
            cmd = Subscribe(rng.randrange(6), rng.choice([5, 10, 50, 100]))
        elif choice == 5:
            cmd = Unsubscribe(rng.randrange(20))
        else:
            cmd = Ping()
        frames.append(encode_frame(encode_command(seq & 0xFF, cmd)))
    return frames


def test_table_invariants_hold_under_random_traffic():
    rng = random.Random(7)
    d = Device()
    for frame in _random_session_bytes(rng, 2000):
        d.run_step(frame)
        if rng.random() < 0.1:
            d.tick(rng.randrange(100))
        assert d.table_violations() == []


def test_outbound_stream_is_well_formed():
    rng = random.Random(11)
    d = Device()
    out = bytearray()
    for frame in _random_session_bytes(rng, 500):
        out += d.run_step(frame)
        out += d.tick(rng.randrange(60))
    decoded = FrameDecoder().feed(bytes(out))
    assert not any(isinstance(o, Resync) for o in decoded)
    for f in decoded:
        decode_command(f)


def test_every_request_gets_one_reply():
    rng = random.Random(3)
    d = Device()
    frames = _random_session_bytes(rng, 300)
    replies = FrameDecoder().feed(d.run_step(b"".join(frames)))
    assert len(replies) == len(frames)
    assert [f.seq for f in replies] == [i & 0xFF for i in range(len(frames))]


def test_new_device_defaults_and_config_forms():
    assert len(new_device().config.capabilities) == 17
    from_dict = new_device({"firmware_version": 258})
    from_text = new_device('{"firmware_version": 258}')
    assert from_dict.config.firmware_version == from_text.config.firmware_version == 258


def test_corrupted_crc_gets_no_reply():
    dev = Device()
    data = bytearray(frame_bytes(1, 0x01, b""))
    data[-1] ^= 0xFF
    assert dev.run_step(bytes(data)) == b""
    assert sum(dev.received.values()) == 0
