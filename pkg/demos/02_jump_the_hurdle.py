"""
Jump the hurdle
===============

A runner game wants the player to physically jump.  A gyroscope strapped to
the player streams angular rate; a trigger rule turns a spike into a "jump"
action.  The gyroscope is not in the built-in catalog, so we register it as
an extension module.
"""

from tise.catalog import Direction, ModuleDescriptor, Scalar, ValueKind, register_extension
from tise.device import Device, DeviceConfig, Trace
from tise.hosting import SimulatorLink
from tise.triggers import TriggerEngine, parse_rules

# %%
# Raw readings are 16-bit counts centred on 32768; each count is 8 milli
# degrees per second.
GYRO = 0x40
register_extension(ModuleDescriptor(
    GYRO, "Gyroscope", Direction.SENSOR, ValueKind.SCALAR, pin_count=1,
    unit="mdeg/s", raw_max=0xFFFF, convert=lambda raw: Scalar((raw - 32768) * 8)))

# %%
# The simulated player stands still, jumps at 400 ms and again at 550 ms
# (too soon, it bounces), then properly at 1200 ms.
still, spike = 32768, 32768 + 32000          # rest, 256 deg/s
motion = Trace([(0, still), (400, spike), (460, still), (550, spike), (600, still),
                (1200, spike), (1260, still)])

board = Device(DeviceConfig(extensions=frozenset({GYRO})))
link = SimulatorLink(device=board)
gyro = link.session.attach_module(GYRO, [5])
board.set_signal(gyro, motion)

# %%
# Fire "jump" when the rate crosses 250 deg/s, at most once every 300 ms.
rules = parse_rules(f"""
    hop   {gyro}  > 250000  debounce=300 -> jump
""")
engine = TriggerEngine(rules)

# %%
# Stream at 20 ms and feed every sample to the engine.
sub = link.session.subscribe(gyro, 20)
link.advance(1500)
for k, (_, value) in enumerate(link.session.poll_events(), 1):
    for action in engine.evaluate_sample(k * sub.period_ms, gyro, value):
        print(action.to_json())

link.close()
