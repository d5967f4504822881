"""
First contact with a controller
===============================

Open a session to a virtual board, attach a few modules, read a sensor and
drive some actuators.  Everything runs in memory, no hardware needed.
"""

from tise.catalog import ModuleType, Scalar, Text
from tise.device import Constant
from tise.hosting import SimulatorLink

# %%
# A SimulatorLink is a virtual device and a host session joined by an
# in-memory pipe.  Creating it already ran the HELLO handshake.
link = SimulatorLink()
session, board = link.session, link.device
info = session.info
print("protocol", info.protocol_version, "firmware", hex(info.firmware_version))
print("supports", len(info.capabilities), "module types")

# %%
# Attach a temperature sensor on pin 14 and a servo on pin 9.  The device
# hands back channel numbers.
thermo = session.attach_module(ModuleType.LM35, [14])
servo = session.attach_module(ModuleType.SERVO_SG90, [9])
lcd = session.attach_module(ModuleType.LCD_16X2, [2, 3, 4, 5, 6, 7])
print("channels:", thermo, servo, lcd)

# %%
# On the simulator we decide what the sensor "sees".  205 ADC counts on an
# LM35 is about 100 degrees; the host converts to milli-degrees.
board.set_signal(thermo, Constant(205))
print("temperature:", session.read_channel(thermo))

# %%
# Actuator commands are checked on the host before they go out.
session.write_channel(servo, Scalar(90000))        # 90 degrees
session.write_channel(lcd, Text("SCORE 120\nLEVEL 3"))
print(board.actuator_snapshot())

try:
    session.write_channel(servo, Scalar(270000))
except Exception as exc:
    print("rejected:", exc)

# %%
# Pins are owned by one channel at a time.
try:
    session.attach_module(ModuleType.LDR, [14])
except Exception as exc:
    print("rejected:", exc)

link.close()
