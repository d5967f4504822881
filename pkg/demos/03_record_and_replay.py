"""
Record a session, play it back
==============================

Capture a few seconds of sensor data, save it as JSON lines, then build a
fresh simulator that plays the recording back.  Useful for testing game
logic against a real play session without the hardware plugged in.
"""

import io

from tise.catalog import ModuleType
from tise.device import Device, Sine, Step
from tise.hosting import SimulatorLink
from tise.records import Recorder, read_records, rebase, replay_config, write_records

# %%
# Two sensors with changing readings.
link = SimulatorLink()
s = link.session
temp = s.attach_module(ModuleType.LM35, [14])
dist = s.attach_module(ModuleType.HC_SR04, [7, 8])
link.device.set_signal(temp, Sine(50, 90, 1000))
link.device.set_signal(dist, Step([600, 3000, 5800], 250))

# %%
# Events carry no timestamp; the recorder stamps each with its schedule time.
recorder = Recorder()
subs = {}
for ch in (temp, dist):
    sub = s.subscribe(ch, 100)
    subs[sub.id] = sub
    recorder.add_subscription(sub)
link.advance(1000)
for sid, value in s.poll_events():
    recorder.add(subs[sid], value)
link.close()

buf = io.StringIO()
write_records(recorder.records, buf)
print(buf.getvalue().splitlines()[0])
print(len(recorder.records), "records")

# %%
# Rebuild a device from the file.  Each recorded channel becomes a
# pre-attached channel fed by a trace of raw readings.
records = read_records(buf.getvalue().splitlines())
cfg, channel_map = replay_config(records)
print("channel map:", channel_map)

replayed = SimulatorLink(device=Device(cfg))
again = Recorder()
subs = {}
for recorded in (temp, dist):
    ch = channel_map[recorded]
    replayed.session.bind_channel(ch, cfg.channels[ch].module_type)
    sub = replayed.session.subscribe(ch, 100)
    subs[sub.id] = sub
    again.add_subscription(sub)
replayed.advance(1000)
for sid, value in replayed.session.poll_events():
    again.add(subs[sid], value)
replayed.close()

# %%
# Same values at the same (re-based) times.
first = [(r.t_ms, r.value) for r in rebase(records)]
second = [(r.t_ms, r.value) for r in rebase(again.records)]
print("identical:", first == second)
