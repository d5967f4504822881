"""Timestamped sample recordings, one JSON object per line.

Recordings store converted (engineering) values, not wire bytes, so they
stay readable and survive protocol changes::

    {"t_ms": 50, "channel": 0, "kind": "scalar", "value": 100195, "module": "LM35"}

``module`` is optional; replay needs it to turn scalar readings back into raw
simulator signals.
"""

import json
from dataclasses import dataclass
from typing import Optional

from tise.catalog import (
    VALUE_TYPES,
    ModuleType,
    ValueKind,
    descriptor_of,
    raw_from_value,
)
from tise.device import ChannelSpec, DeviceConfig, Trace
from tise.errors import RecordParseError

_KINDS = {k.name.lower(): k for k in ValueKind}


@dataclass(frozen=True)
class RecordLine:
    t_ms: int
    channel: int
    value: object
    module_type: Optional[int] = None

    @property
    def kind(self):
        return self.value.kind


def write_record_line(record):
    doc = {
        "t_ms": record.t_ms,
        "channel": record.channel,
        "kind": record.value.kind.name.lower(),
        "value": record.value.value,
    }
    if record.module_type is not None:
        try:
            doc["module"] = ModuleType(record.module_type).name
        except ValueError:
            doc["module"] = f"0x{record.module_type:02X}"
    return json.dumps(doc, ensure_ascii=True)


def parse_record_line(text, lineno=1):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecordParseError(lineno, f"not JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise RecordParseError(lineno, "record must be a JSON object")
    missing = {"t_ms", "channel", "kind", "value"} - set(doc)
    if missing:
        raise RecordParseError(lineno, f"missing fields {sorted(missing)}")
    t, ch = doc["t_ms"], doc["channel"]
    if not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise RecordParseError(lineno, "t_ms must be a non-negative integer")
    if not isinstance(ch, int) or isinstance(ch, bool) or not 0 <= ch <= 0xFF:
        raise RecordParseError(lineno, "channel must be an integer in 0..255")
    kind = _KINDS.get(doc["kind"])
    if kind is None:
        raise RecordParseError(lineno, f"unknown kind {doc['kind']!r}")
    raw = doc["value"]
    if (kind == ValueKind.TEXT) != isinstance(raw, str) or isinstance(raw, (bool, float)):
        raise RecordParseError(lineno, f"value {raw!r} does not fit kind {doc['kind']}")
    try:
        value = VALUE_TYPES[kind](raw)
    except ValueError as exc:
        raise RecordParseError(lineno, str(exc)) from None
    module_type = None
    if "module" in doc:
        try:
            module_type = int(ModuleType.parse(doc["module"]))
        except ValueError:
            raise RecordParseError(lineno, f"unknown module {doc['module']!r}") from None
    return RecordLine(t, ch, value, module_type)


def read_records(lines):
    """Parse an iterable of lines; blank lines are skipped, time must not go backwards."""
    records = []
    last = None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        rec = parse_record_line(line, lineno)
        if last is not None and rec.t_ms < last:
            raise RecordParseError(lineno, "t_ms goes backwards")
        last = rec.t_ms
        records.append(rec)
    return records


def write_records(records, fh):
    for rec in records:
        fh.write(write_record_line(rec) + "\n")


def rebase(records):
    """Shift timestamps so the first record sits at t=0."""
    if not records:
        return []
    t0 = records[0].t_ms
    return [RecordLine(r.t_ms - t0, r.channel, r.value, r.module_type) for r in records]


class Recorder:
    """Collects subscription events as records.

    Events carry no device timestamp, so each one is stamped with its
    nominal schedule time: the k-th event of a subscription lands at
    ``start + k * period``.  Stamps are kept non-decreasing across streams.
    """

    def __init__(self):
        self.records = []
        self._counts = {}
        self._starts = {}

    def add_subscription(self, subscription, start_ms=0):
        self._starts[subscription.id] = start_ms
        self._counts[subscription.id] = 0

    def add(self, subscription, value):
        k = self._counts.get(subscription.id, 0) + 1
        self._counts[subscription.id] = k
        t = self._starts.get(subscription.id, 0) + k * subscription.period_ms
        if self.records and t < self.records[-1].t_ms:
            t = self.records[-1].t_ms
        rec = RecordLine(t, subscription.channel, value, subscription.module_type)
        self.records.append(rec)
        return rec


def replay_config(records, base=None):
    """Build a simulator config whose sensors play the recorded values back.

    Each recorded channel becomes a pre-attached channel (dense ids in order of
    first appearance) driven by a :class:`~tise.device.Trace` of raw readings.
    Returns ``(config, channel_map)`` mapping recorded to simulator channels.
    """
    cfg = base or DeviceConfig()
    samples = {}
    modules = {}
    for rec in records:
        module_type = rec.module_type
        if module_type is None:
            module_type = {ValueKind.DIGITAL: ModuleType.PUSH_BUTTON,
                           ValueKind.ANALOG: ModuleType.POTENTIOMETER}.get(rec.kind)
            if module_type is None:
                raise ValueError(f"channel {rec.channel}: scalar records need a module field")
        module_type = int(module_type)
        if modules.setdefault(rec.channel, module_type) != module_type:
            raise ValueError(f"channel {rec.channel} switches module mid-recording")
        samples.setdefault(rec.channel, []).append((rec.t_ms, raw_from_value(module_type, rec.value)))
    channel_map = {}
    next_pin = 2
    for recorded, trace in samples.items():
        d = descriptor_of(modules[recorded])
        pins = tuple(range(next_pin, next_pin + d.pin_count))
        next_pin += d.pin_count
        channel_map[recorded] = len(cfg.channels)
        cfg.channels.append(ChannelSpec(modules[recorded], pins, Trace(trace)))
    return cfg, channel_map
