"""Sensor and actuator module catalog.

Every supported module type has a stable one-byte wire id, a direction, the
kind of value it produces or accepts, its pin needs and its unit.  Sensors
report raw device integers (ADC counts, echo microseconds, pin levels) which
:func:`convert_raw` turns into engineering values on the host.  Scalars are
always integers in milli-units so neither side needs floating point.

Ids ``0x40``-``0x7F`` are reserved for user-defined modules, registered at
runtime with :func:`register_extension`.
"""

import enum
import string
from dataclasses import dataclass
from typing import Callable, Optional, Union

from tise.errors import (
    AnalogOutOfRange,
    NotAnActuator,
    NotASensor,
    OutOfRange,
    UnknownModuleType,
    WrongKind,
)

ANALOG_MAX = 1023
SCALAR_MIN = -(2**31)
SCALAR_MAX = 2**31 - 1
TEXT_MAX = 64
EXTENSION_IDS = range(0x40, 0x80)

_PRINTABLE = frozenset(string.printable) - frozenset("\t\r\x0b\x0c")


class ModuleType(enum.IntEnum):
    PUSH_BUTTON = 0x00
    LCD_16X2 = 0x01
    LCD_16X4 = 0x02
    LM35 = 0x03
    HC_SR04 = 0x04
    LDR = 0x05
    SERVO_SG90 = 0x06
    DC_MOTOR = 0x07
    IR_LED = 0x08
    IR_RECEIVER_TSOP382 = 0x09
    GAS_MQX = 0x0A
    SEVEN_SEGMENT = 0x0B
    POTENTIOMETER = 0x0C
    LED_5MM = 0x0D
    MICROPHONE = 0x0E
    VIBRATION_SW420 = 0x0F
    BUZZER_YL44 = 0x10

    @classmethod
    def parse(cls, name):
        """Look up a module type by name (``"lm35"``, ``"servo-sg90"``) or id."""
        if isinstance(name, int):
            return cls(name)
        text = str(name).strip()
        try:
            return cls(int(text, 0))
        except ValueError:
            pass
        try:
            return cls[text.upper().replace("-", "_")]
        except KeyError:
            raise ValueError(f"unknown module name {name!r}") from None


class Direction(enum.Enum):
    SENSOR = "sensor"
    ACTUATOR = "actuator"


class ValueKind(enum.IntEnum):
    DIGITAL = 0
    ANALOG = 1
    SCALAR = 2
    TEXT = 3


# -- channel values -----------------------------------------------------------

@dataclass(frozen=True)
class Digital:
    value: int

    kind = ValueKind.DIGITAL

    def __post_init__(self):
        if isinstance(self.value, bool):
            object.__setattr__(self, "value", int(self.value))
        elif not isinstance(self.value, int) or self.value not in (0, 1):
            raise ValueError(f"digital value must be 0 or 1, got {self.value!r}")


@dataclass(frozen=True)
class Analog:
    value: int

    kind = ValueKind.ANALOG

    def __post_init__(self):
        if not isinstance(self.value, int) or not 0 <= self.value <= ANALOG_MAX:
            raise ValueError(f"analog value must be in 0..{ANALOG_MAX}, got {self.value!r}")


@dataclass(frozen=True)
class Scalar:
    """Signed integer in milli-units of the module's unit."""

    value: int

    kind = ValueKind.SCALAR

    def __post_init__(self):
        if not isinstance(self.value, int) or not SCALAR_MIN <= self.value <= SCALAR_MAX:
            raise ValueError(f"scalar value must fit in i32, got {self.value!r}")


@dataclass(frozen=True)
class Text:
    value: str

    kind = ValueKind.TEXT

    def __post_init__(self):
        if not isinstance(self.value, str) or len(self.value) > TEXT_MAX:
            raise ValueError(f"text must be a str of at most {TEXT_MAX} characters")
        if not set(self.value) <= _PRINTABLE:
            raise ValueError("text may only contain printable ASCII and newlines")


ChannelValue = Union[Digital, Analog, Scalar, Text]
VALUE_TYPES = {cls.kind: cls for cls in (Digital, Analog, Scalar, Text)}


def as_milli(value):
    """Project a numeric channel value onto one integer comparison domain.

    Scalars already are milli-units; digital and analog values are scaled by
    1000.  Text has no numeric meaning and yields ``None``.
    """
    if isinstance(value, Scalar):
        return value.value
    if isinstance(value, (Digital, Analog)):
        return value.value * 1000
    return None


# -- descriptors ----------------------------------------------------------------

@dataclass(frozen=True)
class ModuleDescriptor:
    module_type: int
    name: str
    direction: Direction
    value_kind: ValueKind
    pin_count: int
    unit: str
    # largest raw integer the device reports; None for actuators
    raw_max: Optional[int] = None
    convert: Optional[Callable[[int], ChannelValue]] = None

    @property
    def is_sensor(self):
        return self.direction is Direction.SENSOR


def _lm35(raw):
    return Scalar(raw * 500000 // 1023)


def _hc_sr04(raw):
    return Scalar(raw * 10 // 58)


def _digital(raw):
    return Digital(int(raw != 0))


def _passthrough(raw):
    return Analog(raw)


_S, _A = Direction.SENSOR, Direction.ACTUATOR
_D, _AN, _SC, _T = ValueKind.DIGITAL, ValueKind.ANALOG, ValueKind.SCALAR, ValueKind.TEXT
M = ModuleType

CATALOG = {
    d.module_type: d
    for d in (
        ModuleDescriptor(M.PUSH_BUTTON, "Push Button", _S, _D, 1, "", 1, _digital),
        ModuleDescriptor(M.LCD_16X2, "16x2 LCD Module", _A, _T, 6, "text"),
        ModuleDescriptor(M.LCD_16X4, "16x4 LCD Module", _A, _T, 6, "text"),
        ModuleDescriptor(M.LM35, "LM35 Sensor", _S, _SC, 1, "m°C", ANALOG_MAX, _lm35),
        ModuleDescriptor(M.HC_SR04, "Ultrasonic Sensor HC-SR04", _S, _SC, 2, "mm", 0xFFFF, _hc_sr04),
        ModuleDescriptor(M.LDR, "Light Dependent Resistor", _S, _AN, 1, "adc", ANALOG_MAX, _passthrough),
        ModuleDescriptor(M.SERVO_SG90, "TowerPro SG90 servo motor", _A, _SC, 1, "deg"),
        ModuleDescriptor(M.DC_MOTOR, "DC Motor", _A, _SC, 3, "pwm"),
        ModuleDescriptor(M.IR_LED, "5V IR LED", _A, _D, 1, ""),
        ModuleDescriptor(M.IR_RECEIVER_TSOP382, "TSOP382 IR Receiver", _S, _AN, 1, "adc", ANALOG_MAX, _passthrough),
        ModuleDescriptor(M.GAS_MQX, "MQ-X Gas Sensor", _S, _AN, 1, "adc", ANALOG_MAX, _passthrough),
        ModuleDescriptor(M.SEVEN_SEGMENT, "Digit Seven Segment", _A, _T, 7, "digit"),
        ModuleDescriptor(M.POTENTIOMETER, "Potentiometer", _S, _AN, 1, "adc", ANALOG_MAX, _passthrough),
        ModuleDescriptor(M.LED_5MM, "5mm LED", _A, _D, 1, ""),
        ModuleDescriptor(M.MICROPHONE, "Microphone sound sensor", _S, _AN, 1, "adc", ANALOG_MAX, _passthrough),
        ModuleDescriptor(M.VIBRATION_SW420, "SW-420 Motion Vibration Sensor", _S, _D, 1, "", 1, _digital),
        ModuleDescriptor(M.BUZZER_YL44, "YL-44 Buzzer Module", _A, _D, 1, ""),
    )
}
del M

_extensions = {}


def register_extension(descriptor):
    """Register a user-defined module in the reserved ``0x40``-``0x7F`` range.

    Extension sensors must give ``raw_max`` and may give ``convert``; without
    one the raw value passes through as the descriptor's kind.
    """
    if descriptor.module_type not in EXTENSION_IDS:
        raise ValueError("extension ids must lie in 0x40..0x7F")
    if descriptor.is_sensor and descriptor.raw_max is None:
        raise ValueError("extension sensors need raw_max")
    _extensions[descriptor.module_type] = descriptor
    return descriptor


def unregister_extension(module_type):
    _extensions.pop(module_type, None)


def descriptor_of(module_type):
    try:
        return CATALOG[module_type]
    except KeyError:
        pass
    try:
        return _extensions[module_type]
    except KeyError:
        raise UnknownModuleType(int(module_type)) from None


def raw_kind(descriptor):
    """Value kind a device uses to carry this sensor's raw reading."""
    if descriptor.raw_max == 1:
        return ValueKind.DIGITAL
    if descriptor.raw_max is not None and descriptor.raw_max <= ANALOG_MAX:
        return ValueKind.ANALOG
    return ValueKind.SCALAR


def raw_value(descriptor, raw):
    """Wrap a raw sensor reading as the channel value sent over the wire."""
    return VALUE_TYPES[raw_kind(descriptor)](raw)


def convert_raw(module_type, raw):
    """Convert a raw sensor reading to the module's engineering value.

    LM35 gives milli-degrees Celsius (``raw * 500000 // 1023``), HC-SR04
    turns echo microseconds into millimetres (``raw * 10 // 58``), digital
    sensors report ``raw != 0`` and the remaining analog sensors pass the ADC
    count through.  All divisions truncate.
    """
    d = descriptor_of(module_type)
    if not d.is_sensor:
        raise NotASensor(f"{d.name} is not a sensor")
    if not isinstance(raw, int) or raw < 0:
        raise AnalogOutOfRange(f"raw reading must be a non-negative integer, got {raw!r}")
    limit = 0xFFFF if d.raw_max == 1 else d.raw_max
    if raw > limit:
        raise AnalogOutOfRange(f"raw reading {raw} exceeds {limit} for {d.name}")
    if d.convert is not None:
        return d.convert(raw)
    return VALUE_TYPES[d.value_kind](raw)


def raw_from_value(module_type, value):
    """Smallest raw reading that :func:`convert_raw` maps onto ``value``.

    Used to turn recorded engineering values back into simulator signals.
    """
    d = descriptor_of(module_type)
    if not d.is_sensor:
        raise NotASensor(f"{d.name} is not a sensor")
    if module_type == ModuleType.LM35:
        raw = -(-value.value * 1023 // 500000)
    elif module_type == ModuleType.HC_SR04:
        raw = -(-value.value * 58 // 10)
    elif isinstance(value, Digital):
        raw = value.value
    elif d.convert is None:
        raw = value.value
    else:
        raise ValueError(f"no inverse conversion known for {d.name}")
    try:
        ok = convert_raw(module_type, raw) == value
    except AnalogOutOfRange:
        ok = False
    if not ok:
        raise OutOfRange(f"{value} is not a reading {d.name} can produce")
    return raw


# -- write validation ---------------------------------------------------------

_TEXT_RULES = {
    # module: (max characters, max line breaks)
    ModuleType.LCD_16X2: (32, 1),
    ModuleType.LCD_16X4: (62, 3),
}
SERVO_RANGE = (0, 180000)
MOTOR_RANGE = (-255000, 255000)


def validate_write(module_type, value):
    """Raise unless ``value`` is an acceptable command for the actuator."""
    d = descriptor_of(module_type)
    if d.is_sensor:
        raise NotAnActuator(f"{d.name} is not an actuator")
    if value.kind != d.value_kind:
        raise WrongKind(f"{d.name} takes {d.value_kind.name} values, got {value.kind.name}")

    if module_type == ModuleType.SERVO_SG90:
        lo, hi = SERVO_RANGE
    elif module_type == ModuleType.DC_MOTOR:
        lo, hi = MOTOR_RANGE
    elif module_type in _TEXT_RULES:
        max_len, max_breaks = _TEXT_RULES[module_type]
        if len(value.value) > max_len or value.value.count("\n") > max_breaks:
            raise OutOfRange(
                f"{d.name} shows at most {max_len} characters on {max_breaks + 1} lines"
            )
        return
    elif module_type == ModuleType.SEVEN_SEGMENT:
        if len(value.value) != 1 or value.value not in "0123456789":
            raise OutOfRange("seven segment display takes a single digit 0-9")
        return
    else:
        return
    if not lo <= value.value <= hi:
        raise OutOfRange(f"{d.name} accepts {lo}..{hi}, got {value.value}")
