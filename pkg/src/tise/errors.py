"""Exception hierarchy shared by every layer of the toolkit."""


class TiseError(Exception):
    """Base class for all toolkit errors."""


# -- wire format ------------------------------------------------------------

class ProtocolError(TiseError):
    pass


class PayloadTooLong(ProtocolError):
    pass


class InvalidField(ProtocolError):
    pass


class UnknownOpcode(ProtocolError):
    def __init__(self, opcode):
        super().__init__(f"unknown opcode 0x{opcode:02X}")
        self.opcode = opcode


class MalformedPayload(ProtocolError):
    pass


class VersionMismatch(ProtocolError):
    def __init__(self, version):
        super().__init__(f"device speaks protocol version {version}, expected 1")
        self.version = version


# -- module catalog ---------------------------------------------------------

class CatalogError(TiseError):
    pass


class UnknownModuleType(CatalogError):
    def __init__(self, module_type):
        super().__init__(f"unknown module type 0x{module_type:02X}")
        self.module_type = module_type


class NotASensor(CatalogError):
    pass


class NotAnActuator(CatalogError):
    pass


class AnalogOutOfRange(CatalogError):
    pass


class WrongKind(CatalogError):
    pass


class OutOfRange(CatalogError):
    pass


# -- host session -----------------------------------------------------------

class SessionError(TiseError):
    pass


class TransportError(SessionError):
    pass


class Timeout(SessionError):
    pass


class HandshakeTimeout(Timeout):
    pass


class SessionClosed(SessionError):
    pass


class NotReady(SessionError):
    pass


class WrongDirection(SessionError):
    pass


class DeviceError(SessionError):
    """The device answered a request with an ERROR frame."""

    def __init__(self, code, offending_opcode=None):
        from tise.protocol import ErrorCode

        try:
            code = ErrorCode(code)
            name = code.name
        except ValueError:
            name = f"0x{code:02X}"
        super().__init__(f"device error {name}")
        self.code = code
        self.offending_opcode = offending_opcode


# -- simulator --------------------------------------------------------------

class BadChannel(TiseError):
    pass


# -- trigger rules and records ------------------------------------------------

class RuleError(TiseError):
    pass


class RuleSyntaxError(RuleError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateRuleId(RuleError):
    pass


class BadPredicate(RuleError):
    pass


class TimeRegression(TiseError):
    pass


class RecordParseError(TiseError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
