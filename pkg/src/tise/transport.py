"""Duplex byte-stream transports.

Endpoints are written as ``serial:/dev/ttyACM0?baud=115200``,
``tcp:127.0.0.1:7900`` or ``loopback:``.  A transport only moves bytes; it
knows nothing about frames.
"""

import socket
import threading
from urllib.parse import parse_qs

from tise.errors import TransportError

DEFAULT_BAUD = 115200


class Transport:
    """Abstract duplex byte stream."""

    def read(self, timeout):
        """Return whatever bytes arrive within ``timeout`` seconds (maybe ``b""``)."""
        raise NotImplementedError

    def write(self, data):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.cond = threading.Condition()
        self.closed = False


class LoopbackTransport(Transport):
    """One end of an in-memory byte pipe.  Create connected ends with :meth:`pair`."""

    def __init__(self, inbound, outbound):
        self._in = inbound
        self._out = outbound

    @classmethod
    def pair(cls):
        a, b = _Pipe(), _Pipe()
        return cls(a, b), cls(b, a)

    def read(self, timeout):
        pipe = self._in
        with pipe.cond:
            if not pipe.buf and not pipe.closed:
                pipe.cond.wait(timeout)
            if not pipe.buf and pipe.closed:
                raise TransportError("loopback closed")
            data = bytes(pipe.buf)
            pipe.buf.clear()
            return data

    def write(self, data):
        pipe = self._out
        with pipe.cond:
            if pipe.closed:
                raise TransportError("loopback closed")
            pipe.buf += data
            pipe.cond.notify_all()

    def close(self):
        for pipe in (self._in, self._out):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


class MuteTransport(Transport):
    """Swallows every write and never answers.  Keeps what was written."""

    def __init__(self):
        self.written = bytearray()
        self._closed = threading.Event()

    def read(self, timeout):
        if self._closed.wait(timeout):
            raise TransportError("closed")
        return b""

    def write(self, data):
        self.written += data

    def close(self):
        self._closed.set()


class TcpTransport(Transport):
    def __init__(self, host, port, connect_timeout=5.0, sock=None):
        if sock is None:
            try:
                sock = socket.create_connection((host, port), timeout=connect_timeout)
            except OSError as exc:
                raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._lock = threading.Lock()

    def read(self, timeout):
        try:
            self._sock.settimeout(timeout)
            data = self._sock.recv(4096)
        except socket.timeout:
            return b""
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if not data:
            raise TransportError("connection closed by peer")
        return data

    def write(self, data):
        with self._lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise TransportError(str(exc)) from exc

    def close(self):
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class SerialTransport(Transport):
    def __init__(self, path, baud=DEFAULT_BAUD):
        try:
            import serial
        except ImportError as exc:
            raise TransportError("serial endpoints need pyserial (pip install pyserial)") from exc
        try:
            self._port = serial.Serial(path, baudrate=baud, timeout=0)
        except (serial.SerialException, OSError) as exc:
            raise TransportError(f"cannot open {path}: {exc}") from exc

    def read(self, timeout):
        if not self._port.is_open:
            raise TransportError("serial port closed")
        try:
            self._port.timeout = timeout
            first = self._port.read(1)
            if not first:
                return b""
            self._port.timeout = 0
            return first + self._port.read(self._port.in_waiting)
        except (OSError, TypeError) as exc:
            # pyserial trips over its own cleared fd when closed mid-read
            raise TransportError(str(exc) or "serial port closed") from exc

    def write(self, data):
        try:
            self._port.write(data)
            self._port.flush()
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def close(self):
        self._port.close()


def parse_endpoint(text):
    """Split an endpoint string into ``(scheme, params)``.

    >>> parse_endpoint("tcp:127.0.0.1:7900")
    ('tcp', {'host': '127.0.0.1', 'port': 7900})
    >>> parse_endpoint("serial:/dev/ttyUSB0?baud=9600")
    ('serial', {'path': '/dev/ttyUSB0', 'baud': 9600})
    """
    scheme, sep, rest = text.partition(":")
    if not sep:
        raise ValueError(f"endpoint {text!r} lacks a scheme")
    if scheme == "loopback":
        if rest:
            raise ValueError("loopback endpoint takes no address")
        return scheme, {}
    if scheme == "tcp":
        host, sep, port = rest.rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError(f"tcp endpoint must look like tcp:<host>:<port>, got {text!r}")
        return scheme, {"host": host, "port": int(port)}
    if scheme == "serial":
        path, _, query = rest.partition("?")
        if not path:
            raise ValueError("serial endpoint needs a device path")
        opts = parse_qs(query, strict_parsing=bool(query))
        unknown = set(opts) - {"baud"}
        if unknown:
            raise ValueError(f"unknown serial options: {sorted(unknown)}")
        try:
            baud = int(opts.get("baud", [DEFAULT_BAUD])[-1])
        except ValueError:
            raise ValueError("baud must be an integer") from None
        return scheme, {"path": path, "baud": baud}
    raise ValueError(f"unknown endpoint scheme {scheme!r}")


def open_transport(endpoint):
    """Open a client transport for ``endpoint``.

    ``loopback:`` yields a transport with nobody on the other end, which is
    only useful for exercising timeouts.
    """
    scheme, params = parse_endpoint(endpoint)
    if scheme == "tcp":
        return TcpTransport(params["host"], params["port"])
    if scheme == "serial":
        return SerialTransport(params["path"], params["baud"])
    return MuteTransport()
