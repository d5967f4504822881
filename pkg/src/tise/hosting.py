"""Drivers that connect a :class:`~tise.device.Device` to transports.

:class:`DeviceRunner` pumps bytes between one transport and a device on a
background thread and serializes every device call behind a lock.  The
virtual clock is advanced explicitly with :meth:`DeviceRunner.tick`, or from
wall time by :meth:`DeviceRunner.start_clock`.  :func:`serve_tcp` hosts a
device on a TCP port, one client at a time.  :class:`SimulatorLink` wires a
device and a host session together in memory.
"""

import logging
import socket
import threading
import time

from tise.device import Device
from tise.errors import TransportError
from tise.session import open_session
from tise.transport import LoopbackTransport, TcpTransport

log = logging.getLogger(__name__)


class DeviceRunner:
    def __init__(self, device, transport=None):
        self.device = device
        self.lock = threading.RLock()
        self._transport = transport
        self._stop = threading.Event()
        self._threads = []

    def _send(self, data):
        transport = self._transport
        if data and transport is not None:
            try:
                transport.write(data)
            except TransportError:
                log.debug("dropping %d outbound bytes, transport gone", len(data))

    def feed(self, data):
        with self.lock:
            out = self.device.run_step(data)
            self._send(out)

    def tick(self, advance_ms):
        with self.lock:
            self._send(self.device.tick(advance_ms))

    def serve(self, transport):
        """Pump ``transport`` until it closes or :meth:`stop` is called."""
        self._transport = transport
        try:
            while not self._stop.is_set():
                try:
                    data = transport.read(0.05)
                except TransportError:
                    return
                if data:
                    self.feed(data)
                else:
                    with self.lock:
                        self._send(self.device.idle())
        finally:
            with self.lock:
                self._transport = None

    def start(self):
        """Serve the transport given at construction on a background thread."""
        t = threading.Thread(target=self.serve, args=(self._transport,), daemon=True,
                             name="tise-device")
        t.start()
        self._threads.append(t)
        return self

    def start_clock(self, granularity_ms=10):
        """Advance the virtual clock in step with wall time."""

        def run():
            origin = time.monotonic()
            while not self._stop.wait(granularity_ms / 1000):
                elapsed = int((time.monotonic() - origin) * 1000)
                with self.lock:
                    behind = elapsed - self.device.clock_ms
                    if behind > 0:
                        self._send(self.device.tick(behind))

        t = threading.Thread(target=run, daemon=True, name="tise-clock")
        t.start()
        self._threads.append(t)
        return self

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(1.0)


def serve_tcp(device, host, port, realtime=True, granularity_ms=10, stop=None, on_ready=None):
    """Host ``device`` on ``host:port`` until ``stop`` (a threading.Event) is set.

    Clients are served one after another; device state persists between
    connections.  With ``realtime`` the virtual clock follows wall time.
    """
    stop = stop or threading.Event()
    runner = DeviceRunner(device)
    if realtime:
        runner.start_clock(granularity_ms)
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        listener.settimeout(0.1)
        if on_ready is not None:
            on_ready(listener.getsockname())
        try:
            while not stop.is_set():
                try:
                    conn, peer = listener.accept()
                except socket.timeout:
                    continue
                log.info("client %s:%s connected", *peer[:2])
                transport = TcpTransport(None, None, sock=conn)
                client = threading.Thread(target=runner.serve, args=(transport,), daemon=True)
                client.start()
                while client.is_alive() and not stop.is_set():
                    client.join(0.1)
                transport.close()
                log.info("client disconnected")
        finally:
            runner.stop()


class SimulatorLink:
    """A device and a connected host session sharing an in-memory pipe."""

    def __init__(self, device=None, config=None, **session_options):
        self.device = device if device is not None else Device(config)
        host_end, device_end = LoopbackTransport.pair()
        self.runner = DeviceRunner(self.device, device_end).start()
        try:
            self.session = open_session(host_end, **session_options)
        except BaseException:
            self.runner.stop()
            raise

    def advance(self, ms):
        """Tick the virtual clock and wait until resulting events reached the host."""
        self.runner.tick(ms)
        # replies are ordered after the events already written
        self.session.ping()

    def close(self):
        self.session.close()
        self.runner.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
