"""Command-line front end.

Exit codes: 0 success, 2 protocol or device error, 3 timeout, 4 config or
usage error.  With ``--json`` standard output carries only JSON lines;
diagnostics always go to standard error.
"""

import argparse
import json
import logging
import signal
import sys
import threading
import time

from tise.catalog import VALUE_TYPES, ModuleType, ValueKind
from tise.device import Device, load_config
from tise.errors import (
    BadChannel,
    CatalogError,
    RecordParseError,
    RuleError,
    Timeout,
    TiseError,
    TransportError,
    WrongDirection,
)
from tise.hosting import DeviceRunner, serve_tcp
from tise.records import Recorder, read_records, replay_config, write_record_line
from tise.session import open_session
from tise.transport import SerialTransport, open_transport, parse_endpoint
from tise.triggers import TriggerEngine, parse_rules

EXIT_OK = 0
EXIT_DEVICE = 2
EXIT_TIMEOUT = 3
EXIT_USAGE = 4

log = logging.getLogger("tise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _module(text):
    try:
        return ModuleType.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int(text):
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _value(text):
    kind, sep, raw = text.partition(":")
    if not sep or kind.upper() not in ValueKind.__members__:
        raise argparse.ArgumentTypeError("values look like digital:1, analog:512, scalar:90000 or text:HI")
    vk = ValueKind[kind.upper()]
    try:
        if vk == ValueKind.TEXT:
            return VALUE_TYPES[vk](raw.replace("\\n", "\n"))
        return VALUE_TYPES[vk](int(raw, 0))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _channel_module(text):
    ch, sep, name = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected CHANNEL=MODULE, e.g. 0=lm35")
    return _int(ch), _module(name)


class _Output:
    def __init__(self, as_json):
        self.as_json = as_json

    def emit(self, human, doc):
        if self.as_json:
            print(json.dumps(doc), flush=True)
        else:
            print(human, flush=True)


def _connect(args):
    transport = open_transport(args.endpoint)
    return open_session(transport, reply_timeout_ms=args.timeout_ms, retries=args.retries)


def _value_doc(value):
    return {"kind": value.kind.name.lower(), "value": value.value}


def cmd_ping(args, out):
    with _connect(args) as s:
        for _ in range(args.count):
            rtt = s.ping() * 1000
            out.emit(f"reply from device in {rtt:.2f} ms", {"rtt_ms": round(rtt, 3)})


def cmd_info(args, out):
    with _connect(args) as s:
        info = s.info
        caps = sorted(info.capabilities)
        names = [ModuleType(c).name.lower() for c in caps if c in ModuleType._value2member_map_]
        out.emit(
            f"protocol {info.protocol_version}, firmware 0x{info.firmware_version:04X}\n"
            f"modules: {', '.join(names)}",
            {"protocol_version": info.protocol_version,
             "firmware_version": info.firmware_version, "capabilities": caps},
        )


def cmd_attach(args, out):
    with _connect(args) as s:
        ch = s.attach_module(args.module, args.pins)
        out.emit(f"{args.module.name.lower()} attached as channel {ch}",
                 {"channel": ch, "module": args.module.name})


def cmd_read(args, out):
    with _connect(args) as s:
        if args.module is not None:
            s.bind_channel(args.channel, args.module)
        value = s.read_channel(args.channel)
        out.emit(f"channel {args.channel}: {value}", {"channel": args.channel, **_value_doc(value)})


def cmd_write(args, out):
    with _connect(args) as s:
        if args.module is not None:
            s.bind_channel(args.channel, args.module)
        s.write_channel(args.channel, args.value)
        out.emit(f"channel {args.channel} <- {args.value}",
                 {"channel": args.channel, "ok": True, **_value_doc(args.value)})


def _stream(s, args, on_record):
    """Subscribe to the requested channels and feed records until done."""
    recorder = Recorder()
    subs = {}
    for ch in args.channels:
        if ch in args.modules:
            s.bind_channel(ch, args.modules[ch])
        sub = s.subscribe(ch, args.period)
        subs[sub.id] = sub
        recorder.add_subscription(sub)
    deadline = None if args.duration_ms is None else time.monotonic() + args.duration_ms / 1000
    seen = 0
    try:
        while args.count is None or seen < args.count:
            if deadline is not None and time.monotonic() >= deadline:
                break
            batch = s.poll_events()
            if not batch:
                # heartbeat doubles as a barrier: events sent before the reply are queued after it
                s.ping()
                batch = s.poll_events()
                if not batch:
                    time.sleep(0.002)
                    continue
            for sid, value in batch:
                if args.count is not None and seen >= args.count:
                    break
                on_record(recorder.add(subs[sid], value))
                seen += 1
    except KeyboardInterrupt:
        for sid, value in s.poll_events():
            if sid in subs:
                on_record(recorder.add(subs[sid], value))
    return recorder.records


def cmd_monitor(args, out):
    def show(rec):
        if out.as_json:
            print(write_record_line(rec), flush=True)
        else:
            print(f"t={rec.t_ms}ms ch={rec.channel} {rec.value}", flush=True)

    with _connect(args) as s:
        _stream(s, args, show)


def cmd_record(args, out):
    with open(args.output, "w", encoding="utf-8") as fh, _connect(args) as s:
        def write(rec):
            fh.write(write_record_line(rec) + "\n")

        records = _stream(s, args, write)
    out.emit(f"recorded {len(records)} samples to {args.output}",
             {"records": len(records), "output": args.output})


def cmd_map(args, out):
    with open(args.rules, encoding="utf-8") as fh:
        rules = parse_rules(fh.read())
    engine = TriggerEngine(rules)
    args.channels = sorted({r.channel for r in rules})

    def fire(rec):
        for ev in engine.evaluate_sample(rec.t_ms, rec.channel, rec.value):
            print(ev.to_json(), flush=True)

    with _connect(args) as s:
        _stream(s, args, fire)


def _host(device, args):
    scheme, params = parse_endpoint(args.endpoint)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    realtime = not args.virtual_time
    try:
        if scheme == "tcp":
            serve_tcp(device, params["host"], params["port"], realtime=realtime,
                      granularity_ms=args.tick_ms, stop=stop,
                      on_ready=lambda addr: log.warning("simulating on tcp:%s:%s", *addr))
        elif scheme == "serial":
            runner = DeviceRunner(device, SerialTransport(params["path"], params["baud"]))
            if realtime:
                runner.start_clock(args.tick_ms)
            runner.start()
            log.warning("simulating on %s", args.endpoint)
            stop.wait()
            runner.stop()
        else:
            raise UsageError("simulate needs a tcp: or serial: endpoint")
    except KeyboardInterrupt:
        stop.set()
    except OSError as exc:
        raise TransportError(str(exc)) from exc


def _sim_config(args, cfg):
    if args.virtual_time:
        cfg.step_per_frame_ms = args.tick_ms
    return cfg


def cmd_simulate(args, out):
    try:
        cfg = load_config(args.config) if args.config else load_config({})
        device = Device(_sim_config(args, cfg))
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad simulator config: {exc}") from None
    _host(device, args)


def cmd_replay(args, out):
    with open(args.input, encoding="utf-8") as fh:
        records = read_records(fh)
    if not records:
        raise UsageError("recording is empty")
    cfg, channel_map = replay_config(records)
    for recorded, live in channel_map.items():
        log.warning("recorded channel %d replays as channel %d", recorded, live)
    _host(Device(_sim_config(args, cfg)), args)


def _common_flags(defaults):
    # given before the command they land on the main parser; repeated after it
    # they override, because subcommand copies default to "not given"
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--endpoint", default=d("loopback:"),
                        help="serial:<path>?baud=115200 | tcp:<host>:<port> | loopback:")
    common.add_argument("--timeout-ms", type=_int, default=d(250), help="reply timeout per attempt")
    common.add_argument("--retries", type=_int, default=d(3), help="attempts per request")
    common.add_argument("--json", action="store_true", default=d(False), help="JSON lines on stdout")
    return common


def build_parser():
    common = _common_flags(defaults=False)
    parser = _Parser(prog="tise", description="Talk to custom game controllers.",
                     parents=[_common_flags(defaults=True)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ping", parents=[common], help="round-trip a ping")
    p.add_argument("--count", type=_int, default=1)
    p.set_defaults(func=cmd_ping)

    p = sub.add_parser("info", parents=[common], help="show handshake information")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("attach", parents=[common], help="bind a module to pins")
    p.add_argument("--module", type=_module, required=True)
    p.add_argument("--pins", type=_int, nargs="*", default=[])
    p.set_defaults(func=cmd_attach)

    p = sub.add_parser("read", parents=[common], help="sample a sensor channel")
    p.add_argument("--channel", type=_int, required=True)
    p.add_argument("--module", type=_module, help="module on the channel, for unit conversion")
    p.set_defaults(func=cmd_read)

    p = sub.add_parser("write", parents=[common], help="drive an actuator channel")
    p.add_argument("--channel", type=_int, required=True)
    p.add_argument("--value", type=_value, required=True, help="e.g. scalar:90000 or text:HELLO")
    p.add_argument("--module", type=_module, help="module on the channel, for local validation")
    p.set_defaults(func=cmd_write)

    def streaming(p, with_channels=True):
        if with_channels:
            p.add_argument("--channel", dest="channels", type=_int, action="append", required=True)
        p.add_argument("--period", type=_int, default=50, help="sampling period in ms")
        p.add_argument("--module", dest="module_list", type=_channel_module, action="append",
                       default=[], metavar="CH=MODULE")
        p.add_argument("--count", type=_int, help="stop after this many samples")
        p.add_argument("--duration-ms", type=_int, help="stop after this much wall time")

    p = sub.add_parser("monitor", parents=[common], help="subscribe and print samples")
    streaming(p)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("record", parents=[common], help="subscribe and save samples")
    streaming(p)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("map", parents=[common], help="turn samples into game actions")
    streaming(p, with_channels=False)
    p.add_argument("--rules", required=True)
    p.set_defaults(func=cmd_map)

    def hosting(p):
        p.add_argument("--virtual-time", action="store_true",
                       help="advance the clock by --tick-ms per inbound frame instead of wall time")
        p.add_argument("--tick-ms", type=_int, default=10)

    p = sub.add_parser("simulate", parents=[common], help="host a virtual device")
    p.add_argument("--config", help="simulator config (JSON)")
    hosting(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", parents=[common], help="host a device playing a recording")
    p.add_argument("--input", "-i", required=True)
    hosting(p)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.modules = dict(getattr(args, "module_list", []) or [])
    out = _Output(args.json)
    try:
        args.func(args, out)
    except Timeout as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (UsageError, ValueError, CatalogError, WrongDirection, BadChannel,
            RuleError, RecordParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEVICE
    return EXIT_OK


def cli_dispatch(argv):
    """Run one command line and return its exit code, even for usage errors."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
