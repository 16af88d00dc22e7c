"""Command-line entry point.

Subcommands: calibrate, run-link, exp-variance, exp-onoff, exp-longrun,
exp-eye, dump-config.  Exit code 0 on success, 1 on configuration errors,
2 on protocol failures.
"""

from __future__ import annotations

import argparse
import socket
import sys

from . import experiments as ex
from . import postprocess as pp
from .config import ConfigError, SystemConfig, dump_config, load_config
from .protocol import Role, SessionFailed, StreamTransport, run_session

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROTOCOL = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvqkdsim",
        description="Desk-scale CV-QKD + WDM coexistence simulator")
    parser.add_argument("--config", metavar="PATH",
                        help="config file (key = value format); "
                             "defaults apply when omitted")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--output", metavar="PATH",
                       help="write CSV/text here instead of stdout")
        return p

    p = add("calibrate", "run a blocked shot-noise calibration frame")
    p.add_argument("--pulses", type=int, default=1_000_000)

    p = add("run-link", "run one key-distillation block over TCP")
    p.add_argument("--role", choices=["alice", "bob"], required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--listen", metavar="HOST:PORT")
    group.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--block-id", type=int, default=0)
    p.add_argument("--timeout", type=float, default=30.0,
                   help="receive timeout in seconds")
    p.add_argument("--key-out", metavar="PATH",
                   help="write the final key as a binary key file")
    p.add_argument("--transcript", metavar="PATH",
                   help="record every wire frame to this file")

    p = add("exp-variance", "variance sweep, one interfering channel at a time")
    p.add_argument("--time-scale", type=float, default=ex.DEFAULT_TIME_SCALE)

    p = add("exp-onoff", "toggle the classical channels on and off")
    p.add_argument("--interval", type=float, default=600.0,
                   help="toggle interval in represented seconds")
    p.add_argument("--total", type=float, default=7800.0,
                   help="total represented duration in seconds")
    p.add_argument("--time-scale", type=float, default=ex.DEFAULT_TIME_SCALE)

    p = add("exp-longrun", "sustained key distillation run")
    p.add_argument("--duration", type=float, default=86400.0,
                   help="represented duration in seconds")
    p.add_argument("--time-scale", type=float, default=ex.DEFAULT_TIME_SCALE)

    add("exp-eye", "eye-diagram metrics for the classical channels")
    add("dump-config", "print the fully resolved configuration")
    return parser


def _emit(text: str, output_path) -> None:
    if output_path:
        with open(output_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_endpoint(spec: str) -> tuple[str, int]:
    host, _, port = spec.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"expected HOST:PORT, got {spec!r}")
    return host, int(port)


def _run_link(cfg, args) -> int:
    role = Role.ALICE if args.role == "alice" else Role.BOB
    if args.listen:
        host, port = _parse_endpoint(args.listen)
        with socket.create_server((host, port)) as server:
            conn, _ = server.accept()
    else:
        host, port = _parse_endpoint(args.connect)
        conn = socket.create_connection((host, port))
    transport = StreamTransport(conn, args.timeout, args.transcript)
    try:
        result = run_session(role, transport, cfg, block_id=args.block_id)
    except SessionFailed as exc:
        print(f"session failed: {exc.reason.name}", file=sys.stderr)
        return EXIT_PROTOCOL
    finally:
        transport.close()
    if args.key_out:
        pp.write_key_file(args.key_out, result.key_bits)
    rep = result.report
    _emit(
        f"block {args.block_id}: qber={rep.qber:.4f} "
        f"key_bits={rep.final_key_bits} leak_bits={rep.leak_bits} "
        f"skr_bits_per_s={rep.skr_bits_per_s:.1f}\n",
        args.output)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else SystemConfig()
        if args.command == "calibrate":
            estimate = ex.run_calibration(cfg, args.pulses)
            _emit(f"shot_noise_estimate_snu = {estimate!r}\n", args.output)
        elif args.command == "run-link":
            return _run_link(cfg, args)
        elif args.command == "exp-variance":
            _emit(ex.exp_variance_sweep(cfg, args.time_scale), args.output)
        elif args.command == "exp-onoff":
            _emit(ex.exp_onoff(cfg, args.interval, args.total,
                               args.time_scale), args.output)
        elif args.command == "exp-longrun":
            _emit(ex.exp_longrun(cfg, args.duration, args.time_scale),
                  args.output)
        elif args.command == "exp-eye":
            _emit(ex.exp_eye(cfg), args.output)
        elif args.command == "dump-config":
            _emit(dump_config(cfg), args.output)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
