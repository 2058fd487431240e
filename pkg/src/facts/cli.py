"""Command-line entry points: ``facts-sim``, ``facts-server`` and ``facts-client``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import sim
from .tipping import tipping_point


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- facts-sim -----------------------------------------------------------------


def _sim_accuracy(args) -> int:
    config = sim.ExperimentConfig(
        n=args.n,
        t=args.t,
        lambda_stat=args.lambda_stat,
        background_levels=args.background,
        trials=args.trials,
        seed=args.seed,
        engine=args.engine,
    )

    def progress(row):
        print(f"t={row.t} background={row.background} mean={row.mean:.3f} "
              f"rel_std={row.rel_std_pct:.3f}%", file=sys.stderr)

    result = sim.run_accuracy(config, progress=progress if args.verbose else None)
    if args.out:
        result.write_csv(args.out)
    else:
        sys.stdout.write(result.to_csv())
    return 0


def _sim_tail(args) -> int:
    r = sim.run_tail_check(args.t, args.lambda_stat, args.trials, n=args.n,
                           background=args.background, seed=args.seed)
    print(f"t={r.t} lambda={r.lambda_stat} trials={r.trials} background={r.background}")
    print(f"false positives at {r.fp_complaints} complaints: {r.fp_failures}/{r.trials} = {r.fp_rate:.4f}")
    print(f"false negatives at {r.fn_complaints} complaints: {r.fn_failures}/{r.trials} = {r.fn_rate:.4f}")
    print(f"bound 2^-lambda = {r.bound:.6f}")
    return 0


def _sim_throughput(args) -> int:
    bandwidth = args.bandwidth_mbps * 1e6 if args.bandwidth_mbps else None
    r = sim.run_throughput(clients=args.clients, latency_ms=args.latency_ms, duration=args.duration,
                           bandwidth_bps=bandwidth, n=args.n, t=args.t)
    print(f"clients={r.clients} latency={r.latency_ms}ms bandwidth={r.bandwidth_bps or 'unlimited'}")
    print(f"accepted complaints: {r.accepted} in {r.elapsed_s:.2f}s")
    print(f"throughput: {r.throughput:.2f}/s (model {r.model_throughput:.2f}/s)")
    print(f"snapshot: {r.snapshot_bytes} bytes, begin->snapshot {1000 * r.mean_snapshot_s:.2f}ms (incl. queueing)")
    print(f"index round trip: {1000 * r.mean_index_rtt_s:.2f}ms, lock hold {1000 * r.mean_lock_hold_s:.2f}ms")
    print(f"origination: {1000 * r.originate_s:.2f}ms, minus network {1000 * r.originate_overhead_s:.2f}ms")
    print(f"overlapping sessions: {r.overlaps}")
    return 0


def _sim_oracle(args) -> int:
    mean, std = sim.mc_tipping_oracle(args.s, args.u, args.v, args.m, args.t, args.runs,
                                      seed=args.seed, return_std=True)
    print(f"monte carlo: {mean:.5f} (sd {std:.4f}, runs {args.runs}) -> {round(mean)}")
    print(f"tipping point: {tipping_point(args.s, args.u, args.v, args.m, args.t)}")
    return 0


def _sim_plot(args) -> int:
    for path in sim.emit_plots(args.inp, args.out):
        print(path)
    return 0


def sim_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facts-sim", description="FACTS experiment harness")
    sub = p.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("accuracy", help="complaints needed to trigger an audit")
    a.add_argument("--n", type=int, default=100_000)
    a.add_argument("--t", type=_int_list, default=(100,), help="threshold(s), comma separated")
    a.add_argument("--lambda", dest="lambda_stat", type=int, default=10)
    a.add_argument("--background", type=_int_list, default=None, help="background levels, comma separated")
    a.add_argument("--trials", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--engine", choices=["lazy", "exact"], default="lazy")
    a.add_argument("--out", help="CSV path (default stdout)")
    a.add_argument("-v", "--verbose", action="store_true")
    a.set_defaults(func=_sim_accuracy)

    t = sub.add_parser("tail", help="empirical false positive / negative rates")
    t.add_argument("--t", type=int, default=100)
    t.add_argument("--lambda", dest="lambda_stat", type=int, default=10)
    t.add_argument("--trials", type=int, default=1000)
    t.add_argument("--n", type=int, default=100_000)
    t.add_argument("--background", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=_sim_tail)

    th = sub.add_parser("throughput", help="concurrent complaint throughput")
    th.add_argument("--latency-ms", type=float, default=0.0)
    th.add_argument("--clients", type=int, default=8)
    th.add_argument("--duration", type=float, default=5.0)
    th.add_argument("--bandwidth-mbps", type=float, default=None)
    th.add_argument("--n", type=int, default=100_000)
    th.add_argument("--t", type=int, default=1000)
    th.set_defaults(func=_sim_throughput)

    o = sub.add_parser("oracle", help="Monte Carlo check of the tipping point")
    for name in ("s", "u", "v", "m", "t"):
        o.add_argument(f"--{name}", type=int, required=True)
    o.add_argument("--runs", type=int, default=100_000)
    o.add_argument("--seed", type=int, default=None)
    o.set_defaults(func=_sim_oracle)

    pl = sub.add_parser("plot", help="gnuplot data and script from an accuracy CSV")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=_sim_plot)
    return p


def sim_main(argv: Optional[Sequence[str]] = None) -> int:
    args = sim_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"facts-sim: error: {exc}", file=sys.stderr)
        return 2


# -- facts-server --------------------------------------------------------------


def server_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facts-server", description="run a FACTS complaint server")
    p.add_argument("--config", help="JSON file with ServerConfig fields")
    p.add_argument("--users", type=int, default=10, help="number of users to register")
    p.add_argument("--n", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--quota", type=int)
    p.add_argument("--lambda", dest="lambda_stat", type=int)
    p.add_argument("--deadline", dest="session_deadline", type=float)
    p.add_argument("--epoch-length", type=float)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--credentials", default="facts-credentials.json",
                   help="where to write the address, public key and user tokens")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def server_main(argv: Optional[Sequence[str]] = None) -> int:
    from .server import FactsServer, FactsTCPServer, ServerConfig

    args = server_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = {
        "n": args.n, "t": args.t, "quota": args.quota, "lambda_stat": args.lambda_stat,
        "session_deadline": args.session_deadline, "epoch_length": args.epoch_length,
        "host": args.host, "port": args.port,
    }
    if args.config:
        config = ServerConfig.from_file(args.config, **overrides)
    else:
        config = ServerConfig(**{k: v for k, v in overrides.items() if v is not None})
    core = FactsServer(config)
    tokens = core.setup(args.users)
    tcp = FactsTCPServer(core)
    host, port = tcp.address
    creds = {
        "address": [host, port],
        "pubkey": core.public_key_bytes.hex(),
        "tokens": {uid: tok.hex() for uid, tok in tokens.items()},
    }
    Path(args.credentials).write_text(json.dumps(creds, indent=2))
    p = core.params
    logging.info("listening on %s:%d (s=%d u=%d v=%d t=%d quota=%d); credentials in %s",
                 host, port, p.s, p.u, p.v, p.t, config.quota, args.credentials)

    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    tcp.start()
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    tcp.stop()
    return 0


# -- facts-client --------------------------------------------------------------


def _read_tag(args) -> bytes:
    if args.tag:
        return bytes.fromhex(args.tag)
    if args.tag_file:
        raw = Path(args.tag_file).read_bytes()
        try:
            return bytes.fromhex(raw.decode("ascii").strip())
        except (UnicodeDecodeError, ValueError):
            return raw
    raise SystemExit("facts-client: a tag is required (--tag or --tag-file)")


def _read_message(args) -> bytes:
    if args.message is not None:
        return args.message.encode("utf-8")
    if args.message_file:
        return Path(args.message_file).read_bytes()
    raise SystemExit("facts-client: a message is required (--message or --message-file)")


def _write_tag(args, tag_bytes: bytes) -> None:
    if args.tag_out:
        Path(args.tag_out).write_text(tag_bytes.hex() + "\n")
    else:
        print(tag_bytes.hex())


def _client(args):
    from .client import FactsClient

    creds = json.loads(Path(args.credentials).read_text())
    user = args.user or next(iter(creds["tokens"]))
    if user not in creds["tokens"]:
        raise SystemExit(f"facts-client: no token for user {user!r}")
    return FactsClient(user, bytes.fromhex(creds["tokens"][user]), tuple(creds["address"]),
                       server_pubkey=bytes.fromhex(creds["pubkey"]))


def client_main(argv: Optional[Sequence[str]] = None) -> int:
    from .tags import Tag, TagError
    from .wire import ComplaintRejected

    p = argparse.ArgumentParser(prog="facts-client", description="talk to a FACTS server")
    p.add_argument("--credentials", default="facts-credentials.json")
    p.add_argument("--user")
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, needs_tag in [("originate", False), ("forward", True), ("recv-verify", True),
                            ("complain", True), ("audit-check", True)]:
        sp = sub.add_parser(name)
        sp.add_argument("--message")
        sp.add_argument("--message-file")
        if needs_tag:
            sp.add_argument("--tag", help="tag as hex")
            sp.add_argument("--tag-file", help="file holding the tag (hex or raw)")
        if name in ("originate", "forward"):
            sp.add_argument("--tag-out", help="write the outgoing tag here as hex")
        if name == "complain":
            sp.add_argument("--audit", action="store_true", help="audit if the threshold is reached")
    args = p.parse_args(argv)

    x = _read_message(args)
    with _client(args) as c:
        if args.cmd == "originate":
            tag, _ = c.send_msg(None, x)
            _write_tag(args, tag.to_bytes())
            return 0
        try:
            tag = Tag.from_bytes(_read_tag(args))
        except TagError as exc:
            print(f"invalid tag: {exc}", file=sys.stderr)
            return 1
        if args.cmd == "forward":
            out, _ = c.send_msg(None, x, tag=tag)
            _write_tag(args, out.to_bytes())
            return 0
        ok = c.rcv_msg("cli", tag, x)
        if args.cmd == "recv-verify":
            print("valid" if ok else "invalid")
            return 0 if ok else 1
        if not ok:
            print("invalid tag; nothing to do", file=sys.stderr)
            return 1
        entry = c.inbox[-1]
        if args.cmd == "complain":
            try:
                res = c.complain(entry, audit_after=args.audit)
            except ComplaintRejected as exc:
                print(f"rejected: {exc.code.name}")
                return 1
            print(f"{res.status} ({res.code.name})")
            if res.audit is not None:
                a = res.audit
                print(f"count {a.count} / tau {a.tau}" + (f"; originator {a.originator}" if a.fired else ""))
            return 0
        a = c.check_and_audit(entry)
        print(f"count {a.count} / tau {a.tau}")
        if a.fired:
            print(f"audited: originator {a.originator}" if a.audit_ok else "audit refused")
        return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(sim_main())
