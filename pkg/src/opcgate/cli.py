"""Command-line entry point.

Exit codes: 0 success, 1 operational error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
import time
from pathlib import Path

from . import bench, config
from .certificates import hash_thumbprint
from .dataplane.pcap import CaptureUnreadable, replay
from .dataplane.table import ThumbprintTable
from .gateway import Gateway, PortInUse
from .harness import certs
from .harness.endpoints import BindFailure, EndpointConfig, OpcUaServer, Role, client_flow
from .harness.tcp import run_flow_tcp, serve_tcp
from .ledger import store
from .ledger.actions import CertificateAction, CertificateUnparseable, load_certificate_bytes
from .ledger.keys import AdminKeyring, SigningFailure, SigningKey

ADMIN_KEY_ENV = "OPCGATE_ADMIN_KEY"
EXIT_OK, EXIT_OPERATIONAL, EXIT_CONFIG = 0, 1, 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_OPERATIONAL):
        super().__init__(message)
        self.code = code


def _load_config(path) -> config.Config:
    if path is None:
        return config.Config()
    return config.load(path)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=str))


# -- gateway -----------------------------------------------------------------------------


def cmd_gateway_run(args) -> int:
    cfg = _load_config(args.config)
    gw = Gateway(cfg)

    async def main():
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, gw.stop)
            except (NotImplementedError, RuntimeError):
                pass
        host, port = await gw.start()
        _print({"listening": f"{host}:{port}", "upstream": cfg.gateway.upstream,
                "trusted": len(gw.table), "validation_enabled": cfg.gateway.validation_enabled,
                "metrics": None if gw.metrics_address is None else "%s:%s" % gw.metrics_address})
        sys.stdout.flush()
        if args.duration is not None:
            loop.call_later(args.duration, gw.stop)
        await gw.serve()

    try:
        asyncio.run(main())
    except PortInUse as exc:
        raise CliError(f"port in use: {exc}") from None
    return EXIT_OK


# -- admin -------------------------------------------------------------------------------


def _admin_key(args) -> SigningKey:
    path = args.key or os.environ.get(ADMIN_KEY_ENV)
    if not path:
        raise CliError(f"no admin key: pass --key or set {ADMIN_KEY_ENV}", EXIT_CONFIG)
    try:
        return SigningKey.load(path)
    except (OSError, SigningFailure) as exc:
        raise CliError(f"cannot load admin key: {exc}", EXIT_CONFIG) from None


def cmd_admin_keygen(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to replace it")
    key = SigningKey()
    key.save(out)
    os.chmod(out, 0o600)
    _print({"key_file": str(out), "public_key": key.public_key.hex()})
    return EXIT_OK


def cmd_admin_action(args) -> int:
    cfg = _load_config(args.config)
    key = _admin_key(args)
    try:
        der = load_certificate_bytes(Path(args.certificate).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read certificate: {exc}") from None
    except CertificateUnparseable as exc:
        raise CliError(f"certificate unparseable: {exc}") from None
    layer = args.layer or cfg.ledger.layer
    path = Path(args.ledger) if args.ledger else cfg.resolve(cfg.ledger.path)
    keyring = AdminKeyring(cfg.admin_keys())
    if layer == "L2" and not keyring.authorized:
        raise CliError("L2 registry needs ledger.admin_public_keys in the config", EXIT_CONFIG)
    ledger = store.new_ledger(layer, keyring, cfg.ledger.link, cfg.ledger.seed)
    store.load_into(ledger, path)
    store.flush(ledger)
    if args.action == "issue":
        action = CertificateAction.issue(der, time.time() + args.expire_days * 86400.0)
    else:
        action = CertificateAction.revoke(der)
    if key.public_key not in keyring:
        print(f"warning: {key.public_key.hex()[:16]}... is not an administrator key; "
              "controllers will ignore this action", file=sys.stderr)
    seen = len(ledger.event_log)
    tx_id = ledger.submit(action, key)
    store.flush(ledger)
    if layer == "L2":
        rejected = [reason for call, reason in ledger.rejected if call.id == tx_id]
        if rejected:
            raise CliError(f"UnauthorizedKey: registry rejected the call ({rejected[0]})")
    mine = [e for e in ledger.event_log[seen:] if e.event_id == tx_id]
    confirmed = bool(mine) and all(e.confirmed for e in mine)
    store.save(ledger, path)
    _print({"layer": layer, "id": tx_id, "action": args.action, "confirmed": confirmed,
            "thumbprint": hash_thumbprint(der).hex(), "ledger": str(path)})
    return EXIT_OK if confirmed else EXIT_OPERATIONAL


# -- bench --------------------------------------------------------------------------------


def cmd_bench_q1(args) -> int:
    try:
        report = bench.bench_q1(args.n, seed=args.seed, link=args.link, warmup=args.warmup,
                                block=args.block)
    except bench.HarnessFailure as exc:
        raise CliError(f"HarnessFailure: {exc}") from None
    json_path, csv_path = bench.save(report, args.out)
    _print({"report": str(json_path), "csv": str(csv_path),
            "tagged_records": {a: report.aggregates[a]["tagged_records"] for a in report.aggregates},
            "comparison": report.comparison})
    return EXIT_OK


def _csv_list(text: str, cast=str) -> list:
    return [cast(x) for x in text.split(",") if x]


def cmd_bench_q2(args) -> int:
    try:
        report = bench.bench_q2(args.trials, _csv_list(args.presets), _csv_list(args.sizes, int),
                                _csv_list(args.layers), seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except bench.HarnessFailure as exc:
        raise CliError(f"HarnessFailure: {exc}") from None
    json_path, csv_path = bench.save(report, args.out)
    _print({"report": str(json_path), "csv": str(csv_path),
            "medians": {k: v["median"] for k, v in report.aggregates.items()},
            "comparison": report.comparison})
    return EXIT_OK


# -- replay --------------------------------------------------------------------------------


def cmd_replay(args) -> int:
    cfg = _load_config(args.config)
    pipeline = cfg.gateway.pipeline()
    if args.no_validation:
        pipeline.validation_enabled = False
    table = ThumbprintTable(pipeline.table_capacity)
    if args.config is not None:
        keyring = AdminKeyring(cfg.admin_keys())
        ledger = store.new_ledger(cfg.ledger.layer, keyring, cfg.ledger.link, cfg.ledger.seed)
        store.load_into(ledger, cfg.resolve(cfg.ledger.path))
        store.flush(ledger)
        for rec in ledger.get_all_certificates(keyring, time.time()):
            table.install(rec.thumbprint)
    for cert in args.trust or ():
        try:
            table.install(hash_thumbprint(load_certificate_bytes(Path(cert).read_bytes())))
        except (OSError, CertificateUnparseable) as exc:
            raise CliError(f"--trust {cert}: {exc}") from None
    for tp in args.thumbprint or ():
        try:
            table.install(bytes.fromhex(tp))
        except ValueError as exc:
            raise CliError(f"--thumbprint {tp}: {exc}", EXIT_CONFIG) from None
    try:
        report = replay(args.capture, table, pipeline)
    except CaptureUnreadable as exc:
        raise CliError(f"CaptureUnreadable: {exc}") from None
    for v in report.verdicts:
        _print(v)
    summary = report.as_dict()
    summary.pop("verdicts")
    _print({"summary": summary})
    return EXIT_OK


# -- endpoints ---------------------------------------------------------------------------


def cmd_endpoint_keygen(args) -> int:
    ident = certs.make_identity(args.name)
    cert_path, key_path = certs.save_identity(ident, args.out)
    _print({"certificate": str(cert_path), "key": str(key_path), "thumbprint": ident.thumbprint.hex()})
    return EXIT_OK


def _identity(args) -> certs.Identity:
    try:
        return certs.load_identity(args.cert, args.key)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"cannot load endpoint identity: {exc}", EXIT_CONFIG) from None


def cmd_endpoint_serve(args) -> int:
    host, port = config.parse_address(args.listen)
    server = OpcUaServer(EndpointConfig(Role.SERVER, _identity(args), address=(host, port)))

    async def main():
        srv = await serve_tcp(server, host, port)
        _print({"serving": "%s:%s" % srv.sockets[0].getsockname()[:2]})
        sys.stdout.flush()
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        if args.duration is not None:
            loop.call_later(args.duration, stop.set)
        await stop.wait()
        srv.close()
        await srv.wait_closed()
        _print({"sessions": server.established, "rejected": len(server.rejected)})

    try:
        asyncio.run(main())
    except BindFailure as exc:
        raise CliError(str(exc)) from None
    return EXIT_OK


def cmd_endpoint_connect(args) -> int:
    target = config.parse_address(args.target)
    via = config.parse_address(args.via) if args.via else None
    cfg = EndpointConfig(Role.CLIENT, _identity(args))
    results = []
    for _ in range(args.count):
        res = asyncio.run(run_flow_tcp(client_flow(cfg, target), via, timeout=args.timeout))
        results.append(res)
        _print(res.as_dict())
    return EXIT_OK if all(r.established for r in results) else EXIT_OPERATIONAL


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opcgate", description="OPC UA certificate-enforcing gateway")
    p.add_argument("-v", "--verbose", action="store_true", help="log controller and proxy activity")
    sub = p.add_subparsers(dest="command", required=True)

    gw = sub.add_parser("gateway", help="run the gateway").add_subparsers(dest="verb", required=True)
    run = gw.add_parser("run", help="proxy + controller, following the ledger file")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--duration", type=float, help="stop after this many seconds")
    run.set_defaults(func=cmd_gateway_run)

    adm = sub.add_parser("admin", help="administrator actions").add_subparsers(dest="verb", required=True)
    kg = adm.add_parser("keygen", help="create an Ed25519 admin key file")
    kg.add_argument("--out", required=True)
    kg.add_argument("--force", action="store_true")
    kg.set_defaults(func=cmd_admin_keygen)
    for verb in ("issue", "revoke"):
        a = adm.add_parser(verb, help=f"{verb} a certificate on the ledger")
        a.add_argument("certificate", help="DER or PEM file")
        a.add_argument("--config")
        a.add_argument("--layer", choices=("L1", "L2"))
        a.add_argument("--ledger", help="ledger file (overrides the config)")
        a.add_argument("--key", help=f"admin key file (default: ${ADMIN_KEY_ENV})")
        if verb == "issue":
            a.add_argument("--expire-days", type=float, default=365.0)
        a.set_defaults(func=cmd_admin_action, action=verb)

    b = sub.add_parser("bench", help="measurement campaigns").add_subparsers(dest="verb", required=True)
    q1 = b.add_parser("q1", help="gateway processing, dequeue and handshake times")
    q1.add_argument("--n", type=int, default=1000)
    q1.add_argument("--seed", type=int, default=0)
    q1.add_argument("--link", default="zero")
    q1.add_argument("--warmup", type=int, default=50)
    q1.add_argument("--block", type=int, default=10, help="handshakes per arm before switching arms")
    q1.add_argument("--out", default="bench-results")
    q1.set_defaults(func=cmd_bench_q1)
    q2 = b.add_parser("q2", help="ledger propagation delay per layer, distance and size")
    q2.add_argument("--trials", type=int, default=300)
    q2.add_argument("--presets", default="short,medium,long")
    q2.add_argument("--sizes", default="1024,4096,16384")
    q2.add_argument("--layers", default="L1,L2")
    q2.add_argument("--seed", type=int, default=0)
    q2.add_argument("--out", default="bench-results")
    q2.set_defaults(func=cmd_bench_q2)

    rp = sub.add_parser("replay", help="run a pcap capture through the switch")
    rp.add_argument("capture")
    rp.add_argument("--config", help="trust the valid set of the configured ledger")
    rp.add_argument("--trust", action="append", help="certificate file to trust (repeatable)")
    rp.add_argument("--thumbprint", action="append", help="hex thumbprint to trust (repeatable)")
    rp.add_argument("--no-validation", action="store_true")
    rp.set_defaults(func=cmd_replay)

    ep = sub.add_parser("endpoint", help="test OPC UA endpoints").add_subparsers(dest="verb", required=True)
    ek = ep.add_parser("keygen", help="create a self-signed application certificate")
    ek.add_argument("name")
    ek.add_argument("--out", default=".")
    ek.set_defaults(func=cmd_endpoint_keygen)
    es = ep.add_parser("serve", help="run a test server")
    es.add_argument("--cert", required=True)
    es.add_argument("--key", required=True)
    es.add_argument("--listen", default="127.0.0.1:4840")
    es.add_argument("--duration", type=float)
    es.set_defaults(func=cmd_endpoint_serve)
    ec = ep.add_parser("connect", help="run client handshakes")
    ec.add_argument("--cert", required=True)
    ec.add_argument("--key", required=True)
    ec.add_argument("--target", default="127.0.0.1:4840", help="server address used in the endpoint URL")
    ec.add_argument("--via", help="connect through this address (the gateway)")
    ec.add_argument("--count", type=int, default=1)
    ec.add_argument("--timeout", type=float, default=5.0)
    ec.set_defaults(func=cmd_endpoint_connect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except config.ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPERATIONAL


if __name__ == "__main__":
    sys.exit(main())
