"""Full-size acceptance criteria. Each test records one PASS or FAIL line.

Run alone with ``pytest -m acceptance tests/test_acceptance.py``; the lines are
printed in the terminal summary.
"""

import asyncio
import functools
import random
import statistics
import struct
import sys
import time

import pytest

from opcgate import bench, cli, config
from opcgate.certificates import hash_thumbprint
from opcgate.codec import (
    CodecError,
    Hello,
    SymmetricMessage,
    decode_chunk,
    decode_message_header,
    decode_opn,
)
from opcgate.controller import Controller
from opcgate.dataplane.extract import (
    CertificateTooLong,
    ExtractionError,
    ZeroLengthCertificate,
    extract_certificate,
    is_discovery_opn,
    swap_length_bytes,
)
from opcgate.dataplane.frames import FrameError, parse_headers
from opcgate.dataplane.pipeline import DropReason, PipelineConfig, StreamInspector, Switch, inspect_chunk
from opcgate.dataplane.proxy import GatewayProxy
from opcgate.dataplane.table import TableFull, ThumbprintTable
from opcgate.gateway import Gateway
from opcgate.harness.certs import make_identity, padded_certificate, save_identity
from opcgate.harness.endpoints import EndpointConfig, OpcUaServer, Outcome, Phase, Role, client_flow
from opcgate.harness.scenarios import (
    Testbed as Bed,
    scenario_middleperson,
    scenario_rogue_client,
    scenario_rogue_server,
)
from opcgate.harness.tcp import run_flow_tcp, serve_tcp
from opcgate.ledger.actions import CertificateAction
from opcgate.ledger.keys import AdminKeyring, SigningKey
from opcgate.ledger.network import L1Ledger, L2Ledger
from opcgate.ledger.registry import (
    ExpiredAtInsertion,
    Registry,
    add_certificate,
    get_all_certificates,
    revoke_certificate,
)

from conftest import opn_chunk
from flows import Flow
from oracles import is_acyclic, replay_registry, sender_cert_slice

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                note = fn(*args, **kwargs)
            except BaseException as exc:
                first = (str(exc).splitlines() or [type(exc).__name__])[0][:160]
                RESULTS[number] = f"FAIL {number:>2} {title}: {first}"
                raise
            tail = f" ({note})" if note else ""
            RESULTS[number] = f"PASS {number:>2} {title}{tail} [{time.perf_counter() - t0:.1f}s]"
        return run
    return wrap


ADMIN = SigningKey.from_seed(bytes(range(32)))
INTRUDER = SigningKey.from_seed(bytes(range(1, 33)))
KEYRING = AdminKeyring({ADMIN.public_key})


# ---------------------------------------------------------------------------


@criterion(1, "enforcement soundness and completeness")
def test_enforcement():
    t0 = time.perf_counter()
    tb = Bed()
    tb.trust(tb.client_identity, tb.server_identity)
    trusted = [tb.handshake() for _ in range(1000)]
    assert sum(r.outcome is Outcome.ESTABLISHED for r in trusted) == 1000

    # untrusted: client missing, server missing, both missing
    strangers = [make_identity(f"stranger-{i}") for i in range(3)]
    untrusted = []
    for i in range(1000):
        case = i % 3
        tb = untrusted_bed(case)
        client = strangers[i % 3] if case != 1 else None
        untrusted.append((tb.handshake(identity=client), tb))
    assert sum(r.established for r, _ in untrusted) == 0
    assert {(r.outcome, r.phase_reached) for r, _ in untrusted} == {
        (Outcome.REJECTED, Phase.OPEN_SECURE_CHANNEL)}
    for tb in _BEDS.values():
        drops = [v for v in tb.switch.verdicts if not v.verdict.allowed]
        assert drops and {v.verdict.msg_type for v in drops} == {"OPN"}
        assert {v.verdict.reason for v in drops} == {DropReason.UNTRUSTED}
    elapsed = time.perf_counter() - t0
    assert elapsed < 120, f"took {elapsed:.0f}s"
    return f"1000/1000 trusted, 0/1000 untrusted, {elapsed:.0f}s"


_BEDS: dict[int, Bed] = {}


def untrusted_bed(case: int) -> Bed:
    """One testbed per case, reused: 0 client unknown, 1 server unknown, 2 neither known."""
    beds = _BEDS
    if case not in beds:
        tb = Bed()
        if case == 0:
            tb.trust(tb.client_identity, tb.server_identity)  # strangers connect with their own certs
        elif case == 1:
            tb.trust(tb.client_identity)
        beds[case] = tb
    return beds[case]


@criterion(2, "extraction equals decoded certificate bytes")
def test_extraction_oracle():
    rng = random.Random(2024)
    lengths = [1, 88, 200, 255, 256, 257, 511, 512, 600, 4096, 25599, 25600]
    lengths += [rng.randint(1, 25600) for _ in range(200)]
    for n in lengths:
        cert = rng.randbytes(n)
        chunk = opn_chunk(cert)
        ext = extract_certificate(chunk, max_chunks=100)
        joined = b"".join(ext.certificate.chunks)
        assert joined == decode_opn(chunk).sender_certificate == sender_cert_slice(chunk) == cert, n
        assert all(len(c) == 256 for c in ext.certificate.chunks[:-1]) and 0 < len(ext.certificate.chunks[-1]) <= 256
    with pytest.raises(ZeroLengthCertificate):
        extract_certificate(opn_chunk(b""))
    assert inspect_chunk(opn_chunk(b""), ThumbprintTable()).reason is DropReason.ZERO_LENGTH
    with pytest.raises(CertificateTooLong):
        extract_certificate(opn_chunk(bytes(25601)), max_chunks=100)
    return f"{len(lengths)} lengths"


@criterion(3, "length field byte reversal")
def test_byte_reversal():
    assert swap_length_bytes(bytes([0x3A, 0x04, 0x00, 0x00])) == 1082
    assert swap_length_bytes(bytes([0x00, 0x64, 0x00, 0x00])) == 25600
    # the same bytes as they appear in encoded chunks
    assert bytes([0x3A, 0x04, 0x00, 0x00]) + b"\xaa" * 1082 in opn_chunk(b"\xaa" * 1082)
    assert extract_certificate(opn_chunk(b"\xaa" * 1082)).certificate.declared_length == 1082
    assert bytes([0x00, 0x64, 0x00, 0x00]) + b"\xbb" * 25600 in opn_chunk(b"\xbb" * 25600)


@criterion(4, "thumbprint table capacity")
def test_table_capacity():
    table = ThumbprintTable(1024)
    for i in range(1024):
        table.install(hash_thumbprint(struct.pack("<I", i)))
    assert len(table) == 1024
    with pytest.raises(TableFull):
        table.install(hash_thumbprint(struct.pack("<I", 1024)))
    assert len(table) == 1024


# ---------------------------------------------------------------------------


@criterion(5, "admin workflow end to end")
def test_workflow(tmp_path):
    admin_path = tmp_path / "admin.key"
    ADMIN.save(admin_path)
    client, server = make_identity("workflow-client"), make_identity("workflow-server")
    client_cert, _ = save_identity(client, tmp_path / "client")
    server_cert, _ = save_identity(server, tmp_path / "server")
    counts = {}

    async def layer_run(layer: str):
        srv = await serve_tcp(OpcUaServer(EndpointConfig(Role.SERVER, server)), "127.0.0.1", 0)
        upstream = "%s:%s" % srv.sockets[0].getsockname()[:2]
        base = tmp_path / layer
        base.mkdir()
        cfg_path = base / "gateway.json"
        cfg_path.write_text(config_json(layer, upstream))
        cfg = config.load(cfg_path)
        gw = Gateway(cfg)
        via = await gw.start()

        def admin(verb, cert):
            rc = cli.main(["admin", verb, str(cert), "--config", str(cfg_path), "--key", str(admin_path)])
            assert rc == 0

        async def connects() -> bool:
            r = await run_flow_tcp(client_flow(EndpointConfig(Role.CLIENT, client),
                                               config.parse_address(upstream)), via, timeout=2.0)
            assert r.outcome in (Outcome.ESTABLISHED, Outcome.REJECTED), r
            return r.established

        admin("issue", server_cert)
        gw.poll_ledger()
        for rep in range(20):
            assert await connects() is False
            admin("issue", client_cert)
            gw.poll_ledger()  # one propagation cycle
            assert await connects() is True
            entries = len(gw.table)
            admin("issue", client_cert)  # duplicate
            gw.poll_ledger()
            assert await connects() is True and len(gw.table) == entries
            admin("revoke", client_cert)
            gw.poll_ledger()
            assert await connects() is False
            admin("revoke", client_cert)  # duplicate
            gw.poll_ledger()
            assert await connects() is False and len(gw.table) == entries - 1
        counts[layer] = 20
        await gw.close()
        srv.close()
        await srv.wait_closed()

    for layer in ("L1", "L2"):
        asyncio.run(layer_run(layer))
    return "20 repetitions on L1 and L2"


def config_json(layer: str, upstream: str) -> str:
    import json
    return json.dumps({
        "gateway": {"listen": "127.0.0.1:0", "upstream": upstream, "drop_mode": "rst", "metrics_path": None},
        "ledger": {"layer": layer, "admin_public_keys": [ADMIN.public_key.hex()]},
        "controller": {"snapshot": None},
    })


@criterion(6, "attack suite")
def test_attacks():
    rs, rc, mp = scenario_rogue_server(20), scenario_rogue_client(20), scenario_middleperson(20)
    for rep in (rs, rc, mp):
        assert rep.established == 0, rep.outcomes()
    assert rs.extra["rogue_sessions"] == 0 and rc.extra["server_sessions_for_rogue"] == 0
    assert mp.extra["upstream_established"] == 0
    for replay in (scenario_rogue_server(20, replay=True), scenario_rogue_client(20, replay=True),
                   scenario_middleperson(20, replay=True)):
        assert replay.outcomes() == {"ProtocolError": 20}, replay.outcomes()
    return "0/20 in each, replays 20/20 ProtocolError"


@criterion(7, "ledger properties")
def test_ledger_properties():
    ledger = L1Ledger(link="short", rng=random.Random(7))
    before = set()
    for i in range(1000):
        ledger.submit(CertificateAction.issue(padded_certificate(64, seed=i), 1e12), ADMIN)
        ledger.scheduler.run(until=ledger.now + 0.3)
        now = set(ledger.tangle.confirmed)
        assert before <= now
        before = now
    ledger.settle()
    assert before <= set(ledger.tangle.confirmed)
    assert is_acyclic({k: v.approvals for k, v in ledger.tangle.transactions.items()})

    for seed in range(100):
        rng = random.Random(seed)
        reg = Registry(KEYRING)
        pool = [padded_certificate(48, seed=1000 + i) for i in range(10)]
        steps, clock = [], 0.0
        for _ in range(rng.randint(20, 200)):
            roll, c = rng.random(), rng.choice(pool)
            if roll < 0.5:
                exp = clock + rng.uniform(-5, 40)
                steps.append(("issue", c, exp))
                try:
                    add_certificate(reg, c, exp, ADMIN.public_key)
                except ExpiredAtInsertion:
                    pass
            elif roll < 0.8:
                steps.append(("revoke", c, None))
                revoke_certificate(reg, c, ADMIN.public_key)
            else:
                clock += rng.uniform(0, 12)
                steps.append(("advance", None, clock))
                reg.advance(clock)
        assert {r.der: r.expire_date for r in get_all_certificates(reg)} == replay_registry(steps), seed

    for layer in (L1Ledger(rng=random.Random(1)), L2Ledger(KEYRING, rng=random.Random(1))):
        table = ThumbprintTable()
        ctl = Controller(table, KEYRING)
        ctl.subscribe_to(layer)
        kept = padded_certificate(64, seed=1)
        layer.submit(CertificateAction.issue(kept, 1e12), ADMIN)
        layer.settle()
        gen, entries = table.generation, set(table.entries)
        for i in range(50):
            layer.submit(CertificateAction.issue(padded_certificate(64, seed=500 + i), 1e12), INTRUDER)
            layer.submit(CertificateAction.revoke(kept), INTRUDER)
        layer.settle()
        assert table.generation == gen and set(table.entries) == entries
    return "1000 submissions, 100 sequences"


# ---------------------------------------------------------------------------


@criterion(8, "gateway cost methodology")
def test_q1():
    rep = bench.bench_q1(n=1000, seed=0)
    base, enf = rep.aggregates["baseline"], rep.aggregates["enforced"]
    assert base["tagged_records"] == enf["tagged_records"] == 2000
    proc = rep.comparison["processing_ns_tagged"]
    assert enf["processing_ns_tagged"]["mean"] > base["processing_ns_tagged"]["mean"]
    hs = rep.comparison["handshake_ms"]
    assert hs["ratio"] is not None and hs["ratio"] > 1.0, hs
    return (f"processing x{proc['ratio']:.2f}, handshake x{hs['ratio']:.3f} "
            f"(+{hs['delta']:.2f} ms)")


@criterion(9, "ledger propagation methodology")
def test_q2():
    rep = bench.bench_q2(trials=300)
    med = {k: v["median"] for k, v in rep.aggregates.items()}
    presets, sizes = bench.DEFAULT_PRESETS, bench.DEFAULT_SIZES
    for s in sizes:
        l1 = [med[f"L1/{p}/{s}"] for p in presets]
        assert l1 == sorted(l1), (s, l1)
        for p in presets:
            assert med[f"L2/{p}/{s}"] < med[f"L1/{p}/{s}"], (p, s)
    assert rep.comparison["L1_max_delay_s"] < 20.0, rep.comparison["L1_max_delay_s"]
    for p in presets:
        l2 = [med[f"L2/{p}/{s}"] for s in sizes]
        assert max(l2) <= 1.10 * min(l2), (p, l2)
    reduction = statistics.mean(rep.comparison["l2_vs_l1_median_reduction"].values())
    return f"L1 worst {rep.comparison['L1_max_delay_s']:.1f}s, L2 median {reduction:.0%} lower"


# ---------------------------------------------------------------------------


def mixed_corpus(size: int, seed: int) -> bytes:
    rng = random.Random(seed)
    parts, total = [], 0
    while total < size:
        kind = rng.random()
        if kind < 0.2:
            part = opn_chunk(rng.randbytes(rng.randint(0, 3000)))  # untrusted and zero-length included
        elif kind < 0.4:
            part = SymmetricMessage("MSG", 1, 1, rng.randrange(1 << 32), 1, rng.randbytes(rng.randint(0, 8000))).encode()
        elif kind < 0.5:
            part = Hello().encode()
        elif kind < 0.8:
            part = rng.randbytes(rng.randint(1, 20000))
        else:
            part = b"GET /index.html HTTP/1.1\r\nHost: plant\r\n\r\n" * rng.randint(1, 50)
        parts.append(part)
        total += len(part)
    return b"".join(parts)[:size]


async def _proxied(up: bytes, down: bytes) -> tuple[bytes, bytes]:
    received = bytearray()

    async def handle(reader, writer):
        async def pump():
            for i in range(0, len(down), 50_000):
                writer.write(down[i:i + 50_000])
                await writer.drain()
            writer.write_eof()
        task = asyncio.create_task(pump())
        while data := await reader.read(65536):
            received.extend(data)
        await task
        writer.close()

    server = await asyncio.start_server(handle, "127.0.0.1", 0)
    proxy = GatewayProxy(ThumbprintTable(), server.sockets[0].getsockname()[:2],
                         PipelineConfig(validation_enabled=False))
    host, port = await proxy.start("127.0.0.1", 0)
    reader, writer = await asyncio.open_connection(host, port)

    async def send():
        rng = random.Random(9)
        i = 0
        while i < len(up):
            n = rng.randint(1, 70_000)
            writer.write(up[i:i + n])
            await writer.drain()
            i += n
        writer.write_eof()
    sender = asyncio.create_task(send())
    got = bytearray()
    while data := await reader.read(65536):
        got.extend(data)
    await sender
    writer.close()
    await proxy.close()
    server.close()
    await server.wait_closed()
    return bytes(received), bytes(got)


@criterion(10, "pass-through neutrality with validation disabled")
def test_passthrough():
    up, down = mixed_corpus(5_000_000, 1), mixed_corpus(5_000_000, 2)
    assert b"OPN" in up and b"OPN" in down
    received, got = asyncio.run(_proxied(up, down))
    assert received == up and got == down

    # the switch, segment by segment
    sw = Switch(ThumbprintTable(), PipelineConfig(validation_enabled=False))
    flow = Flow()
    out = []
    for f in flow.open():
        out += sw.transmit(f)
    rng = random.Random(3)
    corpus = mixed_corpus(10_000_000, 3)
    sent, i = [], 0
    while i < len(corpus):
        n = rng.randint(1, 1460)
        frame = flow.to_server(corpus[i:i + n]) if rng.random() < 0.5 else flow.to_client(corpus[i:i + n])
        sent.append(frame)
        out += sw.transmit(frame)
        i += n
    assert out[2:] == sent
    return "5+5 MB through the proxy, 10 MB through the switch"


# ---------------------------------------------------------------------------


TYPED = (CodecError, ExtractionError, FrameError)


def fuzz_inputs(count: int, seed: int):
    rng = random.Random(seed)
    seeds = [opn_chunk(rng.randbytes(n)) for n in (0, 1, 200, 600, 1500)]
    seeds += [Hello().encode(), SymmetricMessage("MSG", 1, 1, 1, 1, b"abc").encode(),
              SymmetricMessage("CLO", 1, 1, 1, 1).encode()]
    flow = Flow()
    frames = [flow.to_server(s) for s in seeds]
    for _ in range(count):
        roll = rng.random()
        if roll < 0.3:
            yield rng.randbytes(rng.randint(0, 64))
            continue
        base = bytearray(rng.choice(frames if roll > 0.85 else seeds))
        for _ in range(rng.randint(1, 4)):
            op = rng.random()
            if op < 0.5 and base:
                base[rng.randrange(len(base))] = rng.randrange(256)
            elif op < 0.7:
                del base[rng.randrange(len(base) + 1):]
            elif op < 0.85 and len(base) > 12:
                pos = rng.choice((4, 8, 12, rng.randrange(len(base) - 4)))
                base[pos:pos + 4] = struct.pack("<I", rng.choice((0, 1, 255, 256, 0x7FFFFFFF, 0xFFFFFFFF,
                                                                   rng.randrange(1 << 32))))
            else:
                base += rng.randbytes(rng.randint(1, 16))
        yield bytes(base)


def _call(fn, data) -> bool:
    try:
        fn(data)
        return True
    except TYPED:
        return False


@criterion(11, "codec fuzz totality")
def test_fuzz():
    paths = (decode_message_header, decode_chunk, decode_opn, extract_certificate, is_discovery_opn,
             parse_headers)
    ok = err = 0
    for data in fuzz_inputs(1_000_000, 11):
        for fn in paths:
            try:
                good = _call(fn, data)
            except Exception as exc:  # anything untyped fails the criterion
                raise AssertionError(f"{fn.__name__}({data[:32].hex()}...) raised {exc!r}") from exc
            ok += good
            err += not good
    return f"10^6 inputs x {len(paths)} decoders, {ok} values, {err} typed errors"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-m", "acceptance"]))
