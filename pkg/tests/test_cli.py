"""Configuration, the command line and the long-running gateway."""

import asyncio
import json

import pytest

from opcgate import cli, config
from opcgate.certificates import hash_thumbprint
from opcgate.dataplane.pcap import write_pcap
from opcgate.gateway import Gateway
from opcgate.harness.certs import make_identity, save_identity
from opcgate.harness.endpoints import EndpointConfig, OpcUaServer, Role, client_flow
from opcgate.harness.tcp import run_flow_tcp, serve_tcp
from opcgate.ledger import store
from opcgate.ledger.keys import AdminKeyring, SigningKey

from conftest import opn_chunk
from flows import Flow


def lines(out: str) -> list[dict]:
    return [json.loads(l) for l in out.splitlines() if l.strip()]


@pytest.fixture
def admin(tmp_path):
    key = SigningKey.from_seed(bytes(32))
    path = tmp_path / "admin.key"
    key.save(path)
    return key, path


def write_config(tmp_path, admin_key, **sections) -> str:
    raw = {"ledger": {"admin_public_keys": [admin_key.public_key.hex()]},
           "gateway": {"listen": "127.0.0.1:0", "metrics_path": None},
           "controller": {"snapshot": None}}
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    path = tmp_path / "gateway.json"
    path.write_text(json.dumps(raw))
    return str(path)


def cert_file(tmp_path, name) -> tuple[str, bytes]:
    ident = make_identity(name)
    cert_path, _ = save_identity(ident, tmp_path / name)
    return str(cert_path), ident.thumbprint


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


class TestConfig:
    def test_defaults(self):
        cfg = config.from_dict({})
        assert cfg.gateway.table_capacity == 1024 and cfg.gateway.max_chunks == 100
        assert cfg.ledger.layer == "L1"

    def test_relative_paths(self, tmp_path):
        cfg = config.from_dict({"ledger": {"path": "x.jsonl"}}, tmp_path)
        assert cfg.resolve(cfg.ledger.path) == tmp_path / "x.jsonl"

    def test_int_accepted_for_float(self):
        assert config.from_dict({"ledger": {"poll_interval": 2}}).ledger.poll_interval == 2

    @pytest.mark.parametrize("raw", [
        [],
        {"nonsense": {}},
        {"gateway": []},
        {"gateway": {"bogus": 1}},
        {"gateway": {"table_capacity": "many"}},
        {"gateway": {"table_capacity": True}},
        {"gateway": {"drop_mode": "loud"}},
        {"gateway": {"max_chunks": 0}},
        {"gateway": {"listen": "nowhere"}},
        {"gateway": {"upstream": "h:port"}},
        {"ledger": {"layer": "L3"}},
        {"ledger": {"link": "mars"}},
        {"harness": {"link": "mars"}},
        {"ledger": {"poll_interval": 0}},
        {"ledger": {"admin_public_keys": ["zz"]}},
    ])
    def test_invalid(self, raw):
        with pytest.raises(config.ConfigInvalid):
            config.from_dict(raw)

    def test_load_errors(self, tmp_path):
        with pytest.raises(config.ConfigInvalid):
            config.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(config.ConfigInvalid):
            config.load(bad)

    def test_parse_address(self):
        assert config.parse_address("127.0.0.1:4840") == ("127.0.0.1", 4840)
        assert config.parse_address("::1:80") == ("::1", 80)


# ---------------------------------------------------------------------------
# Admin verbs
# ---------------------------------------------------------------------------


class TestAdmin:
    def test_keygen(self, tmp_path, capsys):
        out = tmp_path / "k.key"
        assert cli.main(["admin", "keygen", "--out", str(out)]) == 0
        doc = lines(capsys.readouterr().out)[0]
        assert SigningKey.load(out).public_key.hex() == doc["public_key"]
        assert out.stat().st_mode & 0o777 == 0o600

    def test_keygen_refuses_overwrite(self, tmp_path):
        out = tmp_path / "k.key"
        assert cli.main(["admin", "keygen", "--out", str(out)]) == 0
        before = out.read_bytes()
        assert cli.main(["admin", "keygen", "--out", str(out)]) == 1
        assert out.read_bytes() == before
        assert cli.main(["admin", "keygen", "--out", str(out), "--force"]) == 0

    @pytest.mark.parametrize("layer", ["L1", "L2"])
    def test_issue_then_revoke(self, tmp_path, admin, capsys, layer):
        cfg = write_config(tmp_path, admin[0], ledger={"layer": layer})
        cert, tp = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])]) == 0
        issued = lines(capsys.readouterr().out)[0]
        assert issued["confirmed"] and issued["thumbprint"] == tp.hex() and issued["layer"] == layer
        assert cli.main(["admin", "revoke", cert, "--config", cfg, "--key", str(admin[1])]) == 0
        keyring = AdminKeyring({admin[0].public_key})
        ledger = store.new_ledger(layer, keyring)
        store.load_into(ledger, tmp_path / "ledger.jsonl")
        store.flush(ledger)
        assert ledger.get_all_certificates(keyring, 0.0) == []

    def test_key_from_environment(self, tmp_path, admin, monkeypatch):
        cfg = write_config(tmp_path, admin[0])
        cert, _ = cert_file(tmp_path, "plc-1")
        monkeypatch.setenv(cli.ADMIN_KEY_ENV, str(admin[1]))
        assert cli.main(["admin", "issue", cert, "--config", cfg]) == 0

    def test_missing_key(self, tmp_path, admin, monkeypatch, capsys):
        monkeypatch.delenv(cli.ADMIN_KEY_ENV, raising=False)
        cfg = write_config(tmp_path, admin[0])
        cert, _ = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", cfg]) == 2
        assert "no admin key" in capsys.readouterr().err

    def test_unreadable_key(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        cert, _ = cert_file(tmp_path, "plc-1")
        (tmp_path / "junk.key").write_text("junk")
        assert cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(tmp_path / "junk.key")]) == 2

    def test_bad_config(self, tmp_path, admin):
        (tmp_path / "bad.json").write_text('{"ledger": {"layer": "L9"}}')
        cert, _ = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", str(tmp_path / "bad.json"),
                         "--key", str(admin[1])]) == 2

    def test_unparseable_certificate(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        (tmp_path / "c.der").write_bytes(b"not a certificate")
        assert cli.main(["admin", "issue", str(tmp_path / "c.der"), "--config", cfg,
                         "--key", str(admin[1])]) == 1

    def test_non_admin_on_l1_is_recorded_with_warning(self, tmp_path, admin, capsys):
        cfg = write_config(tmp_path, admin[0])
        other = tmp_path / "other.key"
        SigningKey.from_seed(b"\x01" * 32).save(other)
        cert, _ = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(other)]) == 0
        assert "not an administrator key" in capsys.readouterr().err
        gw = Gateway(config.load(cfg))
        asyncio.run(_start_stop(gw))
        assert len(gw.table) == 0

    def test_non_admin_on_l2_is_rejected(self, tmp_path, admin, capsys):
        cfg = write_config(tmp_path, admin[0], ledger={"layer": "L2"})
        other = tmp_path / "other.key"
        SigningKey.from_seed(b"\x01" * 32).save(other)
        cert, _ = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(other)]) == 1
        assert "UnauthorizedKey" in capsys.readouterr().err

    def test_l2_without_admin_keys(self, tmp_path, admin):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"ledger": {"layer": "L2"}}))
        cert, _ = cert_file(tmp_path, "plc-1")
        assert cli.main(["admin", "issue", cert, "--config", str(path), "--key", str(admin[1])]) == 2


# ---------------------------------------------------------------------------
# Replay and endpoints
# ---------------------------------------------------------------------------


def capture(tmp_path) -> str:
    f = Flow()
    path = tmp_path / "cap.pcap"
    write_pcap(path, f.open() + [f.to_server(opn_chunk(b"client-cert")),
                                 f.to_client(opn_chunk(b"server-cert"))])
    return str(path)


class TestReplay:
    def test_trusted(self, tmp_path, capsys):
        args = ["replay", capture(tmp_path)]
        for c in (b"client-cert", b"server-cert"):
            args += ["--thumbprint", hash_thumbprint(c).hex()]
        assert cli.main(args) == 0
        out = lines(capsys.readouterr().out)
        assert [o["verdict"] for o in out[:-1]] == ["Allow", "Allow"]
        assert out[-1]["summary"]["frames"] == 4

    def test_untrusted(self, tmp_path, capsys):
        assert cli.main(["replay", capture(tmp_path)]) == 0
        assert lines(capsys.readouterr().out)[0]["verdict"] == "Drop(UntrustedThumbprint)"

    def test_no_validation(self, tmp_path, capsys):
        assert cli.main(["replay", capture(tmp_path), "--no-validation"]) == 0
        assert all(o["verdict"] == "Allow" for o in lines(capsys.readouterr().out)[:-1])

    def test_trust_from_ledger(self, tmp_path, admin, capsys):
        cfg = write_config(tmp_path, admin[0])
        cert, tp = cert_file(tmp_path, "plc-1")
        cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
        capsys.readouterr()
        f = Flow()
        path = tmp_path / "c.pcap"
        write_pcap(path, f.open() + [f.to_server(opn_chunk(make_identity("plc-1").der))])
        assert cli.main(["replay", str(path), "--config", cfg]) == 0
        assert lines(capsys.readouterr().out)[0]["verdict"] == "Allow"

    def test_empty(self, tmp_path, capsys):
        (tmp_path / "e.pcap").write_bytes(b"")
        assert cli.main(["replay", str(tmp_path / "e.pcap")]) == 0
        [only] = lines(capsys.readouterr().out)
        assert only["summary"]["frames"] == 0

    def test_unreadable(self, tmp_path, capsys):
        (tmp_path / "x.pcap").write_bytes(b"garbage!" * 4)
        assert cli.main(["replay", str(tmp_path / "x.pcap")]) == 1
        assert "CaptureUnreadable" in capsys.readouterr().err

    def test_bad_thumbprint(self, tmp_path):
        assert cli.main(["replay", capture(tmp_path), "--thumbprint", "xyz"]) == 2


class TestEndpointVerbs:
    def test_keygen(self, tmp_path, capsys):
        assert cli.main(["endpoint", "keygen", "plc-7", "--out", str(tmp_path)]) == 0
        doc = lines(capsys.readouterr().out)[0]
        assert doc["thumbprint"] == make_identity("plc-7").thumbprint.hex()

    def test_connect_refused(self, tmp_path, capsys):
        cli.main(["endpoint", "keygen", "c", "--out", str(tmp_path)])
        doc = lines(capsys.readouterr().out)[0]
        rc = cli.main(["endpoint", "connect", "--cert", doc["certificate"], "--key", doc["key"],
                       "--target", "127.0.0.1:1", "--timeout", "1"])
        assert rc == 1
        assert lines(capsys.readouterr().out)[0]["outcome"] == "ProtocolError"

    def test_bad_identity(self, tmp_path):
        assert cli.main(["endpoint", "connect", "--cert", str(tmp_path / "no"), "--key",
                         str(tmp_path / "no")]) == 2


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


async def _start_stop(gw):
    await gw.start()
    await gw.close()


class TestGateway:
    def test_start_installs_valid_set(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        cert, tp = cert_file(tmp_path, "plc-1")
        cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
        gw = Gateway(config.load(cfg))
        asyncio.run(_start_stop(gw))
        assert tp in gw.table

    def test_poll_picks_up_issue_and_revoke(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        cert, tp = cert_file(tmp_path, "plc-1")
        gw = Gateway(config.load(cfg))

        async def go():
            await gw.start()
            assert tp not in gw.table
            cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
            gw.poll_ledger()
            assert tp in gw.table
            cli.main(["admin", "revoke", cert, "--config", cfg, "--key", str(admin[1])])
            gw.poll_ledger()
            assert tp not in gw.table
            await gw.close()
        asyncio.run(go())

    def test_capacity_alert_at_start(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0], gateway={"table_capacity": 4})
        for i in range(5):
            cert, _ = cert_file(tmp_path, f"plc-{i}")
            cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
        gw = Gateway(config.load(cfg))
        asyncio.run(_start_stop(gw))
        assert len(gw.table) == 4
        assert [a["result"] for a in gw.controller.alerts] == ["TableFull"]

    def test_capacity_alert_on_fifth_issue(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0], gateway={"table_capacity": 4})
        gw = Gateway(config.load(cfg))

        async def go():
            await gw.start()
            for i in range(5):
                cert, _ = cert_file(tmp_path, f"plc-{i}")
                cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
                gw.poll_ledger()
            await gw.close()
        asyncio.run(go())
        assert len(gw.table) == 4
        assert gw.metrics()["pending_retries"] == 1
        assert gw.controller.alerts[-1]["result"] == "TableFull"

    def test_unreadable_ledger_fails_closed(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        cert, tp = cert_file(tmp_path, "plc-1")
        (tmp_path / "ledger.jsonl").write_text("{not json\n")
        gw = Gateway(config.load(cfg))

        async def go():
            await gw.start()
            assert len(gw.table) == 0
            assert gw.controller.alerts[-1]["result"] == "RegistryUnavailable"
            (tmp_path / "ledger.jsonl").unlink()
            cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
            gw.poll_ledger()  # readable again: reconcile and follow
            assert tp in gw.table
            await gw.close()
        asyncio.run(go())

    def test_corrupt_line_keeps_table(self, tmp_path, admin):
        cfg = write_config(tmp_path, admin[0])
        cert, tp = cert_file(tmp_path, "plc-1")
        cli.main(["admin", "issue", cert, "--config", cfg, "--key", str(admin[1])])
        gw = Gateway(config.load(cfg))

        async def go():
            await gw.start()
            with open(tmp_path / "ledger.jsonl", "a") as fh:
                fh.write("garbage\n")
            gw.poll_ledger()
            await gw.close()
        asyncio.run(go())
        assert tp in gw.table and gw.controller.alerts[-1]["result"] == "LedgerUnreadable"

    def test_end_to_end_over_tcp(self, tmp_path, admin):
        client, server = make_identity("client"), make_identity("server")

        async def go():
            srv = await serve_tcp(OpcUaServer(EndpointConfig(Role.SERVER, server)), "127.0.0.1", 0)
            upstream = "%s:%s" % srv.sockets[0].getsockname()[:2]
            cfg = write_config(tmp_path, admin[0], gateway={"upstream": upstream})
            gw = Gateway(config.load(cfg))
            via = await gw.start()
            target = config.parse_address(upstream)
            flow = lambda: client_flow(EndpointConfig(Role.CLIENT, client), target)
            before = await run_flow_tcp(flow(), via, timeout=2.0)
            for name in ("client", "server"):
                path, _ = cert_file(tmp_path, name)
                cli.main(["admin", "issue", path, "--config", cfg, "--key", str(admin[1])])
            gw.poll_ledger()
            after = await run_flow_tcp(flow(), via, timeout=2.0)
            metrics = gw.metrics()
            await gw.close()
            srv.close()
            await srv.wait_closed()
            return before, after, metrics

        before, after, metrics = asyncio.run(go())
        assert not before.established and after.established
        assert metrics["table_entries"] == 2 and metrics["verdict_count"] >= 3

    def test_run_verb_with_duration(self, tmp_path, admin, capsys):
        cfg = write_config(tmp_path, admin[0], gateway={"metrics_path": "m.json"})
        assert cli.main(["gateway", "run", "--config", cfg, "--duration", "0.2"]) == 0
        assert lines(capsys.readouterr().out)[0]["listening"].startswith("127.0.0.1:")
        assert json.loads((tmp_path / "m.json").read_text())["table_entries"] == 0

    def test_run_verb_port_in_use(self, tmp_path, admin):
        async def go():
            holder = await asyncio.start_server(lambda r, w: None, "127.0.0.1", 0)
            port = holder.sockets[0].getsockname()[1]
            cfg = write_config(tmp_path, admin[0], gateway={"listen": f"127.0.0.1:{port}"})
            rc = await asyncio.to_thread(cli.main, ["gateway", "run", "--config", cfg, "--duration", "0.1"])
            holder.close()
            return rc
        assert asyncio.run(go()) == 1
