"""Administrator actions on a file-backed ledger, followed by a running gateway.

Everything happens in a temporary directory through the same entry point as
the ``opcgate`` command.

Run: python3 walkthroughs/02_admin_workflow.py [L1|L2]
"""

import asyncio
import json
import sys
import tempfile
from pathlib import Path

from opcgate import cli, config
from opcgate.gateway import Gateway
from opcgate.harness.certs import make_identity, save_identity
from opcgate.harness.endpoints import EndpointConfig, OpcUaServer, Role, client_flow
from opcgate.harness.tcp import run_flow_tcp, serve_tcp
from opcgate.ledger.keys import SigningKey

layer = sys.argv[1] if len(sys.argv) > 1 else "L1"
work = Path(tempfile.mkdtemp(prefix="opcgate-walk-"))
print("working in", work)


def opcgate(*argv):
    print("$ opcgate", " ".join(argv))
    code = cli.main(list(argv))
    print("  exit", code)
    return code


async def main():
    opcgate("admin", "keygen", "--out", str(work / "admin.key"))
    admin = SigningKey.load(work / "admin.key")

    client, server = make_identity("walk-client"), make_identity("walk-server")
    client_cert, _ = save_identity(client, work / "client")
    server_cert, _ = save_identity(server, work / "server")

    srv = await serve_tcp(OpcUaServer(EndpointConfig(Role.SERVER, server)), "127.0.0.1", 0)
    upstream = "%s:%s" % srv.sockets[0].getsockname()[:2]
    cfg_path = work / "gateway.json"
    cfg_path.write_text(json.dumps({
        "gateway": {"listen": "127.0.0.1:0", "upstream": upstream, "drop_mode": "rst"},
        "ledger": {"layer": layer, "admin_public_keys": [admin.public_key.hex()]},
    }, indent=1))
    gw = Gateway(config.load(cfg_path))
    via = await gw.start()
    print(f"gateway on {via[0]}:{via[1]} in front of {upstream}, ledger {layer}")

    async def connect(label):
        r = await run_flow_tcp(client_flow(EndpointConfig(Role.CLIENT, client),
                                           config.parse_address(upstream)), via)
        print(f"  handshake {label}: {r.outcome.value} at {r.phase_reached.value}")

    await connect("before any issue")
    for cert in (server_cert, client_cert):
        opcgate("admin", "issue", str(cert), "--config", str(cfg_path), "--key", str(work / "admin.key"))
    gw.poll_ledger()
    print("  table entries:", len(gw.table))
    await connect("after issue")

    opcgate("admin", "revoke", str(client_cert), "--config", str(cfg_path), "--key", str(work / "admin.key"))
    gw.poll_ledger()
    await connect("after revoke")

    print("  metrics:", {k: v for k, v in gw.metrics().items() if k in ("table_entries", "verdict_count")})
    await gw.close()
    srv.close()
    await srv.wait_closed()


asyncio.run(main())
