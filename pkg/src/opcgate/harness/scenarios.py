"""Testbed wiring and the attack scenarios.

Topology: one switch between the plant network and everything else. Every
connection to an OPC UA port crosses it, including both legs of a
middleperson, which sits at its own address and lures clients there.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field

from ..dataplane.pipeline import PipelineConfig, Switch
from ..dataplane.table import ThumbprintTable
from .certs import Identity, make_identity
from .endpoints import (
    EndpointConfig,
    HandshakeResult,
    OpcUaServer,
    Outcome,
    Role,
    client_flow,
)
from .report import summarize
from .simlink import FlowRunner, ServerHandler, SimNetwork

SERVER_ADDRESS = ("10.0.0.2", 4840)
ATTACKER_ADDRESS = ("10.0.0.66", 4840)
CLIENT_HOST = "10.0.1.10"


class ScenarioSetupFailure(RuntimeError):
    pass


class Testbed:
    """Plant server, plant client identity, a switch and a simulated network."""

    def __init__(self, validation_enabled: bool = True, drop_mode: str = "rst", link="zero",
                 seed: int = 0, table: ThumbprintTable | None = None, timeout: float = 5.0,
                 server_identity: Identity | None = None, client_identity: Identity | None = None):
        self.config = PipelineConfig(validation_enabled=validation_enabled, drop_mode=drop_mode)
        self.table = table if table is not None else ThumbprintTable(self.config.table_capacity)
        self.switch = Switch(self.table, self.config)
        self.net = SimNetwork(self.switch, link, random.Random(seed), timeout=timeout)
        self.server_identity = server_identity or make_identity("plant-server")
        self.client_identity = client_identity or make_identity("plant-client")
        self.server = self.add_server(self.server_identity, SERVER_ADDRESS)

    def add_server(self, identity: Identity, address: tuple) -> OpcUaServer:
        server = OpcUaServer(EndpointConfig(Role.SERVER, identity, address=address))
        self.net.serve(server, address)
        return server

    def trust(self, *identities: Identity) -> None:
        for ident in identities:
            self.table.install(ident.thumbprint)

    def distrust(self, *identities: Identity) -> None:
        for ident in identities:
            self.table.remove(ident.thumbprint)

    def client_config(self, identity: Identity | None = None) -> EndpointConfig:
        return EndpointConfig(Role.CLIENT, identity or self.client_identity)

    def handshake(self, identity: Identity | None = None, target: tuple = SERVER_ADDRESS,
                  renew=None, src_host: str = CLIENT_HOST) -> HandshakeResult:
        return handshake(self.client_config(identity), target, self.net, renew, src_host)


def handshake(client: EndpointConfig, server_address: tuple, network: SimNetwork, renew=None,
              src_host: str = CLIENT_HOST) -> HandshakeResult:
    """One full client handshake; errors become outcomes."""
    return network.handshake(client_flow(client, server_address, renew), src_host)


# -- middleperson ----------------------------------------------------------------------


class _RelayHandler:
    """Downstream half of a byte-exact relay; opens the upstream leg on accept."""

    def __init__(self, net: SimNetwork, host: str, upstream: tuple):
        self.net = net
        self.pending: list[bytes] = []
        self.down = None
        self.up = net.connect(host, upstream, _UpstreamHandler(self))

    def on_connected(self, sock):
        pass

    def on_data(self, sock, data):
        self.down = sock
        if self.up.state == "open":
            self.up.send(data)
        else:
            self.pending.append(data)

    def on_reset(self, sock):
        self.up.close()

    def on_closed(self, sock):
        self.up.close()


class _UpstreamHandler:
    def __init__(self, relay: _RelayHandler):
        self.relay = relay

    def on_connected(self, sock):
        for data in self.relay.pending:
            sock.send(data)
        self.relay.pending.clear()

    def on_data(self, sock, data):
        if self.relay.down is not None:
            self.relay.down.send(data)

    def on_reset(self, sock):
        if self.relay.down is not None:
            self.relay.down.close()

    def on_closed(self, sock):
        if self.relay.down is not None:
            self.relay.down.close()


class Middleperson:
    """Listens at the attacker address.

    ``passive``: forward bytes unchanged to the real server.
    Otherwise terminate the client's connections with ``server_persona`` and,
    for each lured client, run an own handshake to the real server as
    ``client_persona``.
    """

    def __init__(self, testbed: Testbed, server_persona: Identity | None = None,
                 client_persona: Identity | None = None, passive: bool = False,
                 address: tuple = ATTACKER_ADDRESS):
        self.testbed = testbed
        self.passive = passive
        self.address = address
        self.upstream_results: list = []
        self.client_persona = client_persona
        net = testbed.net
        if passive:
            net.listen(address, lambda sock: _RelayHandler(net, address[0], SERVER_ADDRESS))
            self.server = None
            return
        if server_persona is None or client_persona is None:
            raise ScenarioSetupFailure("an impersonating middleperson needs both personas")
        self.server = OpcUaServer(EndpointConfig(Role.SERVER, server_persona, address=address))
        self._lured = 0
        net.listen(address, self._accept)

    def _accept(self, sock):
        self._lured += 1
        if self._lured % 2 == 0:  # the second connection of a client is the secure one
            flow = client_flow(EndpointConfig(Role.CLIENT, self.client_persona), SERVER_ADDRESS)
            runner = _RecordingRunner(self.testbed.net, flow, self.address[0], self.upstream_results)
            runner.start()
        return ServerHandler(self.server)


class _RecordingRunner(FlowRunner):
    def __init__(self, net, flow, host, sink):
        super().__init__(net, flow, host)
        self._sink = sink

    def _resume(self, value):
        super()._resume(value)
        if self.done and self.result is not None:
            self._sink.append(self.result[0])
            self.result = None


# -- reports ---------------------------------------------------------------------------


@dataclass
class ScenarioReport:
    name: str
    config: dict
    attempts: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def established(self) -> int:
        return sum(1 for a in self.attempts if a.outcome is Outcome.ESTABLISHED)

    def outcomes(self) -> dict:
        return dict(Counter(a.outcome.value for a in self.attempts))

    def as_dict(self) -> dict:
        return {
            "scenario": self.name,
            "config": self.config,
            "attempts": [a.as_dict() for a in self.attempts],
            "established": self.established,
            "outcomes": self.outcomes(),
            "duration_ms": summarize(a.duration_ms for a in self.attempts),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def _config(**kw) -> dict:
    return {k: (v if isinstance(v, (int, float, str, bool, type(None))) else str(v)) for k, v in kw.items()}


def scenario_rogue_server(n: int = 20, replay: bool = False, trust_rogue: bool = False,
                          seed: int = 0, **testbed_kw) -> ScenarioReport:
    """A trusted client is lured to a server with a self-made (or copied) certificate."""
    tb = Testbed(seed=seed, **testbed_kw)
    tb.trust(tb.client_identity, tb.server_identity)
    rogue = make_identity("rogue-server")
    persona = rogue.impersonating(tb.server_identity) if replay else rogue
    if trust_rogue:
        tb.trust(persona)
    rogue_server = tb.add_server(persona, ATTACKER_ADDRESS)
    report = ScenarioReport("rogue_server", _config(n=n, replay=replay, trust_rogue=trust_rogue,
                                                    seed=seed, **testbed_kw))
    for _ in range(n):
        report.attempts.append(tb.handshake(target=ATTACKER_ADDRESS))
    report.extra["rogue_sessions"] = rogue_server.established
    report.extra["verdicts"] = [v.as_dict() for v in tb.switch.verdicts]
    return report


def scenario_rogue_client(n: int = 20, replay: bool = False, trust_rogue: bool = False,
                          seed: int = 0, **testbed_kw) -> ScenarioReport:
    """An attacker's client connects to the plant server."""
    tb = Testbed(seed=seed, **testbed_kw)
    tb.trust(tb.client_identity, tb.server_identity)
    rogue = make_identity("rogue-client")
    persona = rogue.impersonating(tb.client_identity) if replay else rogue
    if trust_rogue:
        tb.trust(persona)
    report = ScenarioReport("rogue_client", _config(n=n, replay=replay, trust_rogue=trust_rogue,
                                                    seed=seed, **testbed_kw))
    before = tb.server.established
    for _ in range(n):
        report.attempts.append(tb.handshake(persona, src_host="10.0.2.66"))
    report.extra["server_sessions_for_rogue"] = tb.server.established - before
    report.extra["verdicts"] = [v.as_dict() for v in tb.switch.verdicts]
    return report


def scenario_middleperson(n: int = 20, passive: bool = False, replay: bool = False,
                          seed: int = 0, **testbed_kw) -> ScenarioReport:
    """Attacker between client and server.

    Default: forged certificates on both sides. ``replay``: copied
    certificates without the keys. ``passive``: a plain relay (baseline).
    """
    tb = Testbed(seed=seed, **testbed_kw)
    tb.trust(tb.client_identity, tb.server_identity)
    if passive:
        mp = Middleperson(tb, passive=True)
    elif replay:
        attacker = make_identity("middleperson")
        mp = Middleperson(tb, attacker.impersonating(tb.server_identity),
                          attacker.impersonating(tb.client_identity))
    else:
        mp = Middleperson(tb, make_identity("middleperson-server"), make_identity("middleperson-client"))
    report = ScenarioReport("middleperson", _config(n=n, passive=passive, replay=replay, seed=seed,
                                                    **testbed_kw))
    for _ in range(n):
        report.attempts.append(tb.handshake(target=ATTACKER_ADDRESS))
    tb.net.scheduler.run()  # let upstream legs finish
    report.extra["upstream_outcomes"] = dict(Counter(o.value for o in mp.upstream_results))
    report.extra["upstream_established"] = sum(o is Outcome.ESTABLISHED for o in mp.upstream_results)
    report.extra["verdicts"] = [v.as_dict() for v in tb.switch.verdicts]
    return report


def scenario_renewal(seed: int = 0, revoke_before_renewal: bool = True, **testbed_kw) -> ScenarioReport:
    """Establish, then renew the channel; optionally revoke the client in between."""
    tb = Testbed(seed=seed, **testbed_kw)
    tb.trust(tb.client_identity, tb.server_identity)
    hook = (lambda: tb.distrust(tb.client_identity)) if revoke_before_renewal else (lambda: None)
    report = ScenarioReport("renewal", _config(seed=seed, revoke_before_renewal=revoke_before_renewal,
                                               **testbed_kw))
    report.attempts.append(tb.handshake(renew=hook))
    report.extra["verdicts"] = [v.as_dict() for v in tb.switch.verdicts]
    return report
