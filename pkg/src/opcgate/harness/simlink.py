"""Event-driven network of TCP-like connections crossing the emulated switch.

Time is virtual. Link delays come from a ``LinkModel``; compute done by the
endpoints and by the switch is measured with the real clock and charged to
virtual time, so a handshake's duration is its protocol cost plus the
simulated wire. Every segment becomes an Ethernet/IPv4/TCP frame and goes
through ``Switch.ingress``/``egress``; RST frames injected by the switch
reset the sockets they address.
"""

from __future__ import annotations

import itertools
import random
import time
from dataclasses import dataclass

from ..codec import ChunkSplitter, CodecError
from ..dataplane.frames import ACK, FIN, PSH, RST, SYN, build_tcp_frame, parse_headers
from ..dataplane.pipeline import Switch
from ..ledger.simnet import LinkModel, Scheduler, preset
from .endpoints import (
    Close,
    Connect,
    Failure,
    HandshakeResult,
    OpcUaServer,
    Outcome,
    Phase,
    Recv,
    Send,
)

MSS = 1460
DEFAULT_TIMEOUT = 5.0


class SimSocket:
    """One end of a connection. ``handler`` gets on_connected/on_data/on_reset/on_closed."""

    def __init__(self, net: SimNetwork, local: tuple, remote: tuple, handler, isn: int):
        self.net = net
        self.local = local
        self.remote = remote
        self.handler = handler
        self.seq = isn
        self.peer_next = 0
        self.state = "init"

    def send(self, data: bytes, cost: float = 0.0) -> None:
        if self.state != "open" or not data:
            return
        delay = cost + self.net.link.sample(self.net.rng, len(data))
        for i in range(0, len(data), MSS):
            seg = data[i : i + MSS]
            self._emit(PSH | ACK, seg, delay)

    def close(self, cost: float = 0.0) -> None:
        if self.state == "open":
            self._emit(FIN | ACK, b"", cost + self.net.link.sample(self.net.rng))
            self.state = "closed"

    def _emit(self, flags: int, payload: bytes, delay: float) -> None:
        frame = build_tcp_frame(self.local[0], self.local[1], self.remote[0], self.remote[1],
                                self.seq, self.peer_next, flags, payload)
        self.seq = (self.seq + len(payload) + (1 if flags & (SYN | FIN) else 0)) % (1 << 32)
        self.net._transmit(frame, delay, self)


class SimNetwork:
    def __init__(self, switch: Switch | None = None, link: LinkModel | str = "zero",
                 rng: random.Random | None = None, scheduler: Scheduler | None = None,
                 timeout: float = DEFAULT_TIMEOUT):
        self.scheduler = scheduler or Scheduler()
        self.switch = switch
        if switch is not None:
            switch._now = lambda: self.scheduler.now
        self.link = preset(link)
        self.rng = rng or random.Random(0)
        self.timeout = timeout
        self._listeners: dict = {}
        self._sockets: dict = {}
        self._ports = itertools.count()
        self._lane: dict = {}  # per-direction last arrival, keeps each byte stream in order

    @property
    def now(self) -> float:
        return self.scheduler.now

    def listen(self, address: tuple, factory) -> None:
        """``factory(sock)`` returns the handler for each accepted connection."""
        if address in self._listeners:
            raise OSError(f"{address} already bound")
        self._listeners[address] = factory

    def connect(self, src_host: str, address: tuple, handler, cost: float = 0.0) -> SimSocket:
        port = 1024 + next(self._ports) % 64000
        sock = SimSocket(self, (src_host, port), tuple(address), handler,
                         self.rng.getrandbits(32))
        self._sockets[(sock.local, sock.remote)] = sock
        sock.state = "syn-sent"
        sock._emit(SYN, b"", cost + self.link.sample(self.rng))
        return sock

    # -- frame path -------------------------------------------------------------

    def _transmit(self, frame: bytes, delay: float, sender: SimSocket) -> None:
        lane = (sender.local, sender.remote)
        at = max(self.now + delay, self._lane.get(lane, 0.0))
        self._lane[lane] = at
        self.scheduler.call_at(at, self._at_switch, frame)

    def _at_switch(self, frame: bytes) -> None:
        if self.switch is None:
            self._deliver(frame)
            return
        t0 = time.perf_counter()
        self.switch.ingress(frame)
        out = self.switch.egress()
        cost = time.perf_counter() - t0
        for f in out:
            pkt = parse_headers(f)
            lane = ("egress", pkt.flow)
            at = max(self.now + cost, self._lane.get(lane, 0.0))
            self._lane[lane] = at
            self.scheduler.call_at(at, self._deliver, f)

    def _deliver(self, frame: bytes) -> None:
        pkt = parse_headers(frame)
        src = (pkt.ipv4.src, pkt.tcp.src_port)
        dst = (pkt.ipv4.dst, pkt.tcp.dst_port)
        flags = pkt.tcp.flags
        sock = self._sockets.get((dst, src))
        if flags & SYN and not flags & ACK:
            self._accept(dst, src, pkt.tcp.seq)
            return
        if sock is None or sock.state == "dead":
            return
        if flags & RST:
            sock.state = "dead"
            self._forget(sock)
            sock.handler.on_reset(sock)
            return
        if flags & SYN:
            sock.peer_next = (pkt.tcp.seq + 1) % (1 << 32)
            sock.state = "open"
            sock.handler.on_connected(sock)
            return
        payload = pkt.payload(frame)
        if payload:
            sock.peer_next = (pkt.tcp.seq + len(payload)) % (1 << 32)
            sock.handler.on_data(sock, payload)
        if flags & FIN and sock.state != "dead":
            sock.state = "dead" if sock.state == "closed" else "half-closed"
            sock.handler.on_closed(sock)
            if sock.state == "dead" or sock.state == "closed":
                self._forget(sock)

    def _forget(self, sock: SimSocket) -> None:
        """Drop per-connection state once the connection is over (a switch would age it out)."""
        self._sockets.pop((sock.local, sock.remote), None)
        if (sock.remote, sock.local) in self._sockets:
            return  # the other end is still alive
        for lane in ((sock.local, sock.remote), (sock.remote, sock.local),
                     ("egress", (*sock.local, *sock.remote)), ("egress", (*sock.remote, *sock.local))):
            self._lane.pop(lane, None)
        if self.switch is not None:
            self.switch.forget((*sock.local, *sock.remote))

    def _accept(self, local: tuple, remote: tuple, isn: int) -> None:
        factory = self._listeners.get(local)
        if factory is None:
            return  # nobody listening; the client times out
        sock = SimSocket(self, local, remote, None, self.rng.getrandbits(32))
        sock.handler = factory(sock)
        sock.peer_next = (isn + 1) % (1 << 32)
        self._sockets[(local, remote)] = sock
        sock.state = "open"
        sock._emit(SYN | ACK, b"", self.link.sample(self.rng))

    # -- endpoints --------------------------------------------------------------

    def serve(self, server: OpcUaServer, address: tuple | None = None) -> None:
        self.listen(tuple(address or server.config.address), lambda sock: ServerHandler(server))

    def run_flow(self, flow, src_host: str = "10.0.1.10", max_events: int = 1_000_000):
        """Run a client generator to completion; returns (result tuple, virtual duration)."""
        runner = FlowRunner(self, flow, src_host)
        start = self.now
        runner.start()
        for _ in range(max_events):
            if runner.done or not self.scheduler.step():
                break
        if not runner.done:
            raise RuntimeError("client flow did not finish")
        return runner.result, runner.finished_at - start

    def handshake(self, flow, src_host: str = "10.0.1.10") -> HandshakeResult:
        (outcome, phase, detail, renewal), seconds = self.run_flow(flow, src_host)
        return HandshakeResult(Outcome(outcome), seconds * 1000.0, Phase(phase), detail, renewal)


class ServerHandler:
    def __init__(self, server: OpcUaServer):
        self.conn = server.connection()

    def on_connected(self, sock):
        pass

    def on_data(self, sock: SimSocket, data: bytes) -> None:
        t0 = time.perf_counter()
        out = self.conn.receive(data)
        cost = time.perf_counter() - t0
        if out:
            sock.send(b"".join(out), cost)
        if self.conn.closed:
            sock.close(cost)

    def on_reset(self, sock):
        self.conn.closed = True

    def on_closed(self, sock):
        sock.close()


@dataclass
class _ConnState:
    sock: SimSocket
    splitter: ChunkSplitter
    inbox: list
    failure: Failure | None = None


class FlowRunner:
    """Feeds transport events into a client generator."""

    def __init__(self, net: SimNetwork, flow, src_host: str):
        self.net = net
        self.flow = flow
        self.src_host = src_host
        self.done = False
        self.result = None
        self.finished_at = 0.0
        self._waiting = None  # ("connect", conn) or ("recv", conn)
        self._timer = itertools.count()
        self._armed = None

    def start(self) -> None:
        self._resume(None)

    def _resume(self, value) -> None:
        t0 = time.perf_counter()
        self._waiting = None
        self._armed = None
        try:
            while True:
                op = self.flow.send(value)
                cost = time.perf_counter() - t0
                if isinstance(op, Connect):
                    cs = _ConnState(None, ChunkSplitter(), [])
                    cs.sock = self.net.connect(self.src_host, op.address, _Events(self, cs), cost)
                    self._wait(("connect", cs))
                    return
                if isinstance(op, Send):
                    op.conn.sock.send(op.data, cost)
                    value = None
                elif isinstance(op, Close):
                    op.conn.sock.close(cost)
                    value = None
                elif isinstance(op, Recv):
                    cs = op.conn
                    if cs.inbox:
                        value = cs.inbox.pop(0)
                    elif cs.failure is not None:
                        value = cs.failure
                    else:
                        self._wait(("recv", cs))
                        return
                else:
                    raise TypeError(f"unknown operation {op!r}")
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            self.finished_at = self.net.now + (time.perf_counter() - t0)

    def _wait(self, what) -> None:
        self._waiting = what
        token = next(self._timer)
        self._armed = token
        self.net.scheduler.call_later(self.net.timeout, self._on_timeout, token)

    def _on_timeout(self, token) -> None:
        if self._armed == token and self._waiting is not None:
            self._resume(Failure.TIMEOUT)

    def _wake(self, cs: _ConnState, kind: str) -> None:
        if self._waiting is None or self._waiting[1] is not cs:
            return
        if kind == "connect" and self._waiting[0] == "connect":
            self._resume(cs)
        elif self._waiting[0] == "recv" and (cs.inbox or cs.failure is not None):
            self._resume(cs.inbox.pop(0) if cs.inbox else cs.failure)
        elif self._waiting[0] == "connect" and cs.failure is not None:
            self._resume(cs.failure)


class _Events:
    def __init__(self, runner: FlowRunner, cs: _ConnState):
        self.runner = runner
        self.cs = cs

    def on_connected(self, sock):
        self.runner._wake(self.cs, "connect")

    def on_data(self, sock, data):
        try:
            self.cs.inbox += self.cs.splitter.feed(data)
        except CodecError:
            self.cs.failure = Failure.CLOSED
        self.runner._wake(self.cs, "data")

    def on_reset(self, sock):
        self.cs.failure = Failure.RESET
        self.runner._wake(self.cs, "fail")

    def on_closed(self, sock):
        if self.cs.failure is None:
            self.cs.failure = Failure.CLOSED
        self.runner._wake(self.cs, "fail")
