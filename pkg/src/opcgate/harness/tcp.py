"""Real-socket driver: the same endpoints over asyncio TCP."""

from __future__ import annotations

import asyncio
import time

from ..codec import ChunkSplitter, CodecError
from .endpoints import (
    BindFailure,
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


async def serve_tcp(server: OpcUaServer, host: str = "127.0.0.1", port: int = 0) -> asyncio.Server:
    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = server.connection()
        try:
            while not conn.closed:
                data = await reader.read(65536)
                if not data:
                    break
                out = conn.receive(data)
                if out:
                    writer.write(b"".join(out))
                    await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    try:
        return await asyncio.start_server(handle, host, port)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc


class _Conn:
    def __init__(self, reader, writer):
        self.reader = reader
        self.writer = writer
        self.splitter = ChunkSplitter()
        self.inbox: list[bytes] = []


async def _recv(conn: _Conn, timeout: float):
    deadline = time.monotonic() + timeout
    while not conn.inbox:
        left = deadline - time.monotonic()
        if left <= 0:
            return Failure.TIMEOUT
        try:
            data = await asyncio.wait_for(conn.reader.read(65536), left)
        except asyncio.TimeoutError:
            return Failure.TIMEOUT
        except (ConnectionResetError, BrokenPipeError):
            return Failure.RESET
        if not data:
            return Failure.CLOSED
        try:
            conn.inbox += conn.splitter.feed(data)
        except CodecError:
            return Failure.CLOSED
    return conn.inbox.pop(0)


async def run_flow_tcp(flow, connect_to: tuple | None = None, timeout: float = 5.0) -> HandshakeResult:
    """Drive a client generator over TCP. ``connect_to`` redirects every Connect (e.g. to a proxy)."""
    conns: list[_Conn] = []
    start = time.perf_counter()
    value = None
    try:
        while True:
            op = flow.send(value)
            value = None
            if isinstance(op, Connect):
                host, port = connect_to or op.address
                try:
                    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
                except (OSError, asyncio.TimeoutError):
                    value = Failure.REFUSED
                    continue
                value = _Conn(reader, writer)
                conns.append(value)
            elif isinstance(op, Send):
                try:
                    op.conn.writer.write(op.data)
                    await op.conn.writer.drain()
                except (ConnectionError, OSError):
                    pass  # surfaces on the next Recv
            elif isinstance(op, Recv):
                value = await _recv(op.conn, timeout)
            elif isinstance(op, Close):
                op.conn.writer.close()
            else:
                raise TypeError(f"unknown operation {op!r}")
    except StopIteration as stop:
        outcome, phase, detail, renewal = stop.value
    finally:
        for c in conns:
            c.writer.close()
    return HandshakeResult(Outcome(outcome), (time.perf_counter() - start) * 1000.0, Phase(phase),
                           detail, renewal)
