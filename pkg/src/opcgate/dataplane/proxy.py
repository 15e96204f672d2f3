"""Transparent TCP proxy mode: client-facing listener, server-facing upstream."""

from __future__ import annotations

import asyncio
import logging
import socket
import struct

from .pipeline import PipelineConfig, PipelineMetrics, StreamInspector
from .table import ThumbprintTable

log = logging.getLogger(__name__)

READ_SIZE = 65536


class GatewayProxy:
    def __init__(self, table: ThumbprintTable, upstream: tuple[str, int],
                 config: PipelineConfig | None = None):
        self.table = table
        self.upstream = upstream
        self.config = config or PipelineConfig()
        self.metrics = PipelineMetrics()
        self.verdicts: list = []
        self.server: asyncio.base_events.Server | None = None
        self.connections = 0
        self._tasks: set = set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self.server = await asyncio.start_server(self._handle, host, port)
        return self.server.sockets[0].getsockname()[:2]

    async def close(self) -> None:
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        for t in list(self._tasks):
            t.cancel()

    async def _handle(self, c_reader: asyncio.StreamReader, c_writer: asyncio.StreamWriter):
        self.connections += 1
        task = asyncio.current_task()
        self._tasks.add(task)
        peer = c_writer.get_extra_info("peername")
        try:
            s_reader, s_writer = await asyncio.open_connection(*self.upstream)
        except OSError as exc:
            log.warning("upstream %s unreachable: %s", self.upstream, exc)
            c_writer.close()
            self._tasks.discard(task)
            return
        flow_up = f"{peer[0]}:{peer[1]}->{self.upstream[0]}:{self.upstream[1]}"
        flow_down = f"{self.upstream[0]}:{self.upstream[1]}->{peer[0]}:{peer[1]}"
        kw = dict(metrics=self.metrics, verdicts=self.verdicts)
        up = StreamInspector(self.table, self.config, flow_up, **kw)
        down = StreamInspector(self.table, self.config, flow_down, **kw)
        dropped = asyncio.Event()
        writers = (c_writer, s_writer)
        pumps = [
            asyncio.create_task(self._pump(c_reader, s_writer, up, dropped, writers)),
            asyncio.create_task(self._pump(s_reader, c_writer, down, dropped, writers)),
        ]
        try:
            await asyncio.gather(*pumps)
        finally:
            for w in writers:
                if not w.is_closing():
                    w.close()
            self._tasks.discard(task)

    async def _pump(self, reader, writer, inspector: StreamInspector, dropped: asyncio.Event,
                    writers) -> None:
        try:
            while True:
                data = await reader.read(READ_SIZE)
                if not data:
                    if not dropped.is_set() and writer.can_write_eof():
                        writer.write_eof()
                    return
                if dropped.is_set():
                    continue  # silent mode: swallow until the peer gives up
                out, verdict = inspector.feed(data)
                if not verdict.allowed:
                    log.info("drop %s: %s", inspector.flow, verdict)
                    dropped.set()
                    if self.config.drop_mode == "rst":
                        for w in writers:
                            self._terminate(w)
                        return
                    continue
                if out:
                    writer.write(out)
                    await writer.drain()
        except (ConnectionError, OSError):
            dropped.set()
            for w in writers:
                self._terminate(w)

    @staticmethod
    def _terminate(writer: asyncio.StreamWriter) -> None:
        if writer.is_closing():
            return
        sock = writer.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
        writer.transport.abort()
