"""Long-running gateway: proxy + controller + ledger follower."""

from __future__ import annotations

import asyncio
import errno
import json
import logging
import time

from .config import Config, parse_address
from .controller import Controller
from .dataplane.proxy import GatewayProxy
from .dataplane.table import ThumbprintTable
from .ledger import store
from .ledger.keys import AdminKeyring

log = logging.getLogger("opcgate.gateway")


class PortInUse(OSError):
    pass


LEDGER_ERRORS = (OSError, ValueError, KeyError, TypeError)


class Gateway:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.table = ThumbprintTable(cfg.gateway.table_capacity)
        self.keyring = AdminKeyring(cfg.admin_keys())
        self.controller = Controller(self.table, self.keyring, cfg.resolve(cfg.controller.snapshot))
        self.ledger_path = cfg.resolve(cfg.ledger.path)
        self.ledger = None
        self.proxy = GatewayProxy(self.table, parse_address(cfg.gateway.upstream), cfg.gateway.pipeline())
        self.address: tuple | None = None
        self.metrics_address: tuple | None = None
        self._metrics_server = None
        self._stop = asyncio.Event()
        self._mtime = None
        self._last_sweep = 0.0

    # -- ledger following ---------------------------------------------------------

    def _open_ledger(self) -> bool:
        self._mtime = self._stat()
        ledger = store.new_ledger(self.cfg.ledger.layer, self.keyring, self.cfg.ledger.link,
                                  self.cfg.ledger.seed)
        try:
            store.load_into(ledger, self.ledger_path)
        except LEDGER_ERRORS as exc:
            self.ledger = None
            log.error("ledger %s unreadable: %s", self.ledger_path, exc)
            return False
        store.flush(ledger)
        self.ledger = ledger
        return True

    def _stat(self):
        try:
            st = self.ledger_path.stat()
        except FileNotFoundError:
            return None
        return (st.st_mtime_ns, st.st_size)

    def poll_ledger(self) -> int:
        """Pick up new ledger lines written by admin commands."""
        stamp = self._stat()
        added = 0
        if self.ledger is None:
            if stamp != self._mtime and self._open_ledger():
                self.controller.sync_full(self.ledger, time.time())
                self.controller.subscribe_to(self.ledger)
        elif stamp != self._mtime:
            self._mtime = stamp
            try:
                added = store.load_into(self.ledger, self.ledger_path)
            except LEDGER_ERRORS as exc:
                # keep the last verified table; new lines are not trusted
                self.controller.alerts.append({"action": "poll", "result": "LedgerUnreadable",
                                               "detail": str(exc)})
                log.error("ledger %s unreadable: %s", self.ledger_path, exc)
            store.flush(self.ledger)
        if self.controller.state.pending_retries:
            self.controller.retry_pending()
        now = time.time()
        if now - self._last_sweep >= self.cfg.controller.expire_interval:
            self._last_sweep = now
            self.controller.expire_sweep(now)
        return added

    # -- metrics ----------------------------------------------------------------------

    def metrics(self) -> dict:
        return {
            "table_entries": len(self.table),
            "table_generation": self.table.generation,
            "connections": self.proxy.connections,
            "verdicts": [v.as_dict() for v in self.proxy.verdicts[-100:]],
            "verdict_count": len(self.proxy.verdicts),
            "packets": self.proxy.metrics.aggregates(),
            "pending_retries": len(self.controller.state.pending_retries),
            "alerts": self.controller.alerts[-20:],
        }

    def flush_metrics(self) -> None:
        path = self.cfg.resolve(self.cfg.gateway.metrics_path)
        if path is not None:
            path.write_text(json.dumps(self.metrics(), indent=1, default=str))

    async def _serve_metrics(self, reader, writer):
        try:
            await asyncio.wait_for(reader.readuntil(b"\r\n\r\n"), 5)
        except (asyncio.TimeoutError, asyncio.IncompleteReadError, asyncio.LimitOverrunError):
            pass
        body = json.dumps(self.metrics(), default=str).encode()
        writer.write(b"HTTP/1.0 200 OK\r\nContent-Type: application/json\r\n"
                     b"Content-Length: " + str(len(body)).encode() + b"\r\n\r\n" + body)
        try:
            await writer.drain()
        finally:
            writer.close()

    # -- lifecycle ----------------------------------------------------------------------

    async def start(self) -> tuple:
        self._open_ledger()
        self.controller.start(self.ledger, time.time())  # no ledger: empty table, fail-closed
        if self.ledger is not None:
            self.controller.subscribe_to(self.ledger)
        host, port = parse_address(self.cfg.gateway.listen)
        try:
            self.address = await self.proxy.start(host, port)
            if self.cfg.gateway.metrics_listen:
                mh, mp = parse_address(self.cfg.gateway.metrics_listen)
                self._metrics_server = await asyncio.start_server(self._serve_metrics, mh, mp)
                self.metrics_address = self._metrics_server.sockets[0].getsockname()[:2]
        except OSError as exc:
            await self.proxy.close()
            if exc.errno == errno.EADDRINUSE:
                raise PortInUse(str(exc)) from exc
            raise
        log.info("gateway listening on %s:%s, %d trusted thumbprints", *self.address, len(self.table))
        return self.address

    def stop(self) -> None:
        self._stop.set()

    async def serve(self) -> None:
        """Follow the ledger until ``stop`` is called, then shut down cleanly."""
        try:
            while not self._stop.is_set():
                self.poll_ledger()
                try:
                    await asyncio.wait_for(self._stop.wait(), self.cfg.ledger.poll_interval)
                except asyncio.TimeoutError:
                    pass
        finally:
            await self.close()

    async def close(self) -> None:
        await self.proxy.close()
        if self._metrics_server is not None:
            self._metrics_server.close()
            await self._metrics_server.wait_closed()
        self.flush_metrics()
