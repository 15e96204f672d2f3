"""Keeps the switch's thumbprint table in step with the certificate ledger."""

from __future__ import annotations

import json
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .certificates import CertificateRecord, EmptyCertificate, hash_thumbprint
from .dataplane.table import TableFull, ThumbprintTable
from .ledger.actions import ActionKind
from .ledger.keys import AdminKeyring

__all__ = [
    "CertificateRecord",
    "Controller",
    "ControllerState",
    "EmptyCertificate",
    "RegistryUnavailable",
    "hash_thumbprint",
]

log = logging.getLogger("opcgate.controller")

SNAPSHOT_FORMAT = "opcgate-controller-snapshot"
SNAPSHOT_VERSION = 1


class RegistryUnavailable(RuntimeError):
    pass


@dataclass
class KnownEntry:
    thumbprint: bytes
    expire_date: float | None = None


@dataclass
class ControllerState:
    known: dict = field(default_factory=dict)
    last_event_id: int = 0
    pending_retries: deque = field(default_factory=deque)


@dataclass
class Mutation:
    op: str  # "install" | "remove" | "none"
    thumbprint: bytes
    result: str = "ok"


@dataclass
class ReconciliationReport:
    installed: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    failed: list = field(default_factory=list)


class Controller:
    def __init__(self, table: ThumbprintTable, keyring: AdminKeyring, snapshot_path=None):
        self.table = table
        self.keyring = keyring
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.state = ControllerState()
        self.alerts: list[dict] = []

    def _alert(self, level: int, **fields) -> None:
        self.alerts.append(fields)
        log.log(level, json.dumps(fields, sort_keys=True, default=str))

    # -- table mutations ------------------------------------------------------------

    def _install(self, entry: KnownEntry, event_id=None) -> Mutation:
        try:
            self.table.install(entry.thumbprint)
        except TableFull:
            self.state.pending_retries.append(entry)
            self._alert(logging.ERROR, event=event_id, action="install",
                        thumbprint=entry.thumbprint.hex(), result="TableFull")
            return Mutation("install", entry.thumbprint, "TableFull")
        self.state.known[entry.thumbprint] = entry
        return Mutation("install", entry.thumbprint)

    def _remove(self, thumbprint: bytes) -> Mutation:
        self.table.remove(thumbprint)
        self.state.known.pop(thumbprint, None)
        self.state.pending_retries = deque(e for e in self.state.pending_retries
                                           if e.thumbprint != thumbprint)
        return Mutation("remove", thumbprint)

    # -- event application -----------------------------------------------------------

    def on_ledger_event(self, event) -> list[Mutation]:
        """Apply one ledger event: issue installs, revoke/expire removes."""
        if not event.verify(self.keyring):
            self._alert(logging.WARNING, event=event.event_id, action=event.action.kind.value,
                        result="Unauthorized")
            return []
        self.state.last_event_id = max(self.state.last_event_id, event.seq)
        tp = hash_thumbprint(event.action.certificate)
        if event.action.kind is ActionKind.ISSUE:
            prev = self.state.known.get(tp)
            if prev is not None:
                prev.expire_date = event.action.expire_date
                mutations = [Mutation("none", tp, "already-present")]
            else:
                mutations = [self._install(KnownEntry(tp, event.action.expire_date), event.event_id)]
        else:
            mutations = [self._remove(tp)]
        for m in mutations:
            log.info(json.dumps({"event": event.event_id, "action": event.action.kind.value,
                                 "thumbprint": tp.hex(), "result": m.result}, sort_keys=True))
        self._persist()
        return mutations

    def retry_pending(self) -> list[Mutation]:
        todo, self.state.pending_retries = list(self.state.pending_retries), deque()
        out = [self._install(e) for e in todo]
        self._persist()
        return out

    def subscribe_to(self, ledger, tag: str = "certificate"):
        sub = ledger.subscribe(tag, self.keyring)
        sub.add_callback(self.on_ledger_event)
        return sub

    # -- reconciliation ----------------------------------------------------------------

    def sync_full(self, source, clock: float | None = None) -> ReconciliationReport:
        """Make the table equal to the thumbprints of the source's valid set."""
        if source is None:
            raise RegistryUnavailable("no registry configured")
        try:
            records = source.get_all_certificates(self.keyring, clock)
        except (OSError, ConnectionError) as exc:
            raise RegistryUnavailable(str(exc)) from exc
        wanted = {r.thumbprint: KnownEntry(r.thumbprint, r.expire_date) for r in records}
        report = ReconciliationReport()
        for tp in sorted(set(self.table.entries) - set(wanted)):
            self._remove(tp)
            report.removed.append(tp)
        for tp in sorted(set(self.state.known) - set(wanted)):
            self.state.known.pop(tp, None)
        self.state.pending_retries.clear()
        for tp in sorted(wanted):
            if tp in self.table:
                self.state.known[tp] = wanted[tp]
                continue
            m = self._install(wanted[tp])
            (report.installed if m.result == "ok" else report.failed).append(tp)
        events = getattr(source, "event_log", None)
        if events:
            self.state.last_event_id = max(self.state.last_event_id, max(e.seq for e in events))
        self._persist()
        return report

    def expire_sweep(self, clock: float) -> list[bytes]:
        gone = sorted(tp for tp, e in self.state.known.items()
                      if e.expire_date is not None and e.expire_date < clock)
        for tp in gone:
            self._remove(tp)
        if gone:
            self._persist()
        return gone

    def start(self, source, clock: float | None = None) -> ReconciliationReport | None:
        """Load the snapshot, then reconcile; an unreachable source leaves the table empty."""
        self.load_snapshot()
        try:
            return self.sync_full(source, clock)
        except RegistryUnavailable as exc:
            self.table.replace(())
            self.state.known.clear()
            self._alert(logging.ERROR, action="sync", result="RegistryUnavailable", detail=str(exc))
            return None

    # -- snapshot ------------------------------------------------------------------------

    def _persist(self) -> None:
        if self.snapshot_path is not None:
            self.save_snapshot()

    def save_snapshot(self, path=None) -> None:
        path = Path(path or self.snapshot_path)
        doc = {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "last_event_id": self.state.last_event_id,
            "entries": [
                {"thumbprint": tp.hex(), "expire": e.expire_date}
                for tp, e in sorted(self.state.known.items())
            ],
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, path)

    def load_snapshot(self, path=None) -> bool:
        path = Path(path) if path else self.snapshot_path
        if path is None or not path.exists():
            return False
        doc = json.loads(path.read_text())
        if doc.get("format") != SNAPSHOT_FORMAT or doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot header")
        entries = {bytes.fromhex(e["thumbprint"]): KnownEntry(bytes.fromhex(e["thumbprint"]),
                                                             e["expire"])
                   for e in doc["entries"]}
        self.table.replace(entries)
        self.state.known = entries
        self.state.last_event_id = doc["last_event_id"]
        return True
