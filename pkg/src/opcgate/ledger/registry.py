"""Contract-style certificate registry (the L2 state machine).

Holds the currently valid certificates. Every state change emits an event
to the registered listeners; expired entries are purged whenever the clock
moves forward.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from ..certificates import CertificateRecord, hash_thumbprint
from .actions import ActionKind, CertificateAction
from .keys import AdminKeyring


class Unauthorized(PermissionError):
    pass


class ExpiredAtInsertion(ValueError):
    pass


@dataclass(frozen=True)
class RegistryEvent:
    kind: ActionKind
    thumbprint: bytes
    certificate: bytes
    expire_date: float | None
    at: float
    noop: bool = False


class Registry:
    def __init__(self, keyring: AdminKeyring, clock: float = 0.0):
        if not keyring.authorized:
            raise ValueError("registry needs at least one administrator key")
        self.keyring = keyring
        self.clock = clock
        self.valid: dict[bytes, CertificateRecord] = {}
        self.action_log: list[tuple[float, CertificateAction]] = []
        self._listeners: list = []
        self._lock = threading.RLock()

    def on_event(self, callback) -> None:
        self._listeners.append(callback)

    def _emit(self, event: RegistryEvent) -> RegistryEvent:
        for cb in list(self._listeners):
            cb(event)
        return event

    def advance(self, clock: float) -> list[RegistryEvent]:
        """Move the registry clock forward and purge what expired."""
        with self._lock:
            if clock < self.clock:
                raise ValueError("registry clock cannot go backwards")
            self.clock = clock
            gone = sorted(tp for tp, rec in self.valid.items() if rec.expire_date < clock)
            events = []
            for tp in gone:
                rec = self.valid.pop(tp)
                events.append(self._emit(RegistryEvent(ActionKind.EXPIRE, tp, rec.der,
                                                       rec.expire_date, clock)))
            return events

    def _authorize(self, caller_key: bytes) -> None:
        if caller_key not in self.keyring:
            raise Unauthorized("caller is not an administrator")

    def add_certificate(self, cert: bytes, expire_date: float, caller_key: bytes) -> RegistryEvent:
        with self._lock:
            self._authorize(caller_key)
            if expire_date < self.clock:
                raise ExpiredAtInsertion(f"expiry {expire_date} before registry clock {self.clock}")
            action = CertificateAction.issue(cert, expire_date)
            rec = CertificateRecord(action.certificate, action.expire_date)
            self.valid[rec.thumbprint] = rec
            self.action_log.append((self.clock, action))
            return self._emit(RegistryEvent(ActionKind.ISSUE, rec.thumbprint, rec.der,
                                            rec.expire_date, self.clock))

    def revoke_certificate(self, cert: bytes, caller_key: bytes) -> RegistryEvent:
        with self._lock:
            self._authorize(caller_key)
            action = CertificateAction.revoke(cert)
            tp = hash_thumbprint(action.certificate)
            noop = self.valid.pop(tp, None) is None
            self.action_log.append((self.clock, action))
            return self._emit(RegistryEvent(ActionKind.REVOKE, tp, action.certificate, None,
                                            self.clock, noop=noop))

    def apply(self, action: CertificateAction, caller_key: bytes) -> RegistryEvent:
        if action.kind is ActionKind.ISSUE:
            return self.add_certificate(action.certificate, action.expire_date, caller_key)
        if action.kind is ActionKind.REVOKE:
            return self.revoke_certificate(action.certificate, caller_key)
        raise ValueError(f"cannot submit {action.kind}")

    def get_all_certificates(self) -> list[CertificateRecord]:
        with self._lock:
            live = [r for r in self.valid.values() if r.expire_date >= self.clock]
        return sorted(live, key=lambda r: r.thumbprint)


def add_certificate(registry: Registry, cert: bytes, expire_date: float, caller_key: bytes):
    return registry.add_certificate(cert, expire_date, caller_key)


def revoke_certificate(registry: Registry, cert: bytes, caller_key: bytes):
    return registry.revoke_certificate(cert, caller_key)


def get_all_certificates(registry: Registry) -> list[CertificateRecord]:
    return registry.get_all_certificates()
