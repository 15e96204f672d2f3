"""Time-driven ledger services with a shared subscription contract.

``L1Ledger`` attaches signed transactions to a tangle. Other participants
issue background transactions while anything is unconfirmed; they only see
what has gossiped to them, so confirmation latency grows with link delay.
Subscribers get each matching transaction once, after it confirms and
crosses the link to the listener, in submission order.

``L2Ledger`` runs the registry contract behind a small committee: a call
executes after a few consensus rounds and the emitted event is pushed to
listeners straight away.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import os
import random
from collections import deque
from dataclasses import dataclass, field

from ..certificates import CertificateRecord, hash_thumbprint
from .actions import ActionKind, CertificateAction, EmptyPayload
from .keys import AdminKeyring, SigningKey, verify_signature
from .registry import ExpiredAtInsertion, Registry, RegistryEvent, Unauthorized
from .simnet import LinkModel, Scheduler, exponential, preset
from .tangle import DEFAULT_TAG, LedgerTransaction, Tangle, make_transaction, verify_sender

BACKGROUND_TAG = "background"


@dataclass
class LedgerEvent:
    seq: int
    layer: str
    event_id: str
    tag: str
    action: CertificateAction
    sender_public_key: bytes
    signed_bytes: bytes
    signature: bytes
    submitted_at: float
    confirmed: bool = True
    delivered_at: float | None = None
    noop: bool = False

    @property
    def thumbprint(self) -> bytes:
        return hash_thumbprint(self.action.certificate)

    def verify(self, keyring: AdminKeyring) -> bool:
        if self.action.kind is ActionKind.EXPIRE:
            return True  # produced by the registry clock, not by a caller
        return keyring.verify(self.sender_public_key, self.signed_bytes, self.signature)


class Subscription:
    def __init__(self, tag: str, keyring: AdminKeyring | None = None):
        self.tag = tag
        self.keyring = keyring
        self._inbox: deque = deque()
        self.delivered: list[LedgerEvent] = []
        self._callbacks: list = []

    def accepts(self, tag: str, event: LedgerEvent) -> bool:
        if tag != self.tag:
            return False
        return self.keyring is None or event.verify(self.keyring)

    def add_callback(self, fn) -> None:
        self._callbacks.append(fn)

    def _deliver(self, event: LedgerEvent) -> None:
        self.delivered.append(event)
        self._inbox.append(event)
        for fn in list(self._callbacks):
            fn(event)

    def poll(self) -> list[LedgerEvent]:
        out = list(self._inbox)
        self._inbox.clear()
        return out


@dataclass
class _Ordering:
    """Per-subscriber in-order release keyed by submission sequence."""

    expected: deque = field(default_factory=deque)
    arrived: dict = field(default_factory=dict)


class L1Ledger:
    layer = "L1"

    def __init__(self, scheduler: Scheduler | None = None, link: LinkModel | str = "zero",
                 rng: random.Random | None = None, k: int = 2, background_rate: float = 1.0,
                 gossip_hops: int = 4, tangle: Tangle | None = None):
        self.scheduler = scheduler or Scheduler()
        self.link = preset(link)
        self.rng = rng or random.Random(0)
        self.tangle = tangle or Tangle(k=k)
        self.background_rate = background_rate
        self.gossip_hops = gossip_hops
        self._bg_key = SigningKey.from_seed(hashlib.sha256(b"background-issuer").digest())
        self._visible: dict[str, float] = {self.tangle.genesis.id: 0.0}
        self._recent: deque = deque()
        self._pending: set = set()
        self._bg_running = False
        self._subs: list[tuple[Subscription, _Ordering]] = []
        self._events: dict[str, LedgerEvent] = {}
        self._seq = itertools.count(1)
        self.event_log: list[LedgerEvent] = []
        self.attach_time: dict[str, float] = {}
        self.confirm_time: dict[str, float] = {}

    @property
    def now(self) -> float:
        return self.scheduler.now

    # -- views ------------------------------------------------------------------

    def _view_tips(self, now: float) -> set:
        horizon = 2.0 + 10 * self.gossip_hops * self.link.mean
        while self._recent and self._recent[0][0] < now - horizon:
            self._recent.popleft()
        candidates = set(self.tangle.tips) | {tx for _, tx in self._recent}
        out = set()
        for tx in candidates:
            if self._visible.get(tx, float("inf")) > now:
                continue
            if any(self._visible.get(a, float("inf")) <= now for a in self.tangle.approvers[tx]):
                continue
            out.add(tx)
        if not out:
            out = {self.tangle.genesis.id}
        return out

    def _gossip(self, size: int) -> float:
        return sum(self.link.sample(self.rng, size) for _ in range(self.gossip_hops))

    def _attach(self, tx: LedgerTransaction) -> None:
        now = self.now
        parents = [p for p in set(tx.approvals) if p in self.tangle.tips]
        tx_id = self.tangle.attach(tx)
        for p in parents:
            self._recent.append((now, p))
        self.attach_time[tx_id] = now
        self._visible[tx_id] = now + self._gossip(len(tx.payload))
        for done in self.tangle.confirm_step():
            self.confirm_time[done] = now
            self._pending.discard(done)
            event = self._events.get(done)
            if event is not None:
                event.confirmed = True
                for sub, order in self._subs:
                    if sub.accepts(event.tag, event):
                        size = len(self.tangle.transactions[done].payload)
                        delay = self._gossip(size) + self.link.sample(self.rng, size)
                        self.scheduler.call_later(delay, self._arrive, sub, order, done)
        if tx.tag != BACKGROUND_TAG:
            self._pending.add(tx_id)
        self._kick_background()

    def _kick_background(self) -> None:
        if self._pending and not self._bg_running and self.background_rate > 0:
            self._bg_running = True
            self.scheduler.call_later(exponential(self.rng, self.background_rate), self._background)

    def _background(self) -> None:
        self._bg_running = False
        if not self._pending:
            return
        now = self.now
        tips = self.tangle.select_tips(self.rng, self._view_tips(now))
        payload = self.rng.getrandbits(64).to_bytes(8, "big")
        self._attach(make_transaction(BACKGROUND_TAG, payload, tips, now, self._bg_key))

    def _arrive(self, sub: Subscription, order: _Ordering, tx_id: str) -> None:
        order.arrived[tx_id] = self.now
        while order.expected and order.expected[0] in order.arrived:
            head = order.expected.popleft()
            base = self._events[head]
            event = LedgerEvent(**{**base.__dict__, "delivered_at": order.arrived.pop(head)})
            sub._deliver(event)

    # -- public contract ----------------------------------------------------------

    def submit(self, action: CertificateAction, key: SigningKey, tag: str = DEFAULT_TAG,
               uplink_delay: float | None = None) -> str:
        """Sign and send; the transaction attaches after the uplink delay."""
        payload = action.encode()
        if not payload:
            raise EmptyPayload("empty payload")
        now = self.now
        tips = self.tangle.select_tips(self.rng, self._view_tips(now))
        tx = make_transaction(tag, payload, tips, now, key)
        stamp = now
        while tx.id in self._events or tx.id in self.tangle:
            # identical resubmission in the same instant: deterministic signatures collide
            stamp += 1e-6
            tx = make_transaction(tag, payload, tips, stamp, key)
        tx_id = tx.id
        event = LedgerEvent(next(self._seq), self.layer, tx_id, tag, action, tx.sender_public_key,
                            tx.signed_bytes, tx.signature, now, confirmed=False)
        self._events[tx_id] = event
        self.event_log.append(event)
        for sub, order in self._subs:
            if sub.accepts(tag, event):
                order.expected.append(tx_id)
        if uplink_delay is None:
            uplink_delay = self.link.sample(self.rng, len(payload))
        self.scheduler.call_later(uplink_delay, self._attach, tx)
        return tx_id

    def subscribe(self, tag: str = DEFAULT_TAG, keyring: AdminKeyring | None = None) -> Subscription:
        sub = Subscription(tag, keyring)
        self._subs.append((sub, _Ordering()))
        return sub

    def settle(self, max_time: float = 3600.0) -> None:
        """Run the simulation until every submission is confirmed and delivered."""
        self.scheduler.run(until=None if max_time is None else self.now + max_time)

    def events_since(self, seq: int) -> list[LedgerEvent]:
        return [e for e in self.event_log if e.seq > seq and e.confirmed]

    def get_all_certificates(self, keyring: AdminKeyring, at: float | None = None) -> list[CertificateRecord]:
        """Fold confirmed, authorized actions in submission order."""
        at = self.now if at is None else at
        valid: dict[bytes, CertificateRecord] = {}
        for e in self.event_log:
            if not e.confirmed or e.tag != DEFAULT_TAG or not e.verify(keyring):
                continue
            rec = CertificateRecord(e.action.certificate, e.action.expire_date)
            if e.action.kind is ActionKind.ISSUE:
                valid[rec.thumbprint] = rec
            else:
                valid.pop(rec.thumbprint, None)
        live = [r for r in valid.values() if r.expire_date is None or r.expire_date >= at]
        return sorted(live, key=lambda r: r.thumbprint)

    def transaction(self, tx_id: str) -> LedgerTransaction:
        return self.tangle.transactions[tx_id]

    def verify(self, tx_id: str, keyring: AdminKeyring) -> bool:
        return verify_sender(self.tangle.transactions[tx_id], keyring)

    # -- persistence ----------------------------------------------------------------

    def export_lines(self):
        return self.tangle.export_lines()

    def import_lines(self, lines) -> int:
        """Re-attach exported transactions; returns how many were added."""
        n = 0
        for line in lines:
            line = line.strip()
            if not line:
                continue
            tx = LedgerTransaction.from_json(line)
            if tx.id in self.tangle:
                continue
            if tx.tag != BACKGROUND_TAG:
                try:
                    action = CertificateAction.decode(tx.payload)
                except ValueError:
                    action = None
                if action is not None:
                    event = LedgerEvent(next(self._seq), self.layer, tx.id, tx.tag, action,
                                        tx.sender_public_key, tx.signed_bytes, tx.signature,
                                        tx.timestamp, confirmed=False)
                    self._events[tx.id] = event
                    self.event_log.append(event)
                    for sub, order in self._subs:
                        if sub.accepts(tx.tag, event):
                            order.expected.append(tx.id)
            self.scheduler.now = max(self.scheduler.now, tx.timestamp)
            self._attach(tx)
            self._visible[tx.id] = self.now
            n += 1
        return n


@dataclass(frozen=True)
class SignedCall:
    action: CertificateAction
    caller_key: bytes
    signature: bytes
    nonce: bytes

    @property
    def signed_bytes(self) -> bytes:
        return b"registry-call\x00" + self.nonce + self.action.encode()

    @property
    def id(self) -> str:
        return hashlib.sha256(self.signed_bytes + self.signature).hexdigest()

    @classmethod
    def make(cls, action: CertificateAction, key: SigningKey, nonce: bytes | None = None) -> SignedCall:
        nonce = nonce or os.urandom(16)
        body = b"registry-call\x00" + nonce + action.encode()
        return cls(action, key.public_key, key.sign(body), nonce)

    def valid_signature(self) -> bool:
        return verify_signature(self.caller_key, self.signed_bytes, self.signature)


class L2Ledger:
    layer = "L2"

    def __init__(self, keyring: AdminKeyring, scheduler: Scheduler | None = None,
                 link: LinkModel | str = "zero", rng: random.Random | None = None,
                 committee: int = 4, rounds: int = 2, exec_time: float = 0.25):
        self.scheduler = scheduler or Scheduler()
        self.link = preset(link)
        self.rng = rng or random.Random(0)
        self.registry = Registry(keyring, self.scheduler.now)
        self.committee = committee
        self.rounds = rounds
        self.exec_time = exec_time
        self._subs: list[Subscription] = []
        self._seq = itertools.count(1)
        self.event_log: list[LedgerEvent] = []
        self.calls: list[SignedCall] = []
        self.rejected: list[tuple[SignedCall, str]] = []
        self._current: SignedCall | None = None
        self._last_delivery: dict[int, float] = {}
        self._last_exec: dict[bytes, float] = {}
        self.registry.on_event(self._on_registry_event)

    @property
    def now(self) -> float:
        return self.scheduler.now

    def _consensus_delay(self, size: int) -> float:
        total = 0.0
        for _ in range(self.rounds):
            total += max(self.link.sample(self.rng, size) + self.link.sample(self.rng)
                         for _ in range(self.committee))
        return total + self.exec_time

    def submit(self, action: CertificateAction, key: SigningKey, tag: str = DEFAULT_TAG,
               uplink_delay: float | None = None) -> str:
        call = SignedCall.make(action, key)
        size = len(action.certificate)
        if uplink_delay is None:
            uplink_delay = self.link.sample(self.rng, size)
        # calls from one sender execute in submission order, as account nonces would enforce
        when = max(self.now + uplink_delay + self._consensus_delay(size),
                   self._last_exec.get(call.caller_key, 0.0))
        self._last_exec[call.caller_key] = when
        self.scheduler.call_at(when, self._execute, call, self.now)
        return call.id

    def _execute(self, call: SignedCall, submitted_at: float) -> None:
        self.registry.advance(self.now)
        if not call.valid_signature():
            self.rejected.append((call, "bad signature"))
            return
        self._current = call
        self._submitted_at = submitted_at
        try:
            event = self.registry.apply(call.action, call.caller_key)
        except (Unauthorized, ExpiredAtInsertion) as exc:
            self.rejected.append((call, type(exc).__name__))
            return
        finally:
            self._current = None
        self.calls.append(call)
        if event.kind is ActionKind.ISSUE:
            self.scheduler.call_at(event.expire_date + 1e-6, self._tick)

    def _tick(self) -> None:
        self.registry.advance(self.now)

    def _on_registry_event(self, ev: RegistryEvent) -> None:
        call = self._current
        if call is not None:
            action, key, signed, sig, eid = (call.action, call.caller_key, call.signed_bytes,
                                             call.signature, call.id)
            submitted = self._submitted_at
        else:
            action = CertificateAction(ActionKind.EXPIRE, ev.certificate, ev.expire_date)
            key, signed, sig = b"", b"", b""
            eid = f"expire-{ev.thumbprint.hex()}-{ev.at}"
            submitted = ev.at
        event = LedgerEvent(next(self._seq), self.layer, eid, DEFAULT_TAG, action, key, signed, sig,
                            submitted, confirmed=True, noop=ev.noop)
        self.event_log.append(event)
        for sub in self._subs:
            if sub.accepts(DEFAULT_TAG, event):
                # per-subscriber FIFO: a later event never overtakes an earlier one
                when = max(self.now + self.link.sample(self.rng), self._last_delivery.get(id(sub), 0.0))
                self._last_delivery[id(sub)] = when
                self.scheduler.call_at(when, self._deliver, sub, event)

    def _deliver(self, sub: Subscription, event: LedgerEvent) -> None:
        sub._deliver(LedgerEvent(**{**event.__dict__, "delivered_at": self.now}))

    def subscribe(self, tag: str = DEFAULT_TAG, keyring: AdminKeyring | None = None) -> Subscription:
        sub = Subscription(tag, keyring)
        self._subs.append(sub)
        return sub

    def settle(self, max_time: float | None = 3600.0) -> None:
        self.scheduler.run(until=None if max_time is None else self.now + max_time)

    def events_since(self, seq: int) -> list[LedgerEvent]:
        return [e for e in self.event_log if e.seq > seq]

    def get_all_certificates(self, keyring: AdminKeyring | None = None,
                             at: float | None = None) -> list[CertificateRecord]:
        at = self.now if at is None else at
        self.registry.advance(max(at, self.registry.clock))
        return self.registry.get_all_certificates()

    def export_lines(self):
        for call in self.calls:
            yield json.dumps({
                "action": base64.b64encode(call.action.encode()).decode(),
                "caller_key": base64.b64encode(call.caller_key).decode(),
                "signature": base64.b64encode(call.signature).decode(),
                "nonce": base64.b64encode(call.nonce).decode(),
            }, sort_keys=True)

    def import_lines(self, lines) -> int:
        n = 0
        known = {c.id for c in self.calls}
        for line in lines:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            call = SignedCall(CertificateAction.decode(base64.b64decode(d["action"])),
                              base64.b64decode(d["caller_key"]), base64.b64decode(d["signature"]),
                              base64.b64decode(d["nonce"]))
            if call.id in known:
                continue
            self._execute(call, self.now)
            known.add(call.id)
            n += 1
        return n
