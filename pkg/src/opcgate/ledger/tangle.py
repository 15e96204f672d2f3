"""DAG ledger state: signed tagged transactions approving two earlier ones."""

from __future__ import annotations

import base64
import hashlib
import json
import random
import struct
import threading
from collections import deque
from dataclasses import dataclass

from .actions import EmptyPayload
from .keys import AdminKeyring, SigningKey, verify_signature

DEFAULT_TAG = "certificate"
DEFAULT_CONFIRMATION_K = 2


class EmptyTangle(RuntimeError):
    pass


class InvalidTransaction(ValueError):
    pass


def _lp(data: bytes) -> bytes:
    return struct.pack("!I", len(data)) + data


def signing_bytes(tag: str, payload: bytes, approvals: tuple, timestamp: float) -> bytes:
    """Canonical byte string the sender signs: tag, payload, approvals, timestamp."""
    out = _lp(tag.encode("utf-8")) + _lp(payload) + struct.pack("!B", len(approvals))
    for a in approvals:
        out += _lp(bytes.fromhex(a))
    return out + struct.pack("!q", round(timestamp * 1_000_000))


@dataclass(frozen=True)
class LedgerTransaction:
    tag: str
    payload: bytes
    approvals: tuple
    timestamp: float
    sender_public_key: bytes = b""
    signature: bytes = b""

    @property
    def signed_bytes(self) -> bytes:
        return signing_bytes(self.tag, self.payload, self.approvals, self.timestamp)

    @property
    def id(self) -> str:
        h = hashlib.sha256(self.signed_bytes + _lp(self.sender_public_key) + _lp(self.signature))
        return h.hexdigest()

    def to_json(self) -> str:
        b64 = lambda b: base64.b64encode(b).decode("ascii")  # noqa: E731
        return json.dumps({
            "id": self.id,
            "tag": b64(self.tag.encode("utf-8")),
            "payload": b64(self.payload),
            "approvals": [b64(bytes.fromhex(a)) for a in self.approvals],
            "timestamp": round(self.timestamp * 1_000_000),
            "sender_public_key": b64(self.sender_public_key),
            "signature": b64(self.signature),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> LedgerTransaction:
        d = json.loads(line)
        unb = base64.b64decode
        tx = cls(
            unb(d["tag"]).decode("utf-8"),
            unb(d["payload"]),
            tuple(unb(a).hex() for a in d["approvals"]),
            d["timestamp"] / 1_000_000,
            unb(d["sender_public_key"]),
            unb(d["signature"]),
        )
        if "id" in d and d["id"] != tx.id:
            raise InvalidTransaction(f"id mismatch for {d['id']}")
        return tx


def make_transaction(tag: str, payload: bytes, approvals: tuple, timestamp: float,
                     key: SigningKey) -> LedgerTransaction:
    sig = key.sign(signing_bytes(tag, payload, approvals, timestamp))
    return LedgerTransaction(tag, payload, tuple(approvals), timestamp, key.public_key, sig)


def verify_sender(tx: LedgerTransaction, keyring: AdminKeyring) -> bool:
    return tx.sender_public_key in keyring and verify_signature(
        tx.sender_public_key, tx.signed_bytes, tx.signature
    )


GENESIS = LedgerTransaction("genesis", b"", (), 0.0)


class Tangle:
    """Transactions, tips, and a monotone confirmed set.

    A transaction is confirmed once at least ``k`` distinct later
    transactions approve it directly or transitively. Counts are kept
    incrementally: each insertion walks the unconfirmed part of its past
    cone once. Every ancestor of a transaction has strictly more approvers
    than it does, so the walk may stop at confirmed nodes.
    """

    def __init__(self, k: int = DEFAULT_CONFIRMATION_K, genesis: LedgerTransaction = GENESIS):
        self.k = k
        self.genesis = genesis
        self.transactions: dict[str, LedgerTransaction] = {genesis.id: genesis}
        self.approvers: dict[str, set] = {genesis.id: set()}
        self.tips: set = {genesis.id}
        self.confirmed: set = set()
        self.order: list[str] = [genesis.id]
        self._counts: dict[str, int] = {genesis.id: 0}
        self._fresh: list[str] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.transactions)

    def __contains__(self, tx_id: str) -> bool:
        return tx_id in self.transactions

    def attach(self, tx: LedgerTransaction) -> str:
        """Insert a transaction whose approvals already exist."""
        tx_id = tx.id
        with self._lock:
            if tx_id in self.transactions:
                raise InvalidTransaction(f"duplicate transaction {tx_id[:12]}")
            if len(tx.approvals) != 2:
                raise InvalidTransaction("non-genesis transactions approve exactly two parents")
            for parent in tx.approvals:
                if parent not in self.transactions:
                    raise InvalidTransaction(f"unknown parent {parent[:12]}")
            self.transactions[tx_id] = tx
            self.approvers[tx_id] = set()
            self._counts[tx_id] = 0
            self.order.append(tx_id)
            self.tips.add(tx_id)
            for parent in set(tx.approvals):
                self.approvers[parent].add(tx_id)
                self.tips.discard(parent)
            self._propagate(tx)
        return tx_id

    def _propagate(self, tx: LedgerTransaction) -> None:
        seen = set()
        queue = deque(set(tx.approvals))
        while queue:
            node = queue.popleft()
            if node in seen or node in self.confirmed:
                continue
            seen.add(node)
            self._counts[node] += 1
            if self._counts[node] >= self.k:
                self.confirmed.add(node)
                self._fresh.append(node)
            queue.extend(self.transactions[node].approvals)

    def confirm_step(self) -> list[str]:
        """Ids confirmed since the previous call, in confirmation order."""
        with self._lock:
            fresh, self._fresh = self._fresh, []
        return fresh

    def approver_count(self, tx_id: str) -> int:
        return self._counts[tx_id] if tx_id not in self.confirmed else max(self._counts[tx_id], self.k)

    def select_tips(self, rng: random.Random | None = None, candidates=None) -> tuple[str, str]:
        rng = rng or random
        pool = sorted(self.tips if candidates is None else candidates)
        if not pool:
            raise EmptyTangle("no tips to approve")
        if len(pool) == 1:
            return pool[0], pool[0]
        a, b = rng.sample(pool, 2)
        return a, b

    def export_lines(self):
        for tx_id in self.order[1:]:
            yield self.transactions[tx_id].to_json()


def select_tips(tangle: Tangle, rng: random.Random | None = None) -> tuple[str, str]:
    return tangle.select_tips(rng)


def confirm_step(tangle: Tangle) -> list[str]:
    return tangle.confirm_step()


def submit_transaction(tangle: Tangle, payload: bytes, key: SigningKey, timestamp: float,
                       rng: random.Random | None = None, tag: str = DEFAULT_TAG) -> str:
    """Select tips, sign, and attach in one step (no network delay)."""
    if not payload:
        raise EmptyPayload("empty transaction payload")
    tx = make_transaction(tag, payload, tangle.select_tips(rng), timestamp, key)
    return tangle.attach(tx)
