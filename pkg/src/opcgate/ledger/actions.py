"""Certificate actions and their canonical byte encoding.

Payload layout (big-endian)::

    version u8 = 1 | kind u8 (0 issue, 1 revoke) | expire_us i64 (-1 for revoke)
    | der_length u32 | der
"""

from __future__ import annotations

import base64
import enum
import struct
from dataclasses import dataclass

_HEAD = struct.Struct("!BBqI")
VERSION = 1


class ActionKind(str, enum.Enum):
    ISSUE = "issue"
    REVOKE = "revoke"
    EXPIRE = "expire"  # emitted by the registry, never submitted


class EmptyPayload(ValueError):
    pass


class CertificateUnparseable(ValueError):
    pass


@dataclass(frozen=True)
class CertificateAction:
    kind: ActionKind
    certificate: bytes
    expire_date: float | None = None

    def __post_init__(self):
        if not self.certificate:
            raise EmptyPayload("certificate action without certificate bytes")
        if self.kind is ActionKind.ISSUE and self.expire_date is None:
            raise ValueError("issue actions carry an expiry")
        if self.kind is ActionKind.REVOKE and self.expire_date is not None:
            raise ValueError("revoke actions carry no expiry")

    @classmethod
    def issue(cls, der: bytes, expire_date: float) -> CertificateAction:
        return cls(ActionKind.ISSUE, bytes(der), float(expire_date))

    @classmethod
    def revoke(cls, der: bytes) -> CertificateAction:
        return cls(ActionKind.REVOKE, bytes(der))

    def encode(self) -> bytes:
        kind = {ActionKind.ISSUE: 0, ActionKind.REVOKE: 1, ActionKind.EXPIRE: 2}[self.kind]
        expire = -1 if self.expire_date is None else round(self.expire_date * 1_000_000)
        return _HEAD.pack(VERSION, kind, expire, len(self.certificate)) + self.certificate

    @classmethod
    def decode(cls, data: bytes) -> CertificateAction:
        if len(data) < _HEAD.size:
            raise EmptyPayload("payload shorter than action header")
        version, kind, expire, n = _HEAD.unpack_from(data)
        if version != VERSION or kind > 2 or len(data) != _HEAD.size + n:
            raise ValueError("malformed certificate action payload")
        return cls(
            [ActionKind.ISSUE, ActionKind.REVOKE, ActionKind.EXPIRE][kind],
            bytes(data[_HEAD.size :]),
            None if expire == -1 else expire / 1_000_000,
        )


def load_certificate_bytes(data: bytes) -> bytes:
    """Accept DER or PEM input and return DER."""
    stripped = data.strip()
    if stripped.startswith(b"-----BEGIN"):
        lines = [ln for ln in stripped.splitlines() if ln and not ln.startswith(b"-----")]
        try:
            der = base64.b64decode(b"".join(lines), validate=True)
        except ValueError as exc:
            raise CertificateUnparseable(f"bad PEM body: {exc}") from None
    else:
        der = bytes(data)
    if len(der) < 2 or der[0] != 0x30:
        raise CertificateUnparseable("not a DER SEQUENCE")
    return der


def to_pem(der: bytes) -> bytes:
    body = base64.b64encode(der)
    lines = [body[i : i + 64] for i in range(0, len(body), 64)]
    return b"-----BEGIN CERTIFICATE-----\n" + b"\n".join(lines) + b"\n-----END CERTIFICATE-----\n"
