from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class EmptyCertificate(ValueError):
    pass


def hash_thumbprint(der: bytes) -> bytes:
    """SHA-1 over the DER bytes, the OPC UA certificate thumbprint."""
    if not der:
        raise EmptyCertificate("cannot fingerprint an empty certificate")
    return hashlib.sha1(der).digest()


@dataclass(frozen=True)
class CertificateRecord:
    der: bytes
    expire_date: float | None = None
    thumbprint: bytes = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "thumbprint", hash_thumbprint(self.der))
