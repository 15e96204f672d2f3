"""Ed25519 signing keys for administrators and ledger participants."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey


class SigningFailure(RuntimeError):
    pass


class SigningKey:
    def __init__(self, private: Ed25519PrivateKey | None = None):
        self._private = private or Ed25519PrivateKey.generate()
        self.public_key = self._private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def from_seed(cls, seed: bytes) -> SigningKey:
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    def seed(self) -> bytes:
        return self._private.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )

    def sign(self, data: bytes) -> bytes:
        try:
            return self._private.sign(data)
        except Exception as exc:  # backend errors surface as one typed failure
            raise SigningFailure(str(exc)) from exc

    def save(self, path) -> None:
        Path(path).write_text(self.seed().hex() + "\n")

    @classmethod
    def load(cls, path) -> SigningKey:
        try:
            return cls.from_seed(bytes.fromhex(Path(path).read_text().strip()))
        except ValueError as exc:
            raise SigningFailure(f"{path}: not a hex Ed25519 seed") from exc


def verify_signature(public_key: bytes, data: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass
class AdminKeyring:
    authorized: set = field(default_factory=set)

    def __post_init__(self):
        self.authorized = {bytes(k) for k in self.authorized}

    def __contains__(self, public_key: bytes) -> bool:
        return bytes(public_key) in self.authorized

    def add(self, public_key: bytes) -> None:
        self.authorized.add(bytes(public_key))

    def verify(self, public_key: bytes, data: bytes, signature: bytes) -> bool:
        return public_key in self and verify_signature(public_key, data, signature)
