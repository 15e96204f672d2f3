"""Application instance certificates for test endpoints."""

from __future__ import annotations

import datetime
import functools
import random
from dataclasses import dataclass
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.x509.oid import NameOID

from ..certificates import CertificateRecord, hash_thumbprint
from ..ledger.actions import load_certificate_bytes

_PSS = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32)
_NOT_BEFORE = datetime.datetime(2024, 1, 1, tzinfo=datetime.timezone.utc)


@dataclass(frozen=True)
class Identity:
    """A certificate plus the private key that signs for it.

    ``der`` and ``private_key`` normally belong together; ``impersonating``
    builds the mismatched pair an attacker has after copying a certificate.
    """

    name: str
    der: bytes
    private_key: rsa.RSAPrivateKey

    @property
    def thumbprint(self) -> bytes:
        return hash_thumbprint(self.der)

    def record(self, expire_date: float | None = None) -> CertificateRecord:
        return CertificateRecord(self.der, expire_date)

    def sign(self, data: bytes) -> bytes:
        return self.private_key.sign(data, _PSS, hashes.SHA256())

    def impersonating(self, victim: Identity) -> Identity:
        return Identity(f"{self.name}-as-{victim.name}", victim.der, self.private_key)

    def pem(self) -> bytes:
        return x509.load_der_x509_certificate(self.der).public_bytes(serialization.Encoding.PEM)


def verify_possession(der: bytes, data: bytes, signature: bytes) -> bool:
    """True when ``signature`` over ``data`` was made with the key of certificate ``der``."""
    try:
        key = x509.load_der_x509_certificate(der).public_key()
        key.verify(signature, data, _PSS, hashes.SHA256())
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


@functools.lru_cache(maxsize=None)
def make_identity(name: str, key_size: int = 2048) -> Identity:
    """Self-signed RSA certificate. Cached per name: key generation is slow."""
    key = rsa.generate_private_key(public_exponent=65537, key_size=key_size)
    subject = x509.Name([
        x509.NameAttribute(NameOID.COMMON_NAME, name),
        x509.NameAttribute(NameOID.ORGANIZATION_NAME, "opcgate test plant"),
    ])
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(_NOT_BEFORE)
        .not_valid_after(_NOT_BEFORE + datetime.timedelta(days=3650))
        .add_extension(
            x509.SubjectAlternativeName([x509.UniformResourceIdentifier(f"urn:opcgate:{name}")]),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    return Identity(name, cert.public_bytes(serialization.Encoding.DER), key)


def padded_certificate(size: int, seed: int = 0) -> bytes:
    """DER-shaped blob of exactly ``size`` bytes (a SEQUENCE of filler) for payload-size trials."""
    if not 4 <= size <= 0xFFFF + 4:
        raise ValueError("size must be between 4 and 65539")
    rng = random.Random(seed)
    if size - 2 < 0x80:
        head = bytes([0x30, size - 2])
    elif size - 3 < 0x100:
        head = bytes([0x30, 0x81, size - 3])
    else:
        head = bytes([0x30, 0x82]) + (size - 4).to_bytes(2, "big")
    return head + rng.randbytes(size - len(head))


def save_identity(identity: Identity, directory) -> tuple[Path, Path]:
    """Write ``<name>.der`` and ``<name>.key.pem`` (unencrypted, test use only)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cert_path = directory / f"{identity.name}.der"
    key_path = directory / f"{identity.name}.key.pem"
    cert_path.write_bytes(identity.der)
    key_path.write_bytes(identity.private_key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    ))
    return cert_path, key_path


def load_identity(cert_path, key_path) -> Identity:
    der = load_certificate_bytes(Path(cert_path).read_bytes())
    key = serialization.load_pem_private_key(Path(key_path).read_bytes(), password=None)
    name = Path(cert_path).name.split(".")[0]
    return Identity(name, der, key)
