"""Chunked sender-certificate extraction, as a P4 parser would do it.

A P4 header field tops out at 2048 bits, so the certificate is pulled out of
the packet as a stack of 256-byte blocks followed by one shorter tail block.
The parser states are kept as separate steps so the block layout matches
what a switch would produce.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..codec import HEADER_SIZE, THUMBPRINT_SIZE, CodecError, Reader, decode_message_header

BLOCK_SIZE = 256
DEFAULT_MAX_CHUNKS = 100


class ExtractionError(ValueError):
    reason = "MalformedOpn"


class ZeroLengthCertificate(ExtractionError):
    reason = "ZeroLengthCertificate"


class CertificateTooLong(ExtractionError):
    reason = "CertificateTooLong"


class MalformedOpn(ExtractionError):
    reason = "MalformedOpn"


@dataclass(frozen=True)
class CertChunks:
    chunks: tuple[bytes, ...]
    declared_length: int
    max_chunks: int = DEFAULT_MAX_CHUNKS

    def joined(self) -> bytes:
        return b"".join(self.chunks)


@dataclass(frozen=True)
class Extraction:
    certificate: CertChunks
    receiver_thumbprint: bytes | None
    security_policy_uri: str | None


def swap_length_bytes(field: bytes) -> int:
    """Turn the four wire bytes of the length field into the length value.

    The switch extracts the field MSB-first, so wire byte 0 lands in bits
    31..24. Concatenating the bytes in reverse order restores the
    little-endian value OPC UA put on the wire.
    """
    if len(field) != 4:
        raise ValueError("length field is 4 bytes")
    raw = int.from_bytes(field, "big")
    hex1 = (raw >> 24) & 0xFF
    hex2 = (raw >> 16) & 0xFF
    hex3 = (raw >> 8) & 0xFF
    hex4 = raw & 0xFF
    return (hex4 << 24) | (hex3 << 16) | (hex2 << 8) | hex1


def _skip_byte_string(r: Reader) -> str | None:
    length = r.i32()
    if length == -1:
        return None
    if length < 0 or length > r.remaining:
        raise MalformedOpn(f"policy uri length {length}")
    raw = r.take(length)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedOpn("policy uri is not UTF-8") from None


def extract_certificate(opn_chunk: bytes, max_chunks: int = DEFAULT_MAX_CHUNKS) -> Extraction:
    """Pull the sender certificate (block by block) and the receiver thumbprint."""
    try:
        header = decode_message_header(opn_chunk)
    except CodecError as exc:
        raise MalformedOpn(str(exc)) from None
    if header.msg_type != "OPN" or header.chunk_type != "F" or header.message_size != len(opn_chunk):
        raise MalformedOpn(f"not a complete final OPN chunk: {header}")
    r = Reader(opn_chunk, HEADER_SIZE)
    try:
        r.u32()  # secure channel id
        policy = _skip_byte_string(r)

        # parse_certLength
        cert_bytes = swap_length_bytes(r.take(4))
        remaining = cert_bytes
        if cert_bytes == 0:
            raise ZeroLengthCertificate("sender certificate length is 0")
        if cert_bytes > BLOCK_SIZE * max_chunks:
            raise CertificateTooLong(f"{cert_bytes} > {BLOCK_SIZE * max_chunks}")
        if cert_bytes > r.remaining:
            raise MalformedOpn(f"certificate length {cert_bytes} exceeds packet")

        blocks: list[bytes] = []
        # check_cert_length
        if cert_bytes > 255:
            # parse_certificate
            while True:
                blocks.append(r.take(BLOCK_SIZE))
                remaining -= BLOCK_SIZE
                if not remaining > 255:
                    break
            # parse_certificate_ending_part
            if remaining:
                blocks.append(r.take(remaining))
        else:
            # parse_certificate_ending_part_only
            blocks.append(r.take(cert_bytes))

        tp_len = r.i32()
        if tp_len == -1:
            thumbprint = None
        elif tp_len == THUMBPRINT_SIZE:
            thumbprint = r.take(THUMBPRINT_SIZE)
        else:
            raise MalformedOpn(f"receiver thumbprint length {tp_len}")
    except CodecError as exc:
        raise MalformedOpn(str(exc)) from None
    return Extraction(CertChunks(tuple(blocks), cert_bytes, max_chunks), thumbprint, policy)


def is_discovery_opn(opn_chunk: bytes) -> bool:
    """True for an unsecured OPN: policy None and both certificate fields null."""
    try:
        header = decode_message_header(opn_chunk)
        if header.msg_type != "OPN":
            return False
        r = Reader(opn_chunk, HEADER_SIZE)
        r.u32()
        policy = r.string()
        return (
            policy == "http://opcfoundation.org/UA/SecurityPolicy#None"
            and r.i32() == -1
            and r.i32() == -1
        )
    except CodecError:
        return False
