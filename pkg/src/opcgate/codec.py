"""OPC UA TCP binary framing: HEL/ACK/OPN/MSG/CLO/ERR chunks.

Only the subset the gateway and the test endpoints need is decoded. All
multi-byte integers are little-endian, as in OPC 10000-6.

Layout of an OPN chunk::

    header (8) | secure_channel_id (4)
    | security_policy_uri (ByteString) | sender_certificate (ByteString)
    | receiver_certificate_thumbprint (ByteString)
    | sequence_number (4) | request_id (4) | body
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

HEADER_SIZE = 8
THUMBPRINT_SIZE = 20

MESSAGE_TYPES = frozenset({"HEL", "ACK", "OPN", "MSG", "CLO", "ERR"})
CHUNK_TYPES = frozenset({"F", "C", "A"})

POLICY_NONE = "http://opcfoundation.org/UA/SecurityPolicy#None"
RECOMMENDED_POLICIES = (
    "http://opcfoundation.org/UA/SecurityPolicy#Aes128_Sha256_RsaOaep",
    "http://opcfoundation.org/UA/SecurityPolicy#Basic256Sha256",
    "http://opcfoundation.org/UA/SecurityPolicy#Aes256_Sha256_RsaPss",
)

_U32 = struct.Struct("<I")
_I32 = struct.Struct("<i")


class CodecError(ValueError):
    """Base class for every decode/encode failure."""


class TruncatedInput(CodecError):
    pass


class UnknownMessageType(CodecError):
    pass


class MalformedByteString(CodecError):
    pass


class NotOpn(CodecError):
    pass


class ThumbprintLengthInvalid(CodecError):
    pass


class ChunkTypeUnsupported(CodecError):
    """Intermediate/abort chunks are not reassembled by the codec."""


class SizeMismatch(CodecError):
    pass


class Reader:
    """Bounds-checked cursor over a byte sequence."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.remaining < n:
            raise TruncatedInput(f"need {n} bytes at offset {self.pos}, have {self.remaining}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return bytes(out)

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def i32(self) -> int:
        return _I32.unpack(self.take(4))[0]

    def byte_string(self) -> bytes | None:
        length = self.i32()
        if length == -1:
            return None
        if length < -1:
            raise MalformedByteString(f"negative length {length}")
        if length > self.remaining:
            raise MalformedByteString(
                f"declared length {length} exceeds remaining {self.remaining} bytes"
            )
        return self.take(length)

    def string(self) -> str | None:
        raw = self.byte_string()
        if raw is None:
            return None
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedByteString(f"invalid UTF-8 string: {exc}") from None

    def rest(self) -> bytes:
        return self.take(self.remaining)


class Writer:
    __slots__ = ("buf",)

    def __init__(self):
        self.buf = bytearray()

    def raw(self, data: bytes) -> Writer:
        self.buf += data
        return self

    def u8(self, v: int) -> Writer:
        self.buf.append(v)
        return self

    def u16(self, v: int) -> Writer:
        self.buf += v.to_bytes(2, "little")
        return self

    def u32(self, v: int) -> Writer:
        self.buf += _U32.pack(v)
        return self

    def i32(self, v: int) -> Writer:
        self.buf += _I32.pack(v)
        return self

    def byte_string(self, v: bytes | None) -> Writer:
        if v is None:
            return self.i32(-1)
        self.i32(len(v))
        self.buf += v
        return self

    def string(self, v: str | None) -> Writer:
        return self.byte_string(None if v is None else v.encode("utf-8"))

    def getvalue(self) -> bytes:
        return bytes(self.buf)


@dataclass(frozen=True)
class MessageHeader:
    msg_type: str
    chunk_type: str
    message_size: int

    def encode(self) -> bytes:
        return self.msg_type.encode("ascii") + self.chunk_type.encode("ascii") + _U32.pack(
            self.message_size
        )


def decode_message_header(data: bytes) -> MessageHeader:
    """Read the 8-byte chunk header at the start of ``data``."""
    if len(data) < HEADER_SIZE:
        raise TruncatedInput(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    msg_type = bytes(data[0:3]).decode("ascii", errors="replace")
    if msg_type not in MESSAGE_TYPES:
        raise UnknownMessageType(repr(bytes(data[0:3])))
    chunk_type = chr(data[3])
    if chunk_type not in CHUNK_TYPES:
        raise UnknownMessageType(f"bad chunk type {bytes(data[3:4])!r}")
    size = _U32.unpack_from(data, 4)[0]
    if size < HEADER_SIZE:
        raise SizeMismatch(f"message_size {size} smaller than header")
    return MessageHeader(msg_type, chunk_type, size)


def _frame(msg_type: str, chunk_type: str, body: bytes) -> bytes:
    return MessageHeader(msg_type, chunk_type, HEADER_SIZE + len(body)).encode() + body


def _open_chunk(chunk: bytes, expected: str) -> tuple[MessageHeader, Reader]:
    header = decode_message_header(chunk)
    if header.msg_type != expected:
        if expected == "OPN":
            raise NotOpn(f"got {header.msg_type}")
        raise CodecError(f"expected {expected}, got {header.msg_type}")
    if header.message_size > len(chunk):
        raise TruncatedInput(f"message_size {header.message_size} > {len(chunk)} bytes available")
    if header.message_size != len(chunk):
        raise SizeMismatch(f"message_size {header.message_size} != chunk length {len(chunk)}")
    return header, Reader(chunk, HEADER_SIZE)


# -- connection protocol -----------------------------------------------------


@dataclass(frozen=True)
class Hello:
    protocol_version: int = 0
    receive_buffer_size: int = 65535
    send_buffer_size: int = 65535
    max_message_size: int = 0
    max_chunk_count: int = 0
    endpoint_url: str | None = "opc.tcp://localhost:4840"

    def encode(self) -> bytes:
        w = Writer()
        w.u32(self.protocol_version).u32(self.receive_buffer_size).u32(self.send_buffer_size)
        w.u32(self.max_message_size).u32(self.max_chunk_count).string(self.endpoint_url)
        return _frame("HEL", "F", w.getvalue())

    @classmethod
    def decode(cls, chunk: bytes) -> Hello:
        _, r = _open_chunk(chunk, "HEL")
        return cls(r.u32(), r.u32(), r.u32(), r.u32(), r.u32(), r.string())


@dataclass(frozen=True)
class Acknowledge:
    protocol_version: int = 0
    receive_buffer_size: int = 65535
    send_buffer_size: int = 65535
    max_message_size: int = 0
    max_chunk_count: int = 0

    def encode(self) -> bytes:
        w = Writer()
        w.u32(self.protocol_version).u32(self.receive_buffer_size).u32(self.send_buffer_size)
        w.u32(self.max_message_size).u32(self.max_chunk_count)
        return _frame("ACK", "F", w.getvalue())

    @classmethod
    def decode(cls, chunk: bytes) -> Acknowledge:
        _, r = _open_chunk(chunk, "ACK")
        return cls(r.u32(), r.u32(), r.u32(), r.u32(), r.u32())


@dataclass(frozen=True)
class ErrorMessage:
    error: int
    reason: str | None = None

    def encode(self) -> bytes:
        return _frame("ERR", "F", Writer().u32(self.error).string(self.reason).getvalue())

    @classmethod
    def decode(cls, chunk: bytes) -> ErrorMessage:
        _, r = _open_chunk(chunk, "ERR")
        return cls(r.u32(), r.string())


# -- secure conversation -------------------------------------------------------


@dataclass(frozen=True)
class AsymmetricSecurityHeader:
    security_policy_uri: str | None
    sender_certificate: bytes | None
    receiver_certificate_thumbprint: bytes | None


@dataclass(frozen=True)
class OpnMessage:
    secure_channel_id: int
    security_policy_uri: str | None
    sender_certificate: bytes | None
    receiver_certificate_thumbprint: bytes | None
    sequence_number: int
    request_id: int
    body: bytes = b""

    @property
    def security_header(self) -> AsymmetricSecurityHeader:
        return AsymmetricSecurityHeader(
            self.security_policy_uri, self.sender_certificate, self.receiver_certificate_thumbprint
        )

    @property
    def header(self) -> MessageHeader:
        return MessageHeader("OPN", "F", encoded_opn_size(self))


def encoded_opn_size(msg: OpnMessage) -> int:
    def bs(v: bytes | None) -> int:
        return 4 + (len(v) if v is not None else 0)

    uri = None if msg.security_policy_uri is None else msg.security_policy_uri.encode("utf-8")
    return (
        HEADER_SIZE
        + 4
        + bs(uri)
        + bs(msg.sender_certificate)
        + bs(msg.receiver_certificate_thumbprint)
        + 8
        + len(msg.body)
    )


def encode_opn(msg: OpnMessage) -> bytes:
    tp = msg.receiver_certificate_thumbprint
    if tp is not None and len(tp) != THUMBPRINT_SIZE:
        raise ThumbprintLengthInvalid(f"thumbprint must be {THUMBPRINT_SIZE} bytes, got {len(tp)}")
    w = Writer()
    w.u32(msg.secure_channel_id)
    w.string(msg.security_policy_uri)
    w.byte_string(msg.sender_certificate)
    w.byte_string(tp)
    w.u32(msg.sequence_number).u32(msg.request_id)
    w.raw(msg.body)
    return _frame("OPN", "F", w.getvalue())


def decode_opn(chunk: bytes) -> OpnMessage:
    header, r = _open_chunk(chunk, "OPN")
    if header.chunk_type != "F":
        raise ChunkTypeUnsupported(f"OPN chunk type {header.chunk_type!r}")
    channel_id = r.u32()
    uri = r.string()
    cert = r.byte_string()
    tp = r.byte_string()
    if tp is not None and len(tp) != THUMBPRINT_SIZE:
        raise ThumbprintLengthInvalid(f"thumbprint has {len(tp)} bytes")
    seq = r.u32()
    req = r.u32()
    return OpnMessage(channel_id, uri, cert, tp, seq, req, r.rest())


@dataclass(frozen=True)
class SymmetricMessage:
    """MSG or CLO chunk: symmetric security header plus opaque body."""

    msg_type: str
    secure_channel_id: int
    token_id: int
    sequence_number: int
    request_id: int
    body: bytes = b""
    chunk_type: str = "F"

    def encode(self) -> bytes:
        w = Writer().u32(self.secure_channel_id).u32(self.token_id)
        w.u32(self.sequence_number).u32(self.request_id).raw(self.body)
        return _frame(self.msg_type, self.chunk_type, w.getvalue())

    @classmethod
    def decode(cls, chunk: bytes) -> SymmetricMessage:
        header = decode_message_header(chunk)
        if header.msg_type not in ("MSG", "CLO"):
            raise CodecError(f"expected MSG/CLO, got {header.msg_type}")
        _, r = _open_chunk(chunk, header.msg_type)
        return cls(header.msg_type, r.u32(), r.u32(), r.u32(), r.u32(), r.rest(), header.chunk_type)


def decode_chunk(chunk: bytes):
    """Decode any complete chunk into its message object."""
    header = decode_message_header(chunk)
    if header.msg_type == "OPN":
        return decode_opn(chunk)
    if header.msg_type in ("MSG", "CLO"):
        return SymmetricMessage.decode(chunk)
    return {"HEL": Hello, "ACK": Acknowledge, "ERR": ErrorMessage}[header.msg_type].decode(chunk)


@dataclass
class ChunkSplitter:
    """Cuts a byte stream into complete chunks using ``message_size``."""

    buffer: bytearray = field(default_factory=bytearray)

    def feed(self, data: bytes) -> list[bytes]:
        self.buffer += data
        out = []
        while len(self.buffer) >= HEADER_SIZE:
            header = decode_message_header(self.buffer)
            if len(self.buffer) < header.message_size:
                break
            out.append(bytes(self.buffer[: header.message_size]))
            del self.buffer[: header.message_size]
        return out
