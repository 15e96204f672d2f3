"""Service request/response bodies carried inside OPN and MSG chunks.

Each body starts with the encoding NodeId of its type (FourByte form) so a
capture looks right to a dissector. Field sets are cut down to what the
handshake needs; the gateway never looks inside MSG bodies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..codec import CodecError, Reader, Writer

# Binary encoding ids (namespace 0).
OPEN_SECURE_CHANNEL_REQUEST = 446
OPEN_SECURE_CHANNEL_RESPONSE = 449
CLOSE_SECURE_CHANNEL_REQUEST = 452
GET_ENDPOINTS_REQUEST = 428
GET_ENDPOINTS_RESPONSE = 431
CREATE_SESSION_REQUEST = 461
CREATE_SESSION_RESPONSE = 464
ACTIVATE_SESSION_REQUEST = 467
ACTIVATE_SESSION_RESPONSE = 470
SERVICE_FAULT = 397

REQUEST_ISSUE, REQUEST_RENEW = 0, 1
MODE_NONE, MODE_SIGN, MODE_SIGN_AND_ENCRYPT = 1, 2, 3
TOKEN_ANONYMOUS = 0

BAD_SECURITY_CHECKS_FAILED = 0x80130000
BAD_CERTIFICATE_INVALID = 0x80120000
BAD_SESSION_ID_INVALID = 0x80250000

TRANSPORT_PROFILE = "http://opcfoundation.org/UA-Profile/Transport/uatcp-uasc-uabinary"


class ServiceDecodeError(CodecError):
    pass


def encode_node_id(type_id: int) -> bytes:
    if type_id > 0xFFFF:
        raise ValueError("FourByte NodeId holds at most 16 bits")
    return struct.pack("<BBH", 0x01, 0, type_id)


def decode_node_id(r: Reader) -> int:
    kind = r.u8()
    if kind == 0x00:
        return r.u8()
    if kind == 0x01:
        r.u8()
        return r.u16()
    raise ServiceDecodeError(f"unsupported NodeId encoding 0x{kind:02x}")


def service_type(body: bytes) -> int:
    return decode_node_id(Reader(body))


def _open(body: bytes, expected: int) -> Reader:
    r = Reader(body)
    got = decode_node_id(r)
    if got != expected:
        raise ServiceDecodeError(f"expected service {expected}, got {got}")
    return r


@dataclass(frozen=True)
class OpenSecureChannelRequest:
    request_type: int
    security_mode: int
    client_nonce: bytes
    requested_lifetime: int = 3_600_000
    proof: bytes | None = None  # client's signature over nonce and receiver thumbprint

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(OPEN_SECURE_CHANNEL_REQUEST))
        w.u32(self.request_type).u32(self.security_mode).byte_string(self.client_nonce)
        return w.u32(self.requested_lifetime).byte_string(self.proof).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> OpenSecureChannelRequest:
        r = _open(body, OPEN_SECURE_CHANNEL_REQUEST)
        return cls(r.u32(), r.u32(), r.byte_string() or b"", r.u32(), r.byte_string())


@dataclass(frozen=True)
class OpenSecureChannelResponse:
    secure_channel_id: int
    token_id: int
    revised_lifetime: int
    server_nonce: bytes
    proof: bytes | None = None  # server's signature over both nonces

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(OPEN_SECURE_CHANNEL_RESPONSE))
        w.u32(self.secure_channel_id).u32(self.token_id).u32(self.revised_lifetime)
        return w.byte_string(self.server_nonce).byte_string(self.proof).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> OpenSecureChannelResponse:
        r = _open(body, OPEN_SECURE_CHANNEL_RESPONSE)
        return cls(r.u32(), r.u32(), r.u32(), r.byte_string() or b"", r.byte_string())


@dataclass(frozen=True)
class GetEndpointsRequest:
    endpoint_url: str

    def encode(self) -> bytes:
        return Writer().raw(encode_node_id(GET_ENDPOINTS_REQUEST)).string(self.endpoint_url).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> GetEndpointsRequest:
        return cls(_open(body, GET_ENDPOINTS_REQUEST).string() or "")


@dataclass(frozen=True)
class EndpointDescription:
    endpoint_url: str
    server_certificate: bytes
    security_mode: int
    security_policy_uri: str
    user_token_policies: tuple = (("anonymous", TOKEN_ANONYMOUS),)
    transport_profile_uri: str = TRANSPORT_PROFILE
    security_level: int = 3

    def write(self, w: Writer) -> None:
        w.string(self.endpoint_url).byte_string(self.server_certificate)
        w.u32(self.security_mode).string(self.security_policy_uri)
        w.i32(len(self.user_token_policies))
        for policy_id, token_type in self.user_token_policies:
            w.string(policy_id).u32(token_type)
        w.string(self.transport_profile_uri).u8(self.security_level)

    @classmethod
    def read(cls, r: Reader) -> EndpointDescription:
        url, cert, mode, uri = r.string(), r.byte_string(), r.u32(), r.string()
        n = r.i32()
        if n < 0 or n > r.remaining:
            raise ServiceDecodeError("bad user token policy count")
        tokens = tuple((r.string(), r.u32()) for _ in range(n))
        return cls(url or "", cert or b"", mode, uri or "", tokens, r.string() or "", r.u8())


@dataclass(frozen=True)
class GetEndpointsResponse:
    endpoints: tuple = field(default_factory=tuple)

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(GET_ENDPOINTS_RESPONSE)).i32(len(self.endpoints))
        for ep in self.endpoints:
            ep.write(w)
        return w.getvalue()

    @classmethod
    def decode(cls, body: bytes) -> GetEndpointsResponse:
        r = _open(body, GET_ENDPOINTS_RESPONSE)
        n = r.i32()
        if n < 0 or n > r.remaining:
            raise ServiceDecodeError("bad endpoint count")
        return cls(tuple(EndpointDescription.read(r) for _ in range(n)))


@dataclass(frozen=True)
class CreateSessionRequest:
    session_name: str
    client_nonce: bytes

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(CREATE_SESSION_REQUEST))
        return w.string(self.session_name).byte_string(self.client_nonce).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> CreateSessionRequest:
        r = _open(body, CREATE_SESSION_REQUEST)
        return cls(r.string() or "", r.byte_string() or b"")


@dataclass(frozen=True)
class CreateSessionResponse:
    session_id: int
    authentication_token: bytes
    server_nonce: bytes

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(CREATE_SESSION_RESPONSE)).u32(self.session_id)
        return w.byte_string(self.authentication_token).byte_string(self.server_nonce).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> CreateSessionResponse:
        r = _open(body, CREATE_SESSION_RESPONSE)
        return cls(r.u32(), r.byte_string() or b"", r.byte_string() or b"")


@dataclass(frozen=True)
class ActivateSessionRequest:
    authentication_token: bytes
    user_token_policy: str = "anonymous"

    def encode(self) -> bytes:
        w = Writer().raw(encode_node_id(ACTIVATE_SESSION_REQUEST))
        return w.byte_string(self.authentication_token).string(self.user_token_policy).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> ActivateSessionRequest:
        r = _open(body, ACTIVATE_SESSION_REQUEST)
        return cls(r.byte_string() or b"", r.string() or "")


@dataclass(frozen=True)
class ActivateSessionResponse:
    status: int = 0

    def encode(self) -> bytes:
        return Writer().raw(encode_node_id(ACTIVATE_SESSION_RESPONSE)).u32(self.status).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> ActivateSessionResponse:
        return cls(_open(body, ACTIVATE_SESSION_RESPONSE).u32())


@dataclass(frozen=True)
class ServiceFault:
    status: int

    def encode(self) -> bytes:
        return Writer().raw(encode_node_id(SERVICE_FAULT)).u32(self.status).getvalue()

    @classmethod
    def decode(cls, body: bytes) -> ServiceFault:
        return cls(_open(body, SERVICE_FAULT).u32())


def client_proof_input(client_nonce: bytes, receiver_thumbprint: bytes | None) -> bytes:
    return b"opn-request\x00" + client_nonce + (receiver_thumbprint or b"")


def server_proof_input(client_nonce: bytes, server_nonce: bytes) -> bytes:
    return b"opn-response\x00" + client_nonce + server_nonce
