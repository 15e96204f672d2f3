"""Minimal OPC UA client and server endpoints, written sans-IO.

The server side is a per-connection object: feed it bytes, get back the
chunks to send. The client side is a generator that yields transport
operations (``Connect``, ``Send``, ``Recv``, ``Close``) and finally returns
an outcome; a driver supplies the transport. The same endpoint code
therefore runs over the simulated network and over real sockets.
"""

from __future__ import annotations

import enum
import itertools
import os
from dataclasses import dataclass

from ..codec import (
    POLICY_NONE,
    RECOMMENDED_POLICIES,
    Acknowledge,
    ChunkSplitter,
    CodecError,
    ErrorMessage,
    Hello,
    OpnMessage,
    SymmetricMessage,
    decode_chunk,
    decode_opn,
    encode_opn,
)
from ..certificates import hash_thumbprint
from . import services as svc
from .certs import Identity, verify_possession


class Role(str, enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"


class Phase(str, enum.Enum):
    GET_ENDPOINTS = "GetEndpoints"
    OPEN_SECURE_CHANNEL = "OpenSecureChannel"
    CREATE_SESSION = "CreateSession"
    ACTIVATE_SESSION = "ActivateSession"


class Outcome(str, enum.Enum):
    ESTABLISHED = "Established"
    REJECTED = "RejectedAtGateway"
    TIMEOUT = "Timeout"
    PROTOCOL_ERROR = "ProtocolError"


class Failure(str, enum.Enum):
    """Non-data results a driver hands back to the client."""

    RESET = "reset"
    TIMEOUT = "timeout"
    CLOSED = "closed"
    REFUSED = "refused"


class BindFailure(OSError):
    pass


class ConnectFailure(OSError):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    role: Role
    identity: Identity
    security_policy_uri: str = RECOMMENDED_POLICIES[1]
    address: tuple = ("10.0.0.2", 4840)
    security_mode: str = "SignAndEncrypt"

    def __post_init__(self):
        if self.security_mode != "SignAndEncrypt":
            raise ValueError("endpoints only run SignAndEncrypt")
        if self.security_policy_uri not in RECOMMENDED_POLICIES:
            raise ValueError(f"policy {self.security_policy_uri!r} is not a recommended policy")

    @property
    def endpoint_url(self) -> str:
        return f"opc.tcp://{self.address[0]}:{self.address[1]}"


@dataclass(frozen=True)
class HandshakeResult:
    outcome: Outcome
    duration_ms: float
    phase_reached: Phase
    detail: str = ""
    renewal: str | None = None  # outcome of an optional channel renewal

    def __post_init__(self):
        if self.outcome is Outcome.ESTABLISHED and self.phase_reached is not Phase.ACTIVATE_SESSION:
            raise ValueError("Established implies the ActivateSession phase")

    @property
    def established(self) -> bool:
        return self.outcome is Outcome.ESTABLISHED

    def as_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "duration_ms": self.duration_ms,
            "phase_reached": self.phase_reached.value,
            "detail": self.detail,
            "renewal": self.renewal,
        }


# -- transport operations yielded by the client ----------------------------------


@dataclass(frozen=True)
class Connect:
    address: tuple


@dataclass(frozen=True)
class Send:
    conn: object
    data: bytes


@dataclass(frozen=True)
class Recv:
    conn: object


@dataclass(frozen=True)
class Close:
    conn: object


# -- server ------------------------------------------------------------------------


_channel_ids = itertools.count(1)


class OpcUaServer:
    """Serves any number of connections. ``established`` counts activated sessions."""

    def __init__(self, config: EndpointConfig):
        if config.role is not Role.SERVER:
            raise ValueError("server endpoint needs a Server config")
        self.config = config
        self.established = 0
        self.rejected: list[str] = []

    @property
    def thumbprint(self) -> bytes:
        return self.config.identity.thumbprint

    def endpoint(self) -> svc.EndpointDescription:
        return svc.EndpointDescription(
            self.config.endpoint_url,
            self.config.identity.der,
            svc.MODE_SIGN_AND_ENCRYPT,
            self.config.security_policy_uri,
        )

    def connection(self) -> ServerConnection:
        return ServerConnection(self)


class ServerConnection:
    def __init__(self, server: OpcUaServer):
        self.server = server
        self._splitter = ChunkSplitter()
        self.closed = False
        self.secure = False
        self.channel_id = 0
        self.token_id = 0
        self.client_certificate: bytes | None = None
        self._seq = itertools.count(1)
        self._auth_token: bytes | None = None
        self._session_id = 0

    def receive(self, data: bytes) -> list[bytes]:
        if self.closed:
            return []
        try:
            chunks = self._splitter.feed(data)
        except CodecError as exc:
            return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, f"framing: {exc}")
        out: list[bytes] = []
        for chunk in chunks:
            try:
                out += self._handle(chunk)
            except CodecError as exc:
                out += self._fail(svc.BAD_SECURITY_CHECKS_FAILED, f"decode: {exc}")
            if self.closed:
                break
        return out

    def _fail(self, status: int, reason: str) -> list[bytes]:
        self.closed = True
        self.server.rejected.append(reason)
        return [ErrorMessage(status, reason).encode()]

    def _msg(self, msg_type: str, request_id: int, body: bytes) -> bytes:
        return SymmetricMessage(msg_type, self.channel_id, self.token_id, next(self._seq),
                                request_id, body).encode()

    def _handle(self, chunk: bytes) -> list[bytes]:
        msg = decode_chunk(chunk)
        kind = chunk[:3]
        if kind == b"HEL":
            return [Acknowledge().encode()]
        if kind == b"OPN":
            return self._open(msg)
        if kind == b"CLO":
            self.closed = True
            return []
        if kind == b"MSG":
            return self._service(msg)
        return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, f"unexpected {kind.decode()}")

    def _open(self, msg: OpnMessage) -> list[bytes]:
        req = svc.OpenSecureChannelRequest.decode(msg.body)
        identity = self.server.config.identity
        if msg.security_policy_uri == POLICY_NONE and msg.sender_certificate is None:
            # unsecured discovery channel
            self.channel_id = next(_channel_ids)
            body = svc.OpenSecureChannelResponse(self.channel_id, 1, req.requested_lifetime, b"").encode()
            return [encode_opn(OpnMessage(self.channel_id, POLICY_NONE, None, None, next(self._seq),
                                          msg.request_id, body))]
        if msg.security_policy_uri != self.server.config.security_policy_uri:
            return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, "policy mismatch")
        if msg.receiver_certificate_thumbprint != identity.thumbprint:
            return self._fail(svc.BAD_CERTIFICATE_INVALID, "request not addressed to this certificate")
        if not msg.sender_certificate or req.proof is None:
            return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, "missing client certificate or proof")
        proof_input = svc.client_proof_input(req.client_nonce, msg.receiver_certificate_thumbprint)
        if not verify_possession(msg.sender_certificate, proof_input, req.proof):
            return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, "client proof of possession failed")
        if req.request_type == svc.REQUEST_RENEW:
            if not self.secure or msg.sender_certificate != self.client_certificate:
                return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, "renewal on unknown channel")
        else:
            self.channel_id = next(_channel_ids)
        self.secure = True
        self.client_certificate = msg.sender_certificate
        self.token_id += 1
        server_nonce = os.urandom(32)
        proof = identity.sign(svc.server_proof_input(req.client_nonce, server_nonce))
        body = svc.OpenSecureChannelResponse(self.channel_id, self.token_id, req.requested_lifetime,
                                             server_nonce, proof).encode()
        reply = OpnMessage(self.channel_id, self.server.config.security_policy_uri, identity.der,
                           hash_thumbprint(msg.sender_certificate), next(self._seq),
                           msg.request_id, body)
        return [encode_opn(reply)]

    def _service(self, msg: SymmetricMessage) -> list[bytes]:
        if msg.secure_channel_id != self.channel_id or not self.channel_id:
            return self._fail(svc.BAD_SECURITY_CHECKS_FAILED, "unknown secure channel")
        stype = svc.service_type(msg.body)
        if stype == svc.GET_ENDPOINTS_REQUEST:
            svc.GetEndpointsRequest.decode(msg.body)
            body = svc.GetEndpointsResponse((self.server.endpoint(),)).encode()
        elif stype == svc.CREATE_SESSION_REQUEST and self.secure:
            svc.CreateSessionRequest.decode(msg.body)
            self._session_id = next(_channel_ids)
            self._auth_token = os.urandom(16)
            body = svc.CreateSessionResponse(self._session_id, self._auth_token, os.urandom(32)).encode()
        elif stype == svc.ACTIVATE_SESSION_REQUEST and self.secure:
            req = svc.ActivateSessionRequest.decode(msg.body)
            if self._auth_token is None or req.authentication_token != self._auth_token:
                body = svc.ServiceFault(svc.BAD_SESSION_ID_INVALID).encode()
            else:
                self.server.established += 1
                body = svc.ActivateSessionResponse(0).encode()
        else:
            body = svc.ServiceFault(svc.BAD_SECURITY_CHECKS_FAILED).encode()
        return [self._msg("MSG", msg.request_id, body)]


# -- client --------------------------------------------------------------------------


class _Abort(Exception):
    def __init__(self, outcome: Outcome, detail: str):
        super().__init__(detail)
        self.outcome = outcome
        self.detail = detail


_FAILURE_OUTCOME = {
    Failure.RESET: Outcome.REJECTED,
    Failure.TIMEOUT: Outcome.TIMEOUT,
    Failure.CLOSED: Outcome.PROTOCOL_ERROR,
    Failure.REFUSED: Outcome.PROTOCOL_ERROR,
}


def _expect(reply, what: str):
    """Turn a transport failure or an ERR chunk into an abort."""
    if isinstance(reply, Failure):
        raise _Abort(_FAILURE_OUTCOME[reply], f"{reply.value} while waiting for {what}")
    if reply[:3] == b"ERR":
        err = ErrorMessage.decode(reply)
        raise _Abort(Outcome.PROTOCOL_ERROR, f"server error 0x{err.error:08X}: {err.reason}")
    return reply


def client_flow(config: EndpointConfig, server_address: tuple, renew=None):
    """Drive GetEndpoints, OpenSecureChannel, CreateSession, ActivateSession.

    Yields transport operations and returns ``(outcome, phase, detail, renewal)``.
    ``renew``, when given, is called after activation and then the channel is
    renewed once with a fresh OPN.
    """
    if config.role is not Role.CLIENT:
        raise ValueError("client flow needs a Client config")
    me = config.identity
    url = f"opc.tcp://{server_address[0]}:{server_address[1]}"
    phase = Phase.GET_ENDPOINTS
    renewal = None
    req_ids = itertools.count(1)
    try:
        # 1. discovery on an unsecured channel
        conn = yield Connect(server_address)
        if isinstance(conn, Failure):
            raise _Abort(_FAILURE_OUTCOME[conn], f"connect: {conn.value}")
        yield Send(conn, Hello(endpoint_url=url).encode())
        _expect((yield Recv(conn)), "ACK")
        body = svc.OpenSecureChannelRequest(svc.REQUEST_ISSUE, svc.MODE_NONE, b"").encode()
        yield Send(conn, encode_opn(OpnMessage(0, POLICY_NONE, None, None, 1, next(req_ids), body)))
        opn = decode_opn(_expect((yield Recv(conn)), "discovery OPN response"))
        chan = svc.OpenSecureChannelResponse.decode(opn.body).secure_channel_id
        gep = svc.GetEndpointsRequest(url).encode()
        yield Send(conn, SymmetricMessage("MSG", chan, 1, 2, next(req_ids), gep).encode())
        reply = SymmetricMessage.decode(_expect((yield Recv(conn)), "GetEndpoints response"))
        endpoints = svc.GetEndpointsResponse.decode(reply.body).endpoints
        yield Send(conn, SymmetricMessage("CLO", chan, 1, 3, next(req_ids),
                                          svc.encode_node_id(svc.CLOSE_SECURE_CHANNEL_REQUEST)).encode())
        yield Close(conn)
        chosen = [e for e in endpoints if e.security_mode == svc.MODE_SIGN_AND_ENCRYPT
                  and e.security_policy_uri == config.security_policy_uri]
        if not chosen:
            raise _Abort(Outcome.PROTOCOL_ERROR, "no matching SignAndEncrypt endpoint")
        server_cert = chosen[0].server_certificate

        # 2. secure channel
        phase = Phase.OPEN_SECURE_CHANNEL
        conn = yield Connect(server_address)
        if isinstance(conn, Failure):
            raise _Abort(_FAILURE_OUTCOME[conn], f"connect: {conn.value}")
        yield Send(conn, Hello(endpoint_url=url).encode())
        _expect((yield Recv(conn)), "ACK")
        seq = itertools.count(1)
        chan, token = yield from _open_channel(conn, config, server_cert, svc.REQUEST_ISSUE, 0,
                                               seq, req_ids)

        # 3. session
        phase = Phase.CREATE_SESSION
        cs = svc.CreateSessionRequest(f"{me.name}-session", os.urandom(32)).encode()
        yield Send(conn, SymmetricMessage("MSG", chan, token, next(seq), next(req_ids), cs).encode())
        reply = SymmetricMessage.decode(_expect((yield Recv(conn)), "CreateSession response"))
        if svc.service_type(reply.body) != svc.CREATE_SESSION_RESPONSE:
            raise _Abort(Outcome.PROTOCOL_ERROR, "CreateSession faulted")
        session = svc.CreateSessionResponse.decode(reply.body)

        # 4. activation
        phase = Phase.ACTIVATE_SESSION
        act = svc.ActivateSessionRequest(session.authentication_token).encode()
        yield Send(conn, SymmetricMessage("MSG", chan, token, next(seq), next(req_ids), act).encode())
        reply = SymmetricMessage.decode(_expect((yield Recv(conn)), "ActivateSession response"))
        if svc.service_type(reply.body) != svc.ACTIVATE_SESSION_RESPONSE:
            raise _Abort(Outcome.PROTOCOL_ERROR, "ActivateSession faulted")
        if svc.ActivateSessionResponse.decode(reply.body).status != 0:
            raise _Abort(Outcome.PROTOCOL_ERROR, "ActivateSession rejected")

        if renew is not None:
            renew()
            try:
                yield from _open_channel(conn, config, server_cert, svc.REQUEST_RENEW, chan, seq, req_ids)
                renewal = Outcome.ESTABLISHED.value
            except _Abort as exc:
                renewal = exc.outcome.value
                yield Close(conn)
                return Outcome.ESTABLISHED, phase, "", renewal
        yield Send(conn, SymmetricMessage("CLO", chan, token, next(seq), next(req_ids),
                                          svc.encode_node_id(svc.CLOSE_SECURE_CHANNEL_REQUEST)).encode())
        yield Close(conn)
        return Outcome.ESTABLISHED, phase, "", renewal
    except _Abort as exc:
        return exc.outcome, phase, exc.detail, renewal
    except CodecError as exc:
        return Outcome.PROTOCOL_ERROR, phase, f"decode: {exc}", renewal


def _open_channel(conn, config: EndpointConfig, server_cert: bytes, request_type: int,
                  channel_id: int, seq, req_ids):
    me = config.identity
    nonce = os.urandom(32)
    server_tp = hash_thumbprint(server_cert)
    proof = me.sign(svc.client_proof_input(nonce, server_tp))
    body = svc.OpenSecureChannelRequest(request_type, svc.MODE_SIGN_AND_ENCRYPT, nonce,
                                        proof=proof).encode()
    yield Send(conn, encode_opn(OpnMessage(channel_id, config.security_policy_uri, me.der, server_tp,
                                           next(seq), next(req_ids), body)))
    opn = decode_opn(_expect((yield Recv(conn)), "OPN response"))
    if opn.sender_certificate != server_cert:
        raise _Abort(Outcome.PROTOCOL_ERROR, "OPN response certificate differs from discovered endpoint")
    if opn.receiver_certificate_thumbprint != me.thumbprint:
        raise _Abort(Outcome.PROTOCOL_ERROR, "OPN response not addressed to this client")
    resp = svc.OpenSecureChannelResponse.decode(opn.body)
    if resp.proof is None or not verify_possession(
        server_cert, svc.server_proof_input(nonce, resp.server_nonce), resp.proof
    ):
        raise _Abort(Outcome.PROTOCOL_ERROR, "server proof of possession failed")
    return resp.secure_channel_id, resp.token_id

