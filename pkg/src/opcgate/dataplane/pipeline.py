"""Software emulation of the enforcing switch.

``inspect_chunk`` is the security path for one complete OPC UA chunk.
``Switch`` wraps it with header parsing, per-connection reassembly, packet
holding while an OPN chunk is incomplete, drop handling and timing records.
"""

from __future__ import annotations

import enum
import statistics
import time
from collections import deque
from dataclasses import dataclass, field

from ..codec import CodecError, decode_message_header
from ..certificates import hash_thumbprint
from .extract import DEFAULT_MAX_CHUNKS, ExtractionError, extract_certificate, is_discovery_opn
from .frames import ACK, RST, FrameError, ParsedPacket, build_tcp_frame, parse_headers
from .reassembly import DEFAULT_BUFFER_LIMIT, ReassemblyError, StreamState, reassemble
from .table import DEFAULT_CAPACITY, ThumbprintTable

OPCUA_PORT = 4840


class Decision(str, enum.Enum):
    ALLOW = "Allow"
    DROP = "Drop"


class DropReason(str, enum.Enum):
    ZERO_LENGTH = "ZeroLengthCertificate"
    TOO_LONG = "CertificateTooLong"
    UNTRUSTED = "UntrustedThumbprint"
    MALFORMED = "MalformedOpn"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    reason: DropReason | None = None
    thumbprint: bytes | None = None
    msg_type: str | None = None

    def __post_init__(self):
        if (self.decision is Decision.DROP) != (self.reason is not None):
            raise ValueError("Drop carries exactly one reason; Allow carries none")

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOW

    def __str__(self) -> str:
        return self.decision.value if self.allowed else f"Drop({self.reason.value})"


ALLOW = Verdict(Decision.ALLOW)


@dataclass
class PipelineConfig:
    opcua_port: int = OPCUA_PORT
    validation_enabled: bool = True
    max_chunks: int = DEFAULT_MAX_CHUNKS
    table_capacity: int = DEFAULT_CAPACITY
    drop_mode: str = "silent"  # or "rst"
    allow_discovery: bool = True
    buffer_limit: int = DEFAULT_BUFFER_LIMIT

    def __post_init__(self):
        if self.drop_mode not in ("silent", "rst"):
            raise ValueError(f"drop_mode must be 'silent' or 'rst', not {self.drop_mode!r}")
        if self.max_chunks < 1 or self.table_capacity < 1:
            raise ValueError("max_chunks and table_capacity must be positive")


def inspect_chunk(chunk: bytes, table: ThumbprintTable, config: PipelineConfig | None = None) -> Verdict:
    """Allow/drop decision for one complete chunk."""
    config = config or PipelineConfig()
    try:
        msg_type = decode_message_header(chunk).msg_type
    except CodecError:
        return Verdict(Decision.DROP, DropReason.MALFORMED)
    if msg_type != "OPN":
        return Verdict(Decision.ALLOW, msg_type=msg_type)
    if config.allow_discovery and is_discovery_opn(chunk):
        return Verdict(Decision.ALLOW, msg_type="OPN")
    try:
        ext = extract_certificate(chunk, config.max_chunks)
    except ExtractionError as exc:
        return Verdict(Decision.DROP, DropReason(exc.reason), msg_type="OPN")
    thumbprint = hash_thumbprint(ext.certificate.joined())
    view = table.view  # one generation for this decision
    if thumbprint in view:
        return Verdict(Decision.ALLOW, thumbprint=thumbprint, msg_type="OPN")
    return Verdict(Decision.DROP, DropReason.UNTRUSTED, thumbprint=thumbprint, msg_type="OPN")


def is_tagged_chunk(chunk: bytes) -> bool:
    """OPN chunks that enter certificate validation (discovery OPNs excluded)."""
    return chunk[:3] == b"OPN" and not is_discovery_opn(chunk)


# -- metrics -------------------------------------------------------------------


@dataclass
class PacketRecord:
    processing_ns: int
    tagged: bool
    dequeue_ns: int | None = None
    forwarded: bool = True


def _agg(values) -> dict:
    values = list(values)
    if not values:
        return {"count": 0, "mean": None, "max": None}
    return {"count": len(values), "mean": statistics.fmean(values), "max": max(values)}


@dataclass
class PipelineMetrics:
    records: list = field(default_factory=list)

    def tagged(self) -> list:
        return [r for r in self.records if r.tagged]

    def aggregates(self) -> dict:
        out = {}
        for name, pred in (("tagged", lambda r: r.tagged), ("untagged", lambda r: not r.tagged)):
            recs = [r for r in self.records if pred(r)]
            out[name] = {
                "processing_ns": _agg(r.processing_ns for r in recs),
                "dequeue_ns": _agg(r.dequeue_ns for r in recs if r.dequeue_ns is not None),
            }
        return out

    def clear(self) -> None:
        self.records.clear()


def process_chunk(chunk: bytes, table: ThumbprintTable, config: PipelineConfig | None = None,
                  clock=time.perf_counter_ns) -> tuple[Verdict, PacketRecord]:
    config = config or PipelineConfig()
    t0 = clock()
    tagged = is_tagged_chunk(chunk)
    verdict = inspect_chunk(chunk, table, config) if config.validation_enabled else ALLOW
    return verdict, PacketRecord(clock() - t0, tagged, forwarded=verdict.allowed)


@dataclass
class VerdictRecord:
    flow: str
    verdict: Verdict

    def as_dict(self) -> dict:
        return {
            "flow": self.flow,
            "thumbprint": self.verdict.thumbprint.hex() if self.verdict.thumbprint else None,
            "verdict": str(self.verdict),
        }


class StreamInspector:
    """One direction of a proxied byte stream: the switch path without TCP headers."""

    def __init__(self, table: ThumbprintTable, config: PipelineConfig, flow: str = "?",
                 metrics: PipelineMetrics | None = None, verdicts: list | None = None,
                 clock=time.perf_counter_ns):
        self.table = table
        self.config = config
        self.flow = flow
        self.metrics = metrics if metrics is not None else PipelineMetrics()
        self.verdicts = verdicts if verdicts is not None else []
        self.state = StreamState(limit=config.buffer_limit)
        self._offset = 0
        self._held = bytearray()
        self._clock = clock
        self.untracked = False

    def feed(self, data: bytes) -> tuple[bytes, Verdict]:
        """Return the bytes that may be forwarded now and the verdict so far."""
        t0 = self._clock()
        if self.untracked:
            return data, ALLOW
        try:
            chunks = reassemble(self._offset, data, self.state)
        except (CodecError, ReassemblyError):
            chunks = None
        self._offset = (self._offset + len(data)) % (1 << 32)
        if chunks is None:
            if not self.config.validation_enabled:
                self.untracked = True
                return data, ALLOW
            v = Verdict(Decision.DROP, DropReason.MALFORMED)
            self.verdicts.append(VerdictRecord(self.flow, v))
            self.metrics.records.append(PacketRecord(self._clock() - t0, False, forwarded=False))
            return b"", v
        if not self.config.validation_enabled:
            tagged = any(is_tagged_chunk(c) for c in chunks)
            self.metrics.records.append(PacketRecord(self._clock() - t0, tagged, 0))
            return data, ALLOW
        tagged = False
        for chunk in chunks:
            if chunk[:3] != b"OPN":
                continue
            tagged = tagged or is_tagged_chunk(chunk)
            v = inspect_chunk(chunk, self.table, self.config)
            if is_tagged_chunk(chunk) or not v.allowed:
                self.verdicts.append(VerdictRecord(self.flow, v))
            if not v.allowed:
                self._held.clear()
                self.metrics.records.append(PacketRecord(self._clock() - t0, tagged, forwarded=False))
                return b"", v
        self._held += data
        if self.state.pending_type() in ("", "OPN"):
            out = b""
        else:
            out = bytes(self._held)
            self._held.clear()
        self.metrics.records.append(PacketRecord(self._clock() - t0, tagged, 0))
        return out, ALLOW


# -- switch ----------------------------------------------------------------------


def _flow_str(flow) -> str:
    return f"{flow[0]}:{flow[1]}->{flow[2]}:{flow[3]}"


@dataclass
class _Connection:
    streams: dict = field(default_factory=dict)
    held: dict = field(default_factory=dict)
    blocked: bool = False
    untracked: bool = False


class Switch:
    """Frame-in, frames-out enforcement point.

    Frames of a connection are held while an OPN chunk is incomplete and
    released (or discarded) when its verdict is known, so no byte of an
    untrusted OPN reaches the far side.
    """

    def __init__(self, table: ThumbprintTable | None = None, config: PipelineConfig | None = None,
                 clock=time.perf_counter_ns, now=time.monotonic):
        self.config = config or PipelineConfig()
        self.table = table if table is not None else ThumbprintTable(self.config.table_capacity)
        self.metrics = PipelineMetrics()
        self.verdicts: list[VerdictRecord] = []
        self._clock = clock
        self._now = now
        self._conns: dict = {}
        self._queue: deque = deque()
        self.counters = {"frames": 0, "forwarded": 0, "dropped": 0, "passthrough": 0}

    def _conn(self, flow) -> _Connection:
        key = frozenset({(flow[0], flow[1]), (flow[2], flow[3])})
        conn = self._conns.get(key)
        if conn is None:
            conn = self._conns[key] = _Connection()
        return conn

    def _is_opcua(self, pkt: ParsedPacket) -> bool:
        return pkt.tcp is not None and self.config.opcua_port in (pkt.tcp.src_port, pkt.tcp.dst_port)

    def parse_packet(self, frame: bytes) -> ParsedPacket:
        return parse_packet(frame, self.config.opcua_port)

    def ingress(self, frame: bytes) -> None:
        """Process one frame; forwarded frames go to the egress queue."""
        t0 = self._clock()
        self.counters["frames"] += 1
        try:
            pkt = parse_headers(frame)
        except FrameError:
            self._enqueue([frame], PacketRecord(self._clock() - t0, False))
            return
        if not self._is_opcua(pkt):
            self.counters["passthrough"] += 1
            self._enqueue([frame], PacketRecord(self._clock() - t0, False))
            return
        flow = pkt.flow
        conn = self._conn(flow)
        if conn.blocked:
            self.counters["dropped"] += 1
            self.metrics.records.append(PacketRecord(self._clock() - t0, False, forwarded=False))
            return
        state = conn.streams.get(flow)
        if state is None:
            state = conn.streams[flow] = StreamState(limit=self.config.buffer_limit)
        held = conn.held.setdefault(flow, [])
        tcp = pkt.tcp
        if tcp.flags & 0x02:  # SYN
            state.open(tcp.seq)
        if conn.untracked:
            self._enqueue([frame], PacketRecord(self._clock() - t0, False))
            return

        payload = pkt.payload(frame)
        in_opn = state.pending_type() in ("", "OPN")
        verdict = ALLOW
        tagged = False
        try:
            chunks = reassemble(tcp.seq, payload, state, self._now()) if payload else []
        except (CodecError, ReassemblyError):
            chunks = None
        if chunks is None:
            if not self.config.validation_enabled:
                conn.untracked = True
                self._enqueue(held + [frame], PacketRecord(self._clock() - t0, False))
                held.clear()
                return
            verdict = Verdict(Decision.DROP, DropReason.MALFORMED)
            self.verdicts.append(VerdictRecord(_flow_str(flow), verdict))
        else:
            for chunk in chunks:
                if chunk[:3] != b"OPN":
                    continue
                if is_tagged_chunk(chunk):
                    tagged = True
                if not self.config.validation_enabled:
                    continue
                v = inspect_chunk(chunk, self.table, self.config)
                if is_tagged_chunk(chunk) or not v.allowed:
                    self.verdicts.append(VerdictRecord(_flow_str(flow), v))
                if not v.allowed:
                    verdict = v
                    break
        pending = state.pending_type()
        pkt.opcua_tag = bool(payload) and (in_opn or pending == "OPN" or
                                           any(c[:3] == b"OPN" for c in chunks or ()))

        if not verdict.allowed:
            conn.blocked = True
            self.counters["dropped"] += 1 + len(held)
            held.clear()
            out = self._reset_frames(pkt, conn, flow) if self.config.drop_mode == "rst" else []
            self.metrics.records.append(PacketRecord(self._clock() - t0, tagged, forwarded=False))
            for f in out:
                self._queue.append((f, self._clock(), None))
            return
        if self.config.validation_enabled and pending in ("", "OPN"):
            held.append(frame)
            self.metrics.records.append(PacketRecord(self._clock() - t0, tagged))
            # record fixed up when the held frames are released
            return
        release = held + [frame]
        held.clear()
        self._enqueue(release, PacketRecord(self._clock() - t0, tagged))

    def _enqueue(self, frames, record: PacketRecord) -> None:
        self.metrics.records.append(record)
        t = self._clock()
        for i, f in enumerate(frames):
            self._queue.append((f, t, record if i == len(frames) - 1 else None))

    def egress(self) -> list[bytes]:
        out = []
        while self._queue:
            frame, t_enq, record = self._queue.popleft()
            if record is not None:
                record.dequeue_ns = self._clock() - t_enq
            out.append(frame)
        self.counters["forwarded"] += len(out)
        return out

    def transmit(self, frame: bytes) -> list[bytes]:
        self.ingress(frame)
        return self.egress()

    def _reset_frames(self, pkt: ParsedPacket, conn: _Connection, flow) -> list[bytes]:
        src, sport, dst, dport = flow
        fwd = conn.streams.get(flow)
        rev = conn.streams.get((dst, dport, src, sport))
        to_dst_seq = fwd.next_seq if fwd and fwd.next_seq is not None else pkt.tcp.seq
        to_src_seq = rev.next_seq if rev and rev.next_seq is not None else pkt.tcp.ack
        return [
            build_tcp_frame(src, sport, dst, dport, to_dst_seq, 0, RST | ACK),
            build_tcp_frame(dst, dport, src, sport, to_src_seq, 0, RST | ACK),
        ]

    def forget(self, flow) -> None:
        self._conns.pop(frozenset({(flow[0], flow[1]), (flow[2], flow[3])}), None)


def parse_packet(frame: bytes, opcua_port: int = OPCUA_PORT) -> ParsedPacket:
    """Stateless parse; tags a packet whose payload starts an OPN chunk on the OPC UA port."""
    pkt = parse_headers(frame)
    if pkt.tcp is not None and opcua_port in (pkt.tcp.src_port, pkt.tcp.dst_port):
        payload = pkt.payload(frame)
        if len(payload) >= 8:
            try:
                pkt.opcua_tag = decode_message_header(payload).msg_type == "OPN"
            except CodecError:
                pkt.opcua_tag = False
    return pkt
