"""Per-direction TCP stream reassembly into complete OPC UA chunks."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..codec import HEADER_SIZE, decode_message_header
from .extract import BLOCK_SIZE, DEFAULT_MAX_CHUNKS

# 8 header + 4 channel id + 3 length prefixes + 20 thumbprint + 8 sequence header.
OPN_OVERHEAD = 52
DEFAULT_BUFFER_LIMIT = 2 * (BLOCK_SIZE * DEFAULT_MAX_CHUNKS + OPN_OVERHEAD)
DEFAULT_GAP_TIMEOUT = 5.0

_MOD = 1 << 32


class ReassemblyError(RuntimeError):
    pass


class ReassemblyOverflow(ReassemblyError):
    pass


class OutOfOrderGapTimeout(ReassemblyError):
    pass


@dataclass
class StreamState:
    next_seq: int | None = None
    buffer: bytearray = field(default_factory=bytearray)
    out_of_order: dict = field(default_factory=dict)
    gap_since: float | None = None
    limit: int = DEFAULT_BUFFER_LIMIT
    gap_timeout: float = DEFAULT_GAP_TIMEOUT

    @property
    def buffered(self) -> int:
        return len(self.buffer) + sum(len(v) for v in self.out_of_order.values())

    def pending_type(self) -> str | None:
        """Message type of the partial chunk at the head of the buffer, '' if unknown yet."""
        if not self.buffer:
            return None
        if len(self.buffer) < 3:
            return ""
        return bytes(self.buffer[:3]).decode("ascii", errors="replace")

    def open(self, isn: int) -> None:
        self.next_seq = (isn + 1) % _MOD


def _take_chunks(state: StreamState) -> list[bytes]:
    out = []
    while len(state.buffer) >= HEADER_SIZE:
        header = decode_message_header(state.buffer)
        if len(state.buffer) < header.message_size:
            break
        out.append(bytes(state.buffer[: header.message_size]))
        del state.buffer[: header.message_size]
    return out


def reassemble(seq: int, payload: bytes, state: StreamState, now: float = 0.0) -> list[bytes]:
    """Add one segment and return the chunks it completed, in stream order.

    Raises codec errors when the stream is not OPC UA framing.
    """
    if state.next_seq is None:
        state.next_seq = seq
    if payload:
        rel = (seq - state.next_seq) % _MOD
        if rel >= _MOD // 2:
            # starts before next_seq: retransmission, keep only the new tail
            overlap = (state.next_seq - seq) % _MOD
            payload = payload[overlap:]
            rel = 0
        if payload:
            if rel == 0:
                state.buffer += payload
                state.next_seq = (state.next_seq + len(payload)) % _MOD
            else:
                state.out_of_order[seq] = payload
                if state.gap_since is None:
                    state.gap_since = now
    # drain out-of-order segments that are now contiguous
    progressed = True
    while progressed and state.out_of_order:
        progressed = False
        for s in list(state.out_of_order):
            rel = (s - state.next_seq) % _MOD
            data = state.out_of_order[s]
            if rel >= _MOD // 2:
                overlap = (state.next_seq - s) % _MOD
                del state.out_of_order[s]
                if overlap < len(data):
                    state.buffer += data[overlap:]
                    state.next_seq = (state.next_seq + len(data) - overlap) % _MOD
                progressed = True
            elif rel == 0:
                del state.out_of_order[s]
                state.buffer += data
                state.next_seq = (state.next_seq + len(data)) % _MOD
                progressed = True
    if not state.out_of_order:
        state.gap_since = None
    elif state.gap_since is not None and now - state.gap_since > state.gap_timeout:
        raise OutOfOrderGapTimeout(f"gap open for {now - state.gap_since:.3f}s")
    chunks = _take_chunks(state)
    if state.buffered > state.limit:
        raise ReassemblyOverflow(f"{state.buffered} bytes buffered, limit {state.limit}")
    return chunks
