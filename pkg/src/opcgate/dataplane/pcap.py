"""Classic libpcap capture files (Ethernet link type) and offline replay."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import PipelineConfig, Switch
from .table import ThumbprintTable

LINKTYPE_ETHERNET = 1
_MAGIC_US = 0xA1B2C3D4
_MAGIC_NS = 0xA1B23C4D


class CaptureUnreadable(ValueError):
    pass


def read_pcap(path) -> list[tuple[float, bytes]]:
    data = Path(path).read_bytes()
    if not data:
        return []
    if len(data) < 24:
        raise CaptureUnreadable("file shorter than a pcap global header")
    for endian in ("<", ">"):
        magic = struct.unpack_from(endian + "I", data, 0)[0]
        if magic in (_MAGIC_US, _MAGIC_NS):
            break
    else:
        raise CaptureUnreadable(f"unknown magic {data[:4].hex()} (pcapng is not supported)")
    scale = 1e-9 if magic == _MAGIC_NS else 1e-6
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise CaptureUnreadable(f"link type {linktype} is not Ethernet")
    out = []
    pos = 24
    rec = struct.Struct(endian + "IIII")
    while pos < len(data):
        if pos + 16 > len(data):
            raise CaptureUnreadable(f"truncated record header at offset {pos}")
        sec, frac, incl, _orig = rec.unpack_from(data, pos)
        pos += 16
        if pos + incl > len(data):
            raise CaptureUnreadable(f"truncated record at offset {pos}")
        out.append((sec + frac * scale, data[pos : pos + incl]))
        pos += incl
    return out


def write_pcap(path, frames) -> None:
    """``frames`` is an iterable of ``(timestamp, bytes)`` or plain bytes."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", _MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for i, item in enumerate(frames):
            ts, frame = item if isinstance(item, tuple) else (i * 1e-3, item)
            sec = int(ts)
            usec = int(round((ts - sec) * 1e6))
            fh.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
            fh.write(frame)


@dataclass
class ReplayReport:
    verdicts: list = field(default_factory=list)
    frames: int = 0
    opcua_frames: int = 0
    other_frames: int = 0
    metrics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "frames": self.frames,
            "opcua_frames": self.opcua_frames,
            "other_frames": self.other_frames,
            "verdicts": self.verdicts,
            "metrics": self.metrics,
        }


def replay(path, table: ThumbprintTable, config: PipelineConfig | None = None) -> ReplayReport:
    """Run every frame of a capture through a switch; one verdict line per OPN chunk."""
    frames = read_pcap(path)
    clock_state = {"now": 0.0}
    switch = Switch(table, config, now=lambda: clock_state["now"])
    for ts, frame in frames:
        clock_state["now"] = ts
        switch.ingress(frame)
        switch.egress()
    report = ReplayReport(frames=len(frames))
    report.other_frames = switch.counters["passthrough"]
    report.opcua_frames = report.frames - report.other_frames
    report.verdicts = [v.as_dict() for v in switch.verdicts if v.verdict.msg_type in ("OPN", None)]
    report.metrics = switch.metrics.aggregates()
    return report
