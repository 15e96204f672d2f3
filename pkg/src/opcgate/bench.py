"""Measurement campaigns.

Q1: gateway cost. The same handshake workload runs with validation off
(baseline) and on (enforced); per-packet processing and dequeue times come
from the switch instrumentation, handshake times from the client.

Q2: ledger propagation. One certificate issue per trial; the delay is from
submission to delivery at a subscribed controller, per (layer, link
preset, certificate size) cell.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import json
import platform
import random
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .harness.certs import padded_certificate
from .harness.endpoints import Outcome
from .harness.report import percentile, summarize
from .harness.scenarios import Testbed
from .ledger.actions import CertificateAction
from .ledger.keys import AdminKeyring, SigningKey
from .ledger.network import L1Ledger, L2Ledger
from .ledger.simnet import preset


class HarnessFailure(RuntimeError):
    pass


def environment(config: dict) -> dict:
    info = time.get_clock_info("perf_counter")
    return {
        "host": platform.node(),
        "platform": platform.platform(),
        "python": sys.version.split()[0],
        "clock": {"name": "perf_counter", "resolution_s": info.resolution, "monotonic": info.monotonic},
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
    }


@dataclass
class BenchReport:
    campaign: str
    config: dict
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    comparison: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "campaign": self.campaign,
            "config": self.config,
            "environment": self.environment,
            "aggregates": self.aggregates,
            "comparison": self.comparison,
            "records": self.records,
        }

    def write(self, json_path, csv_path=None) -> None:
        """Write once; an existing report is never overwritten."""
        with open(json_path, "x") as fh:
            json.dump(self.as_dict(), fh, indent=1, sort_keys=True)
        if csv_path is not None:
            columns = sorted({k for r in self.records for k in r})
            with open(csv_path, "x", newline="") as fh:
                w = csv.DictWriter(fh, columns)
                w.writeheader()
                w.writerows(self.records)

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))


# -- Q1 ----------------------------------------------------------------------------


ARMS = (("baseline", False), ("enforced", True))


def _q1_arms(n: int, seed: int, link, warmup: int, block: int) -> list:
    """Both arms in alternating blocks, ABBA order, one handshake at a time.

    Arms never run concurrently. Alternating blocks cancel slow drift in host
    speed, which otherwise outweighs the switch's share of a handshake.
    """
    beds = {}
    for arm, enabled in ARMS:
        tb = Testbed(validation_enabled=enabled, seed=seed, link=link)
        tb.trust(tb.client_identity, tb.server_identity)
        for _ in range(warmup):
            tb.handshake()
        tb.switch.metrics.clear()
        beds[arm] = tb
    results = {arm: [] for arm, _ in ARMS}
    gc.collect()
    gc.disable()
    try:
        for b in range(-(-n // block)):
            order = ARMS if b % 2 == 0 else ARMS[::-1]
            for arm, _ in order:
                todo = min(block, n - len(results[arm]))
                results[arm] += [(b, beds[arm].handshake()) for _ in range(todo)]
    finally:
        gc.enable()
    records = []
    for arm, _ in ARMS:
        records += [
            {"arm": arm, "kind": "packet", "index": i, "tagged": r.tagged,
             "processing_ns": r.processing_ns, "dequeue_ns": r.dequeue_ns}
            for i, r in enumerate(beds[arm].switch.metrics.records)
        ]
        records += [
            {"arm": arm, "kind": "handshake", "index": i, "block": b, "outcome": h.outcome.value,
             "handshake_ms": h.duration_ms}
            for i, (b, h) in enumerate(results[arm])
        ]
    return records


def q1_aggregates(records: list) -> dict:
    out = {}
    for arm, _ in ARMS:
        pk = [r for r in records if r["arm"] == arm and r["kind"] == "packet"]
        tagged = [r for r in pk if r["tagged"]]
        hs = [r for r in records if r["arm"] == arm and r["kind"] == "handshake"]
        out[arm] = {
            "tagged_records": len(tagged),
            "established": sum(r["outcome"] == Outcome.ESTABLISHED.value for r in hs),
            "processing_ns_tagged": summarize(r["processing_ns"] for r in tagged),
            "processing_ns_all": summarize(r["processing_ns"] for r in pk),
            "dequeue_ns_tagged": summarize(r["dequeue_ns"] for r in tagged),
            "handshake_ms": summarize(r["handshake_ms"] for r in hs),
        }
    return out


def q1_comparison(aggregates: dict) -> dict:
    base, enf = aggregates["baseline"], aggregates["enforced"]
    out = {}
    for metric in ("processing_ns_tagged", "dequeue_ns_tagged", "handshake_ms"):
        b, e = base[metric]["mean"], enf[metric]["mean"]
        if b is None or e is None:
            out[metric] = {"delta": None, "ratio": None}
        else:
            out[metric] = {"delta": e - b, "ratio": (e / b) if b else None}
    return out


def bench_q1(n: int = 1000, seed: int = 0, link="zero", warmup: int = 50, block: int = 10) -> BenchReport:
    if n < 1 or block < 1:
        raise ValueError("n and block must be positive")
    config = {"n": n, "seed": seed, "link": str(link), "warmup": warmup, "block": block}
    records = _q1_arms(n, seed, link, warmup, block)
    aggregates = q1_aggregates(records)
    for arm, _ in ARMS:
        if aggregates[arm]["established"] != n:
            raise HarnessFailure(f"{arm}: only {aggregates[arm]['established']}/{n} handshakes established")
    return BenchReport("Q1", config, records, aggregates, q1_comparison(aggregates), environment(config))


# -- Q2 ----------------------------------------------------------------------------


DEFAULT_PRESETS = ("short", "medium", "long")
DEFAULT_SIZES = (1024, 4096, 16384)


def outliers(values) -> int:
    """Points beyond 1.5 IQR from the quartiles."""
    if len(values) < 4:
        return 0
    q1, q3 = percentile(values, 25), percentile(values, 75)
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    return sum(1 for v in values if v < lo or v > hi)


def _q2_cell(layer: str, link: str, size: int, trials: int, seed: int, admin: SigningKey,
             keyring: AdminKeyring) -> list[float]:
    rng = random.Random(f"{seed}/{layer}/{link}/{size}")
    if layer == "L1":
        ledger = L1Ledger(link=link, rng=rng)
    elif layer == "L2":
        ledger = L2Ledger(keyring, link=link, rng=rng)
    else:
        raise ValueError(f"unknown layer {layer!r}")
    sub = ledger.subscribe(keyring=keyring)
    delays = []
    for i in range(trials):
        cert = padded_certificate(size, seed=seed * 1_000_003 + i)
        start = ledger.now
        ledger.submit(CertificateAction.issue(cert, 1e12), admin)
        ledger.settle()
        events = sub.poll()
        if len(events) != 1:
            raise HarnessFailure(f"{layer}/{link}/{size}: trial {i} delivered {len(events)} events")
        delays.append(events[0].delivered_at - start)
    return delays


def bench_q2(trials: int = 300, presets=DEFAULT_PRESETS, sizes=DEFAULT_SIZES, layers=("L1", "L2"),
             seed: int = 0) -> BenchReport:
    presets = [p for p in presets]
    for p in presets:
        preset(p)  # validate names early
    config = {"trials": trials, "presets": presets, "sizes": list(sizes), "layers": list(layers),
              "seed": seed}
    admin = SigningKey.from_seed(hashlib.sha256(f"bench-admin/{seed}".encode()).digest())
    keyring = AdminKeyring({admin.public_key})
    records, cells = [], {}
    for layer in layers:
        for link in presets:
            for size in sizes:
                delays = _q2_cell(layer, link, size, trials, seed, admin, keyring)
                records += [{"layer": layer, "preset": link, "size": size, "trial": i, "delay_s": d}
                            for i, d in enumerate(delays)]
                cells[f"{layer}/{link}/{size}"] = {
                    **summarize(delays),
                    "median": statistics.median(delays),
                    "outliers": outliers(delays),
                }
    report = BenchReport("Q2", config, records, cells, {}, environment(config))
    report.comparison = q2_comparison(cells, layers, presets, sizes)
    return report


def q2_comparison(cells: dict, layers, presets, sizes) -> dict:
    out = {}
    if "L1" in layers and "L2" in layers:
        out["l2_vs_l1_median_reduction"] = {
            f"{p}/{s}": 1 - cells[f"L2/{p}/{s}"]["median"] / cells[f"L1/{p}/{s}"]["median"]
            for p in presets for s in sizes
        }
    for layer in layers:
        out[f"{layer}_max_delay_s"] = max(cells[f"{layer}/{p}/{s}"]["max"] for p in presets for s in sizes)
    return out


def save(report: BenchReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    base = out_dir / f"{report.campaign.lower()}-{stamp}"
    report.write(base.with_suffix(".json"), base.with_suffix(".csv"))
    return base.with_suffix(".json"), base.with_suffix(".csv")
