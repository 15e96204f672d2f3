"""File-backed ledgers so separate processes (admin, gateway) share one history.

The file holds one JSON line per L1 transaction or L2 contract call. Each
process replays it into its own simulated ledger instance.
"""

from __future__ import annotations

import os
import random
import time
from pathlib import Path

from .keys import AdminKeyring
from .network import L1Ledger, L2Ledger
from .simnet import Scheduler

FLUSH_HORIZON = 60.0  # simulated seconds; L1 delivery stays well under this


def new_ledger(layer: str, keyring: AdminKeyring, link: str = "zero", seed: int = 0,
               start: float | None = None):
    scheduler = Scheduler(time.time() if start is None else start)
    rng = random.Random(seed)
    if layer == "L1":
        return L1Ledger(scheduler, link, rng)
    if layer == "L2":
        return L2Ledger(keyring, scheduler, link, rng)
    raise ValueError(f"unknown ledger layer {layer!r}")


def load_into(ledger, path) -> int:
    """Import new lines from ``path``; returns how many were added."""
    path = Path(path)
    if not path.exists():
        return 0
    with path.open() as fh:
        return ledger.import_lines(fh)


def flush(ledger, horizon: float = FLUSH_HORIZON) -> None:
    """Run the simulation far enough for pending confirmations and deliveries."""
    ledger.scheduler.run(until=ledger.now + horizon)


def save(ledger, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w") as fh:
        for line in ledger.export_lines():
            fh.write(line + "\n")
    os.replace(tmp, path)
