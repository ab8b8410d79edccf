"""Privacy-loss accounting under advanced composition with a persistent ledger.

The ledger file is line-delimited JSON.  Each line carries a rolling SHA-256
``chain`` over the previous chain value and the record body, so truncation
or edits are detectable.  A trailing partial line (crash mid-append) is
ignored on load, which leaves the pre-spend state.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import math
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import InvalidParameter, PersistenceError

GENESIS = "0" * 64
DEFAULT_DELTA_PRIME = 1e-6


@dataclass(frozen=True)
class SpendRecord:
    timestamp: float
    epsilon_i: float
    delta_i: float
    operation_tag: str = "query"

    def __post_init__(self):
        if not self.epsilon_i > 0:
            raise InvalidParameter("per-query epsilon must be positive")
        if not 0 <= self.delta_i < 1:
            raise InvalidParameter("per-query delta must lie in [0, 1)")

    def body(self) -> dict:
        return {"ts": self.timestamp, "eps": self.epsilon_i, "delta": self.delta_i,
                "tag": self.operation_tag}


def chain_hash(prev: str, record: SpendRecord) -> str:
    payload = prev + json.dumps(record.body(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def compose(records: Iterable[SpendRecord], delta_prime: float = DEFAULT_DELTA_PRIME):
    """Advanced composition: ``(sum eps + sqrt(2 ln(1/d')) sqrt(sum eps^2), sum delta + d')``."""
    if not 0 < delta_prime < 1:
        raise InvalidParameter("delta_prime must lie in (0, 1)")
    eps = [r.epsilon_i for r in records]
    deltas = [r.delta_i for r in records] if eps else []
    if not eps:
        return 0.0, delta_prime
    s1 = math.fsum(eps)
    s2 = math.fsum(e * e for e in eps)
    eps_total = s1 + math.sqrt(2.0 * math.log(1.0 / delta_prime)) * math.sqrt(s2)
    return eps_total, math.fsum(deltas) + delta_prime


def identical_spend_epsilon(eps_query: float, T: int, delta_prime: float) -> float:
    """Closed form of ``compose`` for T identical spends."""
    if T == 0:
        return 0.0
    return T * eps_query + eps_query * math.sqrt(2.0 * T * math.log(1.0 / delta_prime))


@dataclass
class SpendDecision:
    accepted: bool
    epsilon_total: float
    delta_total: float
    record: Optional[SpendRecord] = None
    reason: str = ""


@dataclass
class PrivacyLedger:
    """Append-only spend log with operator budgets.

    ``path=None`` keeps the ledger in memory only.
    """

    budget_epsilon: float = math.inf
    budget_delta: float = 1.0
    delta_prime: float = DEFAULT_DELTA_PRIME
    path: Optional[Path] = None
    records: list = field(default_factory=list)
    _last_chain: str = GENESIS
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not 0 < self.delta_prime < 1:
            raise InvalidParameter("delta_prime must lie in (0, 1)")
        if self.path is not None:
            self.path = Path(self.path)
            if self.path.exists():
                self._reload()

    # -- persistence -------------------------------------------------------

    def _reload(self) -> None:
        records, last, dropped = read_ledger(self.path)
        if dropped:
            repair_tail(self.path)
        self.records = records
        self._last_chain = last

    def _append_line(self, record: SpendRecord, chain: str) -> None:
        line = json.dumps({**record.body(), "chain": chain}, sort_keys=True) + "\n"
        try:
            fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            try:
                os.write(fd, line.encode())
                os.fsync(fd)
            finally:
                os.close(fd)
        except OSError as exc:
            raise PersistenceError(f"ledger append failed: {exc}") from exc

    # -- queries -----------------------------------------------------------

    def totals(self):
        return compose(self.records, self.delta_prime)

    def try_spend(self, epsilon_i: float, delta_i: float, tag: str = "query") -> SpendDecision:
        """Atomically check the budget and append the spend if it fits."""
        with self._lock:
            lock_fd = None
            try:
                if self.path is not None:
                    try:
                        lock_fd = os.open(str(self.path) + ".lock", os.O_CREAT | os.O_RDWR, 0o644)
                        fcntl.flock(lock_fd, fcntl.LOCK_EX)
                        if self.path.exists():
                            self._reload()
                    except OSError as exc:
                        eps_t, del_t = self.totals()
                        return SpendDecision(False, eps_t, del_t, reason=f"persistence-error: {exc}")
                ts = time.time()
                if self.records:
                    ts = max(ts, self.records[-1].timestamp)
                rec = SpendRecord(ts, float(epsilon_i), float(delta_i), str(tag))
                eps_t, del_t = compose([*self.records, rec], self.delta_prime)
                if eps_t > self.budget_epsilon or del_t > self.budget_delta:
                    cur_e, cur_d = self.totals()
                    return SpendDecision(False, cur_e, cur_d, reason="budget exceeded")
                chain = chain_hash(self._last_chain, rec)
                if self.path is not None:
                    try:
                        self._append_line(rec, chain)
                    except PersistenceError as exc:
                        cur_e, cur_d = self.totals()
                        return SpendDecision(False, cur_e, cur_d, reason=str(exc))
                self.records.append(rec)
                self._last_chain = chain
                return SpendDecision(True, eps_t, del_t, record=rec)
            finally:
                if lock_fd is not None:
                    fcntl.flock(lock_fd, fcntl.LOCK_UN)
                    os.close(lock_fd)

    def report(self) -> dict:
        return aggregate_budget_report(self)


def read_ledger(path) -> tuple[list[SpendRecord], str, int]:
    """Parse and verify a ledger file.

    Returns ``(records, last_chain, dropped_partial_lines)``.  A chain mismatch
    on a complete line raises :class:`PersistenceError`.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read ledger: {exc}") from exc
    records = []
    prev = GENESIS
    dropped = 0
    lines = raw.split(b"\n")
    for k, line in enumerate(lines):
        if not line.strip():
            continue
        complete = k < len(lines) - 1  # followed by a newline
        try:
            doc = json.loads(line)
            rec = SpendRecord(float(doc["ts"]), float(doc["eps"]), float(doc["delta"]),
                              str(doc["tag"]))
            chain = doc["chain"]
        except (ValueError, KeyError, TypeError):
            if not complete:
                dropped += 1
                continue
            raise PersistenceError(f"corrupt ledger line {k + 1}")
        if not complete:
            dropped += 1
            continue
        if chain != chain_hash(prev, rec):
            raise PersistenceError(f"hash chain broken at line {k + 1}")
        records.append(rec)
        prev = chain
    return records, prev, dropped


def repair_tail(path) -> None:
    """Truncate an unterminated final line left by an interrupted append."""
    raw = Path(path).read_bytes()
    cut = raw.rfind(b"\n") + 1
    if cut < len(raw):
        with open(path, "r+b") as fh:
            fh.truncate(cut)
            fh.flush()
            os.fsync(fh.fileno())


def aggregate_budget_report(ledger: PrivacyLedger) -> dict:
    eps_t, del_t = ledger.totals()
    per_tag = defaultdict(lambda: {"count": 0, "epsilon_sum": 0.0, "delta_sum": 0.0})
    for r in ledger.records:
        t = per_tag[r.operation_tag]
        t["count"] += 1
        t["epsilon_sum"] += r.epsilon_i
        t["delta_sum"] += r.delta_i
    eps_values = {r.epsilon_i for r in ledger.records}
    out = {
        "records": len(ledger.records),
        "delta_prime": ledger.delta_prime,
        "epsilon_total": eps_t,
        "delta_total": del_t,
        "budget_epsilon": ledger.budget_epsilon,
        "budget_delta": ledger.budget_delta,
        "remaining_epsilon": ledger.budget_epsilon - eps_t,
        "remaining_delta": ledger.budget_delta - del_t,
        "per_tag": dict(per_tag),
    }
    if len(eps_values) == 1:
        eq = eps_values.pop()
        out["identical_spend"] = {
            "epsilon_query": eq,
            "T": len(ledger.records),
            "epsilon_aggregate": identical_spend_epsilon(eq, len(ledger.records),
                                                         ledger.delta_prime),
        }
    return out
