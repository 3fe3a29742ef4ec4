"""Convergence traces, consistency histograms and byte counters."""

from __future__ import annotations

import csv
import json
import queue
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidArgument

__all__ = [
    "TRACE_COLUMNS",
    "TraceRow",
    "ConvergenceTrace",
    "ConsistencyHistogram",
    "Collector",
    "write_trace",
    "read_trace",
    "write_consistency",
    "read_consistency",
]

TRACE_COLUMNS = ("time_s", "iteration", "epoch", "objective", "accuracy", "bytes_per_worker")


@dataclass(frozen=True)
class TraceRow:
    time_s: float
    iteration: int
    epoch: float
    objective: float
    accuracy: float
    bytes_per_worker: float


@dataclass
class ConvergenceTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if row.iteration <= last.iteration:
                raise InvalidArgument(f"trace iteration {row.iteration} not after {last.iteration}")
            if row.bytes_per_worker < last.bytes_per_worker:
                raise InvalidArgument("trace byte counter decreased")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def first_reaching(self, acc: float) -> TraceRow | None:
        return next((r for r in self.rows if r.accuracy >= acc), None)


@dataclass
class ConsistencyHistogram:
    """Number of reduces that consumed exactly ``k`` intact buffers."""

    mode: str
    counts: dict[int, int] = field(default_factory=dict)
    full: int = 0
    torn_reads: int = 0

    def record_reduce(self, worker: int, intact_count: int, expected_in_degree: int, torn: int = 0) -> None:
        if not 0 <= intact_count <= expected_in_degree:
            raise InvalidArgument(
                f"worker {worker}: intact count {intact_count} outside 0..{expected_in_degree}")
        self.counts[intact_count] = self.counts.get(intact_count, 0) + 1
        if intact_count == expected_in_degree:
            self.full += 1
        self.torn_reads += torn

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def fraction_at_least(self, k: int) -> float:
        total = self.total
        return sum(c for j, c in self.counts.items() if j >= k) / total if total else 0.0

    def fraction_full(self) -> float:
        return self.full / self.total if self.total else 0.0

    def percentages(self) -> dict[int, float]:
        total = self.total
        return {k: 100.0 * c / total for k, c in sorted(self.counts.items())} if total else {}

    def merge(self, other: "ConsistencyHistogram") -> None:
        for k, c in other.counts.items():
            self.counts[k] = self.counts.get(k, 0) + c
        self.full += other.full
        self.torn_reads += other.torn_reads

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "counts": {str(k): c for k, c in sorted(self.counts.items())},
            "total": self.total,
            "full": self.full,
            "torn_reads": self.torn_reads,
            "percent": {str(k): p for k, p in self.percentages().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConsistencyHistogram":
        return cls(d["mode"], {int(k): int(c) for k, c in d["counts"].items()},
                   int(d.get("full", 0)), int(d.get("torn_reads", 0)))


class Collector:
    """Single writer for metrics; producers only ever call :meth:`submit`."""

    def __init__(self, mode: str):
        self._inbox: queue.SimpleQueue = queue.SimpleQueue()
        self.histogram = ConsistencyHistogram(mode)
        self.trace = ConvergenceTrace()

    def submit(self, kind: str, payload) -> None:
        self._inbox.put((kind, payload))

    def drain(self) -> None:
        while True:
            try:
                kind, payload = self._inbox.get_nowait()
            except queue.Empty:
                return
            if kind == "reduce":
                self.histogram.record_reduce(*payload)
            elif kind == "trace":
                self.trace.append(payload)
            else:
                raise InvalidArgument(f"unknown metric record {kind!r}")


def write_trace(trace: ConvergenceTrace, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with path.open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(TRACE_COLUMNS)
            for r in trace.rows:
                wr.writerow([repr(float(r.time_s)), r.iteration, repr(float(r.epoch)),
                             repr(float(r.objective)), repr(float(r.accuracy)), repr(float(r.bytes_per_worker))])
    elif format == "json":
        path.write_text(json.dumps([asdict(r) for r in trace.rows], indent=1))
    else:
        raise InvalidArgument(f"unknown trace format {format!r}")


def read_trace(path) -> ConvergenceTrace:
    path = Path(path)
    trace = ConvergenceTrace()
    if path.suffix == ".json":
        records = json.loads(path.read_text())
    else:
        with path.open(newline="") as f:
            rd = csv.DictReader(f)
            if tuple(rd.fieldnames or ()) != TRACE_COLUMNS:
                raise InvalidArgument(f"unexpected trace header {rd.fieldnames}")
            records = list(rd)
    for rec in records:
        trace.append(TraceRow(float(rec["time_s"]), int(rec["iteration"]), float(rec["epoch"]),
                              float(rec["objective"]), float(rec["accuracy"]), float(rec["bytes_per_worker"])))
    return trace


def write_consistency(hists: dict[str, ConsistencyHistogram] | list[ConsistencyHistogram], path) -> None:
    if isinstance(hists, dict):
        hists = list(hists.values())
    Path(path).write_text(json.dumps({h.mode: h.as_dict() for h in hists}, indent=1))


def read_consistency(path) -> dict[str, ConsistencyHistogram]:
    data = json.loads(Path(path).read_text())
    return {k: ConsistencyHistogram.from_dict(v) for k, v in data.items()}
