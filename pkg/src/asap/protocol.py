"""Synchronization disciplines over per-sender single-slot mailboxes.

Every directed edge ``src -> dst`` owns one :class:`Mailbox` at ``dst``.  A
write goes header first, then the payload in fixed-size chunks, then the
footer, so a read that lands mid-write sees ``header != footer`` and is
classified torn.

Worker behaviour is written as generator scripts (:func:`iteration_step`).
A script yields at every micro-step boundary: :data:`STEP` after an ordinary
step, :data:`MID_WRITE` inside a chunked write, or a :class:`Block` naming the
condition it waits on.  The runtime drives these scripts either from one
seeded scheduler or from one thread per worker; the protocol state itself
never blocks, except for the explicit blocking helpers
:meth:`Network.wait_notifies` and :meth:`Barrier.wait` used by threaded
callers.
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidArgument, ProtocolViolation, StalledPeer
from .learner import Model, model_average
from .topology import Topology

__all__ = [
    "SyncMode",
    "Message",
    "BufferStatus",
    "validate_buffer",
    "Mailbox",
    "Network",
    "Barrier",
    "TimeoutPolicy",
    "WorkerState",
    "ReduceOutcome",
    "Block",
    "STEP",
    "MID_WRITE",
    "iteration_step",
    "CHUNK",
    "ELEMENT_SIZE",
]

CHUNK = 64
ELEMENT_SIZE = 8
EMPTY = -1


class SyncMode(enum.Enum):
    BSP = "bsp"
    ASYNC = "async"
    NOTIFY_ACK = "notifyack"

    @classmethod
    def parse(cls, value: "str | SyncMode") -> "SyncMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"bsp": cls.BSP, "sync": cls.BSP, "async": cls.ASYNC,
                   "notifyack": cls.NOTIFY_ACK, "na": cls.NOTIFY_ACK}
        try:
            return aliases[key]
        except KeyError:
            raise InvalidArgument(f"unknown sync mode {value!r}; choose bsp, async or notifyack") from None


@dataclass(frozen=True, slots=True)
class Message:
    sender: int
    iteration: int
    payload: np.ndarray
    header_version: int
    footer_version: int

    @classmethod
    def intact(cls, sender: int, iteration: int, payload: np.ndarray) -> "Message":
        return cls(sender, iteration, np.asarray(payload, dtype=float), iteration, iteration)


class BufferStatus(enum.Enum):
    INTACT = "intact"
    TORN = "torn"


def validate_buffer(m: Message) -> BufferStatus:
    if m.header_version == m.footer_version and m.header_version != EMPTY:
        return BufferStatus.INTACT
    return BufferStatus.TORN


class _Marker:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name


STEP = _Marker("STEP")
MID_WRITE = _Marker("MID_WRITE")


@dataclass
class Block:
    """Yielded by a script that cannot proceed until ``ready()`` holds."""

    ready: Callable[[], bool]
    what: str
    missing: Callable[[], tuple[int, ...]] = lambda: ()


class Mailbox:
    """Single-slot receive buffer for one directed edge ``sender -> owner``."""

    def __init__(self, owner: int, sender: int, d: int, chunk: int = CHUNK):
        self.owner = owner
        self.sender = sender
        self.d = d
        self.chunk = chunk
        self.header = EMPTY
        self.footer = EMPTY
        self.payload = np.zeros(d)
        self.chunk_cursor: int | None = None
        self.consumed_version = EMPTY
        self.n_chunks = max(1, -(-d // chunk))
        self._incoming: Message | None = None

    @property
    def writing(self) -> bool:
        return self.chunk_cursor is not None

    @property
    def holds_unconsumed(self) -> bool:
        return self.footer != EMPTY and self.footer > self.consumed_version

    def begin_write(self, m: Message) -> None:
        if m.payload.shape != (self.d,):
            raise InvalidArgument(f"payload length {m.payload.shape} != model dimension {self.d}")
        self._incoming = m
        self.header = m.header_version
        self.chunk_cursor = 0

    def write_chunk(self) -> bool:
        """Copy the next chunk; returns True once the payload is fully written."""
        c = self.chunk_cursor
        lo = c * self.chunk
        self.payload[lo:lo + self.chunk] = self._incoming.payload[lo:lo + self.chunk]
        self.chunk_cursor = c + 1
        return self.chunk_cursor >= self.n_chunks

    def finish_write(self) -> None:
        self.footer = self._incoming.footer_version
        self.chunk_cursor = None
        self._incoming = None

    def write_all(self, m: Message) -> None:
        self.begin_write(m)
        while not self.write_chunk():
            pass
        self.finish_write()

    def read(self) -> Message | None:
        """Snapshot of the slot, or None if nothing was ever written."""
        if self.header == EMPTY and self.footer == EMPTY:
            return None
        return Message(self.sender, self.header, self.payload.copy(), self.header, self.footer)

    def clear(self) -> None:
        self.header = self.footer = self.consumed_version = EMPTY
        self.payload[:] = 0.0
        self.chunk_cursor = None
        self._incoming = None


class Network:
    """Mailboxes plus the NOTIFY/ACK control state for one topology."""

    def __init__(self, topology: Topology, mode: SyncMode, d: int, chunk: int = CHUNK,
                 element_size: int = ELEMENT_SIZE):
        self.topology = topology
        self.mode = SyncMode.parse(mode)
        self.d = d
        self.element_size = element_size
        self.mailboxes = {(s, t): Mailbox(t, s, d, chunk) for s, t in topology.edges}
        self.notify_count = {e: 0 for e in topology.edges}
        # per receiver: how many in-edges currently have a pending NOTIFY
        self._notified = [0] * topology.n
        self._need = [topology.in_degree(i) for i in range(topology.n)]
        self.credit = {e: 1 for e in topology.edges}
        self._wrote = {e: False for e in topology.edges}
        self._await_ack = {e: False for e in topology.edges}
        self.bytes_sent = [0] * topology.n
        self.messages_sent = [0] * topology.n
        self.cond = threading.Condition(threading.RLock())

    def _edge(self, src: int, dst: int) -> tuple[int, int]:
        e = (src, dst)
        if e in self.mailboxes:
            return e
        raise InvalidArgument(f"no edge {src} -> {dst} in topology {self.topology.name}")

    def has_credit(self, w: int, dst: int) -> bool:
        return self.mode is not SyncMode.NOTIFY_ACK or self.credit[(w, dst)] == 1

    # -- sending ------------------------------------------------------------

    def begin_send(self, w: int, dst: int, m: Message) -> Mailbox:
        """Credit check, byte accounting and header write for ``w -> dst``."""
        e = (w, dst)
        box = self.mailboxes.get(e) or self.mailboxes[self._edge(w, dst)]
        if self.mode is SyncMode.NOTIFY_ACK:
            if self.credit[e] != 1:
                raise ProtocolViolation(f"send {w}->{dst} without ACK credit", w, m.iteration)
            if box.holds_unconsumed:
                raise ProtocolViolation(f"send {w}->{dst} would overwrite an unconsumed message",
                                        w, m.iteration)
            self.credit[e] = 0
        self.bytes_sent[w] += self.d * self.element_size
        self.messages_sent[w] += 1
        self._wrote[e] = False
        box.begin_write(m)
        return box

    def finish_send(self, w: int, dst: int) -> None:
        e = (w, dst)
        self.mailboxes[e].finish_write()
        self._wrote[e] = True

    def send_update(self, w: int, dst: int, m: Message) -> None:
        """Write ``m`` into the ``w -> dst`` slot in one go."""
        box = self.begin_send(w, dst, m)
        while not box.write_chunk():
            pass
        self.finish_send(w, dst)

    def write_steps(self, w: int, dst: int, m: Message):
        """Generator form of :meth:`send_update`, yielding between parts of the write."""
        box = self.begin_send(w, dst, m)
        yield MID_WRITE
        while not box.write_chunk():
            yield MID_WRITE
        yield MID_WRITE
        self.finish_send(w, dst)

    # -- NOTIFY / ACK -------------------------------------------------------

    def notify(self, w: int, dst: int) -> None:
        e = self._edge(w, dst)
        if self.mode is SyncMode.NOTIFY_ACK and not self._wrote[e]:
            box = self.mailboxes[e]
            what = "before its payload completed" if box.writing else "without a preceding send"
            raise ProtocolViolation(f"notify {w}->{dst} {what}", w)
        self._wrote[e] = False
        self.notify_count[e] += 1
        if self.notify_count[e] == 1:
            self._notified[dst] += 1

    def missing_notifies(self, w: int) -> tuple[int, ...]:
        return tuple(s for s in self.topology.in_neighbors(w) if self.notify_count[(s, w)] < 1)

    def notified_all(self, w: int) -> bool:
        return self._notified[w] == self._need[w]

    def take_notifies(self, w: int) -> set[int]:
        senders = set(self.topology.in_neighbors(w))
        for s in senders:
            if self.notify_count[(s, w)] < 1:
                raise ProtocolViolation(f"reduce at {w} before NOTIFY from {s}", w)
        for s in senders:
            self.notify_count[(s, w)] -= 1
            if self.notify_count[(s, w)] == 0:
                self._notified[w] -= 1
        return senders

    def wait_notifies(self, w: int, timeout: float | None = None) -> set[int]:
        """Blocking form for threaded callers: wait for a NOTIFY from every in-neighbor."""
        if self.mode is not SyncMode.NOTIFY_ACK:
            raise ProtocolViolation("wait_notifies outside NOTIFY_ACK mode", w)
        with self.cond:
            if not self.cond.wait_for(lambda: self.notified_all(w), timeout):
                raise StalledPeer("timed out waiting for NOTIFY", w, missing=self.missing_notifies(w))
            return self.take_notifies(w)

    def ack(self, w: int, sender: int) -> None:
        e = self._edge(sender, w)
        if not self._await_ack[e]:
            raise ProtocolViolation(f"ACK {w}->{sender} with nothing consumed (double ack?)", w)
        self._await_ack[e] = False
        self.credit[e] = 1

    # -- receiving ----------------------------------------------------------

    def read(self, w: int, sender: int) -> Message | None:
        try:
            box = self.mailboxes[(sender, w)]
        except KeyError:
            self._edge(sender, w)
            raise
        return box.read()

    def consume(self, w: int, m: Message) -> bool:
        """Mark an intact, not yet consumed message as used; False if it was stale."""
        e = (m.sender, w)
        box = self.mailboxes[e]
        if m.footer_version <= box.consumed_version:
            return False
        box.consumed_version = m.footer_version
        if self.mode is SyncMode.NOTIFY_ACK:
            self._await_ack[e] = True
        return True

    def reset_channels(self) -> None:
        """Empty every slot and restore credits (used at checkpoint boundaries)."""
        for box in self.mailboxes.values():
            box.clear()
        self._notified = [0] * self.topology.n
        for e in self.notify_count:
            self.notify_count[e] = 0
            self.credit[e] = 1
            self._wrote[e] = False
            self._await_ack[e] = False

    def total_bytes(self) -> int:
        return sum(self.bytes_sent)


class TimeoutPolicy:
    """Stall timeout as a multiple of the smoothed interval between reduces.

    Until an interval has been observed the ``initial`` timeout applies; a
    fixed ``timeout`` overrides the dynamic rule entirely.
    """

    def __init__(self, factor: float = 100.0, alpha: float = 0.1, initial: float | None = None,
                 timeout: float | None = None):
        self.factor = factor
        self.alpha = alpha
        self.initial = initial
        self.fixed = timeout
        self._mean: float | None = None
        self._current = self._compute()

    @property
    def mean_interval(self) -> float | None:
        return self._mean

    @mean_interval.setter
    def mean_interval(self, value: float | None) -> None:
        self._mean = value
        self._current = self._compute()

    def observe(self, interval: float) -> None:
        if interval <= 0:
            return
        m = self._mean
        self._mean = interval if m is None else m + self.alpha * (interval - m)
        self._current = self._compute()

    def _compute(self) -> float | None:
        if self.fixed is not None:
            return self.fixed
        if self._mean is None:
            return self.initial
        dyn = self.factor * self._mean
        return dyn if self.initial is None else max(dyn, self.initial)

    def current(self) -> float | None:
        return self._current


class Barrier:
    """Reusable all-worker barrier, usable from scripts or from threads."""

    def __init__(self, n: int):
        self.n = n
        self.generation = 0
        self._arrived: set[int] = set()
        self.cond = threading.Condition(threading.RLock())

    def arrive(self, w: int) -> int:
        if w in self._arrived:
            raise ProtocolViolation("worker entered the barrier twice", w)
        gen = self.generation
        self._arrived.add(w)
        if len(self._arrived) == self.n:
            self._arrived.clear()
            self.generation += 1
        return gen

    def passed(self, gen: int) -> bool:
        return self.generation > gen

    def missing(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if i not in self._arrived)

    def wait(self, w: int, timeout: float | None = None) -> None:
        with self.cond:
            gen = self.arrive(w)
            self.cond.notify_all()
            if not self.cond.wait_for(lambda: self.passed(gen), timeout):
                raise StalledPeer("barrier timed out", w, missing=self.missing())


@dataclass
class WorkerState:
    wid: int
    model: Model
    in_neighbors: tuple[int, ...]
    out_neighbors: tuple[int, ...]
    iteration: int = 0


@dataclass
class ReduceOutcome:
    worker: int
    iteration: int
    intact: int
    torn: int
    expected: int
    model: Model = field(repr=False)


LocalUpdate = Callable[[int, Model, int], Model]


def iteration_step(net: Network, ws: WorkerState, mode: SyncMode, local_update: LocalUpdate,
                   barrier: Barrier | None = None):
    """One protocol iteration for worker ``ws`` as a micro-step generator.

    Local update -> send to every out-neighbor -> synchronize (per mode) ->
    read and validate inputs -> average the intact ones with the local model.
    The generator's return value is the :class:`ReduceOutcome`.
    """
    w, t = ws.wid, ws.iteration
    notify_ack = mode is SyncMode.NOTIFY_ACK
    half = local_update(w, ws.model, t)
    yield STEP

    msg = Message.intact(w, t, half.w)
    for dst in ws.out_neighbors:
        if notify_ack and not net.has_credit(w, dst):
            yield Block(lambda dst=dst: net.has_credit(w, dst), f"ACK from {dst}", lambda dst=dst: (dst,))
        box = net.begin_send(w, dst, msg)
        yield MID_WRITE
        while not box.write_chunk():
            yield MID_WRITE
        yield MID_WRITE
        net.finish_send(w, dst)
        if notify_ack:
            net.notify(w, dst)

    if mode is SyncMode.BSP:
        if barrier is None:
            raise InvalidArgument("BSP mode needs a barrier")
        gen = barrier.arrive(w)
        yield Block(lambda: barrier.passed(gen), "barrier", barrier.missing)
        senders: Iterable[int] = ws.in_neighbors
    elif mode is SyncMode.NOTIFY_ACK:
        if not net.notified_all(w):
            yield Block(lambda: net.notified_all(w), "NOTIFY", lambda: net.missing_notifies(w))
        senders = sorted(net.take_notifies(w))
    else:
        senders = ws.in_neighbors

    inputs = []
    torn = 0
    consumed = []
    for s in senders:
        m = net.read(w, s)
        yield STEP
        if m is None:
            continue
        if validate_buffer(m) is BufferStatus.TORN:
            torn += 1
            continue
        if net.consume(w, m):
            inputs.append(m.payload)
            consumed.append(s)

    ws.model = model_average(half, inputs)
    if notify_ack:
        for s in consumed:
            net.ack(w, s)
    ws.iteration = t + 1
    return ReduceOutcome(w, t, len(inputs), torn, len(ws.in_neighbors), ws.model)


def blocking_wait(cond: threading.Condition, block: Block, timeout: float | None, worker: int,
                  iteration: int | None = None, abort: Callable[[], bool] = lambda: False) -> None:
    """Wait on ``cond`` until ``block`` is ready; raise StalledPeer on timeout."""
    deadline = None if timeout is None else time.monotonic() + timeout
    while not block.ready():
        if abort():
            return
        remaining = None if deadline is None else deadline - time.monotonic()
        if remaining is not None and remaining <= 0:
            raise StalledPeer(f"timed out waiting for {block.what}", worker, iteration, block.missing())
        cond.wait(0.05 if remaining is None else min(remaining, 0.05))
