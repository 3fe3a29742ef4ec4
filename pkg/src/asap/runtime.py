"""Drive ``n`` simulated workers through protocol iterations.

Two drivers share the same worker scripts:

* :class:`DeterministicScheduler` runs everything in the calling thread and
  picks the next micro-step with a seeded RNG, so a ``(config, seed)`` pair
  always produces the same interleaving.  Its clock is the tick counter.
* :class:`ThreadedScheduler` gives every worker its own thread; micro-steps
  are serialized by one condition variable and the OS decides the order.

Runs may be split into segments at checkpoint boundaries; at a boundary
every worker has finished the same iteration and all channels are drained.
"""

from __future__ import annotations

import json
import random
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import AsapError, CheckpointError, InvalidArgument, StalledPeer
from .learner import Dataset, LrSchedule, Model, SvmPayload, load_libsvm, synth_dataset
from .metrics import Collector, ConsistencyHistogram, ConvergenceTrace, TraceRow
from .protocol import (MID_WRITE, Barrier, Block, Network, ReduceOutcome, SyncMode, TimeoutPolicy,
                       WorkerState, blocking_wait, iteration_step)
from .topology import Topology, generate

__all__ = [
    "FaultKnobs",
    "ExperimentConfig",
    "DeterministicScheduler",
    "ThreadedScheduler",
    "Cluster",
    "RunResult",
    "RunFailed",
    "Checkpoint",
    "run",
    "build_dataset",
    "save_checkpoint",
    "load_checkpoint",
]

TICK_SECONDS = 1e-6  # virtual seconds per deterministic micro-step


@dataclass(frozen=True)
class FaultKnobs:
    interleave_prob: float = 0.0
    delay_prob: float | tuple[float, ...] = 0.0
    delay_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.interleave_prob <= 1.0:
            raise InvalidArgument("interleave_prob must be in [0, 1]")
        probs = self.delay_prob if isinstance(self.delay_prob, tuple) else (self.delay_prob,)
        if any(not 0.0 <= p < 1.0 for p in probs):
            raise InvalidArgument("delay_prob must be in [0, 1)")
        if self.delay_steps < 0:
            raise InvalidArgument("delay_steps must be >= 0")

    def delay_for(self, worker: int) -> float:
        if isinstance(self.delay_prob, tuple):
            return self.delay_prob[worker] if worker < len(self.delay_prob) else 0.0
        return self.delay_prob


@dataclass(frozen=True)
class ExperimentConfig:
    topology: str = "expander"
    n: int = 8
    mode: SyncMode = SyncMode.NOTIFY_ACK
    data_path: str | None = None
    synth_count: int = 20_000
    synth_d: int = 50
    synth_margin: float = 10.0
    synth_seed: int | None = None
    eta0: float = 0.1
    lam: float = 1e-2
    batch: int = 100
    epochs: float = 20.0
    target_accuracy: float | None = 0.99
    eval_every: int = 5
    seed: int = 1
    scheduler: str = "deterministic"
    faults: FaultKnobs = FaultKnobs()
    checkpoint_every: int | None = None
    checkpoint_dir: str | None = None
    stall_timeout: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SyncMode.parse(self.mode))
        if self.n < 1:
            raise InvalidArgument("n must be >= 1")
        for name in ("synth_count", "synth_d", "batch", "eval_every"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if not self.synth_margin > 0 or not self.epochs > 0:
            raise InvalidArgument("synth_margin and epochs must be positive")
        if self.target_accuracy is not None and not 0.0 < self.target_accuracy <= 1.0:
            raise InvalidArgument("target_accuracy must be in (0, 1]")
        if self.scheduler not in ("deterministic", "concurrent"):
            raise InvalidArgument("scheduler must be 'deterministic' or 'concurrent'")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise InvalidArgument("checkpoint_every must be positive")
        if self.stall_timeout is not None and not self.stall_timeout > 0:
            raise InvalidArgument("stall_timeout must be positive")
        LrSchedule(self.eta0, self.lam)

    @property
    def sched(self) -> LrSchedule:
        return LrSchedule(self.eta0, self.lam)

    def max_iterations(self, n_examples: int) -> int:
        per_worker = -(-n_examples // self.n)
        return max(1, int(np.ceil(self.epochs * per_worker / self.batch)))

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, SyncMode):
                v = v.value
            elif isinstance(v, FaultKnobs):
                v = {"interleave_prob": v.interleave_prob, "delay_prob": v.delay_prob,
                     "delay_steps": v.delay_steps}
            out[f.name] = v
        return out


# -- schedulers -------------------------------------------------------------

class DeterministicScheduler:
    """Seeded single-thread interleaving of worker micro-steps.

    At each tick one runnable actor advances by one micro-step.  Inside a
    chunked write the same actor keeps running with probability
    ``1 - interleave_prob``; otherwise any runnable actor may be chosen,
    which is how reads land mid-write.
    """

    def __init__(self, seed: int, faults: FaultKnobs = FaultKnobs(), policy: TimeoutPolicy | None = None):
        self.rng = random.Random(f"asap-schedule-{seed}")
        self.faults = faults
        self.policy = policy or TimeoutPolicy()
        self.ticks = 0

    def now(self) -> float:
        return self.ticks

    def getstate(self):
        return self.rng.getstate()

    def setstate(self, state) -> None:
        self.rng.setstate(state)

    def run(self, actors: dict[int, object], iteration_of: Callable[[int], int] = lambda w: None) -> None:
        rnd = self.rng.random
        p = self.faults.interleave_prob
        delays = {w: self.faults.delay_for(w) for w in actors}
        any_delay = any(delays.values())
        pause = self.faults.delay_steps
        pending: dict[int, Block | None] = {w: None for w in actors}
        since: dict[int, int] = {}
        paused_until: dict[int, int] = {}
        alive = sorted(actors)
        cont = None
        while alive:
            if cont is not None and (p == 0.0 or rnd() >= p):
                w = cont
            else:
                # first rejection-sampling draw inlined; _pick does the rest
                w = alive[int(rnd() * len(alive))]
                if (pending[w] is not None or w in paused_until) and \
                        not self._runnable(w, pending, since, paused_until):
                    w = self._pick(alive, pending, since, paused_until, iteration_of)
                    if w is None:
                        continue
                if any_delay:
                    dp = delays[w]
                    if dp and rnd() < dp:
                        paused_until[w] = self.ticks + pause
                        self.ticks += 1
                        cont = None
                        continue
            self.ticks += 1
            try:
                d = next(actors[w])
            except StopIteration:
                alive.remove(w)
                cont = None
                continue
            if d is MID_WRITE:
                cont = w
            else:
                cont = None
                if d.__class__ is Block:
                    pending[w] = d
                    since[w] = self.ticks

    def _pick(self, alive, pending, since, paused_until, iteration_of):
        """Uniform choice among runnable actors (rejection sampling, then a full scan)."""
        rnd = self.rng.random
        n = len(alive)
        for _ in range(2 * n):
            a = alive[int(rnd() * n)]
            if pending[a] is None and a not in paused_until:
                return a
            if self._runnable(a, pending, since, paused_until):
                return a
        ready = [a for a in alive if self._runnable(a, pending, since, paused_until, iteration_of)]
        if ready:
            return ready[int(rnd() * len(ready))]
        ticks = self.ticks
        waiting = [u for u in paused_until.values() if u > ticks]
        if waiting:
            self.ticks = min(waiting)
            return None
        a = alive[0]
        blk = pending[a]
        raise StalledPeer(f"deadlock: every worker blocked ({blk.what} at worker {a})", a,
                          iteration_of(a), blk.missing())

    def _runnable(self, a, pending, since, paused_until, iteration_of=None) -> bool:
        blk = pending[a]
        if blk is not None:
            if not blk.ready():
                # timeouts are only checked on the full scan, which every stall reaches
                if iteration_of is not None:
                    limit = self.policy.current()
                    if limit is not None and self.ticks - since[a] > limit:
                        raise StalledPeer(f"timed out waiting for {blk.what}", a, iteration_of(a),
                                          blk.missing())
                return False
            pending[a] = None
        until = paused_until.get(a)
        if until is None:
            return True
        if until > self.ticks:
            return False
        del paused_until[a]
        return True


class ThreadedScheduler:
    """One thread per worker; micro-steps are atomic under ``cond``."""

    def __init__(self, seed: int, faults: FaultKnobs = FaultKnobs(), policy: TimeoutPolicy | None = None,
                 cond: threading.Condition | None = None, pause_seconds: float = 1e-4):
        self.seed = seed
        self.faults = faults
        self.policy = policy or TimeoutPolicy(initial=60.0)
        self.cond = cond or threading.Condition(threading.RLock())
        self.pause_seconds = pause_seconds
        self._t0 = time.monotonic()
        self._round = 0

    def now(self) -> float:
        return time.monotonic() - self._t0

    def getstate(self):
        return ("threaded", self._round)

    def setstate(self, state) -> None:
        self._round = int(state[1]) if isinstance(state, (list, tuple)) and len(state) == 2 else 0

    def run(self, actors: dict[int, object], iteration_of: Callable[[int], int] = lambda w: None) -> None:
        self._round += 1
        cond = self.cond
        p = self.faults.interleave_prob
        errors: list[BaseException] = []
        abort = threading.Event()

        def body(w: int, gen) -> None:
            rnd = random.Random(f"asap-thread-{self.seed}-{self._round}-{w}")
            dp = self.faults.delay_for(w)
            d = None
            try:
                while not abort.is_set():
                    with cond:
                        if isinstance(d, Block):
                            blocking_wait(cond, d, self.policy.current(), w, iteration_of(w), abort.is_set)
                            if abort.is_set():
                                return
                        while True:
                            try:
                                d = next(gen)
                            except StopIteration:
                                cond.notify_all()
                                return
                            # staying inside the lock makes the rest of the write atomic
                            if d is MID_WRITE and rnd.random() >= p:
                                continue
                            break
                        cond.notify_all()
                    if dp and rnd.random() < dp:
                        time.sleep(self.faults.delay_steps * self.pause_seconds)
                    else:
                        time.sleep(0)
            except BaseException as exc:  # surfaced in the calling thread
                errors.append(exc)
                abort.set()
                with cond:
                    cond.notify_all()

        threads = [threading.Thread(target=body, args=(w, g), name=f"worker-{w}", daemon=True)
                   for w, g in sorted(actors.items())]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]


# -- cluster ----------------------------------------------------------------

@dataclass
class RunResult:
    trace: ConvergenceTrace
    histogram: ConsistencyHistogram
    bytes_sent: list[int]
    messages_sent: list[int]
    models: list[Model]
    iterations: int
    reached_iteration: int | None
    clock: float

    @property
    def reached(self) -> bool:
        return self.reached_iteration is not None

    @property
    def bytes_per_worker(self) -> float:
        return sum(self.bytes_sent) / len(self.bytes_sent)

    @property
    def mean_model(self) -> Model:
        """Network average of the final worker models."""
        return Model(np.mean([m.w for m in self.models], axis=0), max(m.t for m in self.models))


class RunFailed(AsapError):
    """A run aborted; ``result`` holds everything collected up to the failure."""

    def __init__(self, cause: BaseException, result: RunResult):
        super().__init__(str(cause))
        self.cause = cause
        self.result = result


@dataclass
class Checkpoint:
    iteration: int
    models: np.ndarray
    state: dict = field(default_factory=dict)


class Cluster:
    """Workers, network and metrics for one experiment.

    ``payload`` supplies ``d``, ``initial_model(i)`` and ``local_update(i,
    model, t)``; an optional ``evaluate(model) -> (objective, accuracy)``
    and ``epoch(t)`` enable trace rows from worker 0 every ``eval_every``
    iterations, and ``target`` stops the run once accuracy reaches it.
    """

    def __init__(self, topology: Topology, mode: SyncMode | str, payload, *, seed: int = 0,
                 faults: FaultKnobs = FaultKnobs(), scheduler: str = "deterministic",
                 eval_every: int | None = None, target: float | None = None,
                 stall_timeout: float | None = None,
                 on_reduce: Callable[[ReduceOutcome], None] | None = None):
        self.topology = topology
        self.mode = SyncMode.parse(mode)
        self.payload = payload
        self.net = Network(topology, self.mode, payload.d)
        self.barrier = Barrier(topology.n)
        self.workers = [WorkerState(i, payload.initial_model(i), topology.in_neighbors(i),
                                    topology.out_neighbors(i)) for i in range(topology.n)]
        self.collector = Collector(self.mode.value)
        self.eval_every = eval_every
        self.target = target
        self.on_reduce = on_reduce
        self.stop_at: int | None = None
        self.reached_iteration: int | None = None
        self._started = [0] * topology.n
        self._last_reduce: list[float | None] = [None] * topology.n
        if scheduler == "deterministic":
            policy = TimeoutPolicy(timeout=stall_timeout)
            self.scheduler = DeterministicScheduler(seed, faults, policy)
            self._clock_scale = TICK_SECONDS
        elif scheduler == "concurrent":
            policy = TimeoutPolicy(initial=60.0, timeout=stall_timeout)
            self.scheduler = ThreadedScheduler(seed, faults, policy, self.net.cond)
            self._clock_scale = 1.0
        else:
            raise InvalidArgument(f"unknown scheduler {scheduler!r}")
        self.policy = policy

    @property
    def n(self) -> int:
        return self.topology.n

    @property
    def iteration(self) -> int:
        return min(ws.iteration for ws in self.workers)

    @property
    def stopped(self) -> bool:
        return self.stop_at is not None and self.iteration >= self.stop_at

    def clock_seconds(self) -> float:
        return self.scheduler.now() * self._clock_scale

    def _evaluate(self, iteration: int) -> None:
        obj, acc = self.payload.evaluate(self.workers[0].model)
        row = TraceRow(self.clock_seconds(), iteration, float(self.payload.epoch(iteration)), obj, acc,
                       self.net.total_bytes() / self.n)
        self.collector.submit("trace", row)
        if self.target is not None and acc >= self.target and self.reached_iteration is None:
            self.reached_iteration = iteration
            self.stop_at = max(self._started)

    def _script(self, ws: WorkerState, end: int):
        evaluating = ws.wid == 0 and self.eval_every and hasattr(self.payload, "evaluate")
        while ws.iteration < end and (self.stop_at is None or ws.iteration < self.stop_at):
            self._started[ws.wid] = ws.iteration + 1
            out = yield from iteration_step(self.net, ws, self.mode, self.payload.local_update, self.barrier)
            self.collector.submit("reduce", (ws.wid, out.intact, out.expected, out.torn))
            now = self.scheduler.now()
            last = self._last_reduce[ws.wid]
            if last is not None:
                self.policy.observe(now - last)
            self._last_reduce[ws.wid] = now
            if self.on_reduce is not None:
                self.on_reduce(out)
            if evaluating and ws.iteration % self.eval_every == 0:
                self._evaluate(ws.iteration)

    def run_segment(self, end: int) -> None:
        """Advance every worker to iteration ``end`` (or the stop point)."""
        actors = {ws.wid: self._script(ws, end) for ws in self.workers}
        try:
            self.scheduler.run(actors, lambda w: self.workers[w].iteration)
        finally:
            self.collector.drain()

    def record_initial(self) -> None:
        if self.eval_every and hasattr(self.payload, "evaluate") and not len(self.collector.trace):
            self._evaluate(self.iteration)
            self.collector.drain()

    def result(self) -> RunResult:
        self.collector.drain()
        return RunResult(self.collector.trace, self.collector.histogram, list(self.net.bytes_sent),
                         list(self.net.messages_sent), [ws.model for ws in self.workers], self.iteration,
                         self.reached_iteration, self.clock_seconds())

    def run(self, iterations: int, checkpoint_every: int | None = None,
            on_boundary: Callable[["Cluster"], None] | None = None) -> RunResult:
        """Run to ``iterations`` total, draining channels at each checkpoint boundary."""
        self.record_initial()
        try:
            while self.iteration < iterations and not self.stopped:
                end = iterations
                if checkpoint_every:
                    end = min(iterations, (self.iteration // checkpoint_every + 1) * checkpoint_every)
                self.run_segment(end)
                if checkpoint_every and self.iteration == end:
                    self.net.reset_channels()
                    if on_boundary is not None:
                        on_boundary(self)
        except AsapError as exc:
            raise RunFailed(exc, self.result()) from exc
        return self.result()

    # -- checkpoint state ---------------------------------------------------

    def snapshot(self) -> Checkpoint:
        its = {ws.iteration for ws in self.workers}
        if len(its) != 1:
            raise CheckpointError(f"workers are not at a common iteration: {sorted(its)}")
        rng = self.scheduler.getstate()
        state = {
            "rng": {"scheduler": _jsonable(rng)},
            "t": [ws.model.t for ws in self.workers],
            "bytes": list(self.net.bytes_sent),
            "messages": list(self.net.messages_sent),
            "clock": self.scheduler.now() if isinstance(self.scheduler, DeterministicScheduler) else 0,
            "policy_mean": self.policy.mean_interval,
            "reached": self.reached_iteration,
        }
        models = np.vstack([ws.model.w for ws in self.workers])
        return Checkpoint(its.pop(), models, state)

    def restore(self, ck: Checkpoint) -> None:
        if ck.models.shape != (self.n, self.payload.d):
            raise CheckpointError(f"checkpoint holds {ck.models.shape} models, cluster needs "
                                  f"{(self.n, self.payload.d)}")
        ts = ck.state.get("t", [0] * self.n)
        for ws, w, t in zip(self.workers, ck.models, ts):
            ws.model = Model(np.array(w, dtype=float), int(t))
            ws.iteration = ck.iteration
        self._started = [ck.iteration] * self.n
        self.net.reset_channels()
        self.net.bytes_sent[:] = ck.state.get("bytes", [0] * self.n)
        self.net.messages_sent[:] = ck.state.get("messages", [0] * self.n)
        rng = ck.state.get("rng", {}).get("scheduler")
        if rng is not None:
            self.scheduler.setstate(_from_jsonable(rng))
        if isinstance(self.scheduler, DeterministicScheduler):
            self.scheduler.ticks = int(ck.state.get("clock", 0))
        self.policy.mean_interval = ck.state.get("policy_mean")
        self.reached_iteration = ck.state.get("reached")


def _jsonable(state):
    if isinstance(state, tuple):
        return [_jsonable(x) for x in state]
    return state


def _from_jsonable(state):
    if isinstance(state, list):
        return tuple(_from_jsonable(x) for x in state)
    return state


# -- checkpoint file --------------------------------------------------------

MAGIC = b"ASAP"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQII")


def save_checkpoint(ck: Checkpoint, path) -> Path:
    """Binary layout: magic, u32 version, u64 iteration, u32 n, u32 d,
    n*d little-endian f64 models, u32 length + JSON state (RNG states and
    counters), trailing u32 CRC32 over everything before it."""
    models = np.ascontiguousarray(ck.models, dtype="<f8")
    n, d = models.shape
    state = json.dumps(ck.state, sort_keys=True).encode()
    body = _HEAD.pack(MAGIC, FORMAT_VERSION, ck.iteration, n, d) + models.tobytes() \
        + struct.pack("<I", len(state)) + state
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEAD.size + 8:
        raise CheckpointError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    magic, version, iteration, n, d = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    nbytes = n * d * 8
    models = np.frombuffer(body, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(float)
    off += nbytes
    (slen,) = struct.unpack_from("<I", body, off)
    off += 4
    if off + slen != len(body):
        raise CheckpointError("checkpoint length fields inconsistent")
    state = json.loads(body[off:off + slen].decode())
    return Checkpoint(int(iteration), models, state)


# -- experiment entry point -------------------------------------------------

def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.data_path:
        return load_libsvm(config.data_path)
    seed = config.seed if config.synth_seed is None else config.synth_seed
    return synth_dataset(seed, config.synth_count, config.synth_d, config.synth_margin)


def run(config: ExperimentConfig, *, data: Dataset | None = None, resume: str | Path | None = None,
        on_reduce: Callable[[ReduceOutcome], None] | None = None) -> RunResult:
    """Run one experiment until the target accuracy or the epoch cap."""
    data = data if data is not None else build_dataset(config)
    topo = generate(config.topology, config.n)
    payload = SvmPayload(data, config.sched, config.batch, config.seed, config.n)
    cluster = Cluster(topo, config.mode, payload, seed=config.seed, faults=config.faults,
                      scheduler=config.scheduler, eval_every=config.eval_every,
                      target=config.target_accuracy, stall_timeout=config.stall_timeout,
                      on_reduce=on_reduce)
    if resume is not None:
        cluster.restore(load_checkpoint(resume))

    on_boundary = None
    if config.checkpoint_every and config.checkpoint_dir:
        ck_dir = Path(config.checkpoint_dir)
        ck_dir.mkdir(parents=True, exist_ok=True)

        def on_boundary(c: Cluster) -> None:
            save_checkpoint(c.snapshot(), ck_dir / f"ckpt_{c.iteration:08d}.asap")

    return cluster.run(config.max_iterations(len(data)), config.checkpoint_every, on_boundary)
