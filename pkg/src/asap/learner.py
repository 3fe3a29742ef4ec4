"""Linear SVM trained by SGD (hinge loss + L2) plus equal-weight model averaging.

This is the iterative-convergent payload the synchronization protocols carry.
``w`` vectors are plain ``float64`` numpy arrays; datasets keep their feature
matrix either dense (synthetic data) or as scipy CSR (LIBSVM files).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, ParseError
from .topology import TransitionMatrix

__all__ = [
    "Example",
    "Dataset",
    "Model",
    "LrSchedule",
    "hinge_gradient",
    "local_step",
    "sgd_batch",
    "model_average",
    "unrolled_trajectory",
    "objective",
    "accuracy",
    "synth_dataset",
    "load_libsvm",
    "write_libsvm",
    "partition",
    "single_thread_sgd",
    "SvmPayload",
    "StubGradients",
]


@dataclass(frozen=True)
class Example:
    features: np.ndarray | sp.csr_matrix
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise InvalidArgument(f"label must be -1 or +1, got {self.label!r}")

    def dense(self, d: int | None = None) -> np.ndarray:
        if sp.issparse(self.features):
            x = np.asarray(self.features.todense()).ravel()
        else:
            x = np.asarray(self.features, dtype=float)
        if d is not None and x.shape[0] < d:
            x = np.pad(x, (0, d - x.shape[0]))
        return x


@dataclass
class Dataset:
    X: np.ndarray | sp.csr_matrix
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        if self.X.shape[0] == 0:
            raise InvalidArgument("dataset must be nonempty")
        if self.X.shape[0] != self.y.shape[0]:
            raise InvalidArgument("feature rows and labels disagree in length")
        if not np.isin(self.y, (-1, 1)).all():
            raise InvalidArgument("labels must be -1 or +1")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.X)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Example:
        row = self.X[i] if self.sparse else self.X[i].copy()
        return Example(row, int(self.y[i]))

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    def margins(self, w: np.ndarray) -> np.ndarray:
        return self.y * np.asarray(self.X @ w).ravel()


@dataclass(frozen=True)
class Model:
    w: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d: int) -> "Model":
        return cls(np.zeros(d), 0)

    def __post_init__(self):
        # a finite squared norm rules out nan/inf entries; only fall back when it overflows
        if not math.isfinite(self.w.dot(self.w)) and not np.isfinite(self.w).all():
            raise InvalidArgument("model has non-finite entries")


@dataclass(frozen=True)
class LrSchedule:
    eta0: float = 0.1
    lam: float = 1e-2

    def __post_init__(self):
        if not self.eta0 > 0:
            raise InvalidArgument("eta0 must be > 0")
        if self.lam < 0:
            raise InvalidArgument("lambda must be >= 0")

    def rate(self, t: int) -> float:
        return self.eta0 / (1.0 + self.eta0 * self.lam * t)


def hinge_gradient(m: Model, e: Example, lam: float) -> np.ndarray:
    x = e.dense(m.w.shape[0])
    if x.shape != m.w.shape:
        raise InvalidArgument(f"example has {x.shape[0]} features, model has {m.w.shape[0]}")
    g = lam * m.w
    if e.label * float(m.w @ x) < 1.0:
        g = g - e.label * x
    return g


def _step_inplace(w: np.ndarray, x, y: int, eta: float, lam: float) -> None:
    """``w <- w - eta * (lam*w - y*x)`` (hinge term only when the margin is < 1)."""
    if isinstance(x, tuple):
        idx, vals = x
        margin = y * float(w[idx] @ vals)
        if lam:
            w *= 1.0 - eta * lam
        if margin < 1.0:
            w[idx] += (eta * y) * vals
    else:
        margin = y * float(w @ x)
        if lam:
            w *= 1.0 - eta * lam
        if margin < 1.0:
            w += (eta * y) * x


def local_step(m: Model, e: Example, sched: LrSchedule) -> Model:
    w = m.w.copy()
    _step_inplace(w, e.dense(w.shape[0]), e.label, sched.rate(m.t), sched.lam)
    return Model(w, m.t + 1)


def sgd_batch(m: Model, data: Dataset, rows: Sequence[int], sched: LrSchedule) -> Model:
    """Sequential SGD over ``rows`` of ``data``, one update per example."""
    w = m.w.copy()
    t = m.t
    if data.sparse:
        X = data.X
        for r in rows:
            lo, hi = X.indptr[r], X.indptr[r + 1]
            _step_inplace(w, (X.indices[lo:hi], X.data[lo:hi]), int(data.y[r]), sched.rate(t), sched.lam)
            t += 1
    else:
        X = data.X
        for r in rows:
            _step_inplace(w, X[r], int(data.y[r]), sched.rate(t), sched.lam)
            t += 1
    return Model(w, t)


def model_average(own: Model, neighbors: Sequence[np.ndarray]) -> Model:
    """Equal-weight mean of ``own.w`` and the neighbor vectors.

    Terms are sorted per coordinate before summing so the result does not
    depend on the order neighbors arrive in.
    """
    if not len(neighbors):
        return own
    if len(neighbors) == 1:
        v = neighbors[0]
        if np.shape(v) != own.w.shape:
            raise InvalidArgument(f"neighbor vector shape {np.shape(v)} != {own.w.shape}")
        # two-term addition is already order independent
        return Model((own.w + v) / 2.0, own.t)
    try:
        stack = np.array([own.w, *neighbors], dtype=float)
    except ValueError:
        stack = None
    if stack is None or stack.shape[1:] != own.w.shape:
        raise InvalidArgument(f"neighbor vector shapes do not match {own.w.shape}")
    stack.sort(axis=0)
    return Model(stack.sum(axis=0) / stack.shape[0], own.t)


def unrolled_trajectory(p: TransitionMatrix, grads, sched: LrSchedule, T: int) -> np.ndarray:
    """Closed form ``w_t = -sum_k eta_k P^(t-k) g_k`` for scalar models.

    ``grads[k][i]`` is worker ``i``'s gradient at step ``k``. Returns a
    ``(T+1, n)`` array whose row ``t`` is ``w_t`` (row 0 is all zeros).
    """
    g = np.asarray(grads, dtype=float)
    if g.ndim != 2 or g.shape[1] != p.n or g.shape[0] < T:
        raise InvalidArgument(f"grads must have shape (>= {T}, {p.n}), got {g.shape}")
    powers = [np.eye(p.n)]
    for _ in range(T):
        powers.append(powers[-1] @ p.entries)
    out = np.zeros((T + 1, p.n))
    for t in range(1, T + 1):
        acc = np.zeros(p.n)
        for k in range(t):
            acc -= sched.rate(k) * (powers[t - k] @ g[k])
        out[t] = acc
    return out


def objective(m: Model, data: Dataset, lam: float) -> float:
    margins = data.margins(m.w)
    return float(np.maximum(0.0, 1.0 - margins).mean() + 0.5 * lam * float(m.w @ m.w))


def accuracy(m: Model, data: Dataset) -> float:
    scores = np.asarray(data.X @ m.w).ravel()
    pred = np.where(scores >= 0, 1, -1)
    return float((pred == data.y).mean())


def synth_dataset(seed: int, count: int, d: int, margin: float) -> Dataset:
    """Two unit-covariance Gaussian clusters at ``+-(margin/2) u``."""
    if count < 2 or d < 2 or not margin > 0:
        raise InvalidArgument("need count >= 2, d >= 2 and margin > 0")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    y = np.where(np.arange(count) < (count + 1) // 2, 1, -1)
    y = rng.permutation(y)
    X = rng.standard_normal((count, d)) + np.outer(y * (margin / 2.0), u)
    return Dataset(X, y)


# -- LIBSVM text format -----------------------------------------------------

def load_libsvm(path) -> Dataset:
    text = Path(path).read_text()
    labels: list[int] = []
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    d = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *feats = line.split()
        try:
            label = float(head)
        except ValueError:
            raise ParseError(f"bad label {head!r}", lineno) from None
        labels.append(1 if label > 0 else -1)
        for tok in feats:
            idx, sep, val = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                j = int(idx)
                v = float(val)
            except ValueError:
                raise ParseError(f"bad feature {tok!r}", lineno) from None
            if j < 1:
                raise ParseError(f"feature index {j} is not 1-based", lineno)
            indices.append(j - 1)
            values.append(v)
            d = max(d, j)
        indptr.append(len(indices))
    if not labels:
        raise ParseError(f"{path}: no examples")
    X = sp.csr_matrix((np.array(values, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr)),
                      shape=(len(labels), d))
    X.sum_duplicates()
    return Dataset(X, np.array(labels))


def write_libsvm(data: Dataset, path) -> None:
    X = data.X if data.sparse else sp.csr_matrix(data.X)
    lines = []
    for r in range(X.shape[0]):
        lo, hi = X.indptr[r], X.indptr[r + 1]
        feats = " ".join(f"{j + 1}:{v:.17g}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        lines.append(f"{int(data.y[r]):+d} {feats}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


# -- partitioning and the reference run ------------------------------------

def partition(n_examples: int, n_workers: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous (near-)equal shards by worker id."""
    order = np.random.default_rng([seed, 1]).permutation(n_examples)
    return [s.copy() for s in np.array_split(order, n_workers)]


def _cyclic(shard: np.ndarray, start: int, count: int) -> np.ndarray:
    return shard[(start + np.arange(count)) % len(shard)]


def single_thread_sgd(data: Dataset, sched: LrSchedule, batch: int, iterations: int,
                      seed: int) -> list[Model]:
    """Reference trajectory: one model, whole dataset, ``batch`` examples per iteration.

    Returns the model after each iteration (index 0 is the initial model).
    """
    (shard,) = partition(len(data), 1, seed)
    m = Model.zeros(data.d)
    out = [m]
    for it in range(iterations):
        m = sgd_batch(m, data, _cyclic(shard, it * batch, batch), sched)
        out.append(m)
    return out


@dataclass
class SvmPayload:
    """Per-worker local work: ``batch`` SGD steps on the worker's shard."""

    data: Dataset
    sched: LrSchedule
    batch: int
    seed: int
    n_workers: int
    shards: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        self.shards = partition(len(self.data), self.n_workers, self.seed)
        if min(len(s) for s in self.shards) == 0:
            raise InvalidArgument("more workers than examples")

    @property
    def d(self) -> int:
        return self.data.d

    def initial_model(self, worker: int) -> Model:
        return Model.zeros(self.data.d)

    def local_update(self, worker: int, model: Model, iteration: int) -> Model:
        shard = self.shards[worker]
        return sgd_batch(model, self.data, _cyclic(shard, iteration * self.batch, self.batch), self.sched)

    def evaluate(self, model: Model) -> tuple[float, float]:
        return objective(model, self.data, self.sched.lam), accuracy(model, self.data)

    def epoch(self, iteration: int) -> float:
        return iteration * self.batch * self.n_workers / len(self.data)


@dataclass
class StubGradients:
    """Fixed gradients ``grads[k][i]``: worker ``i`` steps ``w -= eta_k * g`` at iteration ``k``.

    A 2-D ``grads`` gives scalar models; a 3-D one ``(T, n, d)`` gives vectors.
    """

    grads: np.ndarray
    sched: LrSchedule

    def __post_init__(self):
        self.grads = np.asarray(self.grads, dtype=float)
        if self.grads.ndim == 2:
            self.grads = self.grads[:, :, None]

    @property
    def d(self) -> int:
        return self.grads.shape[2]

    def initial_model(self, worker: int) -> Model:
        return Model.zeros(self.d)

    def local_update(self, worker: int, model: Model, iteration: int) -> Model:
        g = self.grads[iteration % self.grads.shape[0], worker]
        return Model(model.w - self.sched.rate(model.t) * g, model.t + 1)
