"""Communication graphs, their in-degree normalized transition matrices and
spectral diagnostics.

A :class:`Topology` stores directed edges ``(src, dst)`` meaning "``src``
sends its intermediate model to ``dst``".  Self-loops are never stored; they
are added only when the transition matrix is built, so message and byte
accounting never sees self-communication.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidArgument, NumericFailure

__all__ = [
    "Topology",
    "TransitionMatrix",
    "SpectralReport",
    "KINDS",
    "generate",
    "gen_all_reduce",
    "gen_parameter_server",
    "gen_chain",
    "gen_root_expander",
    "transition_matrix",
    "spectral_report",
    "is_doubly_stochastic",
    "mixing_error",
    "is_strongly_connected",
    "read_topology",
    "write_topology",
    "format_topology",
    "parse_topology",
]

STOCHASTIC_TOL = 1e-9
SV_TOL = 1e-8
MAX_POWER_ITER = 10_000


@dataclass(frozen=True)
class Topology:
    n: int
    edges: frozenset[tuple[int, int]]
    name: str = "custom"
    _in: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    _out: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise InvalidArgument(f"worker count must be an integer >= 1, got {self.n!r}")
        edges = frozenset((int(s), int(d)) for s, d in self.edges)
        for s, d in edges:
            if s == d:
                raise InvalidArgument(f"self-loop ({s}, {d}) not allowed in a topology")
            if not (0 <= s < self.n and 0 <= d < self.n):
                raise InvalidArgument(f"edge ({s}, {d}) out of range for n={self.n}")
        object.__setattr__(self, "edges", edges)
        ins: list[list[int]] = [[] for _ in range(self.n)]
        outs: list[list[int]] = [[] for _ in range(self.n)]
        for s, d in sorted(edges):
            outs[s].append(d)
            ins[d].append(s)
        object.__setattr__(self, "_in", tuple(tuple(x) for x in ins))
        object.__setattr__(self, "_out", tuple(tuple(x) for x in outs))

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], name: str = "custom") -> "Topology":
        edges = list(edges)
        if len(set(edges)) != len(edges):
            raise InvalidArgument("duplicate edges")
        return cls(n, frozenset(edges), name)

    def in_neighbors(self, i: int) -> tuple[int, ...]:
        return self._in[i]

    def out_neighbors(self, i: int) -> tuple[int, ...]:
        return self._out[i]

    def in_degree(self, i: int) -> int:
        return len(self._in[i])

    def out_degree(self, i: int) -> int:
        return len(self._out[i])

    def relabel(self, perm: Iterable[int]) -> "Topology":
        """Rename worker ``i`` to ``perm[i]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n)):
            raise InvalidArgument("perm must be a permutation of range(n)")
        return Topology(self.n, frozenset((perm[s], perm[d]) for s, d in self.edges), self.name)

    def degree_profile(self) -> dict:
        ins = [self.in_degree(i) for i in range(self.n)]
        outs = [self.out_degree(i) for i in range(self.n)]
        return {
            "in_min": min(ins), "in_max": max(ins),
            "out_min": min(outs), "out_max": max(outs),
            "edges": len(self.edges),
        }


@dataclass(frozen=True)
class TransitionMatrix:
    n: int
    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.shape != (self.n, self.n):
            raise InvalidArgument(f"expected {self.n}x{self.n} matrix, got shape {a.shape}")
        if (a < 0).any():
            raise InvalidArgument("transition matrix entries must be nonnegative")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)


@dataclass(frozen=True)
class SpectralReport:
    sigma1: float
    sigma2: float
    gap: float
    stationary: np.ndarray
    iterations: int = 0

    def as_dict(self) -> dict:
        return {
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "gap": self.gap,
            "stationary": [float(x) for x in self.stationary],
        }


# -- generators -------------------------------------------------------------

def gen_all_reduce(n: int) -> Topology:
    if n < 1:
        raise InvalidArgument("all-reduce needs n >= 1")
    return Topology(n, frozenset((i, j) for i in range(n) for j in range(n) if i != j), "allreduce")


def gen_parameter_server(n: int) -> Topology:
    """Hub-and-spoke with worker 0 as the server; edges go both ways."""
    if n < 2:
        raise InvalidArgument("parameter server needs n >= 2")
    edges = {(0, i) for i in range(1, n)} | {(i, 0) for i in range(1, n)}
    return Topology(n, frozenset(edges), "ps")


def gen_chain(n: int) -> Topology:
    """Directed ring ``i -> i+1``; the closing edge keeps it strongly connected."""
    if n < 2:
        raise InvalidArgument("chain needs n >= 2")
    return Topology(n, frozenset((i, (i + 1) % n) for i in range(n)), "chain")


def root_expander_offset(n: int) -> int:
    k = math.isqrt(n)
    if k <= 1 or k % n == 1:
        k = 2
    return k


def gen_root_expander(n: int) -> Topology:
    """Out-degree two: each worker sends to ``i+1`` and ``i+floor(sqrt(n))``.

    Both offsets are circulant so every worker also has in-degree two.
    """
    if n < 3:
        raise InvalidArgument("root expander needs n >= 3")
    k = root_expander_offset(n)
    edges = {(i, (i + 1) % n) for i in range(n)} | {(i, (i + k) % n) for i in range(n)}
    return Topology(n, frozenset(edges), "expander")


KINDS = {
    "allreduce": gen_all_reduce,
    "ps": gen_parameter_server,
    "chain": gen_chain,
    "expander": gen_root_expander,
}


def generate(kind: str, n: int) -> Topology:
    try:
        gen = KINDS[kind]
    except KeyError:
        raise InvalidArgument(f"unknown topology kind {kind!r}; choose from {sorted(KINDS)}") from None
    return gen(n)


# -- matrices ---------------------------------------------------------------

def transition_matrix(t: Topology) -> TransitionMatrix:
    a = np.eye(t.n)
    for s, d in t.edges:
        a[d, s] = 1.0
    return TransitionMatrix(t.n, a / a.sum(axis=1, keepdims=True))


def is_doubly_stochastic(p: TransitionMatrix) -> bool:
    return bool(np.all(np.abs(p.entries.sum(axis=0) - 1.0) <= STOCHASTIC_TOL))


def _dominant_eigenpair(g: np.ndarray, max_iter: int, tol: float, rng: np.random.Generator):
    """Power iteration on a symmetric PSD matrix.

    The iteration matrix is squared after every step, so after ``k`` steps the
    vector has been multiplied by ``g ** (2 ** k)``; the residual is always
    measured against ``g`` itself.
    """
    n = g.shape[0]
    v = rng.standard_normal(n)
    m = g.copy()
    scale = max(1.0, float(np.abs(g).max(initial=0.0)))
    for it in range(1, max_iter + 1):
        norm = np.linalg.norm(v)
        if norm < 1e-150:
            return 0.0, np.zeros(n), it
        v = v / norm
        lam = float(v @ g @ v)
        if np.linalg.norm(g @ v - lam * v) <= tol * scale:
            return max(lam, 0.0), v, it
        v = m @ v
        m = m @ m
        mmax = np.abs(m).max()
        if not np.isfinite(mmax):
            break
        if mmax > 0.0:
            m /= mmax
    raise NumericFailure("power iteration did not converge", iterations=max_iter)


def singular_values(p: TransitionMatrix, k: int = 2, max_iter: int = MAX_POWER_ITER,
                    tol: float = 1e-13) -> tuple[list[float], int]:
    """Top ``k`` singular values by deflated power iteration on ``P^T P``."""
    g = p.entries.T @ p.entries
    sigmas: list[float] = []
    total = 0
    # fresh start vector per stage; reusing one can leave it orthogonal to the next direction
    rng = np.random.default_rng(12345)
    for _ in range(min(k, p.n)):
        lam, v, it = _dominant_eigenpair(g, max_iter - total, tol, rng)
        total += it
        sigmas.append(math.sqrt(lam))
        # deflate by projecting the found direction out of both sides
        q = np.eye(p.n) - np.outer(v, v)
        g = q @ g @ q
    while len(sigmas) < k:
        sigmas.append(0.0)
    return sigmas, total


def stationary_distribution(p: TransitionMatrix, max_iter: int = MAX_POWER_ITER,
                            tol: float = 1e-13) -> tuple[np.ndarray, int]:
    """Left principal eigenvector of ``P`` (``pi^T P = pi^T``), summing to one."""
    pt = np.array(p.entries.T)
    pi = np.full(p.n, 1.0 / p.n)
    m = pt.copy()
    for it in range(1, max_iter + 1):
        nxt = m @ pi
        nxt /= nxt.sum()
        if np.abs(pt @ nxt - nxt).sum() <= tol:
            return nxt, it
        pi = nxt
        m = m @ m
    raise NumericFailure("stationary distribution did not converge", iterations=max_iter)


def spectral_report(p: TransitionMatrix, max_iter: int = MAX_POWER_ITER) -> SpectralReport:
    (s1, s2), it_sv = singular_values(p, 2, max_iter)
    pi, it_pi = stationary_distribution(p, max_iter)
    return SpectralReport(s1, s2, 1.0 - s2, pi, it_sv + it_pi)


def mixing_error(p: TransitionMatrix, x, t: int) -> float:
    """``|| P^t x - 1/n ||_2`` for a probability vector ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise InvalidArgument(f"vector of length {x.shape} does not match n={p.n}")
    if t < 0:
        raise InvalidArgument("step count must be >= 0")
    y = x.copy()
    for _ in range(t):
        y = p.entries @ y
    return float(np.linalg.norm(y - 1.0 / p.n))


def _reaches_all(adj: tuple[tuple[int, ...], ...], n: int) -> bool:
    seen = [False] * n
    seen[0] = True
    q = deque([0])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                q.append(v)
    return all(seen)


def is_strongly_connected(t: Topology) -> bool:
    return _reaches_all(t._out, t.n) and _reaches_all(t._in, t.n)


# -- file format ------------------------------------------------------------

def format_topology(t: Topology) -> str:
    lines = [f"# {t.name}", f"n {t.n}"]
    lines += [f"{s} {d}" for s, d in sorted(t.edges)]
    return "\n".join(lines) + "\n"


def parse_topology(text: str, name: str = "custom") -> Topology:
    n = None
    edges: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if n is None and name == "custom" and line[1:].strip():
                name = line[1:].strip()
            continue
        parts = line.split()
        try:
            if n is None:
                if len(parts) != 2 or parts[0] != "n":
                    raise ValueError
                n = int(parts[1])
                continue
            if len(parts) != 2:
                raise ValueError
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise InvalidArgument(f"line {lineno}: cannot parse {raw!r}") from None
    if n is None:
        raise InvalidArgument("missing 'n <count>' line")
    return Topology.from_edges(n, edges, name)


def write_topology(t: Topology, path) -> None:
    Path(path).write_text(format_topology(t))


def read_topology(path) -> Topology:
    return parse_topology(Path(path).read_text())
