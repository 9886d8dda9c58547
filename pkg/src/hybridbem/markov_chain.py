"""Continuous-time Markov chain machinery for the switching process.

Regimes are labelled 1..N in every public structure; arrays of rates and
probabilities are indexed 0..N-1 as usual.
"""

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rng
from .errors import NegativeOffDiagonal, Reducible, RowSumNonzero, SingularSystem

ROW_SUM_TOL = 1e-12
RENORMALIZE_TOL = 1e-9


@dataclass(frozen=True)
class Generator:
    """Validated rate matrix of an irreducible conservative chain."""

    rates: np.ndarray

    @property
    def state_count(self):
        return self.rates.shape[0]


@dataclass(frozen=True)
class StationaryDistribution:
    probs: np.ndarray


@dataclass(frozen=True)
class TransitionMatrix:
    probs: np.ndarray
    step: float
    cumulative: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cum = np.cumsum(self.probs, axis=1)
        cum[:, -1] = 1.0
        object.__setattr__(self, "cumulative", cum)

    @property
    def state_count(self):
        return self.probs.shape[0]


@dataclass(frozen=True)
class ChainPath:
    states: np.ndarray
    step: float
    seed: int

    def times(self):
        return self.step * np.arange(len(self.states))

    def rows(self):
        t = self.times()
        return [(k, float(t[k]), int(s)) for k, s in enumerate(self.states)]


def _reachable(adj, start):
    seen = {start}
    todo = [start]
    while todo:
        i = todo.pop()
        for j in np.flatnonzero(adj[i]):
            if j not in seen:
                seen.add(int(j))
                todo.append(int(j))
    return seen


def validate_generator(rates):
    """Check a rate matrix and wrap it as a :class:`Generator`.

    Raises
    ------
    NegativeOffDiagonal, RowSumNonzero, Reducible
        With the offending row (and column) in the message, 1-based.
    """
    q = np.array(rates, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
        raise ValueError(f"generator must be a non-empty square matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("generator has non-finite entries")
    n = q.shape[0]
    off = ~np.eye(n, dtype=bool)
    for i, j in zip(*np.nonzero((q < 0) & off)):
        raise NegativeOffDiagonal(f"rate[{i + 1},{j + 1}] = {q[i, j]} is negative")
    sums = q.sum(axis=1)
    for i in np.flatnonzero(np.abs(sums) > ROW_SUM_TOL):
        raise RowSumNonzero(f"row {i + 1} sums to {sums[i]!r}, expected 0")
    adj = (q > 0) & off
    # strongly connected iff every state reaches 1 and 1 reaches every state
    if len(_reachable(adj, 0)) < n:
        missing = sorted(set(range(n)) - _reachable(adj, 0))
        raise Reducible(f"state {missing[0] + 1} is not reachable from state 1")
    back = _reachable(adj.T, 0)
    if len(back) < n:
        missing = sorted(set(range(n)) - back)
        raise Reducible(f"state {missing[0] + 1} cannot reach state 1")
    q.setflags(write=False)
    return Generator(q)


def stationary_distribution(g):
    """Solve mu Q = 0, sum(mu) = 1 with the last equation replaced by normalization."""
    n = g.state_count
    a = g.rates.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        mu = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise SingularSystem(f"stationary solve broke down: {mu}")
    mu = mu / mu.sum()
    mu.setflags(write=False)
    return StationaryDistribution(mu)


def transition_matrix(g, dt):
    """One-step transition matrix exp(Q dt)."""
    if dt < 0:
        raise ValueError(f"step must be non-negative, got {dt}")
    p = scipy.linalg.expm(g.rates * float(dt))
    p = np.clip(p, 0.0, 1.0)
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > RENORMALIZE_TOL)
    if bad.size:
        raise SingularSystem(f"exp(Q dt) row {bad[0] + 1} sums to {sums[bad[0]]!r}")
    p = p / sums[:, None]
    p.setflags(write=False)
    return TransitionMatrix(p, float(dt))


def next_states(cumulative, states, u):
    """Vectorized inverse-CDF step; ``states`` and the result are 0-based."""
    rows = cumulative[states]
    nxt = (rows <= u[:, None]).sum(axis=1)
    return np.minimum(nxt, cumulative.shape[1] - 1)


def _walk(tm, i0, steps, uniforms):
    n = tm.state_count
    cum = [list(map(float, row)) for row in tm.cumulative]
    out = np.empty(steps + 1, dtype=np.int64)
    s = i0 - 1
    out[0] = s
    for k in range(steps):
        s = min(bisect_right(cum[s], uniforms[k]), n - 1)
        out[k + 1] = s
    return out + 1


def _check_regime(i, n, name="i0"):
    if not 1 <= int(i) <= n:
        raise ValueError(f"{name} must be in 1..{n}, got {i}")
    return int(i)


def sample_chain(tm, i0, steps, seed):
    """Sample r_0..r_K of the step-``tm.step`` skeleton starting from ``i0``."""
    i0 = _check_regime(i0, tm.state_count)
    u = rng.stream(seed, 0, rng.CHAIN).random(steps)
    return ChainPath(_walk(tm, i0, steps, u), tm.step, seed)


def couple_chains(tm, i0, j0, steps, seed):
    """Meeting coupling of two chains.

    The copies use independent uniform streams until the first index where
    their states coincide and move together afterwards.

    Returns
    -------
    (ChainPath, ChainPath, int or None)
        The two paths and the meeting index, ``None`` if they never met.
    """
    n = tm.state_count
    i0 = _check_regime(i0, n)
    j0 = _check_regime(j0, n, "j0")
    a = _walk(tm, i0, steps, rng.stream(seed, 0, rng.CHAIN).random(steps))
    b = _walk(tm, j0, steps, rng.stream(seed, 0, rng.PARTNER_CHAIN).random(steps))
    hits = np.flatnonzero(a == b)
    tau = int(hits[0]) if hits.size else None
    if tau is not None:
        b[tau:] = a[tau:]
    return ChainPath(a, tm.step, seed), ChainPath(b, tm.step, seed), tau
