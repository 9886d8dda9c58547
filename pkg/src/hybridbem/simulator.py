"""BEM trajectories, coupled pairs and path-parallel ensembles.

Per step k the regime r_{k+1} is drawn first, then the Brownian increment,
and X_{k+1} solves X_{k+1} - dt f(X_{k+1}, r_{k+1}) = X_k + g(X_k, r_k) dB_k.

Ensembles are integrated in fixed-size chunks of paths, vectorized within a
chunk. Each path draws from its own counter-based streams (see :mod:`rng`),
so results do not depend on the chunk size or on the number of workers.

With ``substeps = m > 1`` the chain moves with exp(Q dt/m) and the Brownian
increment is the sum of m draws at resolution dt/m. Runs with different dt
but the same fine resolution dt/m then share their Brownian path and the
chain skeleton path by path.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .bem import SolverOptions, solve_batch
from .errors import EnsembleFailure, NoConvergence, OffGridTime
from .markov_chain import ChainPath, next_states, transition_matrix

FAILURE_BUDGET = 0.001
CHUNK_SIZE = 4096
BLOCK_DRAWS = 512  # fine-resolution draws per path held in memory at once


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (K+1, n)
    chain: ChainPath
    dt: float
    seed: int

    @property
    def times(self):
        return self.dt * np.arange(len(self.states))

    def rows(self):
        t = self.times
        return [(k, float(t[k]), *map(float, self.states[k]), int(self.chain.states[k]))
                for k in range(len(self.states))]


@dataclass(frozen=True)
class CoupledPair:
    a: Trajectory
    b: Trajectory
    tau: int = None

    @property
    def differences(self):
        return self.a.states - self.b.states


@dataclass(frozen=True)
class SnapshotEnsemble:
    time: float
    step: int
    x: np.ndarray  # (M, n)
    regimes: np.ndarray  # (M,), 1-based
    path_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.regimes)

    def split(self):
        """The two halves (by path index) of the ensemble."""
        h = self.size // 2
        return (
            SnapshotEnsemble(self.time, self.step, self.x[:h], self.regimes[:h], self.path_ids[:h], self.provenance),
            SnapshotEnsemble(self.time, self.step, self.x[h:2 * h], self.regimes[h:2 * h],
                             self.path_ids[h:2 * h], self.provenance),
        )


@dataclass
class EnsembleResult:
    snapshots: list
    second_moment: np.ndarray  # mean |X_k|^2 over surviving paths, k = 0..K
    second_moment_se: np.ndarray
    failed: int
    paths: int


@dataclass
class CouplingResult:
    mean_dp: np.ndarray  # mean |X_k - Y_k|^p over surviving pairs
    se_dp: np.ndarray
    p_not_met: np.ndarray  # fraction of pairs whose chains differ at step k
    tau: np.ndarray  # meeting index per pair, -1 if not met within the horizon
    failed: int
    pairs: int
    p: float


def grid_steps(times, dt):
    """Map times to step indices, rejecting times off the dt-grid."""
    steps = []
    for t in times:
        k = int(round(t / dt))
        if k < 0 or abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
            raise OffGridTime(f"time {t} is not a non-negative multiple of dt={dt}")
        steps.append(k)
    return steps


def check_step(model, dt, allow_unstable=False):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    c = model.constants
    if c is not None and not allow_unstable and dt >= 1.0 / (c.n_max + 2):
        raise ValueError(f"dt={dt} violates the step bound dt < 1/(n_M+2) = {1.0 / (c.n_max + 2)}")


class _Streams:
    def __init__(self, seed, tag, path_ids, partner=False):
        self.noise = [rng.stream(seed, p, rng.NOISE, tag) for p in path_ids]
        self.chain = [rng.stream(seed, p, rng.CHAIN, tag) for p in path_ids]
        self.partner = [rng.stream(seed, p, rng.PARTNER_CHAIN, tag) for p in path_ids] if partner else None

    def normals(self, count, d):
        return np.stack([g.standard_normal((count, d)) for g in self.noise])

    def uniforms(self, count, which="chain"):
        gens = self.chain if which == "chain" else self.partner
        return np.stack([g.random(count) for g in gens])


@dataclass
class _Chunk:
    model: object
    cumulative: np.ndarray  # exp(Q dt/m), cumulative rows
    dt: float
    substeps: int
    steps: int
    x0: np.ndarray
    i0: int
    seed: int
    tag: int
    path_ids: np.ndarray
    record: tuple
    opts: SolverOptions
    y0: np.ndarray = None
    j0: int = None
    p: float = 0.5
    keep_paths: bool = False


def _chain_block(cum, r, U, S, m):
    """Advance 0-based regimes through S coarse steps; returns (B, S+1)."""
    out = np.empty((len(r), S + 1), dtype=np.int64)
    out[:, 0] = r
    for s in range(S):
        for j in range(m):
            r = next_states(cum, r, U[:, s * m + j])
        out[:, s + 1] = r
    return out


def _coupled_chain_block(cum, ra, rb, met, Ua, Ub, S, m):
    outa = np.empty((len(ra), S + 1), dtype=np.int64)
    outb = np.empty_like(outa)
    outa[:, 0], outb[:, 0] = ra, rb
    for s in range(S):
        for j in range(m):
            col = s * m + j
            ra = next_states(cum, ra, Ua[:, col])
            rb = np.where(met, ra, next_states(cum, rb, Ub[:, col]))
            met = met | (ra == rb)
        outa[:, s + 1], outb[:, s + 1] = ra, rb
    return outa, outb, met


def _bem_advance(model, X, r_now, r_next, dW, dt, opts, alive):
    """One BEM step for the rows in ``alive``; failed rows become NaN."""
    idx = np.flatnonzero(alive)
    if idx.size == 0:
        return X, alive
    if idx.size == len(X):
        g = model.diffusion_batch(X, r_now + 1)
        v = X + np.einsum("bnd,bd->bn", g, dW)
        u, failed = solve_batch(model, v, r_next + 1, dt, opts)
    else:
        g = model.diffusion_batch(X[idx], r_now[idx] + 1)
        v = X[idx] + np.einsum("bnd,bd->bn", g, dW[idx])
        ui, fi = solve_batch(model, v, r_next[idx] + 1, dt, opts)
        u = np.full_like(X, np.nan)
        u[idx] = ui
        failed = np.zeros(len(X), dtype=bool)
        failed[idx] = fi
    failed |= ~np.all(np.isfinite(u), axis=1)
    alive = alive & ~failed
    u[~alive] = np.nan
    return u, alive


def _run_chunk(c):
    B = len(c.path_ids)
    n, d, m, dt = c.model.state_dim, c.model.noise_dim, c.substeps, c.dt
    coupled = c.y0 is not None
    streams = _Streams(c.seed, c.tag, c.path_ids, partner=coupled)
    X = np.tile(np.asarray(c.x0, dtype=float), (B, 1))
    ra = np.full(B, c.i0 - 1, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    record = {k: None for k in c.record}
    sum2 = np.zeros(c.steps + 1)
    sum4 = np.zeros(c.steps + 1)
    if coupled:
        Y = np.tile(np.asarray(c.y0, dtype=float), (B, 1))
        rb = np.full(B, c.j0 - 1, dtype=np.int64)
        met = ra == rb
        tau = np.where(met, 0, -1)
        not_met = np.zeros(c.steps + 1)
        sdp = np.zeros(c.steps + 1)
        sdp2 = np.zeros(c.steps + 1)
    paths = {"x": [X.copy()], "r": [ra + 1]} if c.keep_paths else None
    if coupled and c.keep_paths:
        paths.update(y=[Y.copy()], rb=[rb + 1])

    def observe(k):
        if coupled:
            both = alive
            dp = np.linalg.norm(X[both] - Y[both], axis=1) ** c.p
            sdp[k] = dp.sum()
            sdp2[k] = (dp * dp).sum()
            not_met[k] = np.count_nonzero(~met[both])
        else:
            sq = np.einsum("bn,bn->b", X[alive], X[alive])
            sum2[k] = sq.sum()
            sum4[k] = (sq * sq).sum()
            if k in record:
                record[k] = (X.copy(), ra + 1, alive.copy())

    observe(0)
    k = 0
    while k < c.steps:
        S = min(max(1, BLOCK_DRAWS // m), c.steps - k)
        Z = streams.normals(S * m, d).reshape(B, S, m, d)
        dWs = np.sqrt(dt / m) * Z.sum(axis=2)
        Ua = streams.uniforms(S * m)
        if coupled:
            Ub = streams.uniforms(S * m, "partner")
            Ra, Rb, _ = _coupled_chain_block(c.cumulative, ra, rb, met, Ua, Ub, S, m)
        else:
            Ra = _chain_block(c.cumulative, ra, Ua, S, m)
        for s in range(S):
            dW = dWs[:, s]
            alive_before = alive
            X, alive = _bem_advance(c.model, X, Ra[:, s], Ra[:, s + 1], dW, dt, c.opts, alive)
            if coupled:
                Y, alive_y = _bem_advance(c.model, Y, Rb[:, s], Rb[:, s + 1], dW, dt, c.opts, alive_before)
                alive = alive & alive_y
                rb = Rb[:, s + 1]
                newly = (tau < 0) & (Ra[:, s + 1] == rb)
                tau[newly] = k + s + 1
                met = tau >= 0
            ra = Ra[:, s + 1]
            if c.keep_paths:
                paths["x"].append(X.copy())
                paths["r"].append(ra + 1)
                if coupled:
                    paths["y"].append(Y.copy())
                    paths["rb"].append(rb + 1)
            observe(k + s + 1)
        k += S
    out = {"alive": alive, "paths": paths}
    if coupled:
        out.update(sdp=sdp, sdp2=sdp2, not_met=not_met, tau=tau)
    else:
        out.update(sum2=sum2, sum4=sum4, record=record)
    return out


def _chunks(spec, M, chunk_size):
    for start in range(0, M, chunk_size):
        ids = np.arange(start, min(M, start + chunk_size))
        yield _Chunk(**{**spec, "path_ids": ids})


def _map(chunks, workers):
    chunks = list(chunks)
    if workers <= 1 or len(chunks) == 1:
        return [_run_chunk(c) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chunk, chunks))


def _fine_cumulative(generator, dt, substeps):
    return transition_matrix(generator, dt / substeps).cumulative


def _check_failures(failed, total):
    if failed > FAILURE_BUDGET * total:
        raise EnsembleFailure(f"{failed} of {total} paths failed to integrate "
                              f"(budget {FAILURE_BUDGET:.1%})")


def simulate(model, generator, x0, i0, dt, steps, seed, opts=SolverOptions(), tag=0,
             substeps=1, allow_unstable=False):
    """One BEM trajectory X_0..X_K with its chain path."""
    check_step(model, dt, allow_unstable)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    spec = dict(model=model, cumulative=_fine_cumulative(generator, dt, substeps), dt=dt,
                substeps=substeps, steps=int(steps), x0=x0, i0=int(i0), seed=seed, tag=tag,
                record=(), opts=opts, keep_paths=True)
    res = _run_chunk(_Chunk(**spec, path_ids=np.array([0])))
    X = np.stack(res["paths"]["x"])[:, 0]
    if not res["alive"][0]:
        k = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
        raise NoConvergence(f"implicit solve failed at step {k - 1} -> {k}", step=k)
    regimes = np.array([r[0] for r in res["paths"]["r"]])
    return Trajectory(X, ChainPath(regimes, dt, seed), dt, seed)


def simulate_coupled(model, generator, x0, i0, y0, j0, dt, steps, seed, opts=SolverOptions(),
                     tag=0, allow_unstable=False):
    """Two trajectories sharing Brownian increments, chains coupled by meeting."""
    check_step(model, dt, allow_unstable)
    spec = dict(model=model, cumulative=_fine_cumulative(generator, dt, 1), dt=dt, substeps=1,
                steps=int(steps), x0=np.atleast_1d(np.asarray(x0, dtype=float)), i0=int(i0),
                seed=seed, tag=tag, record=(), opts=opts,
                y0=np.atleast_1d(np.asarray(y0, dtype=float)), j0=int(j0), keep_paths=True)
    res = _run_chunk(_Chunk(**spec, path_ids=np.array([0])))
    if not res["alive"][0]:
        raise NoConvergence("implicit solve failed in a coupled trajectory")
    P = res["paths"]
    a = Trajectory(np.stack(P["x"])[:, 0], ChainPath(np.array([r[0] for r in P["r"]]), dt, seed), dt, seed)
    b = Trajectory(np.stack(P["y"])[:, 0], ChainPath(np.array([r[0] for r in P["rb"]]), dt, seed), dt, seed)
    tau = int(res["tau"][0])
    return CoupledPair(a, b, None if tau < 0 else tau)


def run_ensemble(model, generator, x0, i0, dt, times, paths, seed, workers=1, opts=SolverOptions(),
                 tag=0, substeps=1, horizon_steps=None, chunk_size=CHUNK_SIZE, allow_unstable=False):
    """Integrate ``paths`` independent trajectories and snapshot them at ``times``.

    ``horizon_steps`` extends the run beyond the last snapshot (for the moment
    series); by default the run stops at the last snapshot.
    """
    check_step(model, dt, allow_unstable)
    if paths < 1:
        raise ValueError("need at least one path")
    steps = grid_steps(times, dt)
    K = max(steps + [horizon_steps or 0])
    spec = dict(model=model, cumulative=_fine_cumulative(generator, dt, substeps), dt=dt,
                substeps=int(substeps), steps=K, x0=np.atleast_1d(np.asarray(x0, dtype=float)),
                i0=int(i0), seed=seed, tag=tag, record=tuple(sorted(set(steps))), opts=opts)
    results = _map(_chunks(spec, paths, chunk_size), workers)
    alive = np.concatenate([r["alive"] for r in results])
    failed = int(np.count_nonzero(~alive))
    _check_failures(failed, paths)
    ids = np.arange(paths)
    provenance = {"model": model.name, "dt": dt, "paths": paths, "seed": seed, "tag": tag,
                  "substeps": substeps, "x0": list(map(float, spec["x0"])), "i0": int(i0), "failed": failed}
    snaps = []
    for t, k in zip(times, steps):
        X = np.concatenate([r["record"][k][0] for r in results])
        R = np.concatenate([r["record"][k][1] for r in results])
        keep = alive
        snaps.append(SnapshotEnsemble(float(t), k, X[keep], R[keep], ids[keep], provenance))
    live = paths - failed
    s2 = sum(r["sum2"] for r in results) / live
    s4 = sum(r["sum4"] for r in results) / live
    se = np.sqrt(np.maximum(s4 - s2 * s2, 0.0) / max(live - 1, 1))
    return EnsembleResult(snaps, s2, se, failed, paths)


def ensemble_snapshots(model, generator, x0, i0, dt, times, paths, seed, workers=1,
                       opts=SolverOptions(), **kwargs):
    return run_ensemble(model, generator, x0, i0, dt, times, paths, seed, workers, opts, **kwargs).snapshots


def coupled_ensemble(model, generator, x0, i0, y0, j0, dt, steps, pairs, seed, p=0.5, workers=1,
                     opts=SolverOptions(), tag=0, chunk_size=CHUNK_SIZE, allow_unstable=False):
    """Mean |X_k - Y_k|^p over ``pairs`` coupled pairs, k = 0..steps."""
    check_step(model, dt, allow_unstable)
    spec = dict(model=model, cumulative=_fine_cumulative(generator, dt, 1), dt=dt, substeps=1,
                steps=int(steps), x0=np.atleast_1d(np.asarray(x0, dtype=float)), i0=int(i0),
                seed=seed, tag=tag, record=(), opts=opts,
                y0=np.atleast_1d(np.asarray(y0, dtype=float)), j0=int(j0), p=float(p))
    results = _map(_chunks(spec, pairs, chunk_size), workers)
    alive = np.concatenate([r["alive"] for r in results])
    failed = int(np.count_nonzero(~alive))
    _check_failures(failed, pairs)
    live = pairs - failed
    m1 = sum(r["sdp"] for r in results) / live
    m2 = sum(r["sdp2"] for r in results) / live
    se = np.sqrt(np.maximum(m2 - m1 * m1, 0.0) / max(live - 1, 1))
    not_met = sum(r["not_met"] for r in results) / live
    tau = np.concatenate([r["tau"] for r in results])
    return CouplingResult(m1, se, not_met, tau, failed, pairs, float(p))
