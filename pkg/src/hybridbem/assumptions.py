"""Numerical checks of the growth, monotonicity and switching conditions.

Checks over a sampling box are falsification, not proof: a clean report
means no counterexample was found among the sampled points.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .errors import DegenerateBox

INEQ_TOL = 1e-9


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def make(cls, lo, hi, dim):
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (dim,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (dim,)).copy()
        if np.any(~(hi > lo)):
            raise DegenerateBox(f"sampling box [{lo}, {hi}] has zero or negative width")
        return cls(lo, hi)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half_width(self):
        return 0.5 * (self.hi - self.lo)


@dataclass(frozen=True)
class Violation:
    check: str
    regime: int
    x: list
    y: list
    lhs: float
    rhs: float


@dataclass
class AssumptionReport:
    S1: float
    S2: float
    lambda1: float
    lambda2: float
    passes: bool
    max_step: float
    n_M: float
    empirical_violations: list = field(default_factory=list)
    samples: int = 0
    note: str = "sampled falsification: no violation means no counterexample found in the box"

    def to_dict(self):
        d = asdict(self)
        d["empirical_violations"] = [asdict(v) if not isinstance(v, dict) else v
                                     for v in self.empirical_violations]
        return d


def check_assumption3(n, mu):
    """Weighted sums S1 = sum mu_j (n_j+1)/(1-(n_j+1)/(n_M+2)) and
    S2 = sum mu_j n_j/(1-n_j/(n_M+2)); the condition holds iff both are negative."""
    n = np.asarray(n, dtype=float)
    mu = np.asarray(getattr(mu, "probs", mu), dtype=float)
    if n.shape != mu.shape:
        raise ValueError(f"{len(n)} constants for {len(mu)} regimes")
    n_max = float(np.max(np.abs(n)))
    denom = n_max + 2
    S1 = float(np.sum(mu * (n + 1) / (1 - (n + 1) / denom)))
    S2 = float(np.sum(mu * n / (1 - n / denom)))
    return AssumptionReport(
        S1=S1, S2=S2, lambda1=-S1, lambda2=-S2, passes=bool(S1 < 0 and S2 < 0),
        max_step=1.0 / denom, n_M=n_max,
    )


def max_step_size(constants):
    """Open upper bound 1/(n_M+2) on the step size."""
    return 1.0 / (constants.n_max + 2)


# ------------------------------------------------------------ sampling


def _pairs(box, samples, seed):
    """Uniform pairs, near-diagonal pairs and pairs against the origin.

    Returned in unit coordinates u in [-1, 1]^n so callers can rescale the
    same draw to nested boxes.
    """
    if samples < 2:
        raise ValueError("need at least 2 samples")
    g = rng.stream(seed, 0, rng.SAMPLING)
    dim = len(box.lo)
    k = samples // 4
    ux = g.uniform(-1, 1, (samples, dim))
    uy = g.uniform(-1, 1, (samples, dim))
    # near-diagonal pairs probe the local slope, including at the box edge
    near = slice(samples - 2 * k, samples - k)
    uy[near] = np.clip(ux[near] + 1e-4 * g.standard_normal((k, dim)), -1, 1)
    ux[samples - 2 * k] = 1.0
    uy[samples - 2 * k] = 1.0 - 1e-4
    ux[samples - 2 * k + 1] = -1.0
    uy[samples - 2 * k + 1] = -1.0 + 1e-4
    return ux, uy, slice(samples - k, samples)


def _scale(box, u, shrink=1.0):
    return box.center + shrink * box.half_width * u


def _regime_arrays(model, X, regime):
    r = np.full(len(X), regime)
    return model.drift_batch(X, r), model.diffusion_batch(X, r)


def _sq(a):
    return np.sum(a.reshape(len(a), -1) ** 2, axis=1)


def _dot(a, b):
    return np.einsum("bn,bn->b", a, b)


def _pair_terms(model, X, Y, regime):
    fx, gx = _regime_arrays(model, X, regime)
    fy, gy = _regime_arrays(model, Y, regime)
    dx = X - Y
    return dx, fx - fy, gx - gy


def estimate_monotonicity(model, l1, box, samples=10000, seed=0):
    """Per-regime sampled sup of (2<x-y, f(x)-f(y)> + l1 |g(x)-g(y)|^2) / |x-y|^2.

    A lower bound on any valid monotonicity constant n_i.
    """
    box = box if isinstance(box, Box) else Box.make(*box, model.state_dim)
    ux, uy, origin = _pairs(box, samples, seed)
    X, Y = _scale(box, ux), _scale(box, uy)
    Y[origin] = 0.0
    out = []
    for i in range(1, model.regime_count + 1):
        dx, df, dg = _pair_terms(model, X, Y, i)
        d2 = _sq(dx)
        ok = d2 > 0
        quotient = (2 * _dot(dx, df) + l1 * _sq(dg))[ok] / d2[ok]
        out.append(float(np.max(quotient)))
    return out


def _lipschitz_quotient(model, X, Y, regime):
    dx, df, dg = _pair_terms(model, X, Y, regime)
    d2 = _sq(dx)
    ok = d2 > 0
    return np.maximum(_sq(df), _sq(dg))[ok] / d2[ok], X[ok], Y[ok]


def estimate_polynomial_lipschitz(model, box, samples=10000, seed=0, q_grid=None, growth_tol=1.2):
    """Fit (q, a_i) so that |Δf|^2 v |Δg|^2 <= a_i (1 + |x|^(q-2) + |y|^(q-2)) |x-y|^2.

    q is the smallest grid value for which the sampled constant a_i(q) over
    the box exceeds the one over the half-size box by at most ``growth_tol``
    (the quotient has stopped growing); a_i is then the sampled maximum over
    the full box, so the inequality holds on every sampled pair.
    """
    box = box if isinstance(box, Box) else Box.make(*box, model.state_dim)
    q_grid = np.arange(2.0, 16.01, 0.5) if q_grid is None else np.asarray(q_grid, dtype=float)
    ux, uy, origin = _pairs(box, samples, seed)
    data = []
    for shrink in (1.0, 0.5):
        X, Y = _scale(box, ux, shrink), _scale(box, uy, shrink)
        Y[origin] = 0.0
        per_regime = [_lipschitz_quotient(model, X, Y, i) for i in range(1, model.regime_count + 1)]
        data.append(per_regime)

    def constants(q, per_regime):
        out = []
        for L, X, Y in per_regime:
            w = 1 + np.linalg.norm(X, axis=1) ** (q - 2) + np.linalg.norm(Y, axis=1) ** (q - 2)
            out.append(float(np.max(L / w)) if len(L) else 0.0)
        return np.array(out)

    chosen = q_grid[-1]
    for q in q_grid:
        full, half = constants(q, data[0]), constants(q, data[1])
        if np.all(full <= growth_tol * np.maximum(half, np.finfo(float).tiny)):
            chosen = q
            break
    a = constants(chosen, data[0])
    a = np.where(a > 0, a, np.finfo(float).tiny)
    return float(chosen), [float(v) for v in a]


def falsify(model, constants, box, samples=10000, seed=0, limit=20):
    """Sampled counterexamples to the declared inequalities.

    Checks, per regime: the polynomial Lipschitz bound, the growth bound with
    b_i, the monotonicity bound with n_i and l1, and its origin-centred form
    2<x, f> + l2 |g|^2 <= m + (1 + n_i)|x|^2. Tolerance 1e-9 (1 + |x-y|^2)
    for pair checks and 1e-9 (1 + |x|^2) for point checks.
    """
    c = constants if constants.b is not None and constants.m is not None else constants.derive(model)
    box = box if isinstance(box, Box) else Box.make(*box, model.state_dim)
    ux, uy, origin = _pairs(box, samples, seed)
    X, Y = _scale(box, ux), _scale(box, uy)
    Y[origin] = 0.0
    found = []

    def record(check, regime, mask, lhs, rhs, xs, ys):
        for b in np.flatnonzero(mask)[: max(0, limit - len(found))]:
            found.append(Violation(check, regime, xs[b].tolist(), None if ys is None else ys[b].tolist(),
                                   float(lhs[b]), float(rhs[b])))

    nx, ny = np.linalg.norm(X, axis=1), np.linalg.norm(Y, axis=1)
    for i in range(1, model.regime_count + 1):
        a_i, b_i, n_i = c.a[i - 1], c.b[i - 1], c.n[i - 1]
        dx, df, dg = _pair_terms(model, X, Y, i)
        d2 = _sq(dx)
        pair_tol = INEQ_TOL * (1 + d2)

        lhs = np.maximum(_sq(df), _sq(dg))
        rhs = a_i * (1 + nx ** (c.q - 2) + ny ** (c.q - 2)) * d2
        record("polynomial-lipschitz", i, lhs > rhs + pair_tol, lhs, rhs, X, Y)

        lhs = 2 * _dot(dx, df) + c.l1 * _sq(dg)
        rhs = n_i * d2
        record("monotonicity", i, lhs > rhs + pair_tol, lhs, rhs, X, Y)

        fx, gx = _regime_arrays(model, X, i)
        point_tol = INEQ_TOL * (1 + nx ** 2)
        lhs = np.maximum(_sq(fx), _sq(gx))
        rhs = b_i * (1 + nx ** c.q)
        record("growth", i, lhs > rhs + point_tol, lhs, rhs, X, None)

        lhs = 2 * _dot(X, fx) + c.l2 * _sq(gx)
        rhs = c.m + (1 + n_i) * nx ** 2
        record("monotonicity-origin", i, lhs > rhs + point_tol, lhs, rhs, X, None)
    return found


def check_model(model, generator_mu, constants, box, samples=10000, seed=0):
    """Full report: weighted sums plus sampled falsification of the declared constants."""
    report = check_assumption3(constants.n, generator_mu)
    report.empirical_violations = falsify(model, constants, box, samples, seed)
    report.samples = samples
    return report
