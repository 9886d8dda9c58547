"""Statistics on empirical measures over R^n x {1..N}."""

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import rng
from .errors import EmptySample, InvalidP, NonPositiveValues, SizeCapExceeded, TooFewPoints

ASSIGNMENT_CAP = 4096
GENERAL_CAP = 512
WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms (x_k, i_k, w_k) with sum(w) = 1."""

    x: np.ndarray  # (M, n)
    regimes: np.ndarray  # (M,)
    weights: np.ndarray  # (M,)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        x = x.reshape(len(x), -1)
        w = np.asarray(self.weights, dtype=float)
        r = np.asarray(self.regimes, dtype=np.int64)
        if len(x) == 0:
            raise EmptySample("measure has no atoms")
        if not (len(x) == len(w) == len(r)):
            raise ValueError("atoms, regimes and weights differ in length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(r < 1):
            raise ValueError("regime labels start at 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "regimes", r)

    @classmethod
    def uniform(cls, x, regimes):
        x = np.asarray(x, dtype=float)
        if len(x) == 0:
            raise EmptySample("measure has no atoms")
        return cls(x, regimes, np.full(len(x), 1.0 / len(x)))

    @classmethod
    def from_snapshot(cls, snap):
        return cls.uniform(snap.x, snap.regimes)

    @property
    def size(self):
        return len(self.weights)

    @property
    def is_uniform(self):
        return np.all(self.weights == self.weights[0])


@dataclass(frozen=True)
class OTResult:
    cost: float
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    method: str

    def dense_plan(self, shape):
        plan = np.zeros(shape)
        np.add.at(plan, (self.rows, self.cols), self.mass)
        return plan


def _check_p(p):
    if not 0 < p < 1:
        raise InvalidP(f"p must lie in (0, 1), got {p}")


def dp_distance(a, b, p):
    """d_p((x, i), (y, j)) = |x - y|^p + 1{i != j}."""
    _check_p(p)
    (x, i), (y, j) = a, b
    dist = np.linalg.norm(np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(y, dtype=float)))
    return float(dist ** p + (int(i) != int(j)))


def cost_matrix(u, v, p):
    _check_p(p)
    C = cdist(u.x, v.x) ** p
    C += u.regimes[:, None] != v.regimes[None, :]
    return C


def _emd(a, b, C):
    # POT imports every array backend it can find; only numpy is needed here
    for backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{backend}", "1")
    import ot

    return ot.emd(a, b, C, numItermax=10_000_000)


def wasserstein_p(u, v, p, assignment_cap=ASSIGNMENT_CAP, general_cap=GENERAL_CAP):
    """Exact optimal transport cost between two empirical measures under d_p.

    Equal-size uniform measures are solved as a linear assignment problem,
    anything else by network simplex on the dense bipartite graph. Sorted
    matching is not an option: d_p is concave in |x - y|.
    """
    _check_p(p)
    if u.size == v.size and u.is_uniform and v.is_uniform:
        if u.size > assignment_cap:
            raise SizeCapExceeded(f"{u.size} atoms exceed the assignment cap {assignment_cap}; "
                                  "subsample with subsample_indices()")
        C = cost_matrix(u, v, p)
        rows, cols = linear_sum_assignment(C)
        mass = np.full(len(rows), 1.0 / u.size)
        cost = float(C[rows, cols].sum() / u.size)
        return OTResult(cost, rows, cols, mass, "assignment")
    if max(u.size, v.size) > general_cap:
        raise SizeCapExceeded(f"{max(u.size, v.size)} atoms exceed the network-simplex cap {general_cap}; "
                              "subsample with subsample_indices()")
    C = cost_matrix(u, v, p)
    plan = _emd(u.weights, v.weights, C)
    rows, cols = np.nonzero(plan > 0)
    mass = plan[rows, cols]
    return OTResult(float(np.sum(mass * C[rows, cols])), rows, cols, mass, "network-simplex")


def subsample_indices(size, k, seed, resample):
    """Seeded index draw: without replacement if k < size, else a bootstrap draw.

    The draw depends only on (seed, resample, size, k), so two ensembles of the
    same size are subsampled at the same path indices.
    """
    g = rng.stream(seed, resample, rng.SUBSAMPLE, tag=size)
    if k < size:
        return np.sort(g.choice(size, k, replace=False))
    return np.sort(g.integers(0, size, size))


@dataclass(frozen=True)
class BootstrapW:
    mean: float
    sd: float
    values: tuple


def bootstrap_wasserstein(u_x, u_r, v_x, v_r, p, subsample=2048, resamples=8, seed=0):
    """W_p between two large uniform ensembles from seeded subsamples.

    Each resample draws min(size, ``subsample``) atoms per side and solves the
    assignment problem exactly; returns the mean and standard deviation.
    """
    u_x, v_x = np.asarray(u_x, dtype=float), np.asarray(v_x, dtype=float)
    u_r, v_r = np.asarray(u_r), np.asarray(v_r)
    k = min(subsample, len(u_r), len(v_r))
    values = []
    for b in range(resamples):
        iu = subsample_indices(len(u_r), k, seed, b)
        iv = subsample_indices(len(v_r), k, seed, b)
        values.append(wasserstein_p(EmpiricalMeasure.uniform(u_x[iu], u_r[iu]),
                                    EmpiricalMeasure.uniform(v_x[iv], v_r[iv]), p).cost)
    values = np.array(values)
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return BootstrapW(float(values.mean()), sd, tuple(map(float, values)))


# ------------------------------------------------------------------ K-S


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float


def kolmogorov_sf(lam, terms=100):
    """P(K > lam) for the Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # theta-function form converges fast for small lam
        s = sum(math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8 * lam * lam)) for j in range(1, terms + 1))
        return float(min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s)))
    s = sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, terms + 1))
    return float(min(1.0, max(0.0, 2 * s)))


def ks_two_sample(a, b):
    """Two-sample Kolmogorov-Smirnov statistic with asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise EmptySample("K-S test needs two non-empty samples")
    grid = np.concatenate([a, b])
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    D = float(np.max(np.abs(Fa - Fb)))
    en = a.size * b.size / (a.size + b.size)
    return KSResult(D, kolmogorov_sf(math.sqrt(en) * D))


# -------------------------------------------------------------- density


@dataclass(frozen=True)
class DensityTable:
    grid: np.ndarray
    density: np.ndarray
    spacing: float
    method: str

    def integral(self):
        return float(np.sum(self.density) * self.spacing)

    def rows(self):
        return [(float(g), float(d)) for g, d in zip(self.grid, self.density)]


def _nonempty(samples):
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise EmptySample("no samples")
    return s


def _iqr(s):
    q75, q25 = np.percentile(s, [75, 25])
    return q75 - q25


def empirical_density(samples, method="hist", bins=None, bandwidth=None, points=512):
    """Density table on a uniform grid, normalized so sum(density) * spacing = 1.

    ``hist`` uses Freedman-Diaconis bins unless ``bins`` is given; grid points
    are bin centres. ``kde`` is a Gaussian kernel estimate with Silverman's
    bandwidth 0.9 min(sd, IQR/1.34) n^(-1/5) unless ``bandwidth`` is given.
    """
    s = _nonempty(samples)
    lo, hi = float(s.min()), float(s.max())
    if method == "hist":
        if bins is None:
            width = 2 * _iqr(s) * s.size ** (-1 / 3)
            if hi == lo:
                edges = np.array([lo - 0.5, lo + 0.5])
            else:
                if width <= 0:
                    width = (hi - lo) / max(1, int(np.ceil(np.sqrt(s.size))))
                count = max(1, int(np.ceil((hi - lo) / width)))
                edges = np.linspace(lo, hi, count + 1)
        else:
            edges = np.linspace(lo, hi, int(bins) + 1) if hi > lo else np.array([lo - 0.5, lo + 0.5])
        counts, edges = np.histogram(s, edges)
        spacing = float(edges[1] - edges[0])
        density = counts / (s.size * spacing)
        return DensityTable(0.5 * (edges[:-1] + edges[1:]), density, spacing, "hist")
    if method == "kde":
        if bandwidth is None:
            spread = min(np.std(s, ddof=1) if s.size > 1 else 0.0, _iqr(s) / 1.34)
            if spread <= 0:
                spread = np.std(s, ddof=1) if s.size > 1 else 0.0
            bandwidth = 0.9 * spread * s.size ** (-0.2) if spread > 0 else 1.0
        grid = np.linspace(lo - 5 * bandwidth, hi + 5 * bandwidth, points)
        spacing = float(grid[1] - grid[0])
        density = np.zeros(points)
        for start in range(0, s.size, 4096):
            z = (grid[None, :] - s[start:start + 4096, None]) / bandwidth
            density += np.exp(-0.5 * z * z).sum(axis=0)
        density /= s.size * bandwidth * math.sqrt(2 * math.pi)
        density /= density.sum() * spacing
        return DensityTable(grid, density, spacing, "kde")
    raise ValueError(f"unknown density method {method!r}")


# --------------------------------------------------------------- moments


@dataclass(frozen=True)
class Moment:
    value: float
    se: float


def moment(samples, order=2):
    """Monte Carlo mean of |x|^order over atoms (regime labels are ignored)."""
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise EmptySample("no samples")
    s = s.reshape(len(s), -1)
    vals = np.linalg.norm(s, axis=1) ** order
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return Moment(float(vals.mean()), se)


# ----------------------------------------------------------- decay fits


@dataclass(frozen=True)
class DecayFit:
    slope: float
    intercept: float
    r2: float
    points: int


def decay_slope(k, values, dt, burn_in=0.2):
    """Least-squares fit of log(value) against k*dt after dropping the burn-in.

    The first ``burn_in`` fraction of the points is discarded.
    """
    k = np.asarray(k, dtype=float)
    values = np.asarray(values, dtype=float)
    start = int(math.ceil(burn_in * len(k)))
    k, values = k[start:], values[start:]
    if len(k) < 3:
        raise TooFewPoints(f"{len(k)} points after burn-in, need 3")
    if np.any(~(values > 0)):
        raise NonPositiveValues("decay series has non-positive values in the fit window")
    t = k * dt
    y = np.log(values)
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = slope * t + intercept
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - fit) ** 2) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(float(slope), float(intercept), float(r2), len(t))
