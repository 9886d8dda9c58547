"""Implicit backward Euler-Maruyama step.

Each step solves G_i(u) = u - dt * f(u, i) = v, where v = X_k + g(X_k, r_k) dB_k
is the explicit part and i = r_{k+1}. Under the step bound G_i is strongly
monotone, so the root is unique; Newton from u0 = v finds it in a few
iterations, with bisection (n = 1) or damped fixed-point iteration (n > 1)
as fallback.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NoConvergence, NonFiniteEvaluation, SingularJacobian
from .model import PolynomialModel

EPS = np.finfo(float).eps
SINGULAR_PIVOT = 1e-12
SINGULAR_COND = 1e12


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-12
    max_newton_iters: int = 50
    max_bisection_iters: int = 200
    max_fixed_point_iters: int = 5000
    jacobian: str = "analytic"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        for name in ("max_newton_iters", "max_bisection_iters", "max_fixed_point_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.jacobian not in ("analytic", "finite-difference"):
            raise ValueError(f"jacobian must be 'analytic' or 'finite-difference', got {self.jacobian!r}")


@dataclass(frozen=True)
class SolveInfo:
    method: str
    iterations: int
    residual: float


@dataclass(frozen=True)
class StepProblem:
    v: np.ndarray
    regime: int
    dt: float
    model: object
    allow_unstable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        c = self.model.constants
        if c is not None and not self.allow_unstable and self.dt >= 1.0 / (c.n_max + 2):
            raise ValueError(f"dt={self.dt} violates dt < 1/(n_M+2) = {1.0 / (c.n_max + 2)}")

    def G(self, u):
        return u - self.dt * self.model.drift(u, self.regime)

    def jacobian(self, u):
        jf = self.model.drift_jacobian(u, self.regime)
        if jf is None:
            return None
        return np.eye(len(u)) - self.dt * jf


def _roundoff_floor(u, v, gu):
    # |G(u) - v| cannot be resolved below a few ulps of the terms involved
    return 8 * EPS * (np.linalg.norm(u) + np.linalg.norm(v) + np.linalg.norm(gu - u))


def _accept(res, u, v, gu, tol):
    return res <= tol or res <= _roundoff_floor(u, v, gu)


def fd_jacobian(G, u, gu=None):
    """Forward-difference Jacobian with step 1e-7 * (1 + |u|)."""
    u = np.asarray(u, dtype=float)
    gu = G(u) if gu is None else gu
    h = 1e-7 * (1 + np.linalg.norm(u))
    J = np.empty((len(gu), len(u)))
    for j in range(len(u)):
        e = u.copy()
        e[j] += h
        J[:, j] = (G(e) - gu) / h
    return J


def _eval(G, u):
    gu = np.atleast_1d(np.asarray(G(u), dtype=float))
    if not np.all(np.isfinite(gu)):
        raise NonFiniteEvaluation(f"G returned non-finite values at u={u}")
    return gu


def newton_solve(G, v, u0=None, opts=SolverOptions(), jac=None, fallback=True, full_output=False):
    """Solve G(u) = v by Newton's method, warm-started at ``u0`` (default ``v``).

    On a singular Jacobian, a non-finite iterate or exhausted iterations the
    fallback solver takes over unless ``fallback`` is False.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    u = v.copy() if u0 is None else np.atleast_1d(np.asarray(u0, dtype=float)).copy()
    best, best_res = u, np.inf
    try:
        for it in range(opts.max_newton_iters + 1):
            gu = _eval(G, u)
            res = float(np.linalg.norm(gu - v))
            if res < best_res:
                best, best_res = u, res
            if _accept(res, u, v, gu, opts.tol):
                info = SolveInfo("newton", it, res)
                return (u, info) if full_output else u
            if it == opts.max_newton_iters:
                break
            J = None
            if jac is not None and opts.jacobian == "analytic":
                J = jac(u)
            if J is None:
                J = fd_jacobian(G, u, gu)
            J = np.atleast_2d(J)
            if len(u) == 1:
                if abs(J[0, 0]) < SINGULAR_PIVOT:
                    raise SingularJacobian(f"Jacobian {J[0, 0]!r} is singular at u={u}")
                step = (gu - v) / J[0, 0]
            else:
                if np.linalg.cond(J) > SINGULAR_COND:
                    raise SingularJacobian(f"Jacobian is singular at u={u}")
                step = np.linalg.solve(J, gu - v)
            u = u - step
            if not np.all(np.isfinite(u)):
                raise NonFiniteEvaluation("Newton iterate left the finite range")
        raise NoConvergence(f"Newton did not converge in {opts.max_newton_iters} iterations",
                            best=best, residual=best_res)
    except (SingularJacobian, NoConvergence, NonFiniteEvaluation):
        if not fallback:
            raise
    return fallback_solve(G, v, opts, u0=best if np.all(np.isfinite(best)) else v,
                          full_output=full_output)


def _bisection(G, v, opts, u0):
    lo = hi = float(u0[0])
    target = float(v[0])
    g0 = float(_eval(G, np.array([lo]))[0])
    evals = 1
    if _accept(abs(g0 - target), np.array([lo]), v, np.array([g0]), opts.tol):
        return np.array([lo]), SolveInfo("bisection", evals, abs(g0 - target))
    width = max(1.0, abs(target - lo))
    # expand until G(lo) <= v <= G(hi); G is increasing under the step bound
    glo = ghi = g0
    while glo > target:
        hi, ghi = lo, glo
        lo -= width
        width *= 2
        glo = float(_eval(G, np.array([lo]))[0])
        evals += 1
        if evals > opts.max_bisection_iters:
            raise NoConvergence("bracket expansion failed", best=np.array([hi]), residual=abs(ghi - target))
    while ghi < target:
        lo, glo = hi, ghi
        hi += width
        width *= 2
        ghi = float(_eval(G, np.array([hi]))[0])
        evals += 1
        if evals > opts.max_bisection_iters:
            raise NoConvergence("bracket expansion failed", best=np.array([lo]), residual=abs(glo - target))
    best, best_res = (lo, abs(glo - target)) if abs(glo - target) < abs(ghi - target) else (hi, abs(ghi - target))
    for it in range(opts.max_bisection_iters):
        mid = 0.5 * (lo + hi)
        gm = float(_eval(G, np.array([mid]))[0])
        r = abs(gm - target)
        if r < best_res:
            best, best_res = mid, r
        if _accept(r, np.array([mid]), v, np.array([gm]), opts.tol):
            return np.array([mid]), SolveInfo("bisection", evals + it + 1, r)
        if mid <= lo or mid >= hi:
            break
        if gm > target:
            hi = mid
        else:
            lo = mid
    raise NoConvergence("bisection did not reach tolerance", best=np.array([best]), residual=best_res)


def _damped_fixed_point(G, v, opts, u0):
    u = u0.copy()
    gu = _eval(G, u)
    for it in range(opts.max_fixed_point_iters):
        res = float(np.linalg.norm(gu - v))
        if _accept(res, u, v, gu, opts.tol):
            return u, SolveInfo("fixed-point", it, res)
        if it % 10 == 0:
            # ||I - J_G|| = dt * ||J_f||: the local slope times the step
            slope = np.linalg.norm(np.eye(len(u)) - fd_jacobian(G, u, gu), 2)
            lam = 1.0 / (1.0 + slope)
        u = u - lam * (gu - v)
        gu = _eval(G, u)
    res = float(np.linalg.norm(gu - v))
    raise NoConvergence("damped fixed-point iteration did not converge", best=u, residual=res)


def fallback_solve(G, v, opts=SolverOptions(), u0=None, full_output=False):
    """Robust solve of G(u) = v: bisection in 1-D, damped fixed point otherwise."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    u0 = v.copy() if u0 is None else np.atleast_1d(np.asarray(u0, dtype=float))
    if len(v) == 1:
        u, info = _bisection(G, v, opts, u0)
    else:
        u, info = _damped_fixed_point(G, v, opts, u0)
    return (u, info) if full_output else u


def implicit_step(problem, opts=SolverOptions(), full_output=False):
    """Return the unique u with u - dt * f(u, i) = v."""
    return newton_solve(problem.G, problem.v, None, opts, jac=problem.jacobian, full_output=full_output)


# ---------------------------------------------------------------- batches


class _DriftEvaluator:
    """Drift and Jacobian restricted to rows of a batch with fixed regimes."""

    def __init__(self, model, regimes, jacobian):
        self.model = model
        self.regimes = regimes
        self.analytic = jacobian == "analytic"
        self.coef = model.drift_coefficients(regimes) if isinstance(model, PolynomialModel) else None

    def f(self, X, rows):
        if self.coef is not None:
            return self.model.drift_from_coefficients(X, self.coef[rows])
        return self.model.drift_batch(X, self.regimes[rows])

    def jac(self, X, rows, fx):
        J = None
        if self.analytic:
            if self.coef is not None:
                J = self.model.drift_jacobian_from_coefficients(X, self.coef[rows])
            else:
                J = self.model.drift_jacobian_batch(X, self.regimes[rows])
        if J is None:
            n = X.shape[1]
            h = 1e-7 * (1 + np.linalg.norm(X, axis=1))
            J = np.empty((X.shape[0], n, n))
            for j in range(n):
                Xh = X.copy()
                Xh[:, j] += h
                J[:, :, j] = (self.f(Xh, rows) - fx) / h[:, None]
        return J


def solve_batch(model, v, regimes, dt, opts=SolverOptions()):
    """Solve u_b - dt * f(u_b, regimes_b) = v_b for every row b.

    Rows are iterated independently (converged rows are frozen), so a row's
    result does not depend on the other rows of the batch.

    Returns
    -------
    u : ndarray (B, n)
        Solutions; NaN where the solve failed.
    failed : ndarray of bool (B,)
    """
    v = np.asarray(v, dtype=float)
    B, n = v.shape
    table = model.scalar_drift_table(regimes) if isinstance(model, PolynomialModel) else None
    if table is not None:
        u, pending = _newton_scalar_poly(table, v[:, 0], dt, opts)
        return _finish(model, u[:, None], v, regimes, dt, opts, pending)
    ev = _DriftEvaluator(model, regimes, opts.jacobian)
    u = v.copy()
    done = np.zeros(B, dtype=bool)
    needs_fallback = np.zeros(B, dtype=bool)
    active = np.flatnonzero(np.all(np.isfinite(v), axis=1))
    needs_fallback[~np.all(np.isfinite(v), axis=1)] = True
    for it in range(opts.max_newton_iters + 1):
        if active.size == 0:
            break
        ua = u[active]
        fa = ev.f(ua, active)
        ga = ua - dt * fa
        finite = np.all(np.isfinite(ga), axis=1)
        res = np.linalg.norm(ga - v[active], axis=1)
        floor = 8 * EPS * (np.linalg.norm(ua, axis=1) + np.linalg.norm(v[active], axis=1)
                           + dt * np.linalg.norm(fa, axis=1))
        ok = finite & ((res <= opts.tol) | (res <= floor))
        done[active[ok]] = True
        needs_fallback[active[~finite]] = True
        keep = finite & ~ok
        active, ua, fa, ga = active[keep], ua[keep], fa[keep], ga[keep]
        if active.size == 0 or it == opts.max_newton_iters:
            break
        Jf = ev.jac(ua, active, fa)
        if n == 1:
            J = 1.0 - dt * Jf[:, 0, 0]
            singular = np.abs(J) < SINGULAR_PIVOT
            step = np.zeros_like(ua)
            step[~singular, 0] = (ga[~singular, 0] - v[active[~singular], 0]) / J[~singular]
        else:
            J = np.eye(n)[None] - dt * Jf
            singular = ~np.isfinite(J).all(axis=(1, 2))
            singular[~singular] = np.linalg.cond(J[~singular]) > SINGULAR_COND
            step = np.zeros_like(ua)
            if (~singular).any():
                rhs = (ga[~singular] - v[active[~singular]])[..., None]
                step[~singular] = np.linalg.solve(J[~singular], rhs)[..., 0]
        needs_fallback[active[singular]] = True
        new = ua - step
        bad = singular | ~np.all(np.isfinite(new), axis=1)
        needs_fallback[active[bad]] = True
        u[active[~bad]] = new[~bad]
        active = active[~bad]
    needs_fallback[active] = True
    needs_fallback &= ~done
    return _finish(model, u, v, regimes, dt, opts, needs_fallback)


def _horner(cols, x):
    acc = cols[-1]
    for c in cols[-2::-1]:
        acc = acc * x + c
    return acc


def _newton_scalar_poly(table, v, dt, opts):
    """Newton for scalar polynomial drift; rows freeze once converged."""
    deg = table.shape[1] - 1
    cols = [np.ascontiguousarray(table[:, j]) for j in range(deg + 1)]
    dcols = [j * cols[j] for j in range(1, deg + 1)] or [np.zeros_like(v)]
    u = v.copy()
    done = np.zeros(len(v), dtype=bool)
    dead = ~np.isfinite(v)
    for it in range(opts.max_newton_iters + 1):
        f = _horner(cols, u)
        r = u - dt * f - v
        res = np.abs(r)
        floor = 8 * EPS * (np.abs(u) + np.abs(v) + dt * np.abs(f))
        done |= ~dead & ((res <= opts.tol) | (res <= floor))
        if (done | dead).all() or it == opts.max_newton_iters:
            break
        J = 1.0 - dt * _horner(dcols, u)
        with np.errstate(divide="ignore", invalid="ignore"):
            new = u - r / J
        ok = np.isfinite(new) & (np.abs(J) >= SINGULAR_PIVOT)
        dead |= ~done & ~ok
        u = np.where(~done & ~dead, new, u)
    return u, ~done


def _finish(model, u, v, regimes, dt, opts, needs_fallback):
    B = len(v)
    failed = np.zeros(B, dtype=bool)
    for b in np.flatnonzero(needs_fallback):
        regime = int(regimes[b])

        def G(x, regime=regime):
            return x - dt * model.drift(x, regime)

        start = u[b] if np.all(np.isfinite(u[b])) else v[b]
        try:
            u[b] = fallback_solve(G, v[b], opts, u0=start)
        except (NoConvergence, NonFiniteEvaluation):
            u[b] = np.nan
            failed[b] = True
    return u, failed
