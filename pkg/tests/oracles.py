"""Independent reference computations used by the tests.

Nothing here imports the package under test except for plain data types.
"""

import itertools
import math

import numpy as np
from scipy.optimize import linprog


def two_state_transition(alpha, beta, dt):
    """Closed form exp(Q dt) for Q = [[-alpha, alpha], [beta, -beta]]."""
    s = alpha + beta
    e = math.exp(-s * dt)
    return np.array([
        [beta + alpha * e, alpha - alpha * e],
        [beta - beta * e, alpha + beta * e],
    ]) / s


def reachable(adj, start):
    """Breadth-first reachability on a boolean adjacency matrix."""
    seen, frontier = {start}, [start]
    while frontier:
        nxt = []
        for i in frontier:
            for j in range(len(adj)):
                if adj[i][j] and j not in seen:
                    seen.add(j)
                    nxt.append(j)
        frontier = nxt
    return seen


def bisect_root(G, v, lo=-10.0, hi=10.0, iters=200):
    """Root of the increasing scalar map G(u) = v on [lo, hi]."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if G(mid) > v:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def dp(x, i, y, j, p):
    return abs(x - y) ** p + (i != j)


def brute_force_assignment(xs, rs, ys, ss, p):
    """Minimum average d_p over all permutations (uniform equal-size measures)."""
    n = len(xs)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        c = sum(dp(xs[k], rs[k], ys[perm[k]], ss[perm[k]], p) for k in range(n)) / n
        best = min(best, c)
    return best


def lp_transport(a, b, C):
    """Optimal transport cost as a dense linear program."""
    m, n = C.shape
    A_eq = []
    for i in range(m):
        row = np.zeros((m, n))
        row[i, :] = 1
        A_eq.append(row.ravel())
    for j in range(n):
        col = np.zeros((m, n))
        col[:, j] = 1
        A_eq.append(col.ravel())
    res = linprog(C.ravel(), A_eq=np.array(A_eq), b_eq=np.concatenate([a, b]), bounds=(0, None),
                  method="highs")
    assert res.status == 0
    return res.fun


def ecdf_sup(a, b):
    """sup |F_a - F_b| by evaluating both ECDFs at every sample point."""
    pts = sorted(set(a) | set(b))
    Fa = lambda x: sum(v <= x for v in a) / len(a)
    Fb = lambda x: sum(v <= x for v in b) / len(b)
    return max(abs(Fa(x) - Fb(x)) for x in pts)


def cubic_drift(u, i):
    return np.where(np.equal(i, 1), 1 + u - 10 * u ** 3, 1 - 2 * u - 11 * u ** 3)


def cubic_diffusion(u, i):
    return np.where(np.equal(i, 1), u * u, -u * u)
