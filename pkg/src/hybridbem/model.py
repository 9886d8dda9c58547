"""Regime-switching SDE models dX = f(X, r) dt + g(X, r) dB.

Models are evaluated in batches: ``X`` has shape (B, n) and ``regimes`` holds
1-based regime labels of shape (B,). Drift batches are (B, n), drift
Jacobians (B, n, n) and diffusion batches (B, n, d).
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModelConstants:
    """Declared constants of the polynomial-Lipschitz and monotonicity conditions.

    ``b`` and ``m`` may be left as ``None`` and filled in from a model with
    :meth:`derive`.
    """

    q: float
    a: tuple
    l1: float
    n: tuple
    m: float = None
    b: tuple = None

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"q must be >= 2, got {self.q}")
        if self.l1 <= 4:
            raise ValueError(f"l1 must be > 4, got {self.l1}")
        if len(self.a) != len(self.n):
            raise ValueError("a and n need one entry per regime")
        if any(ai <= 0 for ai in self.a):
            raise ValueError("every a_i must be positive")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "n", tuple(float(v) for v in self.n))
        if self.b is not None:
            object.__setattr__(self, "b", tuple(float(v) for v in self.b))

    @property
    def l2(self):
        return self.l1 - 2

    @property
    def n_max(self):
        return max(abs(v) for v in self.n)

    @property
    def regime_count(self):
        return len(self.n)

    def derive(self, model):
        """Fill ``b`` and ``m`` from the model's values at the origin."""
        zero = np.zeros(model.state_dim)
        f0 = np.array([np.sum(model.drift(zero, i) ** 2) for i in range(1, model.regime_count + 1)])
        g0 = np.array([np.sum(model.diffusion(zero, i) ** 2) for i in range(1, model.regime_count + 1)])
        b = tuple(4 * ai + 2 * max(fi, gi) for ai, fi, gi in zip(self.a, f0, g0))
        m = float(np.max(f0 + self.l1 * self.l2 / 2 * g0))
        return ModelConstants(
            q=self.q, a=self.a, l1=self.l1, n=self.n,
            m=self.m if self.m is not None else m,
            b=self.b if self.b is not None else b,
        )

    def to_dict(self):
        return {
            "q": self.q, "a": list(self.a), "b": None if self.b is None else list(self.b),
            "l1": self.l1, "l2": self.l2, "n": list(self.n), "n_M": self.n_max, "m": self.m,
        }


class HybridModel:
    """Base class; subclasses implement the batch evaluators."""

    name = "model"

    def __init__(self, state_dim, noise_dim, regime_count, constants=None):
        self.state_dim = int(state_dim)
        self.noise_dim = int(noise_dim)
        self.regime_count = int(regime_count)
        if constants is not None and constants.regime_count != self.regime_count:
            raise ValueError(
                f"constants describe {constants.regime_count} regimes, model has {self.regime_count}"
            )
        self.constants = constants

    def drift_batch(self, X, regimes):
        raise NotImplementedError

    def diffusion_batch(self, X, regimes):
        raise NotImplementedError

    def drift_jacobian_batch(self, X, regimes):
        """Analytic Jacobian of the drift, or ``None`` if unavailable."""
        return None

    def drift(self, x, regime):
        x = np.asarray(x, dtype=float).reshape(1, self.state_dim)
        return self.drift_batch(x, np.array([regime]))[0]

    def diffusion(self, x, regime):
        x = np.asarray(x, dtype=float).reshape(1, self.state_dim)
        return self.diffusion_batch(x, np.array([regime]))[0]

    def drift_jacobian(self, x, regime):
        x = np.asarray(x, dtype=float).reshape(1, self.state_dim)
        jac = self.drift_jacobian_batch(x, np.array([regime]))
        return None if jac is None else jac[0]


def _by_regime(funcs, X, regimes, shape):
    out = np.empty((X.shape[0],) + shape)
    for i, fn in enumerate(funcs, start=1):
        mask = regimes == i
        if mask.any():
            out[mask] = np.asarray(fn(X[mask]), dtype=float).reshape((-1,) + shape)
    return out


class FunctionModel(HybridModel):
    """Model from per-regime vectorized callables.

    ``drifts[i]`` maps (B, n) to (B, n); ``diffusions[i]`` maps (B, n) to
    (B, n, d). ``jacobians`` is optional. Use module-level functions if the
    model must be shipped to worker processes.
    """

    def __init__(self, drifts, diffusions, noise_dim=1, state_dim=1, jacobians=None,
                 constants=None, name="function-model"):
        if len(drifts) != len(diffusions):
            raise ValueError("need one drift and one diffusion per regime")
        super().__init__(state_dim, noise_dim, len(drifts), constants)
        self.drifts = list(drifts)
        self.diffusions = list(diffusions)
        self.jacobians = None if jacobians is None else list(jacobians)
        self.name = name

    def drift_batch(self, X, regimes):
        return _by_regime(self.drifts, X, regimes, (self.state_dim,))

    def diffusion_batch(self, X, regimes):
        return _by_regime(self.diffusions, X, regimes, (self.state_dim, self.noise_dim))

    def drift_jacobian_batch(self, X, regimes):
        if self.jacobians is None:
            return None
        return _by_regime(self.jacobians, X, regimes, (self.state_dim, self.state_dim))


@dataclass(frozen=True)
class Polynomial:
    """Multivariate polynomial sum_t coeffs[t] * prod_j x_j ** powers[t, j]."""

    coeffs: tuple
    powers: tuple

    @classmethod
    def univariate(cls, coeffs):
        """From power-series coefficients c0 + c1 x + c2 x^2 + ..."""
        return cls(tuple(float(c) for c in coeffs), tuple((k,) for k in range(len(coeffs))))

    @classmethod
    def from_terms(cls, terms, dim):
        coeffs, powers = [], []
        for c, e in terms:
            e = tuple(int(v) for v in e)
            if len(e) != dim or any(v < 0 for v in e):
                raise ValueError(f"monomial exponents {e} must be {dim} non-negative integers")
            coeffs.append(float(c))
            powers.append(e)
        return cls(tuple(coeffs), tuple(powers))

    @property
    def degree(self):
        return max((sum(p) for c, p in zip(self.coeffs, self.powers) if c != 0), default=0)


@dataclass
class _MonomialBasis:
    powers: np.ndarray  # (T, n)
    _deriv: list = field(default_factory=list)

    def __post_init__(self):
        n = self.powers.shape[1]
        for j in range(n):
            lowered = self.powers.copy()
            lowered[:, j] = np.maximum(lowered[:, j] - 1, 0)
            self._deriv.append((self.powers[:, j].astype(float), lowered))

    def values(self, X):
        return np.prod(X[:, None, :] ** self.powers[None, :, :], axis=2)

    def gradients(self, X):
        """d(monomial_t)/dx_j, shape (B, T, n)."""
        cols = [scale[None, :] * np.prod(X[:, None, :] ** low[None, :, :], axis=2)
                for scale, low in self._deriv]
        return np.stack(cols, axis=2)


class PolynomialModel(HybridModel):
    """Drift and diffusion given by polynomials in the state, per regime.

    Parameters
    ----------
    drift : list over regimes of list (length n) of :class:`Polynomial`
    diffusion : list over regimes of n x d nested lists of :class:`Polynomial`
    """

    def __init__(self, drift, diffusion, constants=None, name="polynomial"):
        if len(drift) != len(diffusion) or not drift:
            raise ValueError("need one drift and one diffusion per regime")
        n = len(drift[0])
        d = len(diffusion[0][0])
        super().__init__(n, d, len(drift), constants)
        self.name = name
        self.drift_polys = drift
        self.diffusion_polys = diffusion
        monomials = {}
        for i in range(self.regime_count):
            if len(drift[i]) != n:
                raise ValueError(f"regime {i + 1}: drift needs {n} components")
            if len(diffusion[i]) != n or any(len(row) != d for row in diffusion[i]):
                raise ValueError(f"regime {i + 1}: diffusion must be {n}x{d}")
            for poly in list(drift[i]) + [p for row in diffusion[i] for p in row]:
                for e in poly.powers:
                    if len(e) != n:
                        raise ValueError(f"monomial {e} does not match state dimension {n}")
                    monomials.setdefault(tuple(e), len(monomials))
        if not monomials:
            monomials[(0,) * n] = 0
        powers = np.array(sorted(monomials, key=monomials.get), dtype=np.int64).reshape(-1, n)
        self._basis = _MonomialBasis(powers)
        T = len(powers)
        self._cf = np.zeros((self.regime_count, n, T))
        self._cg = np.zeros((self.regime_count, n, d, T))
        for i in range(self.regime_count):
            for k, poly in enumerate(drift[i]):
                for c, e in zip(poly.coeffs, poly.powers):
                    self._cf[i, k, monomials[tuple(e)]] += c
            for k, row in enumerate(diffusion[i]):
                for j, poly in enumerate(row):
                    for c, e in zip(poly.coeffs, poly.powers):
                        self._cg[i, k, j, monomials[tuple(e)]] += c

        self._dense1d = None
        if n == 1:
            deg = int(powers.max())
            self._dense1d = np.zeros((self.regime_count, deg + 1))
            for t, e in enumerate(powers[:, 0]):
                self._dense1d[:, e] += self._cf[:, 0, t]

    def __reduce__(self):
        return (PolynomialModel, (self.drift_polys, self.diffusion_polys, self.constants, self.name))

    def drift_batch(self, X, regimes):
        phi = self._basis.values(X)
        return np.einsum("bt,bkt->bk", phi, self._cf[np.asarray(regimes) - 1])

    def drift_jacobian_batch(self, X, regimes):
        dphi = self._basis.gradients(X)
        return np.einsum("btj,bkt->bkj", dphi, self._cf[np.asarray(regimes) - 1])

    def diffusion_batch(self, X, regimes):
        phi = self._basis.values(X)
        return np.einsum("bt,bkjt->bkj", phi, self._cg[np.asarray(regimes) - 1])

    def drift_coefficients(self, regimes):
        """Per-row drift coefficient tensors, shape (B, n, T); hoisted out of solver loops."""
        return self._cf[np.asarray(regimes) - 1]

    def scalar_drift_table(self, regimes):
        """Dense power-series drift coefficients per row, shape (B, deg+1); scalar models only."""
        if self._dense1d is None:
            return None
        return self._dense1d[np.asarray(regimes) - 1]

    def drift_from_coefficients(self, X, coef):
        return np.einsum("bt,bkt->bk", self._basis.values(X), coef)

    def drift_jacobian_from_coefficients(self, X, coef):
        return np.einsum("btj,bkt->bkj", self._basis.gradients(X), coef)


def _p(*coeffs):
    return Polynomial.univariate(coeffs)


# a_i are analytic bounds: |1 - 10 s|^2 <= 900 (1 + x^4 + y^4) and
# |2 + 11 s|^2 <= 1089 (1 + x^4 + y^4) for s = x^2 + xy + y^2.
CUBIC_CONSTANTS = ModelConstants(q=6, a=(900.0, 1089.0), l1=5, n=(2, -4), m=1.0)

CUBIC_GENERATOR = ((-1.0, 1.0), (3.0, -3.0))
CUBIC_CORRECTED_GENERATOR = ((-4.0, 4.0), (1.0, -1.0))


def two_regime_cubic():
    """Two-regime scalar cubic model with quadratic noise.

    f(x,1) = 1 + x - 10 x^3, g(x,1) = x^2, f(x,2) = 1 - 2x - 11 x^3, g(x,2) = -x^2.
    """
    model = PolynomialModel(
        drift=[[_p(1, 1, 0, -10)], [_p(1, -2, 0, -11)]],
        diffusion=[[[_p(0, 0, 1)]], [[_p(0, 0, -1)]]],
        name="two-regime-cubic",
    )
    model.constants = CUBIC_CONSTANTS.derive(model)
    return model


REGISTRY = {
    "two-regime-cubic": two_regime_cubic,
}


def builtin(name):
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown built-in model {name!r}; known: {sorted(REGISTRY)}") from None
