"""Truncated multivariate Taylor (jet) arithmetic.

A :class:`Jet` holds the Taylor coefficients of a smooth function at a base
point, up to a fixed total degree, in ``nvars`` variables.  Coefficient
arrays carry arbitrary leading batch dimensions and all operations broadcast
over them.  Partial derivatives extracted within the jet's degree are exact;
finite differences are used only as test oracles.

Metric families evaluate F^2 in this arithmetic, which is what "closed-form
jets" means throughout the package: the closed form is written once and the
jet propagation supplies every mixed partial the tensor layer needs.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

_SPACES: dict[tuple[int, int], "JetSpace"] = {}


def jet_space(nvars: int, order: int) -> "JetSpace":
    key = (int(nvars), int(order))
    space = _SPACES.get(key)
    if space is None:
        space = JetSpace(*key)
        _SPACES[key] = space
    return space


def _graded_exponents(nvars: int, order: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def compositions(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for v in range(remaining, -1, -1):
            compositions(prefix + (v,), remaining - v, slots - 1)

    for deg in range(order + 1):
        compositions((), deg, nvars)
    return out


class JetSpace:
    """Coefficient bookkeeping for jets of a given arity and total degree.

    Exponent tuples are graded (degree 0, 1, ...) so the coefficient block of
    any lower degree is a prefix; truncation and differentiation exploit that.
    """

    def __init__(self, nvars: int, order: int):
        self.nvars = nvars
        self.order = order
        self.exponents = _graded_exponents(nvars, order)
        self.ncoef = len(self.exponents)
        self.index = {e: i for i, e in enumerate(self.exponents)}
        if order >= 1:
            units = [tuple(int(i == v) for i in range(nvars)) for v in range(nvars)]
            self.var_index = [self.index[e] for e in units]
        else:
            self.var_index = []
        self._fact = np.array(
            [math.prod(math.factorial(k) for k in e) for e in self.exponents]
        )
        degrees = [sum(e) for e in self.exponents]
        ia, ib, ic = [], [], []
        for i, e1 in enumerate(self.exponents):
            d1 = degrees[i]
            for j, e2 in enumerate(self.exponents):
                if d1 + degrees[j] > order:
                    continue
                ia.append(i)
                ib.append(j)
                ic.append(self.index[tuple(a + b for a, b in zip(e1, e2))])
        self._ia = np.asarray(ia, dtype=np.intp)
        self._ib = np.asarray(ib, dtype=np.intp)
        npairs = self._ia.size
        self._gather = sp.csc_matrix(
            (np.ones(npairs), (np.asarray(ic, dtype=np.intp), np.arange(npairs))),
            shape=(self.ncoef, npairs),
        )
        self._deriv_tables: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def mul_coeffs(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
        a = np.broadcast_to(a, lead + (self.ncoef,))
        b = np.broadcast_to(b, lead + (self.ncoef,))
        contrib = (a[..., self._ia] * b[..., self._ib]).reshape(-1, self._ia.size)
        out = self._gather.dot(contrib.T).T
        return np.ascontiguousarray(out).reshape(lead + (self.ncoef,))

    def deriv_table(self, var: int) -> tuple[np.ndarray, np.ndarray]:
        table = self._deriv_tables.get(var)
        if table is None:
            child = jet_space(self.nvars, self.order - 1)
            src = np.empty(child.ncoef, dtype=np.intp)
            fac = np.empty(child.ncoef)
            for ci, e in enumerate(child.exponents):
                bumped = list(e)
                bumped[var] += 1
                src[ci] = self.index[tuple(bumped)]
                fac[ci] = e[var] + 1
            table = (src, fac)
            self._deriv_tables[var] = table
        return table


def _broadcast_const(space: JetSpace, value) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    c = np.zeros(value.shape + (space.ncoef,))
    c[..., 0] = value
    return c


class Jet:
    __slots__ = ("space", "c")

    def __init__(self, space: JetSpace, coeffs: np.ndarray):
        self.space = space
        self.c = coeffs

    # -- basics ------------------------------------------------------------

    @property
    def value(self) -> np.ndarray:
        return self.c[..., 0]

    def copy(self) -> "Jet":
        return Jet(self.space, self.c.copy())

    def truncate(self, order: int) -> "Jet":
        """Drop coefficients above ``order`` (graded prefix slice)."""
        if order == self.space.order:
            return self
        child = jet_space(self.space.nvars, order)
        return Jet(child, np.ascontiguousarray(self.c[..., : child.ncoef]))

    def derivative(self, var: int) -> "Jet":
        """Exact partial derivative; result lives one degree lower."""
        child = jet_space(self.space.nvars, self.space.order - 1)
        src, fac = self.space.deriv_table(var)
        return Jet(child, self.c[..., src] * fac)

    def partial(self, alpha) -> np.ndarray:
        """The partial derivative d^alpha f at the base point (an array)."""
        alpha = tuple(int(a) for a in alpha)
        idx = self.space.index[alpha]
        return self.c[..., idx] * self.space._fact[idx]

    # -- ring operations ----------------------------------------------------

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, Jet):
            if other.space is not self.space:
                raise ValueError("jet space mismatch")
            return other.c
        return _broadcast_const(self.space, other)

    def __add__(self, other):
        return Jet(self.space, self.c + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Jet(self.space, self.c - self._coerce(other))

    def __rsub__(self, other):
        return Jet(self.space, self._coerce(other) - self.c)

    def __neg__(self):
        return Jet(self.space, -self.c)

    def __mul__(self, other):
        if isinstance(other, Jet):
            if other.space is not self.space:
                raise ValueError("jet space mismatch")
            return Jet(self.space, self.space.mul_coeffs(self.c, other.c))
        other = np.asarray(other, dtype=float)
        return Jet(self.space, self.c * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        other = np.asarray(other, dtype=float)
        return Jet(self.space, self.c / other[..., None])

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer jet powers")
        result = Jet(self.space, _broadcast_const(self.space, np.ones(self.c.shape[:-1])))
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    # -- analytic compositions ----------------------------------------------

    def _compose(self, outer: list[np.ndarray]) -> "Jet":
        """Evaluate sum_m outer[m] * (self - value)^m by Horner."""
        w = self.c.copy()
        w[..., 0] = 0.0
        res = _broadcast_const(self.space, np.broadcast_to(outer[-1], self.c.shape[:-1]))
        for m in range(len(outer) - 2, -1, -1):
            res = self.space.mul_coeffs(res, w)
            res[..., 0] = res[..., 0] + outer[m]
        return Jet(self.space, res)

    def reciprocal(self) -> "Jet":
        u0 = self.value
        outer = [np.power(u0, -1.0)]
        for m in range(1, self.space.order + 1):
            outer.append(-outer[-1] / u0)
        return self._compose(outer)

    def sqrt(self) -> "Jet":
        u0 = self.value
        if np.any(u0 <= 0):
            raise ValueError("jet sqrt needs a positive constant term")
        coef = 1.0
        outer = [np.sqrt(u0)]
        for m in range(1, self.space.order + 1):
            coef *= (0.5 - (m - 1)) / m
            outer.append(coef * np.power(u0, 0.5 - m))
        return self._compose(outer)

    def exp(self) -> "Jet":
        e0 = np.exp(self.value)
        outer = [e0 / math.factorial(m) for m in range(self.space.order + 1)]
        return self._compose(outer)

    def log(self) -> "Jet":
        u0 = self.value
        outer = [np.log(u0)]
        for m in range(1, self.space.order + 1):
            outer.append(((-1.0) ** (m + 1)) / (m * np.power(u0, float(m))))
        return self._compose(outer)

    def sin(self) -> "Jet":
        s0, c0 = np.sin(self.value), np.cos(self.value)
        cycle = [s0, c0, -s0, -c0]
        outer = [cycle[m % 4] / math.factorial(m) for m in range(self.space.order + 1)]
        return self._compose(outer)

    def cos(self) -> "Jet":
        s0, c0 = np.sin(self.value), np.cos(self.value)
        cycle = [c0, -s0, -c0, s0]
        outer = [cycle[m % 4] / math.factorial(m) for m in range(self.space.order + 1)]
        return self._compose(outer)

    def power(self, p: float) -> "Jet":
        """Real power with positive constant term."""
        u0 = self.value
        coef = 1.0
        outer = [np.power(u0, p)]
        for m in range(1, self.space.order + 1):
            coef *= (p - (m - 1)) / m
            outer.append(coef * np.power(u0, p - m))
        return self._compose(outer)


def variables(space: JetSpace, values: np.ndarray) -> list[Jet]:
    """Seed one first-order jet per variable from ``values`` (..., nvars)."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != space.nvars:
        raise ValueError("values last axis must match nvars")
    jets = []
    for v in range(space.nvars):
        c = np.zeros(values.shape[:-1] + (space.ncoef,))
        c[..., 0] = values[..., v]
        if space.order >= 1:
            c[..., space.var_index[v]] = 1.0
        jets.append(Jet(space, c))
    return jets


def constant(space: JetSpace, value) -> Jet:
    return Jet(space, _broadcast_const(space, value))
