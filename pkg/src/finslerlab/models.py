"""Built-in Finsler metric families.

Every family evaluates F and the jet of F^2 in explicit closed form; the jet
arithmetic in :mod:`finslerlab.jets` then supplies exact mixed partials to the
tensor, connection, and curvature layers.  Points live in chart coordinates;
the sphere-based families carry two antipodal stereographic charts glued by
the inversion x -> r0^2 x / |x|^2 and integrators switch charts once
|x| > 1.5 r0.

Shapes: positions ``x`` and directions ``y`` are arrays of shape (..., n) and
all methods broadcast over leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import jets
from .errors import (
    ChartDomainError,
    DegenerateDirectionError,
    ParameterError,
)
from .streams import normals, uniforms

_SWITCH_FACTOR = 1.5  # |x| beyond this (times r0) triggers a chart switch
_VALID_FACTOR = 4.0   # chart validity cutoff for sphere charts, times r0


@dataclass(frozen=True)
class TangentSample:
    """A point with an attached nonzero tangent direction.

    ``chart`` selects the coordinate chart the coordinates refer to; models
    with a single chart only accept 0.
    """

    x: np.ndarray
    y: np.ndarray
    chart: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))


class MetricModel:
    """Base class: geometry queries shared by every family."""

    family: str = "abstract"
    n: int = 0
    n_charts: int = 1
    reversible: bool = True
    riemannian: bool = False
    locally_minkowski: bool = False
    compact: bool = False
    # set when every flag curvature is one constant; lets hot loops skip the
    # jet pipeline (the generic route is cross-checked against it in tests)
    constant_flag_curvature: Optional[float] = None

    # -- core evaluations (families override f2_jet and metric) -------------

    def metric(self, x, y, chart: int = 0) -> np.ndarray:
        """F(x, y), batched."""
        raise NotImplementedError

    def f2_jet(self, x, y, order: int, chart: int = 0) -> jets.Jet:
        """Jet of F^2 at (x, y) in the 2n variables (x_1..x_n, y_1..y_n)."""
        raise NotImplementedError

    def spray(self, x, v, chart: int = 0) -> np.ndarray:
        """Spray coefficients G^i(x, v); the geodesic equation is
        x'' = -2 G(x, x')."""
        from . import curvature

        return curvature.spray_from_jets(self, x, v, chart)

    def spray_jac(self, x, v, chart: int = 0):
        """(G, dG/dx, dG/dv) for the variational (Jacobi) system."""
        from . import curvature

        return curvature.spray_jac_from_jets(self, x, v, chart)

    # -- chart atlas ---------------------------------------------------------

    def chart_valid(self, x, chart: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if chart < 0 or chart >= self.n_charts:
            raise ParameterError(f"{self.family} has charts 0..{self.n_charts - 1}")
        return np.ones(x.shape[:-1], dtype=bool)

    def switch_mask(self, x, charts) -> np.ndarray:
        """Which batch elements should move to the other chart."""
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1], dtype=bool)

    def apply_transition(self, x, v=None, rows=None):
        """Map coordinates (and tangents / variational rows) to the other
        chart.  Only meaningful when n_charts == 2."""
        raise ParameterError(f"{self.family} has a single chart")

    # -- policies ------------------------------------------------------------

    def injectivity_bound(self) -> float:
        """Conservative forward injectivity radius valid at every point."""
        return math.inf

    def search_radius(self) -> float:
        """Default cap on shooting length for distance queries."""
        return math.inf

    def closed_distance(self, p, q, chart_p=0, chart_q=0):
        """Exact forward distance d(p, q) where the family admits a closed
        form, else None.  Batched; used to seed and to cross-check shooting.

        Position-independent norms measure straight chords (convexity makes
        segments minimal), so every single-chart locally Minkowski family
        gets the chord norm for free.
        """
        if self.locally_minkowski and self.n_charts == 1:
            p = np.asarray(p, dtype=float)
            q = np.asarray(q, dtype=float)
            return self.metric(p, q - p, chart=0)
        return None

    def ricci_closed(self, x, y, chart: int = 0):
        """Closed-form normalized Ricci trace where the family admits one,
        else None.  Hot loops take this path; the jet pipeline stays the
        reference route and tests compare the two."""
        if self.constant_flag_curvature is None:
            return None
        shape = np.broadcast_shapes(np.asarray(x).shape[:-1],
                                    np.asarray(y).shape[:-1])
        return np.full(shape, (self.n - 1) * self.constant_flag_curvature)

    def metric_matrix(self, x, chart: int = 0):
        """Closed-form fundamental matrix for direction-independent metrics
        (Riemannian families), batched (..., n, n); None when g depends on
        the direction or no closed form is implemented."""
        return None

    # -- sampling helpers ------------------------------------------------------

    def default_centers(self, count: int = 8) -> np.ndarray:
        """A deterministic well-spread set of base points (chart 0)."""
        raise NotImplementedError

    def random_points(self, seed: int, label: str, count: int) -> np.ndarray:
        """Deterministic scattered points in chart 0, for sampling sups."""
        raise NotImplementedError

    def validate_sample(self, s: TangentSample) -> None:
        if s.x.shape[-1] != self.n or s.y.shape[-1] != self.n:
            raise ParameterError(f"expected dimension {self.n}")
        if not np.all(self.chart_valid(s.x, s.chart)):
            raise ChartDomainError(f"point outside chart {s.chart} of {self.family}")
        self._check_direction(s.y)

    def _check_direction(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if np.any(np.linalg.norm(y, axis=-1) < 1e-300):
            raise DegenerateDirectionError("zero tangent direction")

    def config(self) -> dict:
        """JSON-serializable description of the model."""
        raise NotImplementedError

    def describe(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.config().items())


def _as_xy(x, y, n):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != n or y.shape[-1] != n:
        raise ParameterError(f"expected dimension {n}")
    return x, y


# ---------------------------------------------------------------------------
# flat families


class Euclidean(MetricModel):
    """The standard Euclidean metric on R^n."""

    family = "euclidean"
    riemannian = True
    locally_minkowski = True
    constant_flag_curvature = 0.0

    def __init__(self, n: int = 2):
        if n < 1:
            raise ParameterError("dimension must be >= 1")
        self.n = int(n)

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        return np.linalg.norm(y, axis=-1)

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        yv = xy[self.n:]
        acc = yv[0] * yv[0]
        for yi in yv[1:]:
            acc = acc + yi * yi
        return acc

    def spray(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(np.asarray(v, dtype=float))

    def spray_jac(self, x, v, chart: int = 0):
        v = np.asarray(v, dtype=float)
        z = np.zeros(v.shape[:-1] + (self.n, self.n))
        return np.zeros_like(v), z, z

    def metric_matrix(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape[:-1] + (self.n, self.n))

    def default_centers(self, count: int = 8):
        ang = 2 * np.pi * np.arange(count) / count
        pts = np.zeros((count, self.n))
        pts[:, 0] = 1.2 * np.cos(ang)
        pts[:, 1 % self.n] = 1.2 * np.sin(ang)
        pts[0] = 0.0
        return pts

    def random_points(self, seed, label, count):
        idx = np.arange(count)
        cols = [2.0 * uniforms(seed, label, idx, slot=j) - 1.0 for j in range(self.n)]
        return 1.5 * np.stack(cols, axis=-1)

    def config(self):
        return {"family": self.family, "n": self.n}


class RandersFlat(MetricModel):
    """Flat Randers metric F(y) = |y| + <b, y> with a constant one-form b,
    |b| < 1.  Locally Minkowski, hence Berwald with zero spray."""

    family = "randers_flat"
    reversible = False
    locally_minkowski = True
    constant_flag_curvature = 0.0

    def __init__(self, n: int = 2, b: Sequence[float] = (0.3, 0.0)):
        self.n = int(n)
        self.b = np.asarray(b, dtype=float)
        if self.b.shape != (self.n,):
            raise ParameterError("b must have length n")
        if np.linalg.norm(self.b) >= 1.0:
            raise ParameterError("Randers data requires |b| < 1")
        self.reversible = bool(np.linalg.norm(self.b) == 0.0)

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        return np.linalg.norm(y, axis=-1) + y @ self.b

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        self._check_direction(y)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        yv = xy[self.n:]
        y2 = yv[0] * yv[0]
        for yi in yv[1:]:
            y2 = y2 + yi * yi
        beta = yv[0] * float(self.b[0])
        for i in range(1, self.n):
            beta = beta + yv[i] * float(self.b[i])
        f = y2.sqrt() + beta
        return f * f

    def spray(self, x, v, chart: int = 0):
        return np.zeros_like(np.asarray(v, dtype=float))

    def spray_jac(self, x, v, chart: int = 0):
        v = np.asarray(v, dtype=float)
        z = np.zeros(v.shape[:-1] + (self.n, self.n))
        return np.zeros_like(v), z, z

    def bh_density_closed_form(self) -> float:
        """Busemann-Hausdorff coordinate density (constant in x)."""
        return float((1.0 - self.b @ self.b) ** ((self.n + 1) / 2))

    default_centers = Euclidean.default_centers
    random_points = Euclidean.random_points

    def config(self):
        return {"family": self.family, "n": self.n, "b": self.b.tolist()}


class FlatRiemannian(MetricModel):
    """Constant-coefficient Riemannian metric F^2 = y^T M y.

    Used as the averaged-metric companion of flat Berwald families in the
    Berwald density check; also a handy anisotropic test metric.
    """

    family = "flat_riemannian"
    riemannian = True
    locally_minkowski = True
    constant_flag_curvature = 0.0

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ParameterError("matrix must be square")
        self.n = self.matrix.shape[0]
        self.matrix = 0.5 * (self.matrix + self.matrix.T)
        if np.any(np.linalg.eigvalsh(self.matrix) <= 0):
            raise ParameterError("matrix must be positive definite")

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        return np.sqrt(np.einsum("...i,ij,...j->...", y, self.matrix, y))

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        yv = xy[self.n:]
        acc = None
        for i in range(self.n):
            for j in range(self.n):
                m = float(self.matrix[i, j])
                if m == 0.0:
                    continue
                term = (yv[i] * yv[j]) * m
                acc = term if acc is None else acc + term
        return acc

    spray = Euclidean.spray
    spray_jac = Euclidean.spray_jac
    default_centers = Euclidean.default_centers
    random_points = Euclidean.random_points

    def metric_matrix(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix, x.shape[:-1] + (self.n, self.n))

    def config(self):
        return {"family": self.family, "matrix": self.matrix.tolist()}


class ReversibleQuartic(MetricModel):
    """Flat, reversible, non-Riemannian norm F^2 = sqrt(|y|^4 + c sum y_i^4).

    Strong convexity holds for moderate c; the constructor probes a direction
    grid and rejects parameters that break it.  This family exists so that
    reversible-but-not-Riemannian behaviour (BH < HT) has test coverage.
    """

    family = "reversible_quartic"
    locally_minkowski = True
    constant_flag_curvature = 0.0

    def __init__(self, n: int = 2, c: float = 0.4):
        self.n = int(n)
        self.c = float(c)
        if not 0.0 <= self.c:
            raise ParameterError("c must be nonnegative")
        self._probe_convexity()

    def _probe_convexity(self):
        from . import curvature

        ang = np.linspace(0.0, np.pi, 181)
        dirs = np.zeros((ang.size, self.n))
        dirs[:, 0] = np.cos(ang)
        dirs[:, 1 % self.n] = np.sin(ang)
        g = curvature.fundamental_matrix(self, np.zeros_like(dirs), dirs, chart=0)
        if np.any(np.linalg.eigvalsh(g)[..., 0] <= 1e-10):
            raise ParameterError(f"quartic parameter c={self.c} breaks strong convexity")

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        y2 = np.sum(y * y, axis=-1)
        return (y2 * y2 + self.c * np.sum(y ** 4, axis=-1)) ** 0.25

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        self._check_direction(y)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        yv = xy[self.n:]
        y2 = yv[0] * yv[0]
        q4 = (yv[0] * yv[0]) * (yv[0] * yv[0])
        for yi in yv[1:]:
            y2 = y2 + yi * yi
            q4 = q4 + (yi * yi) * (yi * yi)
        return (y2 * y2 + q4 * self.c).sqrt()

    spray = Euclidean.spray
    spray_jac = Euclidean.spray_jac
    default_centers = Euclidean.default_centers
    random_points = Euclidean.random_points

    def config(self):
        return {"family": self.family, "n": self.n, "c": self.c}


# ---------------------------------------------------------------------------
# conformally flat Riemannian families


class _ConformalRiemannian(MetricModel):
    """Shared machinery for metrics g = phi(x)^2 delta in a single chart.

    Subclasses provide ``_phi(s)`` and ``_grad_log_phi(x, s)`` with s = |x|^2.
    """

    riemannian = True

    def _phi(self, s, chart: int = 0):
        raise NotImplementedError

    def _grad_log_phi(self, x, s, chart: int = 0):
        raise NotImplementedError

    def _hess_log_phi(self, x, s, chart: int = 0):
        raise NotImplementedError

    def _phi_jet(self, xv, chart: int = 0):
        raise NotImplementedError

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        s = np.sum(x * x, axis=-1)
        return self._phi(s, chart) * np.linalg.norm(y, axis=-1)

    def metric_matrix(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        phi2 = self._phi(s, chart) ** 2
        return phi2[..., None, None] * np.eye(self.n)

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        xv, yv = xy[: self.n], xy[self.n:]
        phi = self._phi_jet(xv, chart)
        y2 = yv[0] * yv[0]
        for yi in yv[1:]:
            y2 = y2 + yi * yi
        return (phi * phi) * y2

    def spray(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        s = np.sum(x * x, axis=-1)
        w = self._grad_log_phi(x, s, chart)
        vw = np.sum(v * w, axis=-1)
        v2 = np.sum(v * v, axis=-1)
        return vw[..., None] * v - 0.5 * v2[..., None] * w

    def spray_jac(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        s = np.sum(x * x, axis=-1)
        w = self._grad_log_phi(x, s, chart)
        dw = self._hess_log_phi(x, s, chart)
        vw = np.sum(v * w, axis=-1)
        v2 = np.sum(v * v, axis=-1)
        G = vw[..., None] * v - 0.5 * v2[..., None] * w
        # dG^i/dx^k = (v . dw_k) v^i - |v|^2/2 dw^i_k   with dw symmetric
        vdw = np.einsum("...j,...jk->...k", v, dw)
        Gx = vdw[..., None, :] * v[..., :, None] - 0.5 * v2[..., None, None] * dw
        eye = np.eye(self.n)
        Gv = (
            w[..., None, :] * v[..., :, None]
            + vw[..., None, None] * eye
            - v[..., None, :] * w[..., :, None]
        )
        return G, Gx, Gv


class RoundSphere(_ConformalRiemannian):
    """Round sphere of radius r0 in two antipodal stereographic charts.

    The chart metric is (2 r0^2 / (r0^2 + |x|^2))^2 |dx|^2; the conformal
    factor at the chart origin is 2 (for r0 = 1), and the constant flag
    curvature is 1/r0^2.
    """

    family = "round_sphere"
    n_charts = 2
    compact = True

    def __init__(self, n: int = 2, r0: float = 1.0):
        if n < 2:
            raise ParameterError("sphere needs n >= 2")
        if r0 <= 0:
            raise ParameterError("radius must be positive")
        self.n = int(n)
        self.r0 = float(r0)
        self.constant_flag_curvature = 1.0 / self.r0 ** 2

    def _phi(self, s, chart: int = 0):
        return 2.0 * self.r0 ** 2 / (self.r0 ** 2 + s)

    def _grad_log_phi(self, x, s, chart: int = 0):
        return -2.0 * x / (self.r0 ** 2 + s)[..., None]

    def _hess_log_phi(self, x, s, chart: int = 0):
        d = self.r0 ** 2 + s
        eye = np.eye(self.n)
        return -2.0 * eye / d[..., None, None] + 4.0 * np.einsum(
            "...i,...j->...ij", x, x
        ) / (d * d)[..., None, None]

    def _phi_jet(self, xv, chart: int = 0):
        s = xv[0] * xv[0]
        for xi in xv[1:]:
            s = s + xi * xi
        return (2.0 * self.r0 ** 2) * (s + self.r0 ** 2).reciprocal()

    # -- charts ---------------------------------------------------------------

    def chart_valid(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        if chart not in (0, 1):
            raise ParameterError("sphere charts are 0 and 1")
        return np.linalg.norm(x, axis=-1) <= _VALID_FACTOR * self.r0

    def switch_mask(self, x, charts):
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x, axis=-1) > _SWITCH_FACTOR * self.r0

    def transition(self, x):
        """Antipodal chart gluing map (an involution)."""
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1, keepdims=True)
        return self.r0 ** 2 * x / s

    def transition_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        eye = np.eye(self.n)
        return self.r0 ** 2 * (
            eye / s[..., None, None]
            - 2.0 * np.einsum("...i,...j->...ij", x, x) / (s * s)[..., None, None]
        )

    def transition_hessian(self, x):
        """d^2 phi^i / dx^j dx^k, indexed (..., i, j, k)."""
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        eye = np.eye(self.n)
        s2 = (s * s)[..., None, None, None]
        s3 = (s * s * s)[..., None, None, None]
        term = (
            np.einsum("ij,...k->...ijk", eye, x)
            + np.einsum("ik,...j->...ijk", eye, x)
            + np.einsum("jk,...i->...ijk", eye, x)
        )
        outer3 = np.einsum("...i,...j,...k->...ijk", x, x, x)
        return self.r0 ** 2 * (-2.0 * term / s2 + 8.0 * outer3 / s3)

    def apply_transition(self, x, v=None, rows=None):
        """Transforms x, optionally tangents v and variational rows
        (pairs dx, dv stacked as (..., m, 2n))."""
        x = np.asarray(x, dtype=float)
        xn = self.transition(x)
        out = [xn]
        if v is not None or rows is not None:
            J = self.transition_jacobian(x)
        if v is not None:
            v = np.asarray(v, dtype=float)
            vn = np.einsum("...ij,...j->...i", J, v)
            out.append(vn)
        if rows is not None:
            H = self.transition_hessian(x)
            dx = rows[..., : self.n]
            dv = rows[..., self.n:]
            dxn = np.einsum("...ij,...mj->...mi", J, dx)
            dvn = np.einsum("...ij,...mj->...mi", J, dv) + np.einsum(
                "...ijk,...mj,...k->...mi", H, dx, np.asarray(v, dtype=float)
            )
            out.append(np.concatenate([dxn, dvn], axis=-1))
        return out[0] if len(out) == 1 else tuple(out)

    # -- embedding helpers -----------------------------------------------------

    def embed(self, x, chart=0):
        """Chart coordinates -> point on the sphere of radius r0 in R^(n+1).
        chart may be a scalar or an integer array broadcast against x."""
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1, keepdims=True)
        head = 2.0 * self.r0 ** 2 * x / (self.r0 ** 2 + s)
        last = self.r0 * (s - self.r0 ** 2) / (s + self.r0 ** 2)
        sign = 1.0 - 2.0 * np.asarray(chart, dtype=float)
        last = np.broadcast_to(sign, last[..., 0].shape)[..., None] * last
        return np.concatenate([head, last], axis=-1)

    def embed_jacobian(self, x, chart=0):
        """d embed / dx, shape (..., n+1, n)."""
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        d = s + self.r0 ** 2
        eye = np.eye(self.n)
        head = 2.0 * self.r0 ** 2 * (
            eye / d[..., None, None]
            - 2.0 * np.einsum("...i,...j->...ij", x, x) / (d * d)[..., None, None]
        )
        sign = np.broadcast_to(1.0 - 2.0 * np.asarray(chart, dtype=float), s.shape)
        last = sign[..., None] * 4.0 * self.r0 ** 3 * x / (d * d)[..., None]
        return np.concatenate([head, last[..., None, :]], axis=-2)

    def from_embedding(self, xi):
        """Embedded point -> (chart coords, chart id), choosing the chart
        where the representation is small."""
        xi = np.asarray(xi, dtype=float)
        head, last = xi[..., :-1], xi[..., -1]
        chart = (last > 0).astype(int)
        denom = np.where(chart == 1, self.r0 + last, self.r0 - last)
        coords = self.r0 * head / denom[..., None]
        return coords, chart

    def injectivity_bound(self):
        return math.pi * self.r0 - 1e-3

    def search_radius(self):
        return math.pi * self.r0 * (1.0 + 1e-6) + 1e-3

    def closed_distance(self, p, q, chart_p=0, chart_q=0):
        ep = self.embed(p, chart_p)
        eq = self.embed(q, chart_q)
        c = np.clip(np.sum(ep * eq, axis=-1) / self.r0 ** 2, -1.0, 1.0)
        return self.r0 * np.arccos(c)

    def default_centers(self, count: int = 8):
        # last embedded coordinate is kept below 0.75 so every center has a
        # well-conditioned chart-0 representation
        if self.n == 2:
            i = np.arange(count) + 0.5
            z = -1.0 + 1.75 * i / count
            ang = np.pi * (1.0 + math.sqrt(5.0)) * i
            r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            g = np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=-1)
        else:
            g = fibonacci_sphere_points(self.n, count)
            g[g[..., -1] > 0.75, -1] *= -1.0
            g /= np.linalg.norm(g, axis=-1, keepdims=True)
        return self._chart0_coords(g)

    def random_points(self, seed, label, count):
        idx = np.arange(count)
        g = np.stack(
            [normals(seed, label, idx, slot=j) for j in range(self.n + 1)], axis=-1
        )
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        g[g[..., -1] > 0.75, -1] *= -1.0
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        return self._chart0_coords(g)

    def _chart0_coords(self, unit_vectors):
        coords, chart = self.from_embedding(self.r0 * unit_vectors)
        sel = chart == 1
        if np.any(sel):
            coords[sel] = self.transition(coords[sel])
        return coords

    def config(self):
        return {"family": self.family, "n": self.n, "r0": self.r0}


class PoincareBall(_ConformalRiemannian):
    """Poincare ball model of hyperbolic space with curvature -k^2; the
    chart is the open unit ball with g = (2 / (k (1 - |x|^2)))^2 |dx|^2."""

    family = "poincare_ball"

    def __init__(self, n: int = 2, k: float = 1.0):
        if n < 2:
            raise ParameterError("hyperbolic model needs n >= 2")
        if k <= 0:
            raise ParameterError("k must be positive (curvature is -k^2)")
        self.n = int(n)
        self.k = float(k)
        self.constant_flag_curvature = -self.k ** 2

    def _phi(self, s, chart: int = 0):
        return 2.0 / (self.k * (1.0 - s))

    def _grad_log_phi(self, x, s, chart: int = 0):
        return 2.0 * x / (1.0 - s)[..., None]

    def _hess_log_phi(self, x, s, chart: int = 0):
        d = 1.0 - s
        eye = np.eye(self.n)
        return 2.0 * eye / d[..., None, None] + 4.0 * np.einsum(
            "...i,...j->...ij", x, x
        ) / (d * d)[..., None, None]

    def _phi_jet(self, xv, chart: int = 0):
        s = xv[0] * xv[0]
        for xi in xv[1:]:
            s = s + xi * xi
        return (2.0 / self.k) * (1.0 - s).reciprocal()

    def chart_valid(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        return np.sum(x * x, axis=-1) < 1.0

    def default_centers(self, count: int = 8):
        ang = 2 * np.pi * np.arange(count) / count
        pts = np.zeros((count, self.n))
        pts[:, 0] = 0.45 * np.cos(ang)
        pts[:, 1 % self.n] = 0.45 * np.sin(ang)
        pts[0] = 0.0
        return pts

    def random_points(self, seed, label, count):
        idx = np.arange(count)
        cols = [2.0 * uniforms(seed, label, idx, slot=j) - 1.0 for j in range(self.n)]
        pts = np.stack(cols, axis=-1)
        return 0.55 * pts

    def closed_distance(self, p, q, chart_p=0, chart_q=0):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        pq = np.sum((p - q) ** 2, axis=-1)
        den = (1.0 - np.sum(p * p, axis=-1)) * (1.0 - np.sum(q * q, axis=-1))
        return np.arccosh(1.0 + 2.0 * pq / den) / self.k

    def config(self):
        return {"family": self.family, "n": self.n, "k": self.k}


# ---------------------------------------------------------------------------
# Randers perturbation of the sphere


class RandersPerturbed(MetricModel):
    """Randers metric on the round sphere: F = alpha + eps * dh.

    alpha is the round metric of radius r0 and h is the height function of
    the embedding, so b = eps * dh is a globally defined one-form with
    sup |b|_alpha = eps < 1 exactly.  Non-Berwald for eps > 0, compact,
    irreversible; the conservative injectivity cap defaults to half the
    sphere bound.
    """

    family = "randers_perturbed"
    n_charts = 2
    reversible = False
    compact = True

    def __init__(self, n: int = 2, r0: float = 1.0, eps: float = 0.1,
                 injectivity_cap: Optional[float] = None):
        if n < 2:
            raise ParameterError("sphere base needs n >= 2")
        if not 0.0 <= eps < 1.0:
            raise ParameterError("eps must lie in [0, 1)")
        self.n = int(n)
        self.r0 = float(r0)
        self.eps = float(eps)
        self._sphere = RoundSphere(n, r0)
        self._cap = injectivity_cap

    # b_i(x) = sign_c * eps * 4 r0^3 x_i / (|x|^2 + r0^2)^2
    def one_form(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1, keepdims=True)
        sign = 1.0 if chart == 0 else -1.0
        return sign * self.eps * 4.0 * self.r0 ** 3 * x / (s + self.r0 ** 2) ** 2

    def one_form_grad(self, x, chart: int = 0):
        """dB_{kl} = d b_l / d x^k."""
        x = np.asarray(x, dtype=float)
        s = np.sum(x * x, axis=-1)
        sign = 1.0 if chart == 0 else -1.0
        d = s + self.r0 ** 2
        eye = np.eye(self.n)
        return sign * self.eps * 4.0 * self.r0 ** 3 * (
            eye / (d * d)[..., None, None]
            - 4.0 * np.einsum("...k,...l->...kl", x, x) / (d ** 3)[..., None, None]
        )

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        alpha = self._sphere.metric(x, y, chart=0)
        return alpha + np.sum(self.one_form(x, chart) * y, axis=-1)

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        self._check_direction(y)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        xv, yv = xy[: self.n], xy[self.n:]
        s = xv[0] * xv[0]
        for xi in xv[1:]:
            s = s + xi * xi
        phi = (2.0 * self.r0 ** 2) * (s + self.r0 ** 2).reciprocal()
        y2 = yv[0] * yv[0]
        for yi in yv[1:]:
            y2 = y2 + yi * yi
        sign = 1.0 if chart == 0 else -1.0
        denom = (s + self.r0 ** 2) * (s + self.r0 ** 2)
        scale = denom.reciprocal() * (sign * self.eps * 4.0 * self.r0 ** 3)
        beta = xv[0] * yv[0]
        for i in range(1, self.n):
            beta = beta + xv[i] * yv[i]
        f = phi * y2.sqrt() + scale * beta
        return f * f

    def spray(self, x, v, chart: int = 0):
        """Closed-form Randers spray over the conformal base (cross-checked
        against the jet route in the tests)."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        s = np.sum(x * x, axis=-1)
        phi = self._sphere._phi(s)
        gphi = self._sphere._grad_log_phi(x, s) * phi[..., None]  # grad phi
        b = self.one_form(x, chart)
        dB = self.one_form_grad(x, chart)  # (..., k, l) = d b_l / d x^k

        vnorm = np.linalg.norm(v, axis=-1)
        alpha = phi * vnorm
        beta = np.sum(b * v, axis=-1)
        F = alpha + beta
        Fy = (phi ** 2)[..., None] * v / alpha[..., None] + b
        # F_{x^k} = (phi_k / phi) alpha + (dB v)_k
        Fx = gphi / phi[..., None] * alpha[..., None] + np.einsum(
            "...kl,...l->...k", dB, v
        )
        # M_{kl} = d^2 F / dx^k dy^l
        M = (
            np.einsum("...k,...l->...kl", gphi * phi[..., None], v)
            / alpha[..., None, None]
            + dB
        )
        yFx = np.sum(v * Fx, axis=-1)
        yM = np.einsum("...k,...kl->...l", v, M)
        # H_l = y^k [F^2]_{x^k y^l} - [F^2]_{x^l}
        f2xy = 2.0 * (Fy * yFx[..., None] + F[..., None] * yM)
        f2x = 2.0 * F[..., None] * Fx
        H = f2xy - f2x

        g = self.fundamental_closed_form(x, v, chart)
        sol = np.linalg.solve(g, H[..., None])[..., 0]
        return 0.25 * sol

    def fundamental_closed_form(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        s = np.sum(x * x, axis=-1)
        phi = self._sphere._phi(s)
        b = self.one_form(x, chart)
        vnorm = np.linalg.norm(v, axis=-1)
        alpha = phi * vnorm
        F = alpha + np.sum(b * v, axis=-1)
        Fy = (phi ** 2)[..., None] * v / alpha[..., None] + b
        eye = np.eye(self.n)
        Fyy = (phi ** 2)[..., None, None] * (
            eye / alpha[..., None, None]
            - (phi ** 2)[..., None, None]
            * np.einsum("...i,...j->...ij", v, v)
            / (alpha ** 3)[..., None, None]
        )
        return np.einsum("...i,...j->...ij", Fy, Fy) + F[..., None, None] * Fyy

    def spray_jac(self, x, v, chart: int = 0):
        # central differences of the closed-form spray; plenty for shooting
        # Jacobians and Jacobi-field propagation at the tested tolerances
        return _fd_spray_jac(self, x, v, chart)

    # chart atlas is the sphere's
    def chart_valid(self, x, chart: int = 0):
        return self._sphere.chart_valid(x, chart)

    def switch_mask(self, x, charts):
        return self._sphere.switch_mask(x, charts)

    def apply_transition(self, x, v=None, rows=None):
        return self._sphere.apply_transition(x, v=v, rows=rows)

    def transition(self, x):
        return self._sphere.transition(x)

    def embed(self, x, chart=0):
        return self._sphere.embed(x, chart)

    def embed_jacobian(self, x, chart=0):
        return self._sphere.embed_jacobian(x, chart)

    def from_embedding(self, xi):
        return self._sphere.from_embedding(xi)

    def injectivity_bound(self):
        if self._cap is not None:
            return self._cap
        return 0.5 * self._sphere.injectivity_bound()

    def search_radius(self):
        # forward distances stretch by at most 1/(1 - eps) relative to alpha
        return math.pi * self.r0 / max(1.0 - self.eps, 1e-6) + 1e-3

    def default_centers(self, count: int = 8):
        return self._sphere.default_centers(count)

    def random_points(self, seed, label, count):
        return self._sphere.random_points(seed, label, count)

    def config(self):
        return {"family": self.family, "n": self.n, "r0": self.r0, "eps": self.eps}


# ---------------------------------------------------------------------------
# Berwald product


class BerwaldProduct(MetricModel):
    """Product metric F = sqrt(F_1^2 + F_2^2) of factor models.

    With a Riemannian factor and a locally Minkowski factor this is the
    classic Berwald, non-Riemannian, non-locally-Minkowski example.  Product
    Finsler metrics are smooth only where every factor velocity block is
    nonzero, and the gluing of multi-chart factors is not implemented, so
    the product restricts itself to chart 0 of each factor.
    """

    family = "berwald_product"

    def __init__(self, factors: Sequence[MetricModel]):
        if len(factors) < 2:
            raise ParameterError("product needs at least two factors")
        self.factors = list(factors)
        self.n = sum(f.n for f in self.factors)
        self.slices = []
        off = 0
        for f in self.factors:
            self.slices.append(slice(off, off + f.n))
            off += f.n
        self.reversible = all(f.reversible for f in self.factors)
        self.riemannian = all(f.riemannian for f in self.factors)
        self.locally_minkowski = all(f.locally_minkowski for f in self.factors)

    def metric(self, x, y, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        acc = 0.0
        for f, sl in zip(self.factors, self.slices):
            acc = acc + f.metric(x[..., sl], y[..., sl], chart=0) ** 2
        return np.sqrt(acc)

    def f2_jet(self, x, y, order, chart: int = 0):
        x, y = _as_xy(x, y, self.n)
        self._check_direction(y)
        space = jets.jet_space(2 * self.n, order)
        xy = variables_xy(space, x, y)
        acc = None
        for f, sl in zip(self.factors, self.slices):
            term = _factor_f2(f, xy[: self.n][sl], xy[self.n:][sl])
            acc = term if acc is None else acc + term
        return acc

    def _check_direction(self, y):
        y = np.asarray(y, dtype=float)
        for sl in self.slices:
            if np.any(np.linalg.norm(y[..., sl], axis=-1) < 1e-12):
                raise DegenerateDirectionError(
                    "product metrics are smooth only for nonzero factor blocks"
                )

    def spray(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        for f, sl in zip(self.factors, self.slices):
            out[..., sl] = f.spray(x[..., sl], v[..., sl], chart=0)
        return out

    def spray_jac(self, x, v, chart: int = 0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        G = np.zeros_like(v)
        Gx = np.zeros(v.shape[:-1] + (self.n, self.n))
        Gv = np.zeros_like(Gx)
        for f, sl in zip(self.factors, self.slices):
            g, gx, gv = f.spray_jac(x[..., sl], v[..., sl], chart=0)
            G[..., sl] = g
            Gx[..., sl, sl] = gx
            Gv[..., sl, sl] = gv
        return G, Gx, Gv

    def chart_valid(self, x, chart: int = 0):
        x = np.asarray(x, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        for f, sl in zip(self.factors, self.slices):
            sub = x[..., sl]
            if f.n_charts > 1:
                ok &= np.linalg.norm(sub, axis=-1) <= _SWITCH_FACTOR * getattr(f, "r0", 1.0)
            else:
                ok &= f.chart_valid(sub, 0)
        return ok

    def default_centers(self, count: int = 8):
        pts = np.zeros((count, self.n))
        for f, sl in zip(self.factors, self.slices):
            pts[:, sl] = f.default_centers(count) * 0.4
        return pts

    def random_points(self, seed, label, count):
        pts = np.zeros((count, self.n))
        for j, (f, sl) in enumerate(zip(self.factors, self.slices)):
            pts[:, sl] = 0.4 * f.random_points(seed, f"{label}/f{j}", count)
        return pts

    def ricci_closed(self, x, y, chart: int = 0):
        # The curvature operator block-splits along the factors, so the
        # unnormalized traces add; each factor trace is its normalized Ricci
        # times F_f^2.  Available only when every factor has a closed form.
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self._check_direction(y)
        acc = 0.0
        for f, sl in zip(self.factors, self.slices):
            xf, yf = x[..., sl], y[..., sl]
            ric_f = f.ricci_closed(xf, yf, chart=0)
            if ric_f is None:
                return None
            acc = acc + ric_f * f.metric(xf, yf, chart=0) ** 2
        return acc / self.metric(x, y, chart) ** 2

    def metric_matrix(self, x, chart: int = 0):
        # g block-splits exactly when every factor is direction-independent.
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.n, self.n))
        for f, sl in zip(self.factors, self.slices):
            block = f.metric_matrix(x[..., sl], chart=0)
            if block is None:
                return None
            out[..., sl, sl] = block
        return out

    def config(self):
        return {"family": self.family, "factors": [f.config() for f in self.factors]}


def _fd_spray_jac(model: MetricModel, x, v, chart: int = 0):
    """(G, dG/dx, dG/dv) by central differences of a closed-form spray."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n = model.n
    G = model.spray(x, v, chart)
    hx = 1e-6 * (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))
    hv = 1e-6 * (1.0 + np.linalg.norm(v, axis=-1, keepdims=True))
    Gx = np.empty(G.shape[:-1] + (n, n))
    Gv = np.empty_like(Gx)
    eye = np.eye(n)
    for k in range(n):
        dx = hx * eye[k]
        dv = hv * eye[k]
        Gx[..., :, k] = (model.spray(x + dx, v, chart) - model.spray(x - dx, v, chart)) / (2.0 * hx)
        Gv[..., :, k] = (model.spray(x, v + dv, chart) - model.spray(x, v - dv, chart)) / (2.0 * hv)
    return G, Gx, Gv


def _factor_f2(factor: MetricModel, xv, yv) -> jets.Jet:
    """Evaluate a factor's F^2 on jet variable slices of the product space."""
    if isinstance(factor, Euclidean):
        acc = yv[0] * yv[0]
        for yi in yv[1:]:
            acc = acc + yi * yi
        return acc
    if isinstance(factor, RandersFlat):
        y2 = yv[0] * yv[0]
        for yi in yv[1:]:
            y2 = y2 + yi * yi
        beta = yv[0] * float(factor.b[0])
        for i in range(1, factor.n):
            beta = beta + yv[i] * float(factor.b[i])
        f = y2.sqrt() + beta
        return f * f
    if isinstance(factor, _ConformalRiemannian):
        phi = factor._phi_jet(list(xv), 0)
        y2 = yv[0] * yv[0]
        for yi in yv[1:]:
            y2 = y2 + yi * yi
        return (phi * phi) * y2
    if isinstance(factor, FlatRiemannian):
        acc = None
        for i in range(factor.n):
            for j in range(factor.n):
                m = float(factor.matrix[i, j])
                if m == 0.0:
                    continue
                term = (yv[i] * yv[j]) * m
                acc = term if acc is None else acc + term
        return acc
    raise ParameterError(f"unsupported product factor {factor.family}")


# ---------------------------------------------------------------------------
# registry / helpers


def variables_xy(space: jets.JetSpace, x: np.ndarray, y: np.ndarray) -> list[jets.Jet]:
    vals = np.concatenate(
        [np.asarray(x, dtype=float), np.asarray(y, dtype=float)], axis=-1
    )
    return jets.variables(space, vals)


def fibonacci_sphere_points(n: int, count: int) -> np.ndarray:
    """Well-spread unit vectors in R^(n+1); n = 2 uses the Fibonacci lattice,
    higher n falls back to a deterministic low-discrepancy scramble."""
    if n == 2:
        i = np.arange(count) + 0.5
        z = 1.0 - 2.0 * i / count
        phi = np.pi * (1.0 + math.sqrt(5.0)) * i
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    g = np.stack(
        [normals(0, f"fib{n}", np.arange(count), slot=j) for j in range(n + 1)],
        axis=-1,
    )
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


_FAMILIES = {
    "euclidean": Euclidean,
    "round_sphere": RoundSphere,
    "poincare_ball": PoincareBall,
    "randers_flat": RandersFlat,
    "randers_perturbed": RandersPerturbed,
    "berwald_product": BerwaldProduct,
    "reversible_quartic": ReversibleQuartic,
    "flat_riemannian": FlatRiemannian,
}


def model_from_config(cfg: dict) -> MetricModel:
    """Build a model from a JSON-style config dict, e.g.
    {"family": "round_sphere", "n": 2, "r0": 1.0}."""
    if not isinstance(cfg, dict) or "family" not in cfg:
        raise ParameterError("model config must be a dict with a 'family' key")
    cfg = dict(cfg)
    family = cfg.pop("family")
    cls = _FAMILIES.get(family)
    if cls is None:
        raise ParameterError(
            f"unknown family {family!r}; known: {sorted(_FAMILIES)}"
        )
    if family == "berwald_product":
        factors = [model_from_config(f) for f in cfg.pop("factors", [])]
        return BerwaldProduct(factors)
    try:
        return cls(**cfg)
    except TypeError as exc:
        raise ParameterError(f"bad parameters for {family}: {exc}") from exc
