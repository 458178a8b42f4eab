"""Pointwise metric quantities: F, derivative jets of F^2, the fundamental
and Cartan tensors, the uniformity constant, and the indicatrix-averaged
metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import curvature, indicatrix, jets
from .errors import ParameterError, QuadratureError
from .models import MetricModel, TangentSample, variables_xy

_MAX_ORDER_Y = 3
_MAX_ORDER_X = 2


def eval_metric(model: MetricModel, s: TangentSample) -> float:
    """F(x, y) for a validated tangent sample."""
    model.validate_sample(s)
    return float(model.metric(s.x, s.y, chart=s.chart))


class MetricJet:
    """All partial derivatives of F^2 at one tangent sample, up to a per-group
    order cap (order_y in the fiber variables, order_x in the base variables).

    Variables are ordered (x_1..x_n, y_1..y_n); ``partial`` takes the two
    multi-indices separately.
    """

    def __init__(self, model: MetricModel, x, y, order_y: int = 2,
                 order_x: int = 0, chart: int = 0):
        if not 0 <= order_y <= _MAX_ORDER_Y:
            raise ParameterError(f"order_y must lie in [0, {_MAX_ORDER_Y}]")
        if not 0 <= order_x <= _MAX_ORDER_X:
            raise ParameterError(f"order_x must lie in [0, {_MAX_ORDER_X}]")
        self.model = model
        self.n = model.n
        self.order_y = order_y
        self.order_x = order_x
        self.jet = model.f2_jet(x, y, order_x + order_y, chart)

    @property
    def value(self):
        return self.jet.value

    def partial(self, alpha_x=(), alpha_y=()):
        """Mixed partial d^|ax|+|ay| F^2 / dx^ax dy^ay."""
        n = self.n
        ax = np.zeros(n, dtype=int)
        ay = np.zeros(n, dtype=int)
        for i in alpha_x:
            ax[i] += 1
        for i in alpha_y:
            ay[i] += 1
        if ax.sum() > self.order_x:
            raise ParameterError(
                f"requested {ax.sum()} base derivatives, jet holds {self.order_x}"
            )
        if ay.sum() > self.order_y:
            raise ParameterError(
                f"requested {ay.sum()} fiber derivatives, jet holds {self.order_y}"
            )
        return self.jet.partial(np.concatenate([ax, ay]))


def metric_jet(model: MetricModel, s: TangentSample, order_y: int = 2,
               order_x: int = 0) -> MetricJet:
    model.validate_sample(s)
    return MetricJet(model, s.x, s.y, order_y=order_y, order_x=order_x,
                     chart=s.chart)


@dataclass
class TensorAtPoint:
    """Fundamental tensor, Cartan tensor, and metric inverse at a sample."""

    g: np.ndarray
    A: np.ndarray
    g_inverse: np.ndarray
    sample: TangentSample

    def check(self, tol: float = 1e-10) -> None:
        eye = np.eye(self.g.shape[-1])
        if np.max(np.abs(self.g @ self.g_inverse - eye)) > tol:
            raise ParameterError("metric inverse drifted past tolerance")


def fundamental_tensor(model: MetricModel, s: TangentSample) -> TensorAtPoint:
    model.validate_sample(s)
    g = curvature.fundamental_matrix(model, s.x, s.y, s.chart)
    A = curvature.cartan_array(model, s.x, s.y, s.chart)
    ginv = np.linalg.inv(g)
    out = TensorAtPoint(g=g, A=A, g_inverse=ginv, sample=s)
    out.check()
    return out


def cartan_tensor(model: MetricModel, s: TangentSample) -> np.ndarray:
    model.validate_sample(s)
    return curvature.cartan_array(model, s.x, s.y, s.chart)


# -- uniformity constant -------------------------------------------------------


@dataclass
class UniformityEstimate:
    """Sampled lower bound for the supremum metric-ratio constant.

    value is the best polished estimate; raw is the best pure-grid value;
    history records (directions per indicatrix, raw, polished) per stage.
    """

    value: float
    raw: float
    history: list = field(default_factory=list)

    def __float__(self):
        return self.value


def _ratio_closure(model, x, chart, n):
    def ratio(angles):
        a = np.asarray(angles, dtype=float)
        X = curvature.angles_to_unit(a[: n - 1], n)
        Y = curvature.angles_to_unit(a[n - 1: 2 * (n - 1)], n)
        Z = curvature.angles_to_unit(a[2 * (n - 1):], n)
        gX = curvature.fundamental_matrix(model, x, X, chart)
        gZ = curvature.fundamental_matrix(model, x, Z, chart)
        num = Y @ gX @ Y
        den = Y @ gZ @ Y
        return num / den

    return ratio


def _uniformity_stage(model, points, charts, m_dirs):
    """Grid stage: for each chart point, evaluate Q[a, b] = g_{u_a}(u_b, u_b)
    over one direction grid and reduce to max_a / min_a per b."""
    n = model.n
    best_raw = 1.0
    candidates = []
    for x, chart in zip(points, charts):
        x = np.asarray(x, dtype=float)
        if getattr(model, "metric_matrix", lambda *_: None)(x, chart) is not None:
            # direction-independent g: every ratio in the scan is exactly 1
            continue
        u = curvature.direction_grid(n, m_dirs if n == 2 else m_dirs * m_dirs)
        xs = np.broadcast_to(x, u.shape)
        g = curvature.fundamental_matrix(model, xs, u, chart)
        # metric ratios are scale invariant in every slot, so Euclidean unit
        # directions sample the same ratio set as indicatrix points.  Writing
        # Q^T[b, a] = <uu_b, g_a> turns the scan into one GEMM with
        # row-contiguous reductions.
        uu = np.einsum("bi,bj->bij", u, u).reshape(u.shape[0], n * n)
        Qt = uu @ g.reshape(u.shape[0], n * n).T
        hi = np.argmax(Qt, axis=1)
        lo = np.argmin(Qt, axis=1)
        rows = np.arange(Qt.shape[0])
        ratios = Qt[rows, hi] / Qt[rows, lo]
        order = np.argsort(ratios)[::-1]
        keep = max(1, min(16, int(math.ceil(0.01 * ratios.size))))
        for b in order[:keep]:
            candidates.append((float(ratios[b]), x, chart,
                               u[hi[b]], u[b], u[lo[b]]))
        best_raw = max(best_raw, float(ratios[order[0]]))
    return best_raw, candidates


def uniformity_constant(model: MetricModel, region=None,
                        sample_budget: int = 4096) -> UniformityEstimate:
    """Estimate sup over the region of g_X(Y,Y)/g_Z(Y,Y) with X, Y, Z running
    over directions at a common base point.

    Dense direction grids give a raw lower bound; the top grid triples are
    polished with Nelder-Mead in angle coordinates.  Two stages (half budget,
    full budget) are recorded so stabilization under budget growth is visible.
    """
    n = model.n
    if sample_budget < 64:
        raise ParameterError("sample_budget must be at least 64")
    if region is None:
        points = model.default_centers(4)
        charts = [0] * len(points)
    else:
        points = np.atleast_2d(np.asarray(region, dtype=float))
        charts = [0] * len(points)
    est = UniformityEstimate(value=1.0, raw=1.0)
    for stage_budget in (sample_budget // 2, sample_budget):
        m_dirs = max(24, int(round(math.sqrt(stage_budget))))
        raw, candidates = _uniformity_stage(model, points, charts, m_dirs)
        polished = raw
        for ratio0, x, chart, X0, Y0, Z0 in candidates:
            fn = _ratio_closure(model, np.asarray(x, dtype=float), chart, n)
            a0 = np.concatenate([
                curvature.unit_to_angles(X0),
                curvature.unit_to_angles(Y0),
                curvature.unit_to_angles(Z0),
            ])
            res = optimize.minimize(
                lambda a: -fn(a), a0, method="Nelder-Mead",
                options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 400},
            )
            polished = max(polished, float(-res.fun))
        est.history.append((m_dirs, raw, polished))
        est.raw = max(est.raw, raw)
        est.value = max(est.value, polished)
    return est


# -- averaged metric -----------------------------------------------------------


@dataclass
class QuadratureSpec:
    """Indicatrix quadrature request: Gauss-Legendre nodes per angle plus the
    refinement convergence tolerance (relative, checked against a grid with
    1.5x nodes)."""

    nodes: int | None = None
    tolerance: float = 1e-6

    def resolve(self, n: int) -> int:
        return indicatrix.default_nodes(n) if self.nodes is None else int(self.nodes)


def _average_metric_once(model, x, nodes, chart):
    thetas, w = indicatrix.angle_grid(model.n, nodes)
    y, _, _ = indicatrix.indicatrix_points(model, x, thetas, chart=chart)
    xs = np.broadcast_to(np.asarray(x, dtype=float), y.shape)
    g = curvature.fundamental_matrix(model, xs, y, chart)
    dens = indicatrix.measure_weights(model, x, thetas, chart=chart)
    wt = (dens * w)[:, None, None]
    total = float(np.sum(dens * w))
    return (g * wt).sum(axis=0) / total


def average_metric(model: MetricModel, x, spec: QuadratureSpec | int | None = None,
                   chart: int = 0) -> np.ndarray:
    """Indicatrix average of the fundamental tensor at x against the induced
    measure, with a built-in refinement convergence check."""
    if spec is None:
        spec = QuadratureSpec()
    elif isinstance(spec, int):
        spec = QuadratureSpec(nodes=spec)
    nodes = spec.resolve(model.n)
    coarse = _average_metric_once(model, x, nodes, chart)
    fine = _average_metric_once(model, x, int(math.ceil(1.5 * nodes)), chart)
    scale = 1.0 + float(np.max(np.abs(fine)))
    drift = float(np.max(np.abs(fine - coarse))) / scale
    if drift > spec.tolerance:
        raise QuadratureError(
            f"averaged metric moved by {drift:.3e} under refinement "
            f"(tolerance {spec.tolerance:.1e}); raise the node count"
        )
    return fine
