"""Geodesic flow and everything built on it: adaptive integration with chart
switching, batched fixed-step integration with variational rows, forward
distances by shooting, the exponential map, forward-ball sampling, parallel
frames, and the second-variation index form.

The geodesic ODE is the first-order system xdot = v, vdot = -2 G(x, v) with G
the spray of the model.  Parallel transport along a geodesic uses the fact
that the transport operator contracted with the velocity reduces to the
fiber derivative of the spray: Edot^i = -(dG^i/dv^k) E^k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import curvature, indicatrix, streams
from .errors import (ChartDomainError, IntegrationError, ParameterError,
                     RadiusError, ShootingError)
from .models import MetricModel, TangentSample, fibonacci_sphere_points

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4

# Fixed-step targets: chart-arc per RK4 step, and the floor on step counts.
_H_TARGET = 0.0125
_MIN_STEPS = 16
_MIN_STEPS_FLAT = 8


def _hermite(t, t0, t1, p0, d0, p1, d1):
    """Cubic Hermite interpolation of p on [t0, t1] with end derivatives d."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * p0 + h10 * h * d0 + h01 * p1 + h11 * h * d1


@dataclass
class GeodesicPath:
    """Adaptive integrator output: accepted-step nodes plus cubic Hermite
    dense output.  Node states are post chart switch; per-segment end states
    are kept pre-switch so each segment interpolates within one chart."""

    model: MetricModel
    tol: float
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    chart: np.ndarray
    seg_x1: np.ndarray
    seg_v1: np.ndarray
    seg_a0: np.ndarray
    seg_a1: np.ndarray
    initial: TangentSample

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def speed(self) -> float:
        """F(x0, v0); constant along the path up to integrator drift."""
        return float(self.model.metric(self.x[0], self.v[0], chart=int(self.chart[0])))

    @property
    def length(self) -> float:
        return self.speed * self.duration

    def node_speeds(self) -> np.ndarray:
        out = np.empty(len(self.t))
        for c in np.unique(self.chart):
            m = self.chart == c
            out[m] = self.model.metric(self.x[m], self.v[m], chart=int(c))
        return out

    def speed_drift(self) -> float:
        sp = self.node_speeds()
        return float(np.max(np.abs(sp - sp[0])) / sp[0])

    def _segment(self, t: float) -> int:
        if not (self.t[0] - 1e-12 <= t <= self.t[-1] + 1e-12):
            raise ParameterError(f"time {t} outside path range")
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        return min(max(i, 0), len(self.t) - 2)

    def state(self, t: float):
        """Dense-output (x, v, chart) at time t, in the chart of the segment
        containing t."""
        i = self._segment(t)
        t0, t1 = self.t[i], self.t[i + 1]
        x = _hermite(t, t0, t1, self.x[i], self.v[i], self.seg_x1[i], self.seg_v1[i])
        v = _hermite(t, t0, t1, self.v[i], self.seg_a0[i], self.seg_v1[i],
                     self.seg_a1[i])
        return x, v, int(self.chart[i])

    def position(self, t: float) -> np.ndarray:
        return self.state(t)[0]

    def velocity(self, t: float) -> np.ndarray:
        return self.state(t)[1]

    def endpoint(self) -> TangentSample:
        return TangentSample(x=self.x[-1].copy(), y=self.v[-1].copy(),
                             chart=int(self.chart[-1]))


def integrate_geodesic(model: MetricModel, s: TangentSample, T: float,
                       tol: float = 1e-10) -> GeodesicPath:
    """Integrate the geodesic through s for parameter time T with an adaptive
    embedded 5(4) pair (absolute = relative tolerance = tol)."""
    if not 1e-12 <= tol <= 1e-4:
        raise ParameterError("tol must lie in [1e-12, 1e-4]")
    if not T > 0:
        raise ParameterError("T must be positive")
    model.validate_sample(s)
    n = model.n
    x = np.asarray(s.x, dtype=float).copy()
    v = np.asarray(s.y, dtype=float).copy()
    chart = int(s.chart)

    def f(xc, vc, c):
        return vc, -2.0 * model.spray(xc, vc, chart=c)

    ts = [0.0]
    xs = [x.copy()]
    vs = [v.copy()]
    charts = [chart]
    seg_x1, seg_v1, seg_a0, seg_a1 = [], [], [], []

    fx, fv = f(x, v, chart)
    scale0 = max(1.0, float(np.max(np.abs(fv))))
    h = min(T, 0.1 / scale0, T / 8.0 + 1e-30)
    t = 0.0
    max_steps = 200000
    for _ in range(max_steps):
        if t >= T:
            break
        h = min(h, T - t)
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError(f"step size underflow at t={t}")
        kx = [fx]
        kv = [fv]
        bad = False
        for stage in range(1, 7):
            a = _DP_A[stage]
            xi = x + h * sum(a[j] * kx[j] for j in range(stage))
            vi = v + h * sum(a[j] * kv[j] for j in range(stage))
            if not np.all(np.isfinite(xi)) or not model.chart_valid(xi, chart):
                bad = True
                break
            ki = f(xi, vi, chart)
            kx.append(ki[0])
            kv.append(ki[1])
        if bad:
            h *= 0.5
            continue
        x1 = x + h * sum(_DP_B5[j] * kx[j] for j in range(7))
        v1 = v + h * sum(_DP_B5[j] * kv[j] for j in range(7))
        ex = h * sum(_DP_E[j] * kx[j] for j in range(7))
        ev = h * sum(_DP_E[j] * kv[j] for j in range(7))
        sc_x = tol + tol * np.maximum(np.abs(x), np.abs(x1))
        sc_v = tol + tol * np.maximum(np.abs(v), np.abs(v1))
        errnorm = math.sqrt(
            (np.sum((ex / sc_x) ** 2) + np.sum((ev / sc_v) ** 2)) / (2 * n)
        )
        if errnorm > 1.0:
            h *= max(0.2, 0.9 * errnorm ** -0.2)
            continue
        if not model.chart_valid(x1, chart):
            if model.switch_mask(np.asarray([x1]), np.asarray([chart]))[0]:
                pass
            else:
                h *= 0.5
                if h < 1e-14 * max(1.0, abs(t)):
                    raise ChartDomainError(
                        "geodesic left the chart atlas of the model"
                    )
                continue
        # accept
        t += h
        seg_x1.append(x1.copy())
        seg_v1.append(v1.copy())
        seg_a0.append(kv[0].copy())
        seg_a1.append(kv[6].copy())
        switched = False
        if model.n_charts > 1 and model.switch_mask(
            np.asarray([x1]), np.asarray([chart])
        )[0]:
            x1, v1 = model.apply_transition(x1, v1)
            chart = 1 - chart
            switched = True
        x, v = x1, v1
        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
        charts.append(chart)
        if switched:
            fx, fv = f(x, v, chart)
        else:
            fx, fv = kx[6], kv[6]
        h *= min(5.0, max(0.2, 0.9 * errnorm ** -0.2 if errnorm > 0 else 5.0))
    else:
        raise IntegrationError("step budget exhausted")

    path = GeodesicPath(
        model=model, tol=tol, t=np.asarray(ts), x=np.asarray(xs),
        v=np.asarray(vs), chart=np.asarray(charts, dtype=int),
        seg_x1=np.asarray(seg_x1), seg_v1=np.asarray(seg_v1),
        seg_a0=np.asarray(seg_a0), seg_a1=np.asarray(seg_a1), initial=s,
    )
    if tol <= 1e-8 and path.speed_drift() > 1e-7:
        raise IntegrationError(
            f"speed drift {path.speed_drift():.2e} exceeds the constant-speed "
            "invariant"
        )
    return path


def exp_map(model: MetricModel, s: TangentSample, T: float = 1.0,
            tol: float = 1e-10) -> TangentSample:
    """Endpoint of the geodesic through s after parameter time T."""
    return integrate_geodesic(model, s, T, tol=tol).endpoint()


# -- batched fixed-step integration ---------------------------------------------


def _spray_mixed(model, x, v, charts):
    if model.n_charts == 1 or np.all(charts == charts[0]):
        c = 0 if model.n_charts == 1 else int(charts[0])
        return model.spray(x, v, chart=c)
    out = np.empty_like(v)
    for c in (0, 1):
        m = charts == c
        if np.any(m):
            out[m] = model.spray(x[m], v[m], chart=c)
    return out


def _spray_jac_mixed(model, x, v, charts):
    if model.n_charts == 1 or np.all(charts == charts[0]):
        c = 0 if model.n_charts == 1 else int(charts[0])
        return model.spray_jac(x, v, chart=c)
    n = model.n
    G = np.empty_like(v)
    Gx = np.empty(v.shape + (n,))
    Gv = np.empty(v.shape + (n,))
    for c in (0, 1):
        m = charts == c
        if np.any(m):
            G[m], Gx[m], Gv[m] = model.spray_jac(x[m], v[m], chart=c)
    return G, Gx, Gv


def _rhs_with_rows(model, x, v, rows, charts):
    """Time derivative of (x, v) and of variational rows (dx, dv)."""
    n = model.n
    G, Gx, Gv = _spray_jac_mixed(model, x, v, charts)
    dx = rows[..., :n]
    dv = rows[..., n:]
    ddx = dv
    ddv = -2.0 * (
        np.einsum("bik,bmk->bmi", Gx, dx) + np.einsum("bik,bmk->bmi", Gv, dv)
    )
    return v, -2.0 * G, np.concatenate([ddx, ddv], axis=-1)


def step_count(model: MetricModel, arc: float, h_target: float = _H_TARGET) -> int:
    floor = _MIN_STEPS_FLAT if model.locally_minkowski else _MIN_STEPS
    return max(floor, int(math.ceil(arc / h_target)))


def integrate_batch(model: MetricModel, x0, v0, T, charts=None, rows=None,
                    nsteps: int | None = None, h_target: float = _H_TARGET):
    """Fixed-step RK4 for a batch of geodesics, optionally carrying
    variational rows (pairs (dx, dv) of shape (B, m, 2n)) through the
    linearized flow.

    T may be a scalar or per-trajectory array; each trajectory uses the same
    number of steps with its own step size.  Returns (x, v, charts) or
    (x, v, charts, rows).
    """
    x = np.array(x0, dtype=float, copy=True)
    v = np.array(v0, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[None, :]
        v = v[None, :]
    B, n = x.shape
    charts = (np.zeros(B, dtype=int) if charts is None
              else np.array(charts, dtype=int, copy=True) * np.ones(B, dtype=int))
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,))
    with_rows = rows is not None
    if with_rows:
        rows = np.array(rows, dtype=float, copy=True)
    if nsteps is None:
        speed = np.empty(B)
        for c in np.unique(charts):
            m = charts == c
            speed[m] = model.metric(x[m], v[m], chart=int(c))
        nsteps = step_count(model, float(np.max(speed * np.abs(T))), h_target)
    h = (T / nsteps)[:, None]

    for _ in range(nsteps):
        if with_rows:
            kx1, kv1, kr1 = _rhs_with_rows(model, x, v, rows, charts)
            kx2, kv2, kr2 = _rhs_with_rows(
                model, x + 0.5 * h * kx1, v + 0.5 * h * kv1,
                rows + 0.5 * h[..., None] * kr1, charts)
            kx3, kv3, kr3 = _rhs_with_rows(
                model, x + 0.5 * h * kx2, v + 0.5 * h * kv2,
                rows + 0.5 * h[..., None] * kr2, charts)
            kx4, kv4, kr4 = _rhs_with_rows(
                model, x + h * kx3, v + h * kv3,
                rows + h[..., None] * kr3, charts)
            rows = rows + (h[..., None] / 6.0) * (kr1 + 2 * kr2 + 2 * kr3 + kr4)
        else:
            kx1, kv1 = v, -2.0 * _spray_mixed(model, x, v, charts)
            x2, v2 = x + 0.5 * h * kx1, v + 0.5 * h * kv1
            kx2, kv2 = v2, -2.0 * _spray_mixed(model, x2, v2, charts)
            x3, v3 = x + 0.5 * h * kx2, v + 0.5 * h * kv2
            kx3, kv3 = v3, -2.0 * _spray_mixed(model, x3, v3, charts)
            x4, v4 = x + h * kx3, v + h * kv3
            kx4, kv4 = v4, -2.0 * _spray_mixed(model, x4, v4, charts)
        x = x + (h / 6.0) * (kx1 + 2 * kx2 + 2 * kx3 + kx4)
        v = v + (h / 6.0) * (kv1 + 2 * kv2 + 2 * kv3 + kv4)
        if model.n_charts > 1:
            sw = model.switch_mask(x, charts)
            if np.any(sw):
                if with_rows:
                    xs, vs, rs = model.apply_transition(x[sw], v[sw], rows[sw])
                    rows[sw] = rs
                else:
                    xs, vs = model.apply_transition(x[sw], v[sw])
                x[sw] = xs
                v[sw] = vs
                charts[sw] = 1 - charts[sw]
        if model.n_charts == 1:
            ok = model.chart_valid(x, 0)
            if not np.all(ok):
                raise ChartDomainError(
                    f"{int(np.sum(~ok))} trajectories left the chart during "
                    "fixed-step integration"
                )
    if with_rows:
        return x, v, charts, rows
    return x, v, charts


# -- shooting distances -----------------------------------------------------------


def _initial_directions(model: MetricModel, p, chart: int, count: int):
    """Deterministic well-spread starts, scaled onto the indicatrix."""
    n = model.n
    if n == 2:
        th = 2.0 * np.pi * (np.arange(count) + 0.5) / count
        u = np.stack([np.cos(th), np.sin(th)], axis=-1)
    else:
        u = fibonacci_sphere_points(n - 1, count)
    F = model.metric(np.broadcast_to(np.asarray(p, float), u.shape), u, chart=chart)
    return u / F[:, None]


def _angles_jacobian(u: np.ndarray) -> np.ndarray:
    """du/dtheta for the hyperspherical parameterization, batched."""
    th = curvature.unit_to_angles(u)
    return indicatrix.unit_jacobian(th, u.shape[-1]), th


class _Target:
    """Shooting residual in chart coordinates or, for two-chart models, in
    embedding coordinates (uniformly conditioned across charts)."""

    def __init__(self, model, q, chart_q):
        self.model = model
        self.embedded = model.n_charts > 1
        if self.embedded:
            self.q = model.embed(q, chart_q)
        else:
            self.q = np.asarray(q, dtype=float)

    def residual(self, x, charts, sel=None):
        q = self.q if sel is None else self.q[sel]
        if self.embedded:
            return self.model.embed(x, charts) - q
        return x - q

    def push(self, x, charts, J):
        """Compose the endpoint Jacobian with the residual map."""
        if self.embedded:
            E = self.model.embed_jacobian(x, charts)
            return np.einsum("bei,bij->bej", E, J)
        return J


_H_SHOOT = 0.04


def distance_batch(model: MetricModel, P, Q, charts_p=None, charts_q=None,
                   starts: int = 16, residual_tol: float = 1e-8,
                   max_iter: int = 60, directions=None, T0=None,
                   return_details: bool = False, h_target: float = _H_SHOOT):
    """Forward distances d(P_b, Q_b) for a batch of point pairs by damped
    Gauss-Newton shooting over (direction angles, time), multistarted from
    well-spread indicatrix directions.

    When ``directions``/``T0`` provide a warm start, those trajectories are
    solved first and the full multistart runs only for pairs that failed.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    B, n = P.shape
    charts_p = (np.zeros(B, dtype=int) if charts_p is None
                else np.broadcast_to(np.asarray(charts_p, int), (B,)).copy())
    charts_q = (np.zeros(B, dtype=int) if charts_q is None
                else np.broadcast_to(np.asarray(charts_q, int), (B,)).copy())

    best_T = np.full(B, np.inf)
    best_v0 = np.zeros((B, n))
    if directions is not None:
        d0 = np.asarray(directions, dtype=float)
        if d0.ndim == 2:
            d0 = d0[:, None, :]
        t0 = np.asarray(T0, dtype=float)
        if t0.ndim == 1:
            t0 = t0[:, None]
        _shoot_into(model, P, Q, charts_p, charts_q, d0, t0, residual_tol,
                    max_iter, best_T, best_v0, h_target)
    pending = ~np.isfinite(best_T)
    if np.any(pending):
        idx = np.flatnonzero(pending)
        d0 = np.stack([
            _initial_directions(model, P[b], int(charts_p[b]), starts)
            for b in idx
        ])
        t0 = np.broadcast_to(
            _chord_guess(model, P[idx], Q[idx], charts_p[idx], charts_q[idx])[:, None],
            (len(idx), starts),
        )
        sub_T = best_T[idx].copy()
        sub_v0 = best_v0[idx].copy()
        _shoot_into(model, P[idx], Q[idx], charts_p[idx], charts_q[idx],
                    d0, np.array(t0), residual_tol, max_iter, sub_T, sub_v0,
                    h_target)
        best_T[idx] = sub_T
        best_v0[idx] = sub_v0

    if not np.all(np.isfinite(best_T)):
        bad = int(np.sum(~np.isfinite(best_T)))
        raise ShootingError(
            f"no shooting start converged for {bad} of {B} pairs"
        )
    if return_details:
        return best_T, best_v0
    return best_T


def _chord_guess(model, P, Q, charts_p, charts_q):
    """Initial time guess: exact for Minkowski models, great-circle arc for
    embedded models, chord norm otherwise."""
    if model.n_charts > 1:
        ep = model.embed(P, charts_p)
        eq = model.embed(Q, charts_q)
        r0 = getattr(model, "r0", 1.0)
        dot = np.clip(np.einsum("bi,bi->b", ep, eq) / r0 ** 2, -1.0, 1.0)
        return np.maximum(r0 * np.arccos(dot), 1e-6)
    guess = np.empty(len(P))
    for c in np.unique(charts_p):
        m = charts_p == c
        guess[m] = model.metric(P[m], Q[m] - P[m] + 1e-300, chart=int(c))
    return np.maximum(guess, 1e-6)


def _indicatrix_direction(model, p, cp, theta, n, with_grad: bool = True):
    """Direction v0 on the indicatrix from Euclidean angles; with_grad also
    returns the derivative dv0/dtheta."""
    u = curvature.angles_to_unit(theta, n)
    Fu = np.empty(len(u))
    for c in np.unique(cp):
        m = cp == c
        Fu[m] = model.metric(p[m], u[m], chart=int(c))
    v0 = u / Fu[:, None]
    if not with_grad:
        return v0, None
    g_u = np.empty((len(u), n, n))
    for c in np.unique(cp):
        m = cp == c
        g_u[m] = curvature.fundamental_matrix(model, p[m], u[m], int(c))
    du = indicatrix.unit_jacobian(theta, n)
    # dF(u)/dtheta_a = F_y(u) . du_a with F_y = g y / F
    Fy = np.einsum("bij,bj->bi", g_u, u) / Fu[:, None]
    dF = np.einsum("bi,bia->ba", Fy, du)
    dv0 = du / Fu[:, None, None] - np.einsum(
        "bi,ba->bia", u, dF) / (Fu ** 2)[:, None, None]
    return v0, dv0


def _residual_norms(model, target, p, cp, theta, T, n, sel, h_target):
    """Plain (row-free) endpoint residual norms for a candidate state."""
    v0, _ = _indicatrix_direction(model, p, cp, theta, n, with_grad=False)
    xe, _, ce = integrate_batch(model, p, v0, T, charts=cp, h_target=h_target)
    res = target.residual(xe, ce, sel=sel)
    return np.linalg.norm(res, axis=-1)


def _shoot_into(model, P, Q, charts_p, charts_q, dirs, T0, residual_tol,
                max_iter, best_T, best_v0, h_target=_H_SHOOT):
    """Gauss-Newton with backtracking line search on flattened (pair, start)
    trajectories; updates best_T/best_v0 in place with the shortest
    converged time per pair."""
    B, S, n = dirs.shape
    N = B * S
    pair = np.repeat(np.arange(B), S)
    p = P[pair]
    cp = charts_p[pair]
    target = _Target(model, Q, charts_q)

    theta = curvature.unit_to_angles(dirs.reshape(N, n))
    T = np.maximum(T0.reshape(N).astype(float), 1e-6)
    cap = model.search_radius()
    active = np.ones(N, dtype=bool)
    stalls = np.zeros(N, dtype=int)

    for _ in range(max_iter):
        ia = np.flatnonzero(active)
        if ia.size == 0:
            break
        v0, dv0 = _indicatrix_direction(model, p[ia], cp[ia], theta[ia], n)
        rows = np.zeros((ia.size, n, 2 * n))
        rows[:, :, n:] = np.eye(n)
        xe, ve, ce, rowse = integrate_batch(
            model, p[ia], v0, T[ia], charts=cp[ia], rows=rows,
            h_target=h_target)
        res = target.residual(xe, ce, sel=pair[ia])
        rn = np.linalg.norm(res, axis=-1)

        conv = rn <= residual_tol
        for k in np.flatnonzero(conv):
            b = pair[ia[k]]
            if 1e-12 < T[ia[k]] < best_T[b]:
                best_T[b] = T[ia[k]]
                best_v0[b] = v0[k]
        active[ia[conv]] = False
        live = ~conv
        if not np.any(live):
            continue
        il = ia[live]

        # endpoint Jacobian wrt (theta, T): variational rows give dx_end/dv0
        Jv = np.swapaxes(rowse[live][:, :, :n], 1, 2)
        Jth = np.einsum("bij,bja->bia", Jv, dv0[live])
        J = np.concatenate([Jth, ve[live][:, :, None]], axis=-1)
        J = target.push(xe[live], ce[live], J)
        JtJ = np.einsum("bei,bej->bij", J, J) + 1e-13 * np.eye(n)[None]
        Jtr = np.einsum("bei,be->bi", J, res[live])
        delta = -np.linalg.solve(JtJ, Jtr[..., None])[..., 0]
        # clip angle steps to 0.6 rad and time steps to half the current scale
        ang = delta[:, :-1]
        mag = np.linalg.norm(ang, axis=-1, keepdims=True)
        ang = np.where(mag > 0.6, ang * 0.6 / np.maximum(mag, 1e-300), ang)
        dT = np.clip(delta[:, -1], -0.5 * np.maximum(T[il], 1e-3),
                     0.5 * np.maximum(T[il], 1e-3) + 0.2)

        pend = np.arange(il.size)
        lam = 1.0
        ref = rn[live].copy()
        for _try in range(4):
            if pend.size == 0:
                break
            cand_theta = theta[il[pend]] + lam * ang[pend]
            cand_T = np.clip(T[il[pend]] + lam * dT[pend], 1e-9, cap)
            cand_rn = _residual_norms(model, target, p[il[pend]], cp[il[pend]],
                                      cand_theta, cand_T, n, pair[il[pend]],
                                      h_target)
            ok = cand_rn < ref[pend]
            acc = il[pend[ok]]
            theta[acc] = cand_theta[ok]
            T[acc] = cand_T[ok]
            stalls[acc] = 0
            pend = pend[~ok]
            lam *= 0.5
        # a trajectory whose line search fails twice in a row sits at a local
        # minimum of the residual and cannot reach the target; drop it and
        # let the other multistart branches carry the pair
        stalled = il[pend]
        stalls[stalled] += 1
        active[stalled[stalls[stalled] >= 2]] = False


def distance(model: MetricModel, p, q, chart_p: int = 0, chart_q: int = 0,
             starts: int = 16, residual_tol: float = 1e-8,
             return_details: bool = False):
    """Forward distance d(p, q) by multistart shooting.  Not symmetric unless
    the model is reversible."""
    out = distance_batch(model, p, q, charts_p=[chart_p], charts_q=[chart_q],
                         starts=starts, residual_tol=residual_tol,
                         return_details=return_details)
    if return_details:
        return float(out[0][0]), out[1][0]
    return float(out[0])


# -- forward ball sampling -------------------------------------------------------


@dataclass
class BallSample:
    """Polar sample of a forward metric ball: direction on the indicatrix,
    stratified radius, endpoint coordinates and chart per draw."""

    center: np.ndarray
    chart_center: int
    radius: float
    r: np.ndarray
    y: np.ndarray
    x: np.ndarray
    chart: np.ndarray


def forward_ball_sample(model: MetricModel, p, R: float, count: int,
                        seed: int, label: str = "ball",
                        chart: int = 0) -> BallSample:
    """Deterministic polar sample of the forward ball B+_p(R): directions
    dnu-uniform on the indicatrix, radii stratified on (0, R)."""
    if R > model.injectivity_bound():
        raise RadiusError(
            f"radius {R} exceeds the conservative injectivity bound "
            f"{model.injectivity_bound():.6g}"
        )
    p = np.asarray(p, dtype=float)
    y = indicatrix.sample_directions(model, p, count, seed, label + ":dir",
                                     chart=chart)
    idx = np.arange(count)
    u = streams.uniforms(seed, label + ":rad", idx)
    r = R * (idx + u) / count
    x0 = np.broadcast_to(p, (count, model.n))
    xe, ve, ce = integrate_batch(model, x0, y, r, charts=np.full(count, chart))
    return BallSample(center=p, chart_center=chart, radius=R, r=r, y=y,
                      x=xe, chart=ce)


# -- parallel frames --------------------------------------------------------------


@dataclass
class FrameField:
    """g_T-orthonormal vectors E_alpha transported along a geodesic; E has
    shape (nodes, n-1, n) and accompanies path.v as the T direction."""

    path: GeodesicPath
    E: np.ndarray

    def orthonormality_drift(self) -> float:
        """Max deviation of g_T(E_a, E_b) from identity and g_T(E_a, T)
        from zero over all nodes."""
        path = self.path
        model = path.model
        worst = 0.0
        for i in range(len(path.t)):
            g = curvature.fundamental_matrix(model, path.x[i], path.v[i],
                                             int(path.chart[i]))
            gram = self.E[i] @ g @ self.E[i].T
            worst = max(worst, float(np.max(np.abs(gram - np.eye(len(gram))))))
            worst = max(worst, float(np.max(np.abs(self.E[i] @ g @ path.v[i]))) /
                        max(path.speed, 1e-300))
        return worst


def _transport_rhs(model, x, v, chart, E):
    _, _, Gv = model.spray_jac(x[None, :], v[None, :], chart=chart)
    return -np.einsum("ik,ak->ai", Gv[0], E)


def _seg_state(path, i, t):
    """Hermite state pinned to segment i; unlike GeodesicPath.state this never
    crosses into the post-switch chart at the right endpoint."""
    t0, t1 = path.t[i], path.t[i + 1]
    x = _hermite(t, t0, t1, path.x[i], path.v[i], path.seg_x1[i], path.seg_v1[i])
    v = _hermite(t, t0, t1, path.v[i], path.seg_a0[i], path.seg_v1[i],
                 path.seg_a1[i])
    return x, v


def _transport_segment(model, path, i, E, times):
    """RK4-transport E across segment i, returning E at each requested time
    (sorted, within the segment) and at the segment end."""
    t0, t1 = path.t[i], path.t[i + 1]
    chart = int(path.chart[i])
    out = []
    cur_t = t0
    cur_E = E
    marks = list(times) + [t1]
    for tm in marks:
        span = tm - cur_t
        if span > 1e-15:
            nsub = max(1, int(math.ceil(span / (t1 - t0) * 2)))
            h = span / nsub
            for k in range(nsub):
                ta = cur_t + k * h
                xa, va = _seg_state(path, i, ta)
                xm, vm = _seg_state(path, i, ta + 0.5 * h)
                xb, vb = _seg_state(path, i, ta + h)
                k1 = _transport_rhs(model, xa, va, chart, cur_E)
                k2 = _transport_rhs(model, xm, vm, chart, cur_E + 0.5 * h * k1)
                k3 = _transport_rhs(model, xm, vm, chart, cur_E + 0.5 * h * k2)
                k4 = _transport_rhs(model, xb, vb, chart, cur_E + h * k3)
                cur_E = cur_E + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            cur_t = tm
        out.append(cur_E)
    return out[:-1], out[-1]


def transport(model: MetricModel, path: GeodesicPath, V) -> np.ndarray:
    """Parallel-transport the vectors V (m, n) along the whole path via
    Vdot = -(dG/dv) V, returning their values at every node, (nodes, m, n)."""
    E = np.atleast_2d(np.asarray(V, dtype=float))
    nodes = [E.copy()]
    for i in range(len(path.t) - 1):
        _, E = _transport_segment(model, path, i, E, [])
        if path.chart[i + 1] != path.chart[i]:
            # transform the vectors through the chart transition at the
            # pre-switch end state
            xpre = np.broadcast_to(path.seg_x1[i], E.shape)
            _, E = model.apply_transition(xpre, E)
        nodes.append(np.asarray(E).copy())
    return np.asarray(nodes)


def parallel_frame(model: MetricModel, path: GeodesicPath) -> FrameField:
    """Transport a g_T-orthonormal frame along the path, recording it at
    every path node."""
    g0 = curvature.fundamental_matrix(model, path.x[0], path.v[0],
                                      int(path.chart[0]))
    E = curvature.gram_schmidt(g0, path.v[0])[1:]
    return FrameField(path=path, E=transport(model, path, E))


# -- index form --------------------------------------------------------------------


_GL8_NODES, _GL8_WEIGHTS = np.polynomial.legendre.leggauss(8)


def index_form(model: MetricModel, path: GeodesicPath, K: float):
    """Second variation of arc length over the transverse variation fields
    Y_alpha(t) = sin(pi s / d) E_alpha(t) on a unit-speed minimal geodesic.

    Returns (total, delta, first_term) where first_term is the closed-form
    constant-curvature part, delta integrates sin^2 against the Ricci deficit,
    and total is an independent quadrature of the full integrand; the three
    satisfy total = first_term + delta up to quadrature error.
    """
    if K <= 0:
        raise ParameterError("index form requires K > 0")
    drift = path.speed_drift()
    if drift > 1e-6:
        raise ParameterError(
            f"input path is not a constant-speed geodesic (drift {drift:.2e})"
        )
    nm1 = model.n - 1
    F0 = path.speed
    d = path.length
    L = math.sqrt(K) * d
    first_term = -nm1 * L * math.sqrt(K) / 2.0 * (1.0 - (math.pi / L) ** 2)

    g0 = curvature.fundamental_matrix(model, path.x[0], path.v[0],
                                      int(path.chart[0]))
    E = curvature.gram_schmidt(g0, path.v[0])[1:]
    total = 0.0
    delta = 0.0
    for i in range(len(path.t) - 1):
        t0, t1 = path.t[i], path.t[i + 1]
        half = 0.5 * (t1 - t0)
        tq = t0 + half * (_GL8_NODES + 1.0)
        wq = half * _GL8_WEIGHTS
        Es, E = _transport_segment(model, path, i, E, list(tq))
        chart = int(path.chart[i])
        for tqk, wk, Ek in zip(tq, wq, Es):
            xk, vk = _seg_state(path, i, tqk)
            s = F0 * (tqk - path.t[0])
            f = math.sin(math.pi * s / d)
            fp = (math.pi / d) * math.cos(math.pi * s / d)
            g = curvature.fundamental_matrix(model, xk, vk, chart)
            R = curvature.spray_curvature(model, xk, vk, chart)
            gE = Ek @ g @ Ek.T
            RE = np.einsum("ik,ak->ai", R, Ek)
            gRE = np.einsum("ai,ij,aj->a", Ek, g, RE)
            quad1 = fp * fp * float(np.trace(gE))
            quad2 = f * f * float(np.sum(gRE)) / F0 ** 2
            total += wk * F0 * (quad1 - quad2)
            ric = float(curvature.ricci_trace(model, xk, vk, chart))
            delta += wk * F0 * f * f * (nm1 * K - ric)
        if path.chart[i + 1] != path.chart[i]:
            xpre = np.broadcast_to(path.seg_x1[i], E.shape)
            _, E = model.apply_transition(xpre, E)
    return total, delta, first_term
