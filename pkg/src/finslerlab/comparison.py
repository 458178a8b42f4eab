"""Integral Ricci-deficit norms, the explicit diameter-bound constant chain,
and Monte Carlo verification of the comparison inequalities built on them.

Checks provided: the two-ball segment inequality, the small-deficit diameter
bound, the Berwald density-ratio transfer, and the local volume-ratio
comparison together with its differential ingredient.  Each check estimates
the two sides of its inequality by routes that share no intermediate values,
keeps raw margins and Monte Carlo error bars in the report, and passes only
when the margin clears -(3 standard errors + deterministic tolerance).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.integrate import cumulative_trapezoid, quad

from . import curvature, geodesics, indicatrix, measures, tensors
from .errors import ParameterError, RadiusError, UnsupportedModelError
from .measures import BH, s_k, space_form_volume
from .models import FlatRiemannian, MetricModel, TangentSample
from .streams import uniforms

__all__ = [
    "KNormEstimate", "MyersConstants", "ComparisonReport",
    "knorm", "segment_constant", "segment_check", "myers_constants",
    "myers_verify", "berwald_density_check", "volume_comparison_check",
    "F_LIBRARY",
]

# deterministic part of every pass threshold; reports keep raw margins so the
# thresholds can be re-evaluated offline
DEFAULT_TOLERANCE = 1e-6


def _plain(obj):
    """Recursively convert numpy containers to JSON-friendly Python values."""
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# -- result types -------------------------------------------------------------------


@dataclass
class KNormEstimate:
    """Sampled sup over centers of the normalized Ricci-deficit integral
    (1/m(B+(R))) * int_B ((n-1)K - min_y Ric)_+^q dm."""

    q: float
    K: float
    R: float
    kind: str
    value: float
    standard_error: float
    centers: list
    per_center: list
    per_center_se: list
    count: int
    seed: int

    def as_dict(self):
        return _plain({
            "q": self.q, "K": self.K, "R": self.R, "kind": self.kind,
            "value": self.value, "standard_error": self.standard_error,
            "centers": self.centers, "per_center": self.per_center,
            "per_center_se": self.per_center_se, "count": self.count,
            "seed": self.seed,
        })


@dataclass
class MyersConstants:
    """Every explicit constant of the deficit-threshold chain that turns a
    small integral Ricci deficit into a diameter bound pi/sqrt(K) + rho.

    eps1 is the threshold evaluated at the effective search radius, eps2 the
    one at the target diameter bound plus collar; eps is their minimum,
    divided by the ball-covering factor when the requested radius sits at or
    below pi/sqrt(K) (regime "covered").
    """

    n: int
    q: float
    k: float
    K: float
    delta: float
    R: float
    rho: float
    r: float
    segment_constant: float
    tube_constant: float
    index_constant: float
    eps1: float
    eps2: float
    eps: float
    covering_factor: float
    berwald_factor: float
    regime: str
    effective_radius: float

    def as_dict(self):
        return _plain(self.__dict__)

    def check(self):
        vals = [self.r, self.segment_constant, self.tube_constant,
                self.index_constant, self.eps1, self.eps2, self.eps,
                self.covering_factor, self.berwald_factor]
        if not all(math.isfinite(v) and v > 0.0 for v in vals):
            raise ParameterError("constant chain produced a non-positive or "
                                 "non-finite value")
        if self.eps > self.eps1 or self.eps > self.eps2:
            raise ParameterError("eps must not exceed eps1 or eps2")


@dataclass
class ComparisonReport:
    """Outcome of one inequality check.

    lhs/rhs/margin describe the binding (worst-adjusted) sub-inequality; the
    full candidate list lives in notes["checks"].  passed follows
    margin >= -(3 * mc_error + tolerance) whenever notes["asserted"] is not
    False; an unasserted report (hypothesis unmet) passes informationally.
    """

    check: str
    model: dict
    inputs: dict
    lhs: float
    rhs: float
    margin: float
    passed: bool
    mc_error: float
    tolerance: float
    notes: dict = field(default_factory=dict)

    def threshold(self) -> float:
        return -(3.0 * self.mc_error + self.tolerance)

    def as_dict(self):
        return _plain({
            "check": self.check, "model": self.model, "inputs": self.inputs,
            "lhs": self.lhs, "rhs": self.rhs, "margin": self.margin,
            "passed": self.passed, "mc_error": self.mc_error,
            "tolerance": self.tolerance, "notes": self.notes,
        })


def _assemble_report(check, model, inputs, candidates, notes, asserted=True):
    """Reduce named sub-inequalities to one report.

    Each candidate is (name, lhs, rhs, mc_error, tolerance); the one with the
    smallest adjusted margin (margin + 3 se + tol) becomes the headline, so
    the headline passes exactly when all candidates do.
    """
    adjusted = [(c[2] - c[1]) + 3.0 * c[3] + c[4] for c in candidates]
    i = int(np.argmin(adjusted))
    name, lhs, rhs, se, tol = candidates[i]
    margin = rhs - lhs
    ok = all(a >= 0.0 for a in adjusted)
    notes = dict(notes)
    notes["checks"] = [
        {"name": c[0], "lhs": c[1], "rhs": c[2], "margin": c[2] - c[1],
         "mc_error": c[3], "tolerance": c[4]} for c in candidates
    ]
    notes["binding"] = name
    if not asserted:
        notes["asserted"] = False
    return ComparisonReport(
        check=check, model=_plain(model.config()), inputs=_plain(inputs),
        lhs=float(lhs), rhs=float(rhs), margin=float(margin),
        passed=bool(ok if asserted else True), mc_error=float(se),
        tolerance=float(tol), notes=_plain(notes),
    )


# -- shared sampling machinery -------------------------------------------------------


@dataclass
class _RadialData:
    """Polar sweep around one center: sampled directions crossed with a
    composite Gauss-Legendre radial grid."""

    y: np.ndarray          # (D, n) directions on the indicatrix
    t: np.ndarray          # (Q,) radial nodes
    w: np.ndarray          # (Q,) radial weights
    edges: np.ndarray      # (m,) increasing partition radii
    cut: np.ndarray        # (m,) node count covered by each edge prefix
    sigma_hat: np.ndarray  # (D, Q)
    tau: np.ndarray        # (D, Q)
    x: np.ndarray          # (D, Q, n)
    v: np.ndarray          # (D, Q, n)
    chart: np.ndarray      # (D, Q)
    nu_total: float

    def prefix_integrals(self, values):
        """Per-direction integrals int_0^{edge_j} values * sigma_hat dt for
        every edge; values has shape (D, Q).  Returns (D, m)."""
        contrib = values * self.sigma_hat * self.w
        csum = np.cumsum(contrib, axis=1)
        return csum[:, self.cut - 1]

    def ball_mean(self, per_direction):
        """Monte Carlo measure integral and its standard error from
        per-direction totals (D,) or (D, m)."""
        vals = self.nu_total * np.asarray(per_direction, dtype=float)
        mean = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
        return mean, se


def _radial_data(model, p, edges, kind, count, seed, label, chart=0,
                 nodes=8) -> _RadialData:
    """Sample `count` directions around p and sweep the polar density on a
    composite radial Gauss rule over the partition given by `edges`."""
    tag = measures._tag(kind)
    edges = np.atleast_1d(np.asarray(edges, dtype=float))
    if np.any(edges <= 0.0) or np.any(np.diff(edges) <= 0.0):
        raise ParameterError("edges must be positive and increasing")
    if edges[-1] > model.injectivity_bound():
        raise RadiusError(
            f"radius {edges[-1]:.6g} exceeds the safe polar radius "
            f"{model.injectivity_bound():.6g}")
    if count < 2:
        raise ParameterError("count must be at least 2 for an error bar")
    p = np.asarray(p, dtype=float)
    y = indicatrix.sample_directions(model, p, count, seed, label, chart=chart)
    w_nu, rows = measures._indicatrix_rows(
        model, np.broadcast_to(p, y.shape), y, chart)

    gs, gw = np.polynomial.legendre.leggauss(nodes)
    gs = 0.5 * (gs + 1.0)
    gw = 0.5 * gw
    lows = np.concatenate([[0.0], edges[:-1]])
    t = np.concatenate([lo + (hi - lo) * gs for lo, hi in zip(lows, edges)])
    w = np.concatenate([(hi - lo) * gw for lo, hi in zip(lows, edges)])
    Q = len(t)

    yb = np.repeat(y, Q, axis=0)
    rowsb = np.repeat(rows, Q, axis=0)
    wb = np.repeat(w_nu, Q)
    radii = np.tile(t, count)
    sh, tau, xe, ve, ce = measures._sigma_hat(
        model, p, chart, yb, wb, rowsb, radii, tag)
    n = model.n
    return _RadialData(
        y=y, t=t, w=w, edges=edges,
        cut=nodes * np.arange(1, len(edges) + 1),
        sigma_hat=sh.reshape(count, Q), tau=tau.reshape(count, Q),
        x=xe.reshape(count, Q, n), v=ve.reshape(count, Q, n),
        chart=ce.reshape(count, Q),
        nu_total=float(indicatrix.nu_volume(model, p, chart=chart)),
    )


def _grouped_ricci(model, x, v, charts):
    """Ricci trace at stacked states whose chart ids may differ."""
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    flat_x = x.reshape(-1, model.n)
    flat_v = np.asarray(v, dtype=float).reshape(-1, model.n)
    flat_c = np.asarray(charts).reshape(-1)
    out = np.empty(len(flat_x))
    for c in np.unique(flat_c):
        m = flat_c == c
        out[m] = curvature.ricci_batch(model, flat_x[m], flat_v[m], chart=int(c))
    return out.reshape(shape)


def _deficit_field(model, x, charts, K, q):
    """((n-1)K - min_y Ric)_+^q at stacked points with per-point charts."""
    n = model.n
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    flat_x = x.reshape(-1, n)
    flat_c = np.asarray(charts).reshape(-1)
    mins = np.empty(len(flat_x))
    for c in np.unique(flat_c):
        m = flat_c == c
        mins[m] = curvature.min_ricci_batch(model, flat_x[m], chart=int(c))
    out = np.maximum((n - 1) * K - mins, 0.0) ** q
    return out.reshape(shape)


# -- integral curvature norm ---------------------------------------------------------


def knorm(model: MetricModel, q: float, K: float, R: float, kind=BH,
          centers=8, count: int = 128, seed: int = 0, chart: int = 0,
          radial_nodes: int = 12) -> KNormEstimate:
    """Normalized Ricci-deficit norm: the max over a well-spread center set
    of (1/m(B+(R))) * int_{B+(R)} ((n-1)K - min_y Ric)_+^q dm.

    K = 0 is allowed so the norm can be compared across threshold levels.
    The per-center estimator is self-normalizing (the direction measure
    cancels), so a model with Ric >= (n-1)K everywhere returns exactly 0.
    """
    tag = measures._tag(kind)
    if q < 1.0:
        raise ParameterError("q >= 1 required")
    if K < 0.0:
        raise ParameterError("K >= 0 required")
    if R <= 0.0:
        raise ParameterError("R > 0 required")
    if R > model.injectivity_bound():
        raise RadiusError(
            f"R {R:.6g} exceeds the safe polar radius "
            f"{model.injectivity_bound():.6g}")
    if isinstance(centers, (int, np.integer)):
        if centers < 1:
            raise ParameterError("centers >= 1 required")
        pts = model.default_centers(int(centers))
    else:
        pts = np.atleast_2d(np.asarray(centers, dtype=float))

    per, per_se = [], []
    for ci, c in enumerate(pts):
        data = _radial_data(model, c, [R], tag, count, seed,
                            f"knorm:c{ci}", chart=chart, nodes=radial_nodes)
        f = _deficit_field(model, data.x, data.chart, K, q)
        num = (f * data.sigma_hat) @ data.w
        den = data.sigma_hat @ data.w
        ratio = float(num.sum() / den.sum())
        # delta-method error for the ratio of correlated sample means
        resid = num - ratio * den
        se = float(np.std(resid, ddof=1)
                   / (math.sqrt(count) * np.mean(den)))
        per.append(ratio)
        per_se.append(se)

    i = int(np.argmax(per))
    return KNormEstimate(
        q=float(q), K=float(K), R=float(R), kind=tag,
        value=per[i], standard_error=per_se[i],
        centers=[list(map(float, c)) for c in pts],
        per_center=per, per_center_se=per_se, count=int(count), seed=int(seed),
    )


# -- explicit constants --------------------------------------------------------------


def _segment_ratio(n, k, r):
    """sup over s in [r/2, r] of (s_k(r)/s_k(s))^(n-1) for fixed r; the
    comparison function is concave where positive, so the minimum of the
    denominator sits at an endpoint."""
    num = np.asarray(s_k(k, r), dtype=float)
    den = np.minimum(np.asarray(s_k(k, 0.5 * np.asarray(r)), dtype=float), num)
    return np.maximum(num / den, 1.0) ** (n - 1)


def _segment_sup(n, k, D, grid=4096):
    if k <= 0:
        return float((s_k(k, D) / s_k(k, 0.5 * D)) ** (n - 1))
    rr = np.linspace(D / grid, D, grid)
    vals = _segment_ratio(n, k, rr)
    j = int(np.argmax(vals))
    lo = rr[j - 1] if j > 0 else D / grid * 1e-9
    hi = rr[j + 1] if j + 1 < grid else D
    res = optimize.minimize_scalar(
        lambda r: -_segment_ratio(n, k, float(r)),
        bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-13})
    return float(max(vals[j], -res.fun))


def segment_constant(n: int, k: float, delta: float, D: float) -> float:
    """delta^(4n) times the sup over 0 < r/2 <= s <= r <= D of
    (s_k(r)/s_k(s))^(n-1).

    Closed form for k <= 0 (the sup sits at s = r/2, r = D); grid plus a
    bounded refinement over r for k > 0, which requires D < pi/sqrt(k).
    """
    if n < 2:
        raise ParameterError("n >= 2 required")
    if delta < 1.0:
        raise ParameterError("delta >= 1 required")
    if D <= 0.0:
        raise ParameterError("D > 0 required")
    if k > 0 and D >= math.pi / math.sqrt(k):
        raise ParameterError("D < pi/sqrt(k) required when k > 0")
    return delta ** (4 * n) * _segment_sup(n, k, D)


def _tube_constant(n, kk, delta, D, r, cseg):
    return (2.0 * delta ** (4 * n) * cseg * ((1.0 + delta) * r)
            * space_form_volume(n, kk, (1.0 + delta) * D)
            / space_form_volume(n, kk, r))


def _eps_threshold(n, q, K, rho, c_index):
    L0 = math.pi + 0.5 * rho * math.sqrt(K)
    gap = 1.0 - (math.pi / L0) ** 2
    return ((n - 1) * math.sqrt(K) * gap / (2.0 * c_index)) ** q * L0


def myers_constants(n: int, q: float, k: float, K: float, delta: float,
                    R: float, rho: float) -> MyersConstants:
    """Full deficit-threshold chain for the diameter bound
    diam <= pi/sqrt(K) + rho under Ric >= -(n-1)k^2 and width delta.

    When R > pi/sqrt(K) the chain applies at R directly; otherwise the
    threshold is computed at the enlarged radius pi/sqrt(K) + 2(1+delta)rho
    and divided by the ball-covering factor
    delta^(4n) v(n,-k^2,R) / v(n,-k^2,R/(1+delta)).
    """
    if n < 2:
        raise ParameterError("n >= 2 required")
    if q < 1.0:
        raise ParameterError("q >= 1 required")
    if K <= 0.0:
        raise ParameterError("K > 0 required")
    if delta < 1.0:
        raise ParameterError("delta >= 1 required")
    if R <= 0.0:
        raise ParameterError("R > 0 required")
    if rho <= 0.0:
        raise ParameterError("rho > 0 required")
    kk = -(k * k)
    limit = math.pi / math.sqrt(K)
    covering = (delta ** (4 * n) * space_form_volume(n, kk, R)
                / space_form_volume(n, kk, R / (1.0 + delta)))
    if R > limit:
        if rho >= (R - limit) / (1.0 + delta):
            raise ParameterError(
                "rho < (R - pi/sqrt(K)) / (1 + delta) required when "
                "R > pi/sqrt(K)")
        regime, r_eff, factor = "direct", R, 1.0
    else:
        regime, factor = "covered", covering
        r_eff = limit + 2.0 * (1.0 + delta) * rho

    r = rho / (2.0 * (1.0 + delta))
    cseg = segment_constant(n, kk, delta, r_eff)
    ctube = _tube_constant(n, kk, delta, r_eff, r, cseg)
    cidx = ctube ** (1.0 / q) * K ** ((1.0 - q) / (2.0 * q))
    eps1 = _eps_threshold(n, q, K, rho, cidx)

    r0 = limit + rho
    cseg0 = segment_constant(n, kk, delta, r0)
    ctube0 = _tube_constant(n, kk, delta, r0, r, cseg0)
    cidx0 = ctube0 ** (1.0 / q) * K ** ((1.0 - q) / (2.0 * q))
    eps2 = _eps_threshold(n, q, K, rho, cidx0)

    out = MyersConstants(
        n=int(n), q=float(q), k=float(k), K=float(K), delta=float(delta),
        R=float(R), rho=float(rho), r=float(r),
        segment_constant=float(cseg), tube_constant=float(ctube),
        index_constant=float(cidx), eps1=float(eps1), eps2=float(eps2),
        eps=float(min(eps1, eps2) / factor),
        covering_factor=float(covering),
        berwald_factor=float(2.0 * delta ** (10 * n + 2 * q)
                             * (1.0 + delta) ** n),
        regime=regime, effective_radius=float(r_eff),
    )
    out.check()
    return out


_ALT_GL = np.polynomial.legendre.leggauss(48)


def _volume_alt(n, kk, r):
    """Space-form ball volume by a route not shared with the main chain:
    48-node composite Gauss-Legendre over 32 panels for curved space forms,
    log-product for flat."""
    if kk == 0.0:
        return math.exp(math.log(measures.unit_ball_volume(n)) + n * math.log(r))
    gs, gw = _ALT_GL
    edges = np.linspace(0.0, r, 33)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * np.diff(edges)
    tt = (mid[:, None] + half[:, None] * gs).ravel()
    ww = (half[:, None] * gw).ravel()
    vals = np.asarray(s_k(kk, tt)) ** (n - 1)
    return measures.sphere_area(n) * float(vals @ ww)


def myers_constants_alt(n, q, k, K, delta, R, rho) -> dict:
    """Independent re-evaluation of the constant chain.

    Uses logarithmic accumulation, different factor grouping, and a Simpson
    volume quadrature so a transcription error in either route breaks the
    1e-10 cross-agreement rather than surviving in both.
    """
    kk = -(k * k)
    limit = math.pi / math.sqrt(K)
    covering = math.exp(4 * n * math.log(delta)
                        + math.log(_volume_alt(n, kk, R))
                        - math.log(_volume_alt(n, kk, R / (1.0 + delta))))
    if R > limit:
        regime, r_eff, factor = "direct", R, 1.0
    else:
        regime, factor = "covered", covering
        r_eff = limit + (1.0 + delta) * rho * 2.0

    r = rho / (1.0 + delta) / 2.0

    def seg(D):
        if kk <= 0:
            return math.exp(4 * n * math.log(delta)
                            + (n - 1) * (math.log(s_k(kk, D))
                                         - math.log(s_k(kk, D / 2.0))))
        return delta ** (4 * n) * _segment_sup(n, kk, D, grid=40960)

    def tube(D, cseg):
        return math.exp(math.log(2.0) + 4 * n * math.log(delta)
                        + math.log(cseg) + math.log((1.0 + delta) * r)
                        + math.log(_volume_alt(n, kk, (1.0 + delta) * D))
                        - math.log(_volume_alt(n, kk, r)))

    def eps_at(D):
        cs = seg(D)
        ct = tube(D, cs)
        ci = math.exp(math.log(ct) / q
                      + (1.0 - q) / (2.0 * q) * math.log(K))
        L0 = math.pi + math.sqrt(K) * rho / 2.0
        gap = -math.expm1(2.0 * (math.log(math.pi) - math.log(L0)))
        return (math.exp(q * (math.log(n - 1.0) + 0.5 * math.log(K)
                              + math.log(gap) - math.log(2.0) - math.log(ci))
                         + math.log(L0)), cs, ct, ci)

    eps1, cseg, ctube, cidx = eps_at(r_eff)
    eps2 = eps_at(limit + rho)[0]
    return {
        "r": r, "segment_constant": cseg, "tube_constant": ctube,
        "index_constant": cidx, "eps1": eps1, "eps2": eps2,
        "eps": min(eps1, eps2) / factor, "covering_factor": covering,
        "berwald_factor": math.exp(math.log(2.0)
                                   + (10 * n + 2 * q) * math.log(delta)
                                   + n * math.log1p(delta)),
        "regime": regime, "effective_radius": r_eff,
    }


# -- segment inequality --------------------------------------------------------------

F_LIBRARY = ("one", "radial", "bump", "deficit", "zero")


def _field_function(model, name, c_ref, chart_ref, r_ref, K, q):
    """Named nonnegative test field f(x) evaluated at stacked points with
    per-point charts.  "radial" and "bump" are built on the distance from
    the reference center, "deficit" is the Ricci shortfall below (n-1)K."""
    if name not in F_LIBRARY:
        raise ParameterError(f"unknown test function {name!r}; "
                             f"choose one of {F_LIBRARY}")

    def dist_from_ref(x, charts):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        flat_x = x.reshape(-1, model.n)
        flat_c = np.asarray(charts).reshape(-1)
        base = np.broadcast_to(c_ref, flat_x.shape)
        d = model.closed_distance(base, flat_x,
                                  np.full(len(flat_x), chart_ref), flat_c)
        if d is None:
            d = geodesics.distance_batch(model, base, flat_x,
                                         charts_p=np.full(len(flat_x),
                                                          chart_ref),
                                         charts_q=flat_c)
        return np.asarray(d, dtype=float).reshape(shape)

    if name == "one":
        return lambda x, charts: np.ones(np.asarray(x).shape[:-1])
    if name == "zero":
        return lambda x, charts: np.zeros(np.asarray(x).shape[:-1])
    if name == "radial":
        return dist_from_ref
    if name == "bump":
        def bump(x, charts):
            u = dist_from_ref(x, charts) / r_ref
            out = np.zeros_like(u)
            inside = u < 1.0
            out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
            return out
        return bump
    return lambda x, charts: _deficit_field(model, x, charts, K, q)


def _connecting_geodesics(model, X1, X2, ch1, ch2):
    """(T, v0) for the minimal geodesics x1 -> x2, found by shooting seeded
    with a closed-form warm start where one exists."""
    B = len(X1)
    dirs = T0 = None
    if model.locally_minkowski and model.n_charts == 1:
        diff = X2 - X1
        F = model.metric(X1, diff, chart=0)
        dirs = diff / F[:, None]
        T0 = F
    elif model.riemannian and model.n_charts == 2 and hasattr(model, "embed"):
        # great-circle seed pulled back through the isometric embedding
        r0 = model.r0
        e1 = model.embed(X1, ch1) / r0
        e2 = model.embed(X2, ch2) / r0
        cos = np.clip(np.einsum("bi,bi->b", e1, e2), -1.0, 1.0)
        theta = np.arccos(cos)
        u = e2 - cos[:, None] * e1
        nrm = np.linalg.norm(u, axis=-1)
        safe = np.maximum(nrm, 1e-12)
        u = u / safe[:, None]
        J = model.embed_jacobian(X1, ch1)
        s = np.sum(X1 * X1, axis=-1)
        phi2 = (2.0 * r0 ** 2 / (r0 ** 2 + s)) ** 2
        dirs = np.einsum("bji,bj->bi", J, u) / phi2[:, None]
        bad = nrm < 1e-9
        if np.any(bad):
            dirs[bad] = 0.0
            dirs[bad, 0] = 1.0
        F = np.empty(B)
        for c in np.unique(ch1):
            m = ch1 == c
            F[m] = model.metric(X1[m], dirs[m], chart=int(c))
        dirs = dirs / F[:, None]
        T0 = np.maximum(r0 * theta, 1e-6)
    return geodesics.distance_batch(model, X1, X2, charts_p=ch1, charts_q=ch2,
                                    directions=dirs, T0=T0,
                                    return_details=True)


def _polar_draw(model, center, radius, count, seed, label, chart, tag):
    """Independent polar sample of a forward ball with the importance weight
    that converts sample means into measure integrals.  Radii stay
    unstratified so that two draws paired index by index remain a genuine
    product sample."""
    p = np.asarray(center, dtype=float)
    y = indicatrix.sample_directions(model, p, count, seed, label + ":dir",
                                     chart=chart)
    idx = np.arange(count)
    r = radius * uniforms(seed, label + ":rad", idx)
    w_nu, rows = measures._indicatrix_rows(
        model, np.broadcast_to(p, y.shape), y, chart)
    sh, _, xe, ve, ce = measures._sigma_hat(model, p, chart, y, w_nu, rows,
                                            r, tag)
    nu_tot = float(indicatrix.nu_volume(model, p, chart=chart))
    weight = nu_tot * radius * sh
    return xe, ce, weight


def segment_check(model: MetricModel, a1, a2, f: str = "one",
                  pairs: int = 2000, seed: int = 0, kind=BH, k: float = 0.0,
                  K: float = 1.0, q: float = 1.0, count: int = 128,
                  chart: int = 0, path_nodes: int = 8) -> ComparisonReport:
    """Check the two-ball segment inequality: the product-measure integral
    of int_0^d f along connecting geodesics is bounded by
    C(n,k,delta,D) [m(A1) diam(A2) + m(A2) diam(A1)] int_W f dm.

    a1, a2 are (center, radius) ball specs; f names a field from F_LIBRARY.
    The left side is Monte Carlo over importance-weighted polar pairs with
    geodesics found by warm-started shooting, the right side combines ball
    measures, diameter surrogates (1+delta) r, and a polar integral over the
    enclosing region W.
    """
    tag = measures._tag(kind)
    c1, r1 = np.asarray(a1[0], dtype=float), float(a1[1])
    c2, r2 = np.asarray(a2[0], dtype=float), float(a2[1])
    if r1 <= 0 or r2 <= 0:
        raise ParameterError("ball radii must be positive")
    if pairs < 2:
        raise ParameterError("pairs >= 2 required")
    n = model.n
    delta = math.sqrt(tensors.uniformity_constant(model).value)

    # curvature hypothesis Ric >= (n-1)k at sampled points
    probe = np.vstack([model.default_centers(4), c1[None], c2[None]])
    ric_lo = min(curvature.min_ricci(model, x, chart=chart, polish=False)[0]
                 for x in probe)
    if ric_lo < (n - 1) * k - 1e-8:
        raise ParameterError(
            f"sampled Ricci minimum {ric_lo:.6g} violates the lower bound "
            f"(n-1)k = {(n - 1) * k:.6g}")

    d12 = float(geodesics.distance(model, c1, c2, chart_p=chart,
                                   chart_q=chart))
    d_sup = delta * r1 + d12 + r2
    r_w = r1 + d_sup * (1.0 + 1e-6)
    if max(r1, r2) > model.injectivity_bound() or \
            r_w > model.injectivity_bound():
        raise RadiusError(
            f"configuration needs polar radius {r_w:.6g}, beyond the safe "
            f"bound {model.injectivity_bound():.6g}")
    cseg = segment_constant(n, k, delta, d_sup)

    m1 = measures.ball_measure(model, c1, r1, tag, count, seed, chart=chart)
    m2 = measures.ball_measure(model, c2, r2, tag, count, seed, chart=chart)

    field_fn = _field_function(model, f, c1, chart, r_w, K, q)
    wdata = _radial_data(model, c1, np.linspace(r_w / 4, r_w, 4), tag, count,
                         seed, "segment:W", chart=chart)
    fw = field_fn(wdata.x, wdata.chart)
    int_w, int_w_se = wdata.ball_mean(wdata.prefix_integrals(fw)[:, -1])

    # left side: importance-weighted pairs and path quadrature of f
    x1, cc1, w1 = _polar_draw(model, c1, r1, pairs, seed, "segment:a1",
                              chart, tag)
    x2, cc2, w2 = _polar_draw(model, c2, r2, pairs, seed, "segment:a2",
                              chart, tag)
    T, v0 = _connecting_geodesics(model, x1, x2, cc1, cc2)
    gs, gw = np.polynomial.legendre.leggauss(path_nodes)
    gs = 0.5 * (gs + 1.0)
    gw = 0.5 * gw
    inner = np.zeros(pairs)
    for cg, wg in zip(gs, gw):
        xg, _, ceg = geodesics.integrate_batch(model, x1, v0, cg * T,
                                               charts=cc1,
                                               h_target=geodesics._H_SHOOT)
        inner += wg * field_fn(xg, ceg)
    samples = T * inner * w1 * w2
    lhs = float(np.mean(samples))
    lhs_se = float(np.std(samples, ddof=1) / math.sqrt(pairs))

    pair_mass = m1.value * (1.0 + delta) * r2 + m2.value * (1.0 + delta) * r1
    rhs = cseg * pair_mass * float(int_w)
    rhs_se = cseg * math.hypot(
        (1.0 + delta) * math.hypot(r2 * m1.standard_error,
                                   r1 * m2.standard_error) * float(int_w),
        pair_mass * float(int_w_se))
    se = math.hypot(lhs_se, rhs_se)
    tol = DEFAULT_TOLERANCE * max(1.0, abs(lhs), abs(rhs))

    notes = {
        "f": f, "delta": delta, "k": k, "segment_constant": cseg,
        "distance_sup": d_sup, "region_radius": r_w,
        "ball_1": m1.__dict__, "ball_2": m2.__dict__,
        "region_integral": float(int_w),
        "region_integral_se": float(int_w_se),
        "lhs_se": lhs_se, "rhs_se": rhs_se, "pairs": pairs,
        "ricci_floor": ric_lo,
    }
    return _assemble_report(
        "segment", model, {"a1": [list(c1), r1], "a2": [list(c2), r2],
                           "f": f, "pairs": pairs, "seed": seed, "kind": tag,
                           "k": k, "K": K, "q": q, "count": count},
        [("segment-inequality", lhs, rhs, se, tol)], notes)


# -- diameter bound ------------------------------------------------------------------


def _sampled_ricci_floor(model, seed, chart=0, scatter=24):
    """Lower envelope of Ric over centers plus scattered points; the default
    centers get the polished search, the scatter the grid-only one."""
    vals = [curvature.min_ricci(model, x, chart=chart)[0]
            for x in model.default_centers(8)]
    pts = model.random_points(seed, "ricci-floor", scatter)
    vals.append(float(np.min(curvature.min_ricci_batch(model, pts,
                                                       chart=chart))))
    return float(min(vals))


def myers_verify(model: MetricModel, q: float = 1.0, K: float = 1.0,
                 R: float | None = None, rho: float = 0.3, seed: int = 0,
                 kind=BH, pairs: int = 500, count: int = 128,
                 centers: int = 8, delta: float | None = None) -> ComparisonReport:
    """Measure delta and the Ricci floor, compute the deficit threshold eps,
    estimate the deficit norm, and (when norm < eps) assert the sampled
    diameter against pi/sqrt(K) + rho.

    When the measured norm is not below eps the hypothesis is unmet, so the
    report carries every quantity but passes informationally.  delta
    overrides the measured uniformity width when given (it must dominate the
    true width for the constants to remain valid).
    """
    tag = measures._tag(kind)
    if not model.compact:
        raise UnsupportedModelError(
            "diameter verification needs a compact model")
    n = model.n
    if R is None:
        R = 0.9 * model.injectivity_bound()
    if delta is None:
        delta = math.sqrt(tensors.uniformity_constant(model).value)
    elif delta < 1.0:
        raise ParameterError("delta >= 1 required")
    ric_lo = _sampled_ricci_floor(model, seed)
    k = math.sqrt(max(0.0, -ric_lo / (n - 1)))

    consts = myers_constants(n, q, k, K, delta, R, rho)
    norm = knorm(model, q, K, R, tag, centers=centers, count=count, seed=seed)

    P = model.random_points(seed, "myers:p", pairs)
    Q = model.random_points(seed, "myers:q", pairs)
    dists = geodesics.distance_batch(model, P, Q)
    diam = float(np.max(dists))
    bound = math.pi / math.sqrt(K) + rho
    asserted = norm.value < consts.eps

    notes = {
        "delta": delta, "k": k, "ricci_floor": ric_lo,
        "constants": consts.as_dict(), "knorm": norm.as_dict(),
        "sampled_diameter": diam, "bound": bound, "pairs": pairs,
        "hypothesis_met": bool(asserted),
    }
    return _assemble_report(
        "myers", model,
        {"q": q, "K": K, "R": R, "rho": rho, "seed": seed, "kind": tag,
         "pairs": pairs, "count": count, "centers": centers},
        [("diameter-bound", diam, bound, 0.0, 1e-3)], notes,
        asserted=asserted)


# -- Berwald density transfer --------------------------------------------------------


def _chern_spread(model, seed, chart=0, points=4, directions=8):
    """Largest variation of the torsion-free connection coefficients across
    sampled directions at sampled points; zero exactly for Berwald metrics."""
    spread = 0.0
    for pi, x in enumerate(model.default_centers(points)):
        y = indicatrix.sample_directions(model, x, directions, seed,
                                         f"berwald:dir{pi}", chart=chart)
        xs = np.broadcast_to(np.asarray(x, dtype=float), y.shape)
        conn = curvature.connection(model, xs, y, chart=chart)
        dev = conn.chern - conn.chern.mean(axis=0, keepdims=True)
        spread = max(spread, float(np.max(np.abs(dev))))
    return spread


def berwald_density_check(model: MetricModel, seed: int = 0, kind=BH,
                          q: float = 1.0, K: float = 1.0,
                          R: float | None = None, count: int = 96,
                          samples: int = 64) -> ComparisonReport:
    """For a Berwald metric, bound the density ratio h = sigma / sqrt(det
    of the direction-averaged metric) by delta^(+-3n) and check the transfer
    inequality between the averaged-metric deficit norm at (K/delta^2,
    delta R) and 2 delta^(10n+2q) (1+delta)^n times the model's norm.

    Rejects models whose connection coefficients vary with direction.
    """
    tag = measures._tag(kind)
    n = model.n
    spread = _chern_spread(model, seed)
    if spread > 1e-6:
        raise UnsupportedModelError(
            f"connection coefficients vary with direction by {spread:.3e}; "
            "the density-ratio check applies to Berwald metrics only")
    if not (model.riemannian or model.locally_minkowski):
        raise UnsupportedModelError(
            "density-ratio check supports Riemannian or position-independent "
            "Berwald models; the averaged metric varies otherwise")

    delta = math.sqrt(tensors.uniformity_constant(model).value)
    X = np.vstack([model.default_centers(8),
                   model.random_points(seed, "berwald:x", samples - 8)])
    sig = np.atleast_1d(measures.density(model, X, tag))
    if model.locally_minkowski:
        ghat = tensors.average_metric(model, X[0])
        dets = np.full(len(X), float(np.linalg.det(ghat)))
        reference = FlatRiemannian(ghat)
    else:
        # Any direction works on a Riemannian model; a diagonal probe stays
        # off the factor-block degeneracies of product metrics.
        probe = np.full(n, 1.0 / math.sqrt(n))
        ghat = curvature.fundamental_matrix(
            model, X, np.broadcast_to(probe, X.shape))
        dets = np.linalg.det(ghat)
        reference = model
    h = sig / np.sqrt(dets)
    lo, hi = delta ** (-3 * n), delta ** (3 * n)

    sdirs = indicatrix.sample_directions(model, X[0], 4, seed, "berwald:sdir")
    s_max = float(max(abs(measures.s_curvature(model, TangentSample(x, y), tag))
                      for x, y in zip(X[:4], sdirs)))

    if R is None:
        R = min(1.2, 0.45 * model.injectivity_bound(),
                0.45 * reference.injectivity_bound() / delta)
    left = knorm(reference, q, K / delta ** 2, delta * R, "BH",
                 centers=4, count=count, seed=seed)
    right = knorm(model, q, K, R, tag, centers=4, count=count, seed=seed)
    factor = 2.0 * delta ** (10 * n + 2 * q) * (1.0 + delta) ** n

    tol = DEFAULT_TOLERANCE
    cands = [
        ("density-ratio-lower", lo, float(np.min(h)), 0.0, tol),
        ("density-ratio-upper", float(np.max(h)), hi, 0.0, tol),
        ("norm-transfer", left.value, factor * right.value,
         math.hypot(left.standard_error, factor * right.standard_error),
         tol * max(1.0, factor * right.value)),
    ]
    notes = {
        "delta": delta, "chern_spread": spread, "s_curvature_max": s_max,
        "h_min": float(np.min(h)), "h_max": float(np.max(h)),
        "h_bounds": [lo, hi], "transfer_factor": factor,
        "reference_model": _plain(reference.config()),
        "left_norm": left.as_dict(), "right_norm": right.as_dict(),
        "samples": len(X),
    }
    return _assemble_report(
        "berwald", model,
        {"seed": seed, "kind": tag, "q": q, "K": K, "R": R, "count": count},
        cands, notes)


# -- local volume comparison ---------------------------------------------------------


def _c1_constant(n, k, r):
    """max over t in (0, r] of area(S^{n-1}) t s_k^{n-1}(t) / v(n,k,t);
    equals n exactly in the flat case."""
    if k == 0.0:
        return float(n)
    area = measures.sphere_area(n)
    tt = np.linspace(r / 2048, r, 2048)
    sk = np.asarray(s_k(k, tt)) ** (n - 1)
    vols = area * cumulative_trapezoid(sk, tt, initial=0.0)
    vols += np.asarray([space_form_volume(n, k, tt[0])])
    vals = area * tt * sk / vols
    j = int(np.argmax(vals))

    def val(t):
        return (area * t * s_k(k, t) ** (n - 1)
                / space_form_volume(n, k, t))

    lo = tt[j - 1] if j > 0 else tt[0] * 1e-3
    hi = tt[j + 1] if j + 1 < len(tt) else r
    res = optimize.minimize_scalar(lambda t: -val(float(t)), bounds=(lo, hi),
                                   method="bounded")
    return float(max(val(tt[j]), -res.fun))


def _c4_constant(n, q, k, R, c3):
    """(1/2q) c3 int_0^R v(n,k,s)^(-1/2q) ds; the substitution s = u^p with
    p = 2q/(2q-n) removes the integrable endpoint singularity."""
    p = 2.0 * q / (2.0 * q - n)

    def integrand(u):
        return p * u ** (p - 1.0) * space_form_volume(
            n, k, u ** p) ** (-1.0 / (2.0 * q))

    val, _ = quad(integrand, 0.0, R ** (1.0 / p), limit=200)
    return c3 * val / (2.0 * q)


def volume_comparison_check(model: MetricModel, q: float = 1.5,
                            k: float = 0.0, R: float | None = None,
                            alpha: float | None = None, seed: int = 0,
                            kind=BH, count: int = 96, nodes: int = 8,
                            chart: int = 0, center=None,
                            diff_directions: int = 6) -> ComparisonReport:
    """Check the local volume-ratio comparison alpha v(n,k,r1)/v(n,k,r2) <=
    m(B+(r1))/m(B+(r2)) on a grid of radius pairs, and its differential
    ingredient d/dr[e^tau sigma_hat / s_k^{n-1}] <= Psi * (same quantity)
    pointwise along sampled radial rays, with Psi the positive part of the
    radial log-derivative excess over the space form.  alpha defaults to
    half the admissible bound min(1, delta^(-4n)).

    Also evaluates the supporting quantities: the deficit profile rho, its
    weighted ball integral k_p, the normalized weighted volume h(r), and the
    constant ladder C1..C5 (C2 is the derived Hoelder constant
    ((2q-1)(n-1)/(2q-n))^q, labeled as derived in the notes).
    """
    tag = measures._tag(kind)
    n = model.n
    if q <= 0.5 * n:
        raise ParameterError(f"q > n/2 required (q = {q}, n = {n})")
    if k > 0.0:
        raise ParameterError("k <= 0 required")
    delta = math.sqrt(tensors.uniformity_constant(model).value)
    alpha_max = delta ** (-4 * n)
    if alpha is None:
        alpha = 0.5 * min(1.0, alpha_max)
    if not 0.0 < alpha < alpha_max:
        raise ParameterError(
            f"alpha must lie in (0, delta^(-4n)) = (0, {alpha_max:.6g})")
    if R is None:
        R = min(1.5, 0.9 * model.injectivity_bound())
    if center is None:
        center = model.default_centers(1)[0]
    center = np.asarray(center, dtype=float)

    edges = R * np.array([0.25, 0.5, 0.75, 1.0])
    data = _radial_data(model, center, edges, tag, count, seed, "volcomp",
                        chart=chart, nodes=nodes)
    ric = _grouped_ricci(model, data.x, data.v, data.chart)
    rho = np.maximum((n - 1) * k - ric, 0.0)
    etau = np.exp(data.tau)

    mass_d = data.prefix_integrals(np.ones_like(etau))      # (D, m)
    wmass_d = data.prefix_integrals(etau)
    kp_d = data.prefix_integrals(rho ** q * etau)
    mass, mass_se = data.ball_mean(mass_d)
    wmass, wmass_se = data.ball_mean(wmass_d)
    kp, _ = data.ball_mean(kp_d)
    vols = np.array([space_form_volume(n, k, r) for r in edges])
    h = wmass / vols
    h_se = wmass_se / vols

    # ratio grid: every r1 < r2 pair of the edge partition
    cands = []
    ratio_rows = []
    for j2 in range(1, len(edges)):
        for j1 in range(j2):
            num, den = mass_d[:, j1], mass_d[:, j2]
            ratio = float(num.sum() / den.sum())
            resid = num - ratio * den
            se = float(np.std(resid, ddof=1)
                       / (math.sqrt(count) * np.mean(den)))
            lhs = alpha * vols[j1] / vols[j2]
            tol = DEFAULT_TOLERANCE
            cands.append((f"volume-ratio[{edges[j1]:.3g},{edges[j2]:.3g}]",
                          lhs, ratio, se, tol))
            ratio_rows.append({"r1": float(edges[j1]), "r2": float(edges[j2]),
                               "measure_ratio": ratio, "se": se,
                               "comparison_ratio": lhs})

    # differential inequality along sampled rays, via an independent stencil
    w_nu, rows = measures._indicatrix_rows(
        model, np.broadcast_to(center, data.y.shape), data.y, chart)
    diff_rows = []
    worst = -math.inf
    rr = R * np.array([0.3, 0.55, 0.8])
    for di in range(min(diff_directions, count)):
        y = data.y[di]
        for r in rr:
            hstep = min(1e-3, 0.25 * r)
            radii = np.array([r, r - 2 * hstep, r - hstep, r + hstep,
                              r + 2 * hstep])
            yb = np.broadcast_to(y, (5, n))
            rowsb = np.broadcast_to(rows[di], (5,) + rows[di].shape)
            sh, ta, _, _, _ = measures._sigma_hat(
                model, center, chart, yb, w_nu[di], rowsb, radii, tag)
            G = np.exp(ta) * sh / np.asarray(s_k(k, radii)) ** (n - 1)
            dG = (G[1] - 8.0 * G[2] + 8.0 * G[3] - G[4]) / (12.0 * hstep)
            L = np.log(sh) + ta
            H = (L[1] - 8.0 * L[2] + 8.0 * L[3] - L[4]) / (12.0 * hstep)
            psi = max(H - measures.H_k(n, k, r), 0.0)
            viol = float((dG - psi * G[0]) / max(G[0], 1e-300))
            worst = max(worst, viol)
            diff_rows.append({"direction": di, "r": float(r),
                              "excess": viol, "psi": psi})
    cands.append(("radial-log-derivative", worst, 0.0, 0.0, 5e-4))

    c1 = _c1_constant(n, k, R)
    c2 = ((2.0 * q - 1.0) * (n - 1.0) / (2.0 * q - n)) ** q
    c3 = c1 * c2 ** (1.0 / (2.0 * q))
    c4 = _c4_constant(n, q, k, R, c3)
    c5 = 2.0 * c4 * space_form_volume(n, k, R) ** (1.0 / (2.0 * q))

    notes = {
        "delta": delta, "alpha": alpha, "alpha_max": alpha_max,
        "edges": edges, "ball_measure": mass, "ball_measure_se": mass_se,
        "weighted_measure": wmass, "weighted_h": h, "weighted_h_se": h_se,
        "deficit_integral": kp, "ratio_grid": ratio_rows,
        "differential": diff_rows, "differential_worst": worst,
        "constants": {"C1": c1, "C2": c2, "C2_origin": "derived",
                      "C3": c3, "C4": c4, "C5": c5},
    }
    return _assemble_report(
        "volcomp", model,
        {"q": q, "k": k, "R": R, "alpha": alpha, "seed": seed, "kind": tag,
         "count": count, "nodes": nodes},
        cands, notes)
