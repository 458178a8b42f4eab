"""Volume measures: coordinate densities, distortion, S-curvature, space-form
comparison functions, polar volume density, and Monte Carlo ball measures.

Two canonical volume normalizations are supported.  The Busemann-Hausdorff
density divides the Euclidean unit-ball volume by the Lebesgue volume of the
metric's unit ball, the Holmes-Thompson density averages det g over that same
ball.  Both reduce to sqrt(det a) on Riemannian models.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import curvature, geodesics, indicatrix
from .errors import ParameterError, RadiusError, SamplingError
from .models import MetricModel, TangentSample

__all__ = [
    "MeasureKind", "BH", "HT", "PolarDensity", "BallEstimate",
    "sphere_area", "unit_ball_volume", "density", "distortion", "s_curvature",
    "s_k", "c_k", "H_k", "space_form_volume", "space_form",
    "polar_density", "ball_measure",
]


@dataclass(frozen=True)
class MeasureKind:
    """Volume normalization tag: "BH" (Busemann-Hausdorff) or "HT"
    (Holmes-Thompson)."""

    tag: str


BH = MeasureKind("BH")
HT = MeasureKind("HT")


def _tag(kind) -> str:
    tag = kind.tag if isinstance(kind, MeasureKind) else str(kind)
    if tag not in ("BH", "HT"):
        raise ParameterError(f"unknown measure kind {kind!r}; expected BH or HT")
    return tag


def sphere_area(n: int) -> float:
    """Surface area of the Euclidean unit sphere S^(n-1)."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def unit_ball_volume(n: int) -> float:
    """Lebesgue volume of the Euclidean unit ball in dimension n."""
    return math.pi ** (n / 2.0) / math.gamma(n / 2.0 + 1.0)


# -- coordinate densities -----------------------------------------------------------

_HT_RADIAL = np.polynomial.legendre.leggauss(32)
# chunk bound on (batch * angles * radial nodes) kept below ~2^18 points so the
# det-g sweep never materializes huge jet arrays
_HT_CHUNK_POINTS = 1 << 18


def density(model: MetricModel, x, kind, chart: int = 0,
            nodes: int | None = None):
    """Coordinate density sigma(x) of the chosen measure, d m = sigma dx.

    BH: vol(unit ball) / vol{y : F(x,y) < 1}, the unit-ball Lebesgue volume
    evaluated as a star-body radial integral over the angle grid.  HT:
    (1 / vol(unit ball)) * integral of det g(x, y) over the same set, polar
    form with a 32-node radial Gauss-Legendre rule.

    x may carry leading batch dimensions (all in the same chart); the return
    value matches them, collapsing to a float for a single point.
    """
    tag = _tag(kind)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x.reshape(-1, model.n)
    lead = x.shape[:-1]
    n = model.n
    if model.locally_minkowski and len(xb) > 1:
        # F does not depend on x on these models, so sigma is constant
        one = density(model, xb[0], kind, chart=chart, nodes=nodes)
        return np.full(lead, one)

    thetas, w = indicatrix.angle_grid(n, nodes)
    u = curvature.angles_to_unit(thetas, n)
    jac = indicatrix.euclidean_sphere_jacobian(thetas, n)
    m = len(thetas)
    B = len(xb)
    X = np.broadcast_to(xb[:, None, :], (B, m, n))
    U = np.broadcast_to(u[None, :, :], (B, m, n))
    r = indicatrix.radial_scale(model, X, U, chart=chart)

    if tag == "BH":
        ball = np.sum(w * jac * r ** n, axis=-1) / n
        out = unit_ball_volume(n) / ball
    else:
        s, ws = _HT_RADIAL
        s = 0.5 * (s + 1.0)
        ws = 0.5 * ws
        k = len(s)
        inner = np.empty((B, m))
        step = max(1, _HT_CHUNK_POINTS // (m * k))
        for lo in range(0, B, step):
            hi = min(B, lo + step)
            rc = r[lo:hi]
            rho = rc[:, :, None] * s
            Y = rho[..., None] * U[lo:hi, :, None, :]
            Xc = np.broadcast_to(xb[lo:hi, None, None, :], Y.shape)
            g = curvature.fundamental_matrix(model, Xc, Y, chart=chart)
            det = np.linalg.det(g)
            inner[lo:hi] = rc * np.sum(ws * det * rho ** (n - 1), axis=-1)
        out = np.sum(w * jac * inner, axis=-1) / unit_ball_volume(n)

    return float(out[0]) if single else out.reshape(lead)


def distortion(model: MetricModel, s: TangentSample, kind) -> float:
    """tau = log( sqrt(det g(x, y)) / sigma(x) ); zero on Riemannian models
    and 0-homogeneous in y."""
    model.validate_sample(s)
    x = np.asarray(s.x, dtype=float)
    y = np.asarray(s.y, dtype=float)
    g = curvature.fundamental_matrix(model, x, y, chart=s.chart)
    sig = density(model, x, kind, chart=s.chart)
    return float(0.5 * math.log(float(np.linalg.det(g))) - math.log(sig))


def s_curvature(model: MetricModel, s: TangentSample, kind,
                step: float = 1e-4) -> float:
    """Derivative of the distortion along the geodesic through s at t = 0.

    Fourth-order central differences at steps h and 2h combined by Richardson
    extrapolation.  The base point must sit further than 8 * step * F(y) from
    the chart boundary so all stencil states stay in reach.
    """
    model.validate_sample(s)
    if not 0.0 < step <= 1e-2:
        raise ParameterError("step must lie in (0, 1e-2]")
    h = float(step)
    ts = h * np.array([-4.0, -2.0, -1.0, 1.0, 2.0, 4.0])
    n = model.n
    x0 = np.broadcast_to(np.asarray(s.x, dtype=float), (6, n))
    v0 = np.broadcast_to(np.asarray(s.y, dtype=float), (6, n))
    xe, ve, ce = geodesics.integrate_batch(model, x0, v0, ts,
                                           charts=np.full(6, s.chart))
    taus = np.empty(6)
    for c in np.unique(ce):
        msk = ce == c
        sig = np.atleast_1d(density(model, xe[msk], kind, chart=int(c)))
        g = curvature.fundamental_matrix(model, xe[msk], ve[msk], chart=int(c))
        taus[msk] = 0.5 * np.log(np.linalg.det(g)) - np.log(sig)
    d1 = (taus[1] - 8.0 * taus[2] + 8.0 * taus[3] - taus[4]) / (12.0 * h)
    d2 = (taus[0] - 8.0 * taus[1] + 8.0 * taus[4] - taus[5]) / (24.0 * h)
    return float((16.0 * d1 - d2) / 15.0)


# -- space-form comparison functions ------------------------------------------------


def s_k(k: float, t):
    """Solution of f'' + k f = 0 with f(0) = 0, f'(0) = 1 (array-friendly)."""
    t = np.asarray(t, dtype=float)
    if k > 0:
        rk = math.sqrt(k)
        out = np.sin(rk * t) / rk
    elif k < 0:
        rk = math.sqrt(-k)
        out = np.sinh(rk * t) / rk
    else:
        out = t.copy()
    return float(out) if out.ndim == 0 else out


def c_k(k: float, t):
    """Derivative of s_k."""
    t = np.asarray(t, dtype=float)
    if k > 0:
        out = np.cos(math.sqrt(k) * t)
    elif k < 0:
        out = np.cosh(math.sqrt(-k) * t)
    else:
        out = np.ones_like(t)
    return float(out) if out.ndim == 0 else out


def H_k(n: int, k: float, r):
    """Logarithmic derivative (n-1) s_k'(r) / s_k(r) of s_k^(n-1)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise ParameterError("H_k requires r > 0")
    if k > 0 and np.any(r >= math.pi / math.sqrt(k) - 1e-15):
        raise ParameterError("H_k undefined at or beyond the first zero of s_k")
    out = (n - 1) * np.asarray(c_k(k, r)) / np.asarray(s_k(k, r))
    return float(out) if out.ndim == 0 else out


def space_form_volume(n: int, k: float, r: float) -> float:
    """Volume of the radius-r metric ball in the simply connected space of
    constant curvature k: area(S^(n-1)) * integral of s_k^(n-1) over (0, r)."""
    r = float(r)
    if r < 0:
        raise ParameterError("radius must be nonnegative")
    if r == 0.0 or k == 0.0:
        return unit_ball_volume(n) * r ** n
    val, _ = quad(lambda t: s_k(k, t) ** (n - 1), 0.0, r, limit=200,
                  epsabs=1e-14, epsrel=1e-13)
    return sphere_area(n) * val


def space_form(n: int, k: float, r: float):
    """Bundle (s_k(r), H_k(r), v(n, k, r)) for the curvature-k space form."""
    return s_k(k, r), H_k(n, k, r), space_form_volume(n, k, r)


# -- polar volume density -----------------------------------------------------------


@dataclass
class PolarDensity:
    """Radial density of the measure in forward polar coordinates around p:
    d m = sigma_hat(r, y) dr dnu(y), plus the radial log-derivative
    H = d/dr log(sigma_hat * e^tau) along the ray."""

    p: np.ndarray
    chart: int
    y: np.ndarray
    r: float
    sigma_hat: float
    H: float
    kind: str


def _complement_basis(y: np.ndarray) -> np.ndarray:
    """Euclidean-orthonormal basis of the hyperplane orthogonal to y, shape
    (..., n-1, n), via a Householder reflection (no polar-axis blowup)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[-1]
    u = y / np.linalg.norm(y, axis=-1, keepdims=True)
    v = u.copy()
    v[..., 0] += np.where(u[..., 0] >= 0.0, 1.0, -1.0)
    vv = np.sum(v * v, axis=-1)
    H = np.eye(n) - 2.0 * v[..., :, None] * v[..., None, :] / vv[..., None, None]
    return np.swapaxes(H[..., 1:], -1, -2)


def _indicatrix_rows(model, p, y, chart):
    """Variational seeds for varying the initial direction inside the
    indicatrix at p.

    Returns (w, rows): w is the density of dnu with respect to the chosen
    tangent basis and rows the (n-1, 2n) batch of (dx=0, dv=dy_a) seeds.  The
    quotient |det[v, J_1..J_{n-1}]| / w downstream is independent of the basis
    choice, so any smooth indicatrix parameterization gives the same density.
    """
    n = model.n
    g = curvature.fundamental_matrix(model, p, y, chart=chart)
    fy = np.einsum("...ij,...j->...i", g, y)
    E = _complement_basis(y)
    coef = np.einsum("...ai,...i->...a", E, fy)
    dy = E - coef[..., None] * y[..., None, :]
    gram = np.einsum("...ai,...ij,...bj->...ab", dy, g, dy)
    w = np.sqrt(np.linalg.det(gram))
    rows = np.concatenate([np.zeros_like(dy), dy], axis=-1)
    return w, rows


def _sigma_hat(model, p, chart, y, w_nu, rows, radii, tag):
    """sigma_hat at each (direction, radius) pair; y, w_nu, rows batched with
    the flattened radii.  Also returns the endpoint states (x, v, chart) so
    callers can evaluate pointwise fields along the same rays."""
    n = model.n
    B = len(radii)
    x0 = np.broadcast_to(np.asarray(p, dtype=float), (B, n))
    xe, ve, ce, rowse = geodesics.integrate_batch(
        model, x0, y, radii, charts=np.full(B, chart), rows=rows)
    J = np.swapaxes(rowse[..., :n], -1, -2)
    M = np.concatenate([ve[:, :, None], J], axis=2)
    dets = np.abs(np.linalg.det(M))
    sig = np.empty(B)
    logdg = np.empty(B)
    for c in np.unique(ce):
        msk = ce == c
        sig[msk] = np.atleast_1d(density(model, xe[msk], tag, chart=int(c)))
        g = curvature.fundamental_matrix(model, xe[msk], ve[msk], chart=int(c))
        logdg[msk] = 0.5 * np.log(np.linalg.det(g))
    sigma_hat = sig * dets / w_nu
    tau = logdg - np.log(sig)
    return sigma_hat, tau, xe, ve, ce


def polar_density(model: MetricModel, p, y, r: float, kind, chart: int = 0,
                  step: float = 1e-4) -> PolarDensity:
    """Density sigma_hat(r, y) of the measure in polar coordinates around p,
    with the radial log-derivative H(r, y) = d/dr log(sigma_hat e^tau).

    sigma_hat is sigma(exp_p(r y)) times the Jacobian of (r, y) -> exp_p(r y),
    the Jacobian coming from variational (Jacobi) rows carried through the
    geodesic flow.  y is scaled onto the indicatrix; H uses fourth-order
    central differences with step min(step, r/4).
    """
    tag = _tag(kind)
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    r = float(r)
    if r <= 0.0:
        raise ParameterError("polar density requires r > 0")
    if r >= model.injectivity_bound():
        raise RadiusError(
            f"radius {r} reaches the injectivity bound {model.injectivity_bound()}")
    y = y / model.metric(p, y, chart=chart)
    w_nu, rows = _indicatrix_rows(model, p, y, chart)
    h = min(float(step), 0.25 * r)
    radii = np.array([r, r - 2 * h, r - h, r + h, r + 2 * h])
    yb = np.broadcast_to(y, (5, model.n))
    rowsb = np.broadcast_to(rows, (5,) + rows.shape)
    sh, tau, _, _, _ = _sigma_hat(model, p, chart, yb, w_nu, rowsb, radii, tag)
    L = np.log(sh) + tau
    H = (L[1] - 8.0 * L[2] + 8.0 * L[3] - L[4]) / (12.0 * h)
    return PolarDensity(p=p, chart=chart, y=y, r=r, sigma_hat=float(sh[0]),
                        H=float(H), kind=tag)


# -- ball measures ------------------------------------------------------------------


@dataclass
class BallEstimate:
    """Monte Carlo estimate of the measure of a forward metric ball."""

    value: float
    standard_error: float
    count: int
    radius: float
    effective_radius: float
    truncated: bool
    kind: str
    seed: int


def ball_measure(model: MetricModel, p, R: float, kind, count: int, seed: int,
                 chart: int = 0, radial_nodes: int = 8) -> BallEstimate:
    """Measure of the forward ball B+_p(R): directions drawn from dnu, the
    radial integral of sigma_hat done by Gauss-Legendre per direction.

    Radii are truncated at the injectivity bound (flagged in the result),
    which slightly undercounts balls whose radius reaches it.  Deterministic
    for fixed (seed, count); extending count keeps earlier directions.
    """
    tag = _tag(kind)
    if R <= 0.0:
        raise ParameterError("ball radius must be positive")
    if count < 2:
        raise SamplingError("ball_measure needs count >= 2 for an error bar")
    if radial_nodes < 2:
        raise SamplingError("radial_nodes must be at least 2")
    p = np.asarray(p, dtype=float)
    n = model.n
    bound = min(float(R), model.injectivity_bound())
    truncated = bound < float(R)

    y = indicatrix.sample_directions(model, p, count, seed, "ball-measure",
                                     chart=chart)
    w_nu, rows = _indicatrix_rows(model, np.broadcast_to(p, y.shape), y, chart)

    sq, wq = np.polynomial.legendre.leggauss(radial_nodes)
    sq = 0.5 * (sq + 1.0)
    wq = 0.5 * wq
    radii = np.tile(bound * sq, count)
    yb = np.repeat(y, radial_nodes, axis=0)
    rowsb = np.repeat(rows, radial_nodes, axis=0)
    wb = np.repeat(w_nu, radial_nodes)
    sh = _sigma_hat(model, p, chart, yb, wb, rowsb, radii, tag)[0]
    integrals = bound * (sh.reshape(count, radial_nodes) @ wq)

    nu_tot = indicatrix.nu_volume(model, p, chart=chart)
    mean = nu_tot * float(np.mean(integrals))
    se = nu_tot * float(np.std(integrals, ddof=1)) / math.sqrt(count)
    # the estimator cannot resolve below its radial quadrature / flow
    # discretization error, so the error bar is floored there; without this a
    # direction-symmetric integrand reports a vanishing MC variance
    se = max(se, 1e-9 * abs(mean))
    return BallEstimate(value=mean, standard_error=se, count=count,
                        radius=float(R), effective_radius=bound,
                        truncated=truncated, kind=tag, seed=seed)
