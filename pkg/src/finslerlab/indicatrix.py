"""Indicatrix parameterization, quadrature, and direction sampling.

The unit sphere S_xM = {y : F(x, y) = 1} of a strongly convex norm is star
shaped around the origin, so every Euclidean direction u meets it at exactly
one point r(x,u)·u.  This module exploits that to parameterize S_xM by
hyperspherical angles, build quadrature rules for integrals against the
induced Riemannian measure dnu (the volume form of g_y restricted to the
indicatrix), and draw dnu-distributed random directions by rejection.

Angle convention (matching :func:`finslerlab.curvature.angles_to_unit`): the
first n-2 angles are polar in [0, pi], the last is azimuthal in [0, 2 pi).
"""

from __future__ import annotations

import math

import numpy as np

from . import curvature, streams
from .errors import ParameterError, QuadratureError, SamplingError

# Default Gauss-Legendre nodes per angle.  Dimensions beyond 3 use a smaller
# default because the grid size grows as nodes**(n-1).
_DEFAULT_NODES = {2: 64, 3: 64}


def default_nodes(n: int) -> int:
    return _DEFAULT_NODES.get(n, 16)


def angle_domain(n: int) -> list[tuple[float, float]]:
    """Integration box for the n-1 hyperspherical angles."""
    if n < 2:
        raise ParameterError("angle parameterization needs n >= 2")
    return [(0.0, math.pi)] * (n - 2) + [(0.0, 2.0 * math.pi)]


def angle_grid(n: int, nodes: int | None = None):
    """Product Gauss-Legendre grid on the angle box.

    Returns (thetas, weights) with thetas of shape (M, n-1) and plain product
    quadrature weights (no area element; geometric factors belong to the
    integrand, see :func:`measure_weights`).
    """
    m = default_nodes(n) if nodes is None else int(nodes)
    if m < 2:
        raise ParameterError("need at least 2 quadrature nodes per angle")
    base, wbase = np.polynomial.legendre.leggauss(m)
    axes, waxes = [], []
    for lo, hi in angle_domain(n):
        half = 0.5 * (hi - lo)
        axes.append(lo + half * (base + 1.0))
        waxes.append(half * wbase)
    grids = np.meshgrid(*axes, indexing="ij")
    thetas = np.stack([g.reshape(-1) for g in grids], axis=-1)
    w = waxes[0]
    for wa in waxes[1:]:
        w = np.multiply.outer(w, wa)
    return thetas, w.reshape(-1)


def unit_jacobian(thetas: np.ndarray, n: int) -> np.ndarray:
    """d u / d theta for the hyperspherical map, shape (..., n, n-1).

    Valid away from the polar-axis singularities sin(theta_a) = 0; interior
    Gauss-Legendre nodes never hit them.
    """
    thetas = np.asarray(thetas, dtype=float)
    u = curvature.angles_to_unit(thetas, n)
    out = np.zeros(thetas.shape[:-1] + (n, n - 1))
    if n == 2:
        th = thetas[..., 0]
        out[..., 0, 0] = -np.sin(th)
        out[..., 1, 0] = np.cos(th)
        return out
    sin = np.sin(thetas)
    cos = np.cos(thetas)
    cot = cos / sin
    sprod = np.ones(thetas.shape[:-1])
    for i in range(n - 1):
        # u_i = cos(theta_i) * prod_{j<i} sin(theta_j)
        out[..., i, i] = -sin[..., i] * sprod
        for a in range(i):
            out[..., i, a] = u[..., i] * cot[..., a]
        sprod = sprod * sin[..., i]
    # u_{n-1} = prod_{j<=n-2} sin(theta_j)
    for a in range(n - 1):
        out[..., n - 1, a] = u[..., n - 1] * cot[..., a]
    return out


def euclidean_sphere_jacobian(thetas: np.ndarray, n: int) -> np.ndarray:
    """Area element of the round unit sphere in hyperspherical angles:
    prod_{j<=n-3} sin(theta_j)^(n-2-j)."""
    thetas = np.asarray(thetas, dtype=float)
    out = np.ones(thetas.shape[:-1])
    for j in range(n - 2):
        out = out * np.sin(thetas[..., j]) ** (n - 2 - j)
    return out


def radial_scale(model, x, u, chart: int = 0, tol: float = 1e-12,
                 max_iter: int = 50) -> np.ndarray:
    """r(x, u) > 0 with F(x, r u) = 1, solved by Newton from the exact
    homogeneous start r = 1/F(x, u)."""
    u = np.asarray(u, dtype=float)
    fu = model.metric(x, u, chart=chart)
    r = 1.0 / fu
    for _ in range(max_iter):
        res = model.metric(x, r[..., None] * u, chart=chart) - 1.0
        if np.max(np.abs(res)) <= tol:
            return r
        # dF/dr = F(x, u), constant along the ray by homogeneity
        r = r - res / fu
    res = model.metric(x, r[..., None] * u, chart=chart) - 1.0
    if np.max(np.abs(res)) > tol:
        raise QuadratureError(
            f"radial solve did not reach |F-1| <= {tol}: residual "
            f"{np.max(np.abs(res)):.3e}"
        )
    return r


def indicatrix_points(model, x, thetas, chart: int = 0):
    """Map angles to indicatrix points.  Returns (y, r, u)."""
    n = model.n
    u = curvature.angles_to_unit(np.asarray(thetas, dtype=float), n)
    x = np.broadcast_to(np.asarray(x, dtype=float), u.shape[:-1] + (n,))
    r = radial_scale(model, x, u, chart=chart)
    return r[..., None] * u, r, u


def measure_weights(model, x, thetas, chart: int = 0) -> np.ndarray:
    """Density of dnu with respect to d theta at each grid angle.

    dnu is the Riemannian volume induced on S_xM by the fundamental tensor:
    w = sqrt(det[ g_y(dy/dtheta_a, dy/dtheta_b) ]) with y(theta) the radial
    parameterization.
    """
    n = model.n
    thetas = np.asarray(thetas, dtype=float)
    y, r, u = indicatrix_points(model, x, thetas, chart=chart)
    xb = np.broadcast_to(np.asarray(x, dtype=float), y.shape)
    g = curvature.fundamental_matrix(model, xb, y, chart)
    du = unit_jacobian(thetas, n)
    # F = 1 on the indicatrix, so the fiber gradient of F is g y.
    fy = np.einsum("...ij,...j->...i", g, y)
    dr = -(r * r)[..., None] * np.einsum("...i,...ia->...a", fy, du)
    dy = dr[..., None, :] * u[..., :, None] + r[..., None, None] * du
    gram = np.einsum("...ia,...ij,...jb->...ab", dy, g, dy)
    if n == 2:
        det = gram[..., 0, 0]
    else:
        det = np.linalg.det(gram)
    return np.sqrt(np.maximum(det, 0.0))


def nu_volume(model, x, nodes: int | None = None, chart: int = 0) -> float:
    """Total induced measure nu(S_xM)."""
    thetas, w = angle_grid(model.n, nodes)
    dens = measure_weights(model, x, thetas, chart=chart)
    return float(np.sum(dens * w))


def sample_directions(model, x, count: int, seed: int, label: str,
                      chart: int = 0, nodes: int | None = None,
                      max_attempts: int = 256) -> np.ndarray:
    """Draw ``count`` indicatrix points distributed by dnu.

    Rejection sampling over the angle box with a constant envelope set to
    1.5x the grid maximum of the density.  Draws are addressed per output
    index, so enlarging ``count`` never changes earlier samples.
    """
    n = model.n
    thetas, _ = angle_grid(n, nodes)
    dens = measure_weights(model, x, thetas, chart=chart)
    bound = 1.5 * float(np.max(dens))
    if bound <= 0.0:
        raise SamplingError("indicatrix density vanished on the whole grid")
    domain = angle_domain(n)
    out = np.empty((count, n))
    pending = np.arange(count)
    # Each attempt consumes n slots per index: n-1 angle draws + 1 accept draw.
    for attempt in range(max_attempts):
        if pending.size == 0:
            break
        base = attempt * n
        th = np.stack(
            [
                lo + (hi - lo) * streams.uniforms(seed, label, pending, slot=base + j)
                for j, (lo, hi) in enumerate(domain)
            ],
            axis=-1,
        )
        accept_u = streams.uniforms(seed, label, pending, slot=base + n - 1)
        w = measure_weights(model, x, th, chart=chart)
        if np.any(w > bound):
            raise SamplingError(
                "rejection envelope exceeded; increase the grid resolution "
                "used to estimate the bound"
            )
        hit = accept_u * bound < w
        if np.any(hit):
            y, _, _ = indicatrix_points(model, x, th[hit], chart=chart)
            out[pending[hit]] = y
            pending = pending[~hit]
    if pending.size:
        raise SamplingError(
            f"{pending.size} of {count} directions still unsampled after "
            f"{max_attempts} attempts"
        )
    return out
