"""Spray, connections, and curvature operators.

Everything is computed from exact truncated-Taylor jets of F^2 in the 2n
variables (x, y); no finite differencing is used outside the test oracles.
Two independent curvature routes are provided: the spray-curvature operator
R^i_k from second derivatives of the spray, and the component tensor
R^i_{jkl} from horizontal derivatives of the connection coefficients.  They
are cross-checked in the test suite via R^i_k = y^j R^i_{jkl} y^l.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import jets
from .errors import DegenerateDirectionError
from .streams import normals

CHUNK = 8192


def _e(nvars, *ks):
    a = [0] * nvars
    for k in ks:
        a[k] += 1
    return tuple(a)


def _concat_xy(x, v):
    return np.concatenate(
        [np.asarray(x, dtype=float), np.asarray(v, dtype=float)], axis=-1
    )


# ---------------------------------------------------------------------------
# pointwise tensors from jets


def fundamental_matrix(model, x, y, chart: int = 0) -> np.ndarray:
    """g_ij(x, y) = (1/2) d^2 F^2 / dy^i dy^j, batched (..., n, n).

    Direction-independent families answer through their closed-form matrix;
    everything else goes through the jet Hessian, which stays the reference
    route for tests.
    """
    closed = getattr(model, "metric_matrix", None)
    if closed is not None:
        g = closed(x, chart)
        if g is not None:
            shape = np.broadcast_shapes(np.asarray(x).shape[:-1],
                                        np.asarray(y).shape[:-1])
            return np.broadcast_to(g, shape + g.shape[-2:]).copy()
    return fundamental_matrix_jet(model, x, y, chart)


def fundamental_matrix_jet(model, x, y, chart: int = 0) -> np.ndarray:
    """The jet-Hessian route for g, valid for every model."""
    n = model.n
    f2 = model.f2_jet(x, y, 2, chart)
    g = np.empty(f2.value.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            gij = 0.5 * f2.partial(_e(2 * n, n + i, n + j))
            g[..., i, j] = gij
            g[..., j, i] = gij
    return g


def cartan_array(model, x, y, chart: int = 0) -> np.ndarray:
    """Cartan tensor A_ijk = (F/4) d^3 F^2 / dy^i dy^j dy^k, (..., n, n, n)."""
    n = model.n
    f2 = model.f2_jet(x, y, 3, chart)
    fac = 0.25 * np.sqrt(f2.value)
    A = np.empty(f2.value.shape + (n, n, n))
    for i in range(n):
        for j in range(i, n):
            for k in range(j, n):
                val = fac * f2.partial(_e(2 * n, n + i, n + j, n + k))
                for p in ((i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)):
                    A[..., p[0], p[1], p[2]] = val
    return A


# ---------------------------------------------------------------------------
# spray as a jet


def jet_matrix_inverse(g: list) -> list:
    """Inverse of a jet-valued matrix with invertible value part.

    Uses the Neumann series (I - X + X^2 - ...) M0 with X = M0 (g - g0),
    which terminates at the truncation order since X is nilpotent.
    """
    n = len(g)
    space = g[0][0].space
    batch = g[0][0].value.shape
    g0 = np.empty(batch + (n, n))
    for i in range(n):
        for j in range(n):
            g0[..., i, j] = g[i][j].value
    M0 = np.linalg.inv(g0)

    X = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            acc = None
            for k in range(n):
                t = (g[k][j] - g0[..., k, j]) * M0[..., i, k]
                acc = t if acc is None else acc + t
            X[i][j] = acc

    eye = [[jets.constant(space, np.full(batch, 1.0 if i == j else 0.0))
            for j in range(n)] for i in range(n)]
    series = [[eye[i][j] - X[i][j] for j in range(n)] for i in range(n)]
    power = X
    sign = 1.0
    for _ in range(space.order - 1):
        power = _jm_mul(power, X)
        series = [[series[i][j] + power[i][j] * sign for j in range(n)]
                  for i in range(n)]
        sign = -sign

    inv = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            acc = None
            for k in range(n):
                t = series[i][k] * M0[..., k, j]
                acc = t if acc is None else acc + t
            inv[i][j] = acc
    return inv


def _jm_mul(A, B):
    n = len(A)
    out = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            acc = None
            for k in range(n):
                t = A[i][k] * B[k][j]
                acc = t if acc is None else acc + t
            out[i][j] = acc
    return out


def spray_jet(model, x, v, order: int = 2, chart: int = 0, f2=None) -> list:
    """The spray coefficients G^i as jets of the given order.

    Solves 4 g_il G^l = y^k [F^2]_{x^k y^l} - [F^2]_{x^l} in jet arithmetic.
    """
    n = model.n
    if f2 is None:
        f2 = model.f2_jet(x, v, order + 2, chart)
    tspace = jets.jet_space(2 * n, order)
    dgy = [f2.derivative(n + i) for i in range(n)]
    g = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            gij = dgy[i].derivative(n + j) * 0.5
            g[i][j] = gij
            g[j][i] = gij
    dx = [f2.derivative(k) for k in range(n)]
    yvars = jets.variables(tspace, _concat_xy(x, v))[n:]
    H = []
    for l in range(n):
        acc = None
        for k in range(n):
            t = yvars[k] * dx[k].derivative(n + l)
            acc = t if acc is None else acc + t
        H.append(acc - dx[l].truncate(order))
    ginv = jet_matrix_inverse(g)
    G = []
    for i in range(n):
        acc = None
        for l in range(n):
            t = ginv[i][l] * H[l]
            acc = t if acc is None else acc + t
        G.append(acc * 0.25)
    return G


def spray_from_jets(model, x, v, chart: int = 0) -> np.ndarray:
    n = model.n
    v = np.asarray(v, dtype=float)
    f2 = model.f2_jet(x, v, 2, chart)
    g = np.empty(f2.value.shape + (n, n))
    for i in range(n):
        for j in range(i, n):
            gij = 0.5 * f2.partial(_e(2 * n, n + i, n + j))
            g[..., i, j] = gij
            g[..., j, i] = gij
    H = np.empty(f2.value.shape + (n,))
    for l in range(n):
        s = -f2.partial(_e(2 * n, l))
        for k in range(n):
            s = s + v[..., k] * f2.partial(_e(2 * n, k, n + l))
        H[..., l] = s
    return 0.25 * np.linalg.solve(g, H[..., None])[..., 0]


def spray_jac_from_jets(model, x, v, chart: int = 0):
    n = model.n
    G = spray_jet(model, x, v, order=1, chart=chart)
    batch = G[0].value.shape
    val = np.empty(batch + (n,))
    Gx = np.empty(batch + (n, n))
    Gv = np.empty(batch + (n, n))
    for i in range(n):
        val[..., i] = G[i].value
        for k in range(n):
            Gx[..., i, k] = G[i].partial(_e(2 * n, k))
            Gv[..., i, k] = G[i].partial(_e(2 * n, n + k))
    return val, Gx, Gv


# ---------------------------------------------------------------------------
# curvature, route 1: spray curvature operator


def spray_curvature(model, x, v, chart: int = 0, spray_jets=None) -> np.ndarray:
    """R^i_k = 2 dG^i/dx^k - y^j d^2G^i/dx^j dy^k + 2 G^j d^2G^i/dy^j dy^k
    - dG^i/dy^j dG^j/dy^k, shaped (..., n, n).  Annihilates y."""
    n = model.n
    v = np.asarray(v, dtype=float)
    G = spray_jets if spray_jets is not None else spray_jet(model, x, v, 2, chart)
    batch = G[0].value.shape
    val = np.empty(batch + (n,))
    Gx = np.empty(batch + (n, n))
    Gv = np.empty(batch + (n, n))
    Gxy = np.empty(batch + (n, n, n))
    Gyy = np.empty(batch + (n, n, n))
    for i in range(n):
        val[..., i] = G[i].value
        for j in range(n):
            Gx[..., i, j] = G[i].partial(_e(2 * n, j))
            Gv[..., i, j] = G[i].partial(_e(2 * n, n + j))
            for k in range(n):
                Gxy[..., i, j, k] = G[i].partial(_e(2 * n, j, n + k))
                Gyy[..., i, j, k] = G[i].partial(_e(2 * n, n + j, n + k))
    R = 2.0 * Gx
    R -= np.einsum("...j,...ijk->...ik", v, Gxy)
    R += 2.0 * np.einsum("...j,...ijk->...ik", val, Gyy)
    R -= np.einsum("...ij,...jk->...ik", Gv, Gv)
    return R


# ---------------------------------------------------------------------------
# curvature, route 2: horizontal derivatives of the Chern connection


@dataclass
class ConnectionAtSample:
    """gamma, N, chern, spray at one (or a batch of) tangent sample(s)."""

    gamma: np.ndarray
    N: np.ndarray
    chern: np.ndarray
    spray: np.ndarray


def connection(model, x, y, chart: int = 0) -> ConnectionAtSample:
    """Formal Christoffel gamma^i_jk, nonlinear connection N^i_j, spray G^i,
    and Chern coefficients Gamma^i_jk resolved from the structure equations."""
    n = model.n
    y = np.asarray(y, dtype=float)
    f2 = model.f2_jet(x, y, 3, chart)
    batch = f2.value.shape
    F = np.sqrt(f2.value)

    g = np.empty(batch + (n, n))
    dg = np.empty(batch + (n, n, n))  # dg[..., i, j, k] = d g_ij / d x^k
    A = np.empty(batch + (n, n, n))
    fac = 0.25 * F
    for i in range(n):
        for j in range(i, n):
            gij = 0.5 * f2.partial(_e(2 * n, n + i, n + j))
            g[..., i, j] = gij
            g[..., j, i] = gij
            for k in range(n):
                dgij = 0.5 * f2.partial(_e(2 * n, n + i, n + j, k))
                dg[..., i, j, k] = dgij
                dg[..., j, i, k] = dgij
            for k in range(j, n):
                val = fac * f2.partial(_e(2 * n, n + i, n + j, n + k))
                for p in ((i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)):
                    A[..., p[0], p[1], p[2]] = val
    ginv = np.linalg.inv(g)

    # gamma^i_jk = (1/2) g^{il} (dg_lj/dx^k + dg_lk/dx^j - dg_jk/dx^l)
    term = np.empty_like(dg)
    for l in range(n):
        for j in range(n):
            for k in range(n):
                term[..., l, j, k] = dg[..., l, j, k] + dg[..., l, k, j] - dg[..., j, k, l]
    gamma = 0.5 * np.einsum("...il,...ljk->...ijk", ginv, term)

    Gjets = spray_jet(model, x, y, order=1, chart=chart, f2=f2)
    G = np.stack([Gi.value for Gi in Gjets], axis=-1)
    N = np.empty(batch + (n, n))
    for i in range(n):
        for j in range(n):
            N[..., i, j] = Gjets[i].partial(_e(2 * n, n + j))

    # correction term of the Chern resolution:
    # corr_{ljk} = A_{ljm} N^m_k + A_{lkm} N^m_j - A_{jkm} N^m_l
    corr = np.empty(batch + (n, n, n))
    ANm = np.einsum("...abm,...mc->...abc", A, N)  # A_{abm} N^m_c
    for l in range(n):
        for j in range(n):
            for k in range(n):
                corr[..., l, j, k] = ANm[..., l, j, k] + ANm[..., l, k, j] - ANm[..., j, k, l]
    chern = gamma - np.einsum("...il,...ljk->...ijk", ginv, corr) / F[..., None, None, None]
    return ConnectionAtSample(gamma=gamma, N=N, chern=chern, spray=G)


def chern_curvature(model, x, y, chart: int = 0) -> np.ndarray:
    """R^i_{jkl} from horizontal derivatives of the Chern coefficients:
    R^i_{jkl} = delta_k Gamma^i_{jl} - delta_l Gamma^i_{jk}
    + Gamma^i_{mk} Gamma^m_{jl} - Gamma^i_{ml} Gamma^m_{jk},
    with delta_k = d/dx^k - N^m_k d/dy^m.  Shape (..., n, n, n, n)."""
    n = model.n
    f2 = model.f2_jet(x, y, 4, chart)
    batch = f2.value.shape

    # order-1 jets of every ingredient
    g2 = [[None] * n for _ in range(n)]
    for i in range(n):
        di = f2.derivative(n + i)
        for j in range(i, n):
            gij = di.derivative(n + j) * 0.5
            g2[i][j] = gij
            g2[j][i] = gij
    g1 = [[g2[i][j].truncate(1) for j in range(n)] for i in range(n)]
    ginv = jet_matrix_inverse(g1)
    dgx = [[[g2[i][j].derivative(k) for k in range(n)] for j in range(n)]
           for i in range(n)]

    Fjet = f2.truncate(1).sqrt()
    Finv = Fjet.reciprocal()
    A = [[[None] * n for _ in range(n)] for _ in range(n)]
    for i in range(n):
        di = f2.derivative(n + i)
        for j in range(i, n):
            dij = di.derivative(n + j)
            for k in range(j, n):
                val = dij.derivative(n + k) * Fjet * 0.25
                for p in ((i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)):
                    A[p[0]][p[1]][p[2]] = val

    Gjets = spray_jet(model, x, y, order=2, chart=chart, f2=f2)
    N = [[Gjets[i].derivative(n + j) for j in range(n)] for i in range(n)]

    chern = [[[None] * n for _ in range(n)] for _ in range(n)]
    for j in range(n):
        for k in range(j, n):
            for i in range(n):
                acc = None
                for l in range(n):
                    t1 = dgx[l][j][k] + dgx[l][k][j] - dgx[j][k][l]
                    corr = None
                    for m in range(n):
                        c = A[l][j][m] * N[m][k] + A[l][k][m] * N[m][j] - A[j][k][m] * N[m][l]
                        corr = c if corr is None else corr + c
                    t = ginv[i][l] * (t1 * 0.5 - Finv * corr)
                    acc = t if acc is None else acc + t
                chern[i][j][k] = acc
                chern[i][k][j] = acc

    Nval = np.empty(batch + (n, n))
    for i in range(n):
        for j in range(n):
            Nval[..., i, j] = N[i][j].value
    Gam = np.empty(batch + (n, n, n))
    dGx = np.empty(batch + (n, n, n, n))
    dGy = np.empty(batch + (n, n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                cjet = chern[i][j][k]
                Gam[..., i, j, k] = cjet.value
                for a in range(n):
                    dGx[..., i, j, k, a] = cjet.partial(_e(2 * n, a))
                    dGy[..., i, j, k, a] = cjet.partial(_e(2 * n, n + a))

    # hor[..., i, j, l, a] = delta_a Gamma^i_{jl}
    hor = dGx - np.einsum("...ijlm,...ma->...ijla", dGy, Nval)
    R = (
        np.swapaxes(hor, -2, -1)
        - hor
        + np.einsum("...imk,...mjl->...ijkl", Gam, Gam)
        - np.einsum("...iml,...mjk->...ijkl", Gam, Gam)
    )
    return R


# ---------------------------------------------------------------------------
# flag curvature, Ricci, min Ricci


def flag_curvature(model, x, y, V, chart: int = 0) -> np.ndarray:
    """K(y, V) = g_y(V, R_y V) / (F^2 g_y(V,V) - g_y(y,V)^2)."""
    y = np.asarray(y, dtype=float)
    V = np.asarray(V, dtype=float)
    g = fundamental_matrix(model, x, y, chart)
    R = spray_curvature(model, x, y, chart)
    F2 = np.einsum("...i,...ij,...j->...", y, g, y)
    gVV = np.einsum("...i,...ij,...j->...", V, g, V)
    gyV = np.einsum("...i,...ij,...j->...", y, g, V)
    den = F2 * gVV - gyV ** 2
    if np.any(den <= 1e-12 * F2 * gVV):
        raise DegenerateDirectionError("flag pole and transverse vector are parallel")
    num = np.einsum("...i,...ij,...jk,...k->...", V, g, R, V)
    return num / den


def gram_schmidt(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """g-orthonormal basis with first vector y / sqrt(g(y,y)); remaining
    vectors from coordinate axes in deterministic order, (..., n, n) rows."""
    n = g.shape[-1]
    batch = g.shape[:-2]
    basis = np.zeros(batch + (n, n))
    norm0 = np.sqrt(np.einsum("...i,...ij,...j->...", y, g, y))
    basis[..., 0, :] = y / norm0[..., None]
    filled = 1
    for axis in range(n):
        if filled == n:
            break
        cand = np.zeros(batch + (n,))
        cand[..., axis] = 1.0
        for j in range(filled):
            prev = basis[..., j, :]
            proj = np.einsum("...i,...ij,...j->...", cand, g, prev)
            cand = cand - proj[..., None] * prev
        norm = np.sqrt(np.einsum("...i,...ij,...j->...", cand, g, cand))
        if np.all(norm > 1e-8):
            basis[..., filled, :] = cand / norm[..., None]
            filled += 1
    if filled < n:
        raise DegenerateDirectionError("could not complete a g-orthonormal basis")
    return basis


def ricci(model, x, y, chart: int = 0) -> np.ndarray:
    """Ric(y) = sum of flag curvatures over a g_y-orthonormal completion of
    y/F; 0-homogeneous."""
    y = np.asarray(y, dtype=float)
    g = fundamental_matrix(model, x, y, chart)
    R = spray_curvature(model, x, y, chart)
    F2 = np.einsum("...i,...ij,...j->...", y, g, y)
    basis = gram_schmidt(g, y)
    gR = np.einsum("...ij,...jk->...ik", g, R)
    total = 0.0
    for a in range(1, model.n):
        e = basis[..., a, :]
        total = total + np.einsum("...i,...ij,...j->...", e, gR, e)
    return total / F2


def ricci_trace(model, x, y, chart: int = 0) -> np.ndarray:
    """Ric(y) as trace(R_y)/F^2; equals the basis sum since R_y y = 0."""
    fast = _ricci_fast(model, x, y, chart)
    if fast is not None:
        return fast
    y = np.asarray(y, dtype=float)
    R = spray_curvature(model, x, y, chart)
    F = model.metric(x, y, chart)
    return np.trace(R, axis1=-2, axis2=-1) / F ** 2


def _ricci_fast(model, x, y, chart: int = 0):
    closed = getattr(model, "ricci_closed", None)
    if closed is None:
        return None
    return closed(x, y, chart)


def ricci_batch(model, x, y, chart: int = 0, chunk: int = CHUNK) -> np.ndarray:
    """Chunked Ricci evaluation for large batches."""
    fast = _ricci_fast(model, x, y, chart)
    if fast is not None:
        return fast
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    flat_x = x.reshape(-1, model.n)
    flat_y = y.reshape(-1, model.n)
    out = np.empty(flat_x.shape[0])
    for lo in range(0, flat_x.shape[0], chunk):
        hi = min(lo + chunk, flat_x.shape[0])
        out[lo:hi] = ricci_trace(model, flat_x[lo:hi], flat_y[lo:hi], chart)
    return out.reshape(x.shape[:-1])


def angles_to_unit(angles: np.ndarray, n: int) -> np.ndarray:
    """Hyperspherical angles (n-1 of them) to a unit vector in R^n."""
    angles = np.asarray(angles, dtype=float)
    if n == 2:
        th = angles[..., 0]
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    out = np.empty(angles.shape[:-1] + (n,))
    sprod = np.ones(angles.shape[:-1])
    for i in range(n - 1):
        out[..., i] = sprod * np.cos(angles[..., i])
        sprod = sprod * np.sin(angles[..., i])
    out[..., n - 1] = sprod
    return out


def unit_to_angles(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    n = u.shape[-1]
    if n == 2:
        return np.arctan2(u[..., 1], u[..., 0])[..., None]
    angles = np.empty(u.shape[:-1] + (n - 1,))
    rest = np.ones(u.shape[:-1])
    for i in range(n - 1):
        c = np.clip(u[..., i] / np.where(rest > 1e-300, rest, 1.0), -1.0, 1.0)
        angles[..., i] = np.arccos(c)
        rest = rest * np.sin(angles[..., i])
    # recover the sign of the last angle from the final two components
    last = np.arctan2(u[..., n - 1], u[..., n - 2])
    angles[..., n - 2] = last
    return angles


_GRID_PHASE = 0.3819660112501051  # keeps grid rays off the coordinate
# hyperplanes, where product metrics lose smoothness


def direction_grid(n: int, budget: int | None = None) -> np.ndarray:
    """Deterministic Euclidean unit-direction grid used by min_ricci."""
    if n == 2:
        m = 128 if budget is None else budget
        th = 2.0 * np.pi * (np.arange(m) + _GRID_PHASE) / m
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    if n == 3:
        per = 48 if budget is None else max(8, int(math.sqrt(budget)))
        th = np.pi * (np.arange(per) + 0.5 + _GRID_PHASE / 7.0) / per
        ph = 2.0 * np.pi * (np.arange(2 * per) + _GRID_PHASE) / (2 * per)
        TH, PH = np.meshgrid(th, ph, indexing="ij")
        u = np.stack(
            [np.sin(TH) * np.cos(PH), np.sin(TH) * np.sin(PH), np.cos(TH)], axis=-1
        )
        return u.reshape(-1, 3)
    m = 4096 if budget is None else budget
    g = np.stack(
        [normals(0, f"ricci-grid{n}", np.arange(m), slot=j) for j in range(n)],
        axis=-1,
    )
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def min_ricci(model, x, chart: int = 0, budget: int | None = None,
              polish: bool = True):
    """Minimum of Ric over the indicatrix at x: grid search plus a
    Nelder-Mead polish.  Returns (value, argmin direction with F = 1)."""
    n = model.n
    x = np.asarray(x, dtype=float)
    K = getattr(model, "constant_flag_curvature", None)
    if K is not None:
        u = np.zeros(n)
        u[0] = 1.0
        y = u / model.metric(x, u, chart)
        return (n - 1) * K, y
    dirs = direction_grid(n, budget)
    xs = np.broadcast_to(x, (dirs.shape[0], n))
    ric = ricci_batch(model, xs, dirs, chart)
    i0 = int(np.argmin(ric))
    best_val = float(ric[i0])
    best_u = dirs[i0]
    if polish:
        th0 = unit_to_angles(best_u)

        def objective(th):
            u = angles_to_unit(np.asarray(th), n)
            return float(ricci_trace(model, x[None], u[None], chart)[0])

        res = optimize.minimize(
            objective, np.atleast_1d(th0), method="Nelder-Mead",
            options={"xatol": 1e-7, "fatol": 1e-12, "maxiter": 400},
        )
        if res.fun < best_val:
            best_val = float(res.fun)
            best_u = angles_to_unit(np.atleast_1d(res.x), n)
    y = best_u / model.metric(x, best_u, chart)
    return best_val, y


def min_ricci_batch(model, xs, chart: int = 0, directions: int = 32) -> np.ndarray:
    """Grid-only pointwise minimum Ricci over many points at once.

    Used inside Monte Carlo integrands where a polish per sample is
    unaffordable; the coarser grid biases the minimum slightly upward,
    which is conservative for deficit integrals on the verified side.
    """
    xs = np.asarray(xs, dtype=float)
    n = model.n
    K = getattr(model, "constant_flag_curvature", None)
    if K is not None:
        return np.full(xs.shape[:-1], (n - 1) * K)
    dirs = direction_grid(n, directions if n == 2 else directions ** 2)
    m = dirs.shape[0]
    pts = np.repeat(xs.reshape(-1, n), m, axis=0)
    dd = np.tile(dirs, (xs.reshape(-1, n).shape[0], 1))
    ric = ricci_batch(model, pts, dd, chart)
    return ric.reshape(xs.shape[:-1] + (m,)).min(axis=-1)
