"""Nodal domains, Courant counts, doubling indices and the local inequalities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import DisjointSet

from .field import GridField, TorusGrid, gradient
from .spectrum import EigenSystem, GroundGauge

DEFAULT_DELTA = 1e-3
DELTA_SWEEP = (1e-4, 1e-3, 1e-2)


# -- nodal domains ------------------------------------------------------------

@dataclass(frozen=True)
class NodalDecomposition:
    labels: np.ndarray  # 0 marks the zero band
    domain_count: int
    delta: float
    signs: np.ndarray  # sign of domain i+1


def nodal_domains(u: GridField, delta: float = DEFAULT_DELTA) -> NodalDecomposition:
    """Same-sign connected components of {|u| > delta ||u||_inf}, 4-neighbour, periodic."""
    if not 0.0 <= delta <= 0.1:
        raise ValueError("delta must lie in [0, 0.1]")
    vals = u.values
    umax = np.max(np.abs(vals))
    if umax == 0.0:
        raise ValueError("u vanishes identically")
    thr = delta * umax
    pos = vals > thr
    neg = vals < -thr
    lab_p, n_p = ndimage.label(pos)
    lab_n, n_n = ndimage.label(neg)
    raw = np.where(pos, lab_p, 0) + np.where(neg, lab_n + n_p, 0) * neg

    ds = DisjointSet(range(1, n_p + n_n + 1))
    for ax in range(vals.ndim):
        first = np.take(raw, 0, axis=ax)
        last = np.take(raw, -1, axis=ax)
        both = (first > 0) & (last > 0)
        # adjacent across the seam and of equal sign
        same = both & (np.sign(np.take(vals, 0, axis=ax)) == np.sign(np.take(vals, -1, axis=ax)))
        for a, b in zip(first[same].ravel(), last[same].ravel()):
            ds.merge(int(a), int(b))

    # relabel by first appearance in C order
    roots = {}
    out = np.zeros(vals.shape, dtype=np.int64)
    flat_raw = raw.ravel()
    flat_out = out.ravel()
    signs = []
    root_of = np.zeros(n_p + n_n + 1, dtype=np.int64)
    for lab in range(1, n_p + n_n + 1):
        root_of[lab] = ds[lab]
    nz = np.flatnonzero(flat_raw)
    root_seq = root_of[flat_raw[nz]]
    _, first_idx = np.unique(root_seq, return_index=True)
    for new, pos_i in enumerate(sorted(first_idx), start=1):
        roots[int(root_seq[pos_i])] = new
        signs.append(1 if vals.ravel()[nz[pos_i]] > 0 else -1)
    mapping = np.zeros(n_p + n_n + 1, dtype=np.int64)
    for lab in range(1, n_p + n_n + 1):
        mapping[lab] = roots[int(root_of[lab])]
    flat_out[nz] = mapping[flat_raw[nz]]
    return NodalDecomposition(out, len(signs), float(delta), np.array(signs, dtype=int))


def courant_ranks(es: EigenSystem) -> list[int]:
    """1-based rank of each eigenfunction; a degenerate cluster takes its highest rank."""
    ranks = [0] * es.m
    for group in es.clusters():
        for k in group:
            ranks[k] = max(group) + 1
    return ranks


@dataclass(frozen=True)
class CourantEntry:
    index: int
    rank: int
    domain_count: int
    passed: bool


def courant_check(es: EigenSystem, delta: float = DEFAULT_DELTA) -> list[CourantEntry]:
    out = []
    for k, rank in enumerate(courant_ranks(es)):
        count = nodal_domains(es.function(k), delta).domain_count
        out.append(CourantEntry(k, rank, count, count <= rank))
    return out


def courant_sweep(es: EigenSystem, deltas=DELTA_SWEEP) -> dict[float, list[CourantEntry]]:
    return {float(dl): courant_check(es, dl) for dl in deltas}


# -- ball quadrature -----------------------------------------------------------

def _wrap(grid: TorusGrid, x):
    return np.mod(np.asarray(x, dtype=float), 1.0)


def interpolate(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Periodic (bi)linear interpolation; points are physical coordinates, shape (d, n)."""
    N = values.shape[0]
    coords = np.mod(points, 1.0) * N
    return ndimage.map_coordinates(values, coords, order=1, mode="grid-wrap")


def ball_nodes(grid: TorusGrid, x0, r: float):
    """Quadrature nodes (d, n) and weights for the ball B(x0, r) on the torus.

    1D: composite 3-point Gauss on the pieces cut by grid nodes (exact for
    squares of the linear interpolant).  2D: polar grid, 64 angles and
    Gauss-Legendre radial nodes at roughly two per cell.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    h = grid.h
    if grid.d == 1:
        a, b = x0[0] - r, x0[0] + r
        inner = np.arange(np.ceil(a / h), np.floor(b / h) + 1) * h
        brk = np.unique(np.concatenate([[a], inner[(inner > a) & (inner < b)], [b]]))
        gx, gw = np.polynomial.legendre.leggauss(3)
        lo, hi = brk[:-1, None], brk[1:, None]
        pts = 0.5 * (hi - lo) * gx[None, :] + 0.5 * (hi + lo)
        wts = 0.5 * (hi - lo) * gw[None, :]
        return pts.reshape(1, -1), wts.ravel()
    n_r = max(16, int(np.ceil(2.0 * r / h)))
    n_t = 64
    gx, gw = np.polynomial.legendre.leggauss(n_r)
    rho = 0.5 * r * (gx + 1.0)
    wr = 0.5 * r * gw * rho
    th = 2.0 * np.pi * np.arange(n_t) / n_t
    R, T = np.meshgrid(rho, th, indexing="ij")
    W = np.repeat(wr[:, None], n_t, axis=1) * (2.0 * np.pi / n_t)
    pts = np.stack([x0[0] + R * np.cos(T), x0[1] + R * np.sin(T)]).reshape(2, -1)
    return pts, W.ravel()


def ball_integral(grid: TorusGrid, x0, r: float, *fields, combine=None) -> float:
    """Integral over B(x0, r) of combine(interpolated fields) (default: product)."""
    pts, wts = ball_nodes(grid, x0, r)
    vals = [interpolate(f, pts) for f in fields]
    integrand = combine(*vals) if combine is not None else np.prod(vals, axis=0)
    return float(np.sum(integrand * wts))


# -- doubling index ------------------------------------------------------------

@dataclass(frozen=True)
class DoublingReport:
    x0: tuple
    radii: np.ndarray
    Q: np.ndarray  # at radii
    Q2: np.ndarray  # at 2 * radii
    beta: np.ndarray
    zero_flags: np.ndarray  # Q below 1e-30


def doubling_index(u: GridField, x0, radii) -> DoublingReport:
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(radii > 0.25) or 2 * radii.max() >= 0.5:
        raise ValueError("radii must lie in (0, 1/4) with 2 max(r) < 1/2")
    g = u.grid
    sq = lambda a: a * a
    Q = np.array([ball_integral(g, x0, r, u.values, combine=sq) for r in radii])
    Q2 = np.array([ball_integral(g, x0, 2 * r, u.values, combine=sq) for r in radii])
    flags = (Q < 1e-30) | (Q2 < 1e-30)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(flags, np.nan, np.log2(Q2 / Q))
    return DoublingReport(tuple(np.atleast_1d(x0)), radii, Q, Q2, beta, flags)


def grid_minimum(u: GridField) -> tuple:
    """Physical coordinates of the grid point minimizing |u|."""
    idx = np.unravel_index(np.argmin(np.abs(u.values)), u.values.shape)
    return tuple(i / u.grid.N for i in idx)


# -- Caccioppoli --------------------------------------------------------------

@dataclass(frozen=True)
class CaccioppoliRow:
    r: float
    lhs: float
    rhs: float
    ratio: float


def _laplacian(f: GridField) -> np.ndarray:
    g = f.grid
    k2 = g.k2
    sym = -4.0 * np.pi**2 * np.where(np.any([np.abs(k) == g.N // 2 for k in g.modes], axis=0), 0.0, k2)
    return np.fft.ifftn(sym * np.fft.fftn(f.values)).real


def caccioppoli_verify(gauge: GroundGauge, u: GridField, x0, radii) -> list[CaccioppoliRow]:
    """Ratio of int_{B(r/2)} e^{2Z}|grad u|^2 to
    r^-2 int_{B(r)} e^{2Z} u^2 + r^2 int_{B(r)} e^{2Z} |Lap u + 2 grad Z . grad u|^2."""
    g = u.grid
    weight = np.exp(2.0 * gauge.Z.values)
    gu = gradient(u)
    gz = gradient(gauge.Z)
    grad2 = sum(c * c for c in gu)
    drift = _laplacian(u) + 2.0 * sum(a * b for a, b in zip(gz, gu))
    rows = []
    for r in np.asarray(radii, dtype=float):
        lhs = ball_integral(g, x0, r / 2, weight * grad2)
        mass = ball_integral(g, x0, r, weight * u.values**2)
        src = ball_integral(g, x0, r, weight * drift**2)
        rhs = mass / r**2 + r**2 * src
        if rhs == 0.0:
            raise ValueError("right-hand side vanishes (u = 0 on the ball)")
        rows.append(CaccioppoliRow(float(r), lhs, rhs, lhs / rhs))
    return rows


# -- Aronszajn ----------------------------------------------------------------

_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


def _fd(values: np.ndarray, axis: int, stencil: np.ndarray, h: float, power: int) -> np.ndarray:
    out = np.zeros_like(values)
    for off, c in zip(range(-2, 3), stencil):
        if c:
            out += c * np.roll(values, -off, axis=axis)
    return out / h**power


def _min_image(grid: TorusGrid, x0) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dist2 = np.zeros(grid.shape)
    for c, c0 in zip(grid.coords, x0):
        dx = np.mod(c - c0 + 0.5, 1.0) - 0.5
        dist2 += dx * dx
    return np.sqrt(dist2)


def aronszajn_verify(w: GridField, r: float, beta: float, x0=None) -> float:
    """LHS / (r^2 RHS) for int (|w|^2 + |grad w|^2)|x|^{-2 beta} <= C r^2 int |Lap w|^2 |x|^{-2 beta}.

    Derivatives use local fourth-order differences so that they vanish
    exactly away from the support; this keeps the singular weight harmless.
    """
    g = w.grid
    if x0 is None:
        x0 = (0.0,) * g.d
    if beta < 0 or r > 0.25:
        raise ValueError("need beta >= 0 and r <= 1/4")
    dist = _min_image(g, x0)
    vals = w.values
    scale = max(np.max(np.abs(vals)), 1e-300)
    if np.max(np.abs(vals[dist >= r])) > 1e-14 * scale or np.max(np.abs(vals[dist <= 2 * g.h])) > 1e-14 * scale:
        raise ValueError("w is not supported in the punctured ball")
    grad2 = sum(_fd(vals, ax, _D1, g.h, 1) ** 2 for ax in range(g.d))
    lap = sum(_fd(vals, ax, _D2, g.h, 2) for ax in range(g.d))
    inside = (dist < r) & (dist > 0)
    weight = np.zeros(g.shape)
    weight[inside] = dist[inside] ** (-2.0 * beta)
    lhs = np.sum((vals**2 + grad2) * weight)
    rhs = np.sum(lap**2 * weight)
    if rhs == 0.0:
        raise ValueError("w has vanishing Laplacian on the ball")
    return float(lhs / (r**2 * rhs))


def annular_bump(grid: TorusGrid, r: float, x0=None) -> GridField:
    """Smooth radial bump supported in r/4 < |x - x0| < r/2."""
    if x0 is None:
        x0 = (0.0,) * grid.d
    dist = _min_image(grid, x0)
    a, b = r / 4, r / 2
    t = (dist - a) / (b - a)
    vals = np.zeros(grid.shape)
    inside = (t > 0) & (t < 1)
    vals[inside] = np.exp(-1.0 / (t[inside] * (1.0 - t[inside])) + 4.0)
    return GridField(grid, vals)


# -- flux variable (1D) --------------------------------------------------------

@dataclass(frozen=True)
class FluxResult:
    v: GridField
    residual: float | None
    reconstruction_error: float


def _antiderivative(f: np.ndarray, base: int) -> np.ndarray:
    """F with F' = f (periodic part spectral, mean part linear) and F(x_base) = 0."""
    N = f.shape[0]
    x = np.arange(N) / N
    c = np.fft.fft(f)
    k = np.fft.fftfreq(N, 1.0 / N)
    mean = c[0].real / N
    ck = np.zeros_like(c)
    nz = (k != 0) & (np.abs(k) != N // 2)
    ck[nz] = c[nz] / (2j * np.pi * k[nz])
    F = np.fft.ifft(ck).real + mean * x
    return F - F[base]


def flux_variable_1d(gauge: GroundGauge, u: GridField, lam: float, base: int = 0) -> FluxResult:
    """Flux v(x) = int_0^x e^{2Z} u' and the residual of v'' = -e^{2Z}(lam - lam0) u."""
    g = u.grid
    if g.d != 1:
        raise ValueError("flux variable is one-dimensional")
    weight = np.exp(2.0 * gauge.Z.values)
    (du,) = gradient(u)
    vprime = weight * du
    v = _antiderivative(vprime, base)
    recon = _antiderivative(vprime / weight, base)
    target = u.values - u.values[base]
    rec_err = float(np.max(np.abs(recon - target)) / max(np.max(np.abs(u.values)), 1e-300))
    kappa = lam - gauge.lambda0
    src = weight * kappa * u.values
    if abs(kappa) <= 1e-12 * max(1.0, abs(lam)):
        return FluxResult(GridField(g, v), None, rec_err)
    (v2,) = gradient(GridField(g, vprime))
    residual = g.norm(v2 + src) / g.norm(src)
    return FluxResult(GridField(g, v), float(residual), rec_err)
