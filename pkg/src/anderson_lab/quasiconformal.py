"""Local quasiconformal factorization of 2D eigenfunctions.

Pipeline around a point x0: positive adjoint solution psi, quotient v,
stream function s, Beltrami coefficient mu of w = v + i s, the normalized
solution chi of the Beltrami equation, and the holomorphic factor
h = w o chi^{-1}.  Patch coordinates are complex, z = (x - x0) + i (y - y0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RectBivariateSpline
from scipy.sparse.linalg import eigsh, spsolve
from scipy.spatial import cKDTree

from .field import GridField
from .spectrum import EigenSystem, GroundGauge

COLLAR_INNER = 0.6
COLLAR_OUTER = 0.9
GRADIENT_FLOOR = 1e-10
MORI_RESOLUTION = 1e-2  # envelope slopes closer than this to 1 are reported as 1


class PatchTooLarge(RuntimeError):
    """The adjoint solution lost positivity on the patch."""


class BeltramiError(RuntimeError):
    pass


# -- patch geometry --------------------------------------------------------------

@dataclass(frozen=True)
class DiscPatch:
    x0: tuple
    R: float = 1.0 / 16
    M: int = 256

    def __post_init__(self):
        if not 0 < self.R <= 0.125:
            raise ValueError("patch radius must lie in (0, 1/8]")
        if self.M < 64 or self.M & (self.M - 1):
            raise ValueError("M must be a power of two >= 64")

    @property
    def h(self) -> float:
        return 2.0 * self.R / self.M

    @property
    def axis(self) -> np.ndarray:
        """Local coordinates of the patch nodes along one axis; 0 is node M/2."""
        return (np.arange(self.M) - self.M // 2) * self.h

    @property
    def center_index(self) -> tuple[int, int]:
        return (self.M // 2, self.M // 2)

    def z(self) -> np.ndarray:
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return X + 1j * Y

    def collar(self) -> np.ndarray:
        """Smooth cutoff: 1 for |z| < 0.6 R, 0 for |z| > 0.9 R."""
        r = np.abs(self.z()) / self.R
        t = np.clip((r - COLLAR_INNER) / (COLLAR_OUTER - COLLAR_INNER), 0.0, 1.0)
        out = np.zeros_like(t)
        inner = t <= 0
        mid = (t > 0) & (t < 1)
        out[inner] = 1.0
        a = np.exp(-1.0 / t[mid])
        b = np.exp(-1.0 / (1.0 - t[mid]))
        out[mid] = b / (a + b)
        return out


def torus_sample(values: np.ndarray, xs: np.ndarray, ys: np.ndarray, order=(0, 0)) -> np.ndarray:
    """Trigonometric interpolant of a 2D torus field (or its derivative) on the product grid xs x ys."""
    N = values.shape[0]
    k = np.fft.fftfreq(N, 1.0 / N)
    keep = np.abs(k) != N // 2
    C = np.fft.fft2(values) / N**2
    C = C[np.ix_(keep, keep)]
    kk = k[keep]
    Ex = np.exp(2j * np.pi * np.outer(xs, kk)) * (2j * np.pi * kk) ** order[0]
    Ey = np.exp(2j * np.pi * np.outer(ys, kk)) * (2j * np.pi * kk) ** order[1]
    return (Ex @ C @ Ey.T).real


def patch_sample(f: GridField, patch: DiscPatch, order=(0, 0)) -> np.ndarray:
    ax = patch.axis
    return torus_sample(f.values, patch.x0[0] + ax, patch.x0[1] + ax, order)


# -- finite differences on the patch ---------------------------------------------

def _d4(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order central difference, second-order one-sided on the two rim layers."""
    out = np.gradient(f, h, axis=axis, edge_order=2)
    sl = [slice(None)] * f.ndim
    n = f.shape[axis]

    def s(a, b):
        sl2 = list(sl)
        sl2[axis] = slice(a, n + b if b <= 0 else b)
        return f[tuple(sl2)]

    inner = (-s(4, 0) + 8 * s(3, -1) - 8 * s(1, -3) + s(0, -4)) / (12 * h)
    sl2 = list(sl)
    sl2[axis] = slice(2, n - 2)
    out[tuple(sl2)] = inner
    return out


def _d4_second(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.zeros_like(f)
    n = f.shape[axis]
    idx = lambda a, b: tuple(slice(a, n + b if b <= 0 else b) if ax == axis else slice(None) for ax in range(f.ndim))
    inner = (-f[idx(4, 0)] + 16 * f[idx(3, -1)] - 30 * f[idx(2, -2)] + 16 * f[idx(1, -3)] - f[idx(0, -4)]) / (12 * h * h)
    out[idx(2, -2)] = inner
    return out


def wirtinger(f: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """(d f, dbar f) with d = (d_x - i d_y)/2, dbar = (d_x + i d_y)/2, by fourth-order differences."""
    fx = _d4(f, h, 0)
    fy = _d4(f, h, 1)
    return 0.5 * (fx - 1j * fy), 0.5 * (fx + 1j * fy)


def _interior(shape, rim: int = 4) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[rim:-rim, rim:-rim] = True
    return m


# -- adjoint gauge ---------------------------------------------------------------

@dataclass(frozen=True)
class AdjointGauge:
    patch: DiscPatch
    kappa: float
    psi: np.ndarray  # on the patch nodes
    grad: tuple[np.ndarray, np.ndarray]
    richardson_gap: float  # sup |psi_fine - psi_coarse| / 3


def _weighted_operator(Z: GridField, patch: DiscPatch, n: int, kappa: float):
    """-div(a grad) - kappa a on the (n+1)^2 node grid of [-R, R]^2, a = exp(2Z)."""
    R = patch.R
    h = 2 * R / n
    nodes = -R + h * np.arange(n + 1)
    half = -R + h * (np.arange(n) + 0.5)
    x0, y0 = patch.x0
    a_nodes = np.exp(2 * torus_sample(Z.values, x0 + nodes, y0 + nodes))
    a_xh = np.exp(2 * torus_sample(Z.values, x0 + half, y0 + nodes))  # (n, n+1)
    a_yh = np.exp(2 * torus_sample(Z.values, x0 + nodes, y0 + half))  # (n+1, n)
    P = n + 1
    idx = np.arange(P * P).reshape(P, P)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    # fluxes between neighbouring nodes, coefficient at the edge midpoint
    for (A, B, w) in [(idx[:-1, :], idx[1:, :], a_xh), (idx[:, :-1], idx[:, 1:], a_yh)]:
        c = w / h**2
        add(A, A, c)
        add(B, B, c)
        add(A, B, -c)
        add(B, A, -c)
    add(idx, idx, -kappa * a_nodes)
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P * P, P * P))
    boundary = np.zeros((P, P), dtype=bool)
    boundary[[0, -1], :] = True
    boundary[:, [0, -1]] = True
    return K, boundary.ravel(), a_nodes, h


def _dirichlet_solve(Z, patch, n, kappa):
    K, bd, _, h = _weighted_operator(Z, patch, n, kappa)
    interior = ~bd
    Kii = K[interior][:, interior].tocsc()
    rhs = -K[interior][:, bd] @ np.ones(bd.sum())
    psi = np.ones(bd.size)
    psi[interior] = spsolve(Kii, rhs)
    return psi.reshape(n + 1, n + 1), h


def dirichlet_eigenvalue(Z: GridField, patch: DiscPatch, n: int | None = None) -> float:
    """Lowest kappa with -div(a grad phi) = kappa a phi, phi = 0 on the patch boundary (same discretization)."""
    n = n or patch.M
    K, bd, a, _ = _weighted_operator(Z, patch, n, 0.0)
    interior = ~bd
    Kii = K[interior][:, interior].tocsc()
    Mass = sp.diags(a.ravel()[interior]).tocsc()
    vals = eigsh(Kii, k=1, M=Mass, sigma=0.0, which="LM", return_eigenvectors=False)
    return float(vals[0])


def adjoint_gauge(Z: GridField, kappa: float, patch: DiscPatch) -> AdjointGauge:
    """Positive solution of div(e^{2Z} grad psi) + kappa e^{2Z} psi = 0 with psi = 1 on the square patch boundary.

    Second-order conservative differences on grids h and h/2, combined by
    Richardson extrapolation; gradients are extrapolated the same way.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    M = patch.M
    if kappa == 0.0:
        one = np.ones((M, M))
        return AdjointGauge(patch, 0.0, one, (np.zeros((M, M)), np.zeros((M, M))), 0.0)
    pc, h = _dirichlet_solve(Z, patch, M, kappa)
    pf, _ = _dirichlet_solve(Z, patch, 2 * M, kappa)
    if min(pc.min(), pf.min()) <= 0:
        raise PatchTooLarge("patch too large for lambda: adjoint solution is not positive")
    psi = (4 * pf[::2, ::2] - pc) / 3
    gc = np.gradient(pc, h, edge_order=2)
    gf = np.gradient(pf, h / 2, edge_order=2)
    grad = tuple((4 * f[::2, ::2] - c) / 3 for c, f in zip(gc, gf))
    if psi.min() <= 0:
        raise PatchTooLarge("patch too large for lambda: adjoint solution is not positive")
    gap = float(np.max(np.abs(pf[::2, ::2] - pc)) / 3)
    return AdjointGauge(patch, float(kappa), psi[:M, :M], (grad[0][:M, :M], grad[1][:M, :M]), gap)


# -- stream function ---------------------------------------------------------------

@dataclass(frozen=True)
class StreamResult:
    s: np.ndarray
    residual: float


def stream_function(Z: np.ndarray, vx: np.ndarray, vy: np.ndarray, patch: DiscPatch) -> StreamResult:
    """Least-squares s with d_x s = -e^{2Z} v_y, d_y s = e^{2Z} v_x and s(x0) = 0.

    Increments along grid edges come from the trapezoid rule with the
    Euler-Maclaurin end correction; the normal equations are the Neumann
    graph Laplacian of the patch grid.
    """
    M = patch.M
    h = patch.h
    a = np.exp(2 * Z)
    p = -a * vy
    q = a * vx
    px = np.gradient(p, h, axis=0, edge_order=2)
    qy = np.gradient(q, h, axis=1, edge_order=2)
    Ix = 0.5 * h * (p[1:, :] + p[:-1, :]) - h * h / 12 * (px[1:, :] - px[:-1, :])
    Iy = 0.5 * h * (q[:, 1:] + q[:, :-1]) - h * h / 12 * (qy[:, 1:] - qy[:, :-1])
    idx = np.arange(M * M).reshape(M, M)
    heads = np.concatenate([idx[1:, :].ravel(), idx[:, 1:].ravel()])
    tails = np.concatenate([idx[:-1, :].ravel(), idx[:, :-1].ravel()])
    E = heads.size
    D = sp.csr_matrix(
        (np.concatenate([np.ones(E), -np.ones(E)]), (np.tile(np.arange(E), 2), np.concatenate([heads, tails]))),
        shape=(E, M * M),
    )
    incr = np.concatenate([Ix.ravel(), Iy.ravel()])
    pin = idx[patch.center_index]
    free = np.ones(M * M, dtype=bool)
    free[pin] = False
    Df = D[:, free]
    L = (Df.T @ Df).tocsc()
    s = np.zeros(M * M)
    s[free] = spsolve(L, Df.T @ incr)
    residual = float(np.linalg.norm(D @ s - incr) / max(np.linalg.norm(incr), 1e-300))
    if residual > 1e-2:
        raise ValueError(f"gradient field is not curl free (residual {residual:.2e})")
    return StreamResult(s.reshape(M, M), residual)


# -- Beltrami coefficient -----------------------------------------------------------

@dataclass(frozen=True)
class BeltramiField:
    patch: DiscPatch
    mu: np.ndarray
    k_sup: float
    raw: np.ndarray | None = None  # before the collar cutoff

    def __post_init__(self):
        if not self.k_sup < 1.0:
            raise BeltramiError("sup |mu| >= 1: distortion unbounded")


def beltrami_coefficient(Z: np.ndarray, vx: np.ndarray, vy: np.ndarray, patch: DiscPatch, cutoff: bool = True) -> BeltramiField:
    """mu = (1 - e^{2Z})/(1 + e^{2Z}) (v_x + i v_y)/(v_x - i v_y), zero where grad v vanishes.

    The sign makes dbar w = mu d w for w = v + i s with e^{2Z} grad v = (d_2 s, -d_1 s).
    """
    a = np.exp(2 * Z)
    g = vx + 1j * vy
    gmax = np.max(np.abs(g))
    ok = np.abs(g) > GRADIENT_FLOOR * gmax
    raw = np.zeros(Z.shape, dtype=complex)
    raw[ok] = (1 - a[ok]) / (1 + a[ok]) * g[ok] / np.conj(g[ok])
    mu = raw * patch.collar() if cutoff else raw
    return BeltramiField(patch, mu, float(np.max(np.abs(mu))), raw)


# -- Beltrami solver ------------------------------------------------------------------

@dataclass(frozen=True)
class BeltramiSolution:
    patch: DiscPatch
    chi: np.ndarray  # on the patch nodes, chi(x0) = 0
    d_chi: np.ndarray
    dbar_chi: np.ndarray
    residual: float  # ||dbar chi - mu d chi|| / ||d chi||
    jacobian_min: float
    iterations: int
    increments: np.ndarray
    contraction: float  # largest ratio of successive increments

    def jacobian(self) -> np.ndarray:
        return np.abs(self.d_chi) ** 2 - np.abs(self.dbar_chi) ** 2


def solve_beltrami(bf: BeltramiField, tol: float = 1e-10, max_iter: int = 1000) -> BeltramiSolution:
    """chi = z + m conj(z) + P on the doubled periodic patch, dbar chi = g, d chi = 1 + S(g - m).

    g solves g = mu (1 + S(g - mean g)) by fixed-point iteration; S is the
    Fourier multiplier conj(zeta)/zeta.  The map g -> g - mean g is an
    orthogonal projection, so the iteration contracts at rate <= sup|mu|.
    """
    patch = bf.patch
    M = patch.M
    n = 2 * M
    L = 4 * patch.R
    mu = np.zeros((n, n), dtype=complex)
    off = M // 2
    mu[off:off + M, off:off + M] = bf.mu
    k = np.fft.fftfreq(n, 1.0 / n)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    zeta = k1 + 1j * k2
    nyq = (np.abs(k1) == n // 2) | (np.abs(k2) == n // 2)
    good = (zeta != 0) & ~nyq
    S = np.zeros((n, n), dtype=complex)
    S[good] = np.conj(zeta[good]) / zeta[good]
    sym_dbar = (np.pi * 1j / L) * zeta
    sym_d = (np.pi * 1j / L) * np.conj(zeta)

    def beurling(f):
        return np.fft.ifft2(S * np.fft.fft2(f - f.mean()))

    scale = max(np.sqrt(np.mean(np.abs(mu) ** 2)), 1e-300)
    g = mu.copy()
    incs = []
    it = 0
    for it in range(1, max_iter + 1):
        g_new = mu * (1.0 + beurling(g))
        inc = np.sqrt(np.mean(np.abs(g_new - g) ** 2))
        g = g_new
        incs.append(inc)
        if len(incs) >= 2 and incs[-2] > 1e-13 * scale and incs[-1] > bf.k_sup + 0.05 and incs[-1] > incs[-2] * (bf.k_sup + 0.05):
            raise BeltramiError("Neumann iteration stalls")
        if inc < tol * scale or inc == 0.0:
            break
    else:
        raise BeltramiError("Neumann iteration did not converge")
    incs = np.array(incs)
    valid = np.flatnonzero(incs[:-1] > 1e3 * np.finfo(float).eps * scale)
    ratios = incs[valid + 1] / incs[valid]
    contraction = float(ratios.max()) if ratios.size else 0.0

    m = g.mean()
    G = np.fft.fft2(g - m)
    P_hat = np.zeros_like(G)
    P_hat[good] = G[good] / sym_dbar[good]
    P = np.fft.ifft2(P_hat)
    dP = np.fft.ifft2(sym_d * P_hat)
    dbarP = np.fft.ifft2(sym_dbar * P_hat)
    ax = (np.arange(n) - M) * patch.h
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    z = X + 1j * Y
    chi = z + m * np.conj(z) + P
    chi -= chi[M, M]
    d_chi = 1.0 + dP
    dbar_chi = m + dbarP
    res = float(np.linalg.norm(dbar_chi - mu * d_chi) / np.linalg.norm(d_chi))
    sl = (slice(off, off + M), slice(off, off + M))
    jac = np.abs(d_chi) ** 2 - np.abs(dbar_chi) ** 2
    jmin = float(jac.min())
    if jmin <= 0:
        raise BeltramiError("not injective on grid: Jacobian changes sign")
    return BeltramiSolution(patch, chi[sl], d_chi[sl], dbar_chi[sl], res, jmin, it, incs, contraction)


def radial_stretch(patch: DiscPatch, K: float, rho: float) -> tuple[BeltramiField, np.ndarray]:
    """mu = ((1-K)/(1+K)) z/conj(z) on |z| < rho and the exact solution z|z|^{1/K-1} (rho^{1/K-1} z outside)."""
    z = patch.z()
    r = np.abs(z)
    inside = r < rho
    mu = np.zeros(z.shape, dtype=complex)
    nz = inside & (r > 0)
    mu[nz] = (1 - K) / (1 + K) * z[nz] / np.conj(z[nz])
    exact = np.where(inside, z * np.where(r > 0, r, 1.0) ** (1.0 / K - 1), z * rho ** (1.0 / K - 1))
    return BeltramiField(patch, mu, float(np.max(np.abs(mu)))), exact


def affine_fit_error(chi: np.ndarray, exact: np.ndarray) -> float:
    """sup |chi - (a exact + b)| / sup |exact| after the least-squares complex affine fit."""
    A = np.stack([exact.ravel(), np.ones(exact.size)], axis=1)
    coef, *_ = np.linalg.lstsq(A, chi.ravel(), rcond=None)
    fit = A @ coef
    return float(np.max(np.abs(chi.ravel() - fit)) / np.max(np.abs(coef[0] * exact)))


# -- factorization --------------------------------------------------------------------

@dataclass(frozen=True)
class QCFactorization:
    zeta_axis: np.ndarray
    h: np.ndarray  # on the zeta grid
    preimage: np.ndarray  # chi^{-1}(zeta)
    residual_beltrami: float
    residual_cr: float
    harmonicity: float
    jacobian_min: float
    roundtrip_error: float
    newton_failures: float

    def h_spline(self):
        ax = self.zeta_axis
        re = RectBivariateSpline(ax, ax, self.h.real)
        im = RectBivariateSpline(ax, ax, self.h.imag)
        return lambda zz: re.ev(zz.real, zz.imag) + 1j * im.ev(zz.real, zz.imag)


class _PatchMap:
    """Cubic spline model of a complex field on the patch nodes."""

    def __init__(self, patch: DiscPatch, values: np.ndarray):
        ax = patch.axis
        self.re = RectBivariateSpline(ax, ax, values.real)
        self.im = RectBivariateSpline(ax, ax, values.imag)

    def __call__(self, z, dx=0, dy=0):
        return self.re.ev(z.real, z.imag, dx=dx, dy=dy) + 1j * self.im.ev(z.real, z.imag, dx=dx, dy=dy)


def invert_map(patch: DiscPatch, chi: np.ndarray, targets: np.ndarray, max_iter: int = 40):
    """Damped Newton for chi(z) = zeta on the spline model; returns (z, converged mask)."""
    fmap = _PatchMap(patch, chi)
    z_nodes = patch.z().ravel()
    tree = cKDTree(np.column_stack([chi.real.ravel(), chi.imag.ravel()]))
    t = targets.ravel()
    _, nearest = tree.query(np.column_stack([t.real, t.imag]))
    z = z_nodes[nearest].copy()
    tol = 1e-13 * max(np.max(np.abs(t)), 1e-300)
    r = t - fmap(z)
    for _ in range(max_iter):
        if np.all(np.abs(r) < tol):
            break
        cx = fmap(z, dx=1)
        cy = fmap(z, dy=1)
        a = 0.5 * (cx - 1j * cy)
        b = 0.5 * (cx + 1j * cy)
        step = (np.conj(a) * r - b * np.conj(r)) / (np.abs(a) ** 2 - np.abs(b) ** 2)
        lam = np.ones(z.shape)
        for _ in range(6):
            z_try = z + lam * step
            r_try = t - fmap(z_try)
            worse = np.abs(r_try) > np.abs(r)
            if not worse.any():
                break
            lam = np.where(worse, lam / 2, lam)
        z, r = z_try, r_try
    return z.reshape(targets.shape), (np.abs(r) < 1e-9 * max(np.max(np.abs(t)), 1e-300)).reshape(targets.shape)


def factorize(w: np.ndarray, sol: BeltramiSolution, r_in: float | None = None, n_zeta: int = 128) -> QCFactorization:
    """h = w o chi^{-1} sampled on a square zeta grid inside chi(B(0, r_in))."""
    patch = sol.patch
    if sol.jacobian_min <= 0:
        raise BeltramiError("chi is not orientation preserving")
    r_in = COLLAR_INNER * patch.R if r_in is None else r_in
    th = np.linspace(0, 2 * np.pi, 512, endpoint=False)
    circle = r_in * np.exp(1j * th)
    rho = 0.7 * np.min(np.abs(_PatchMap(patch, sol.chi)(circle)))
    half = rho / np.sqrt(2)
    ax = np.linspace(-half, half, n_zeta)
    hz = ax[1] - ax[0]
    ZX, ZY = np.meshgrid(ax, ax, indexing="ij")
    zeta = ZX + 1j * ZY
    pre, ok = invert_map(patch, sol.chi, zeta)
    fail = float(1.0 - ok.mean())
    if fail > 1e-3:
        raise BeltramiError(f"Newton inversion failed at {fail:.2%} of the targets")
    h = _PatchMap(patch, w)(pre)

    d, dbar = wirtinger(h, hz)
    inner = _interior(h.shape)
    res_cr = float(np.linalg.norm(dbar[inner]) / np.linalg.norm(d[inner]))
    u = h.real
    lap = _d4_second(u, hz, 0) + _d4_second(u, hz, 1)
    grad = np.hypot(_d4(u, hz, 0), _d4(u, hz, 1))
    harm = float(rho * np.linalg.norm(lap[inner]) / np.linalg.norm(grad[inner]))

    # round trip w - h o chi on patch nodes mapped inside the zeta square
    inside = (np.abs(sol.chi.real) < half - 2 * hz) & (np.abs(sol.chi.imag) < half - 2 * hz)
    hs_re = RectBivariateSpline(ax, ax, h.real)
    hs_im = RectBivariateSpline(ax, ax, h.imag)
    c = sol.chi[inside]
    back = hs_re.ev(c.real, c.imag) + 1j * hs_im.ev(c.real, c.imag)
    rt = float(np.max(np.abs(back - w[inside])) / np.max(np.abs(w[inside])))
    return QCFactorization(ax, h, pre, sol.residual, res_cr, harm, sol.jacobian_min, rt, fail)


# -- Mori exponents ------------------------------------------------------------------

@dataclass(frozen=True)
class MoriFit:
    alpha: float
    C: float
    violations: int
    slopes: tuple[float, float]
    n_pairs: int


def _envelope_slope(lt: np.ndarray, lr: np.ndarray, upper: bool) -> float:
    bins = np.floor(lt / np.log(2.0)).astype(int)
    xs, ys = [], []
    # the top two octaves see only a few directions (corner to corner pairs)
    for b in np.unique(bins[bins < -2]):
        sel = bins == b
        if sel.sum() < 5:
            continue
        j = np.argmax(lr[sel]) if upper else np.argmin(lr[sel])
        xs.append(lt[sel][j])
        ys.append(lr[sel][j])
    if len(xs) < 2:
        return 1.0
    return float(np.polyfit(xs, ys, 1)[0])


def _sample_pairs(z: np.ndarray, n_pairs: int, seed: int):
    """Random pairs with log-uniform separations, so every dyadic scale is populated.

    The partner of a random node is the node nearest to a point at a random
    distance (from one spacing to the diameter) in a random direction.
    """
    rng = np.random.default_rng(seed)
    tree = cKDTree(np.column_stack([z.real, z.imag]))
    i = rng.integers(0, z.size, n_pairs)
    diam = np.ptp(z.real) + np.ptp(z.imag)
    spacing = np.sqrt((np.ptp(z.real) * np.ptp(z.imag) + 1e-300) / z.size)
    t = np.exp(rng.uniform(np.log(spacing), np.log(diam), n_pairs))
    target = z[i] + t * np.exp(2j * np.pi * rng.random(n_pairs))
    _, j = tree.query(np.column_stack([target.real, target.imag]))
    keep = i != j
    return i[keep], j[keep]


def mori_estimate(z: np.ndarray, fz: np.ndarray, n_pairs: int = 10_000, seed: int = 0, pairs=None) -> MoriFit:
    """Hoelder exponent alpha and constant C in C^-1 t^{1/alpha} <= rho <= C t^alpha.

    Distances are scaled by the largest sampled |y - x|.  alpha comes from the
    slopes of the dyadic upper and lower envelopes of log rho against log t;
    C is then the smallest constant with no violation over the sample.
    """
    z = np.asarray(z).ravel()
    fz = np.asarray(fz).ravel()
    if pairs is None:
        i, j = _sample_pairs(z, n_pairs, seed)
    else:
        i, j = (np.asarray(p) for p in pairs)
    t = np.abs(z[i] - z[j])
    rho = np.abs(fz[i] - fz[j])
    keep = (t > 0) & (rho > 0)
    t, rho = t[keep], rho[keep]
    D = t.max()
    t, rho = t / D, rho / D
    lt, lr = np.log(t), np.log(rho)
    s_up = _envelope_slope(lt, lr, upper=True)
    s_lo = _envelope_slope(lt, lr, upper=False)
    alpha = min(1.0, s_up, 1.0 / s_lo if s_lo > 0 else 1.0)
    if alpha > 1.0 - MORI_RESOLUTION:
        alpha = 1.0
    alpha = max(alpha, 1e-3)
    C = float(np.max(np.maximum(rho / t**alpha, t ** (1 / alpha) / rho)))
    viol = int(np.sum((rho > C * t**alpha * (1 + 1e-12)) | (t ** (1 / alpha) > C * rho * (1 + 1e-12))))
    return MoriFit(float(alpha), C, viol, (s_up, s_lo), int(t.size))


# -- three circles ---------------------------------------------------------------------

def _circle_max(h, center, r, n=1 << 14) -> float:
    th = 2 * np.pi * np.arange(n) / n
    vals = np.abs(h(center + r * np.exp(1j * th)))
    j = int(np.argmax(vals))
    best = vals[j]
    # golden-section refinement around the sampled maximum
    a, b = th[j] - 2 * np.pi / n, th[j] + 2 * np.pi / n
    gr = (np.sqrt(5) - 1) / 2
    f = lambda t: float(np.abs(h(np.array([center + r * np.exp(1j * t)])))[0])
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(40):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = f(d)
    return max(best, fc, fd)


def three_circles_check(field, center, r1: float, r2: float, theta: float, chi=None) -> float:
    """Hadamard ratio m(r) / (m(r1)^theta m(r2)^(1-theta)), r = r1^theta r2^(1-theta).

    With chi=None, field is a holomorphic callable and m is the circle maximum.
    Otherwise field and chi are arrays on the same nodes and the deformed balls
    B_chi(r) = {|chi| <= r} are used, with B_chi(r/2) on the left.
    """
    if not (0 < theta < 1) or not (0 < r1 <= r2):
        raise ValueError("need 0 < r1 <= r2 and theta in (0,1)")
    r = r1**theta * r2 ** (1 - theta)
    if chi is None:
        m = lambda rr: _circle_max(field, center, rr)
        return m(r) / (m(r1) ** theta * m(r2) ** (1 - theta))
    f = np.abs(np.asarray(field))
    c = np.abs(np.asarray(chi) - center)
    if r2 > c.max():
        raise ValueError("r2 exceeds the image of the patch")
    m = lambda rr: float(f[c <= rr].max()) if np.any(c <= rr) else 0.0
    den = m(r1) ** theta * m(r2) ** (1 - theta)
    return m(r / 2) / den if den > 0 else np.inf


# -- nodal correspondence ---------------------------------------------------------------

@dataclass(frozen=True)
class NodalCorrespondence:
    agreement: float
    compared: int
    harmonicity: float


def nodal_correspondence(v: np.ndarray, sol: BeltramiSolution, fac: QCFactorization, delta: float = 1e-2) -> NodalCorrespondence:
    ax = fac.zeta_axis
    hz = ax[1] - ax[0]
    half = ax[-1]
    chi = sol.chi
    inside = (np.abs(chi.real) < half - 2 * hz) & (np.abs(chi.imag) < half - 2 * hz)
    vmax = np.max(np.abs(v[inside]))
    sel = inside & (np.abs(v) > delta * vmax)
    c = chi[sel]
    re_h = RectBivariateSpline(ax, ax, fac.h.real).ev(c.real, c.imag)
    agree = float(np.mean(np.sign(v[sel]) == np.sign(re_h))) if c.size else 1.0
    return NodalCorrespondence(agree, int(c.size), fac.harmonicity)


# -- pipeline ------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineResult:
    patch: DiscPatch
    index: int
    kappa: float
    psi: AdjointGauge
    v: np.ndarray
    s: np.ndarray
    stream_residual: float
    mu: BeltramiField
    w_beltrami_residual: float
    solution: BeltramiSolution
    factorization: QCFactorization
    correspondence: NodalCorrespondence
    mori_chi: MoriFit
    mori_inverse: MoriFit

    @property
    def w(self) -> np.ndarray:
        return self.v + 1j * self.s


def quotient(es: EigenSystem, gauge: GroundGauge, k: int) -> GridField:
    return GridField(gauge.grid, es.function(k).values / gauge.u0.values)


def run_pipeline(es: EigenSystem, gauge: GroundGauge, k: int, x0=None, R: float = 1.0 / 16, M: int = 256,
                 delta: float = 1e-2, seed: int = 0) -> PipelineResult:
    """Factorize u_k / u_0 around x0 (default: grid minimum of |u_k / u_0|)."""
    if gauge.grid.d != 2:
        raise ValueError("the factorization pipeline is two-dimensional")
    wk = quotient(es, gauge, k)
    if x0 is None:
        idx = np.unravel_index(np.argmin(np.abs(wk.values)), wk.values.shape)
        x0 = tuple(float(i) / gauge.grid.N for i in idx)
    kappa = max(float(es.eigenvalues[k] - gauge.lambda0), 0.0)
    while True:
        patch = DiscPatch(tuple(x0), R, M)
        try:
            psi = adjoint_gauge(gauge.Z, kappa, patch)
            break
        except PatchTooLarge:
            R /= 2
    Zp = patch_sample(gauge.Z, patch)
    u = patch_sample(wk, patch)
    ux = patch_sample(wk, patch, (1, 0))
    uy = patch_sample(wk, patch, (0, 1))
    v = u / psi.psi
    vx = ux / psi.psi - u * psi.grad[0] / psi.psi**2
    vy = uy / psi.psi - u * psi.grad[1] / psi.psi**2
    # v solves div(e^{2Z} psi^2 grad v) = 0; the constant part of the exponent is irrelevant
    Zeff = Zp + np.log(psi.psi)
    Zeff = Zeff - 0.5 * (Zeff.max() + Zeff.min())
    st = stream_function(Zeff, vx, vy, patch)
    w = v + 1j * st.s
    bf = beltrami_coefficient(Zeff, vx, vy, patch)
    d, dbar = wirtinger(w, patch.h)
    core = np.abs(patch.z()) < COLLAR_INNER * patch.R
    w_res = float(np.linalg.norm((dbar - bf.mu * d)[core]) / np.linalg.norm(d[core]))
    sol = solve_beltrami(bf)
    fac = factorize(w, sol)
    corr = nodal_correspondence(v, sol, fac, delta)
    disc = np.abs(patch.z()) < COLLAR_INNER * patch.R
    m_chi = mori_estimate(patch.z()[disc], sol.chi[disc], seed=seed)
    ZX, ZY = np.meshgrid(fac.zeta_axis, fac.zeta_axis, indexing="ij")
    m_inv = mori_estimate(ZX + 1j * ZY, fac.preimage, seed=seed + 1)
    return PipelineResult(patch, k, kappa, psi, v, st.s, st.residual, bf, w_res, sol, fac, corr, m_chi, m_inv)
