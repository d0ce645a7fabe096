"""Renormalized Anderson operator, low spectrum, ground-state gauge.

Sign convention: A = -Delta - xi_eps + c_eps, bounded below, with eigenvalues
lambda_0 <= lambda_1 <= ... diverging to +inf.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .field import (
    EnhancedNoise,
    GridField,
    Mollifier,
    TorusGrid,
    divergence,
    enhance,
    gradient,
    laplacian_symbol,
)

log = logging.getLogger(__name__)


class EigenSolverError(RuntimeError):
    def __init__(self, message: str, worst_residual: float):
        super().__init__(f"{message} (worst residual {worst_residual:.3e})")
        self.worst_residual = worst_residual


class GroundStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AndersonOperator:
    noise: EnhancedNoise
    c: float | None = None  # overrides noise.c_eps when given (c=0 disables renormalization)

    @property
    def grid(self) -> TorusGrid:
        return self.noise.grid

    @property
    def shift(self) -> float:
        return self.noise.c_eps if self.c is None else float(self.c)

    @property
    def potential(self) -> np.ndarray:
        """Multiplicative part -xi_eps + c."""
        return -self.noise.xi_eps.values + self.shift

    def with_shift(self, c: float) -> "AndersonOperator":
        return AndersonOperator(self.noise, c)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Action on arrays of grid shape, optionally with a trailing batch axis."""
        g = self.grid
        axes = tuple(range(g.d))
        sym = laplacian_symbol(g)
        pot = self.potential
        if v.ndim == g.d + 1:
            sym = sym[..., None]
            pot = pot[..., None]
        lap = np.fft.ifftn(sym * np.fft.fftn(v, axes=axes), axes=axes).real
        return lap + pot * v


def apply(op: AndersonOperator, v: GridField) -> GridField:
    if v.grid != op.grid:
        raise ValueError("grid mismatch between operator and field")
    return GridField(op.grid, op.matvec(v.values))


def dense_matrix(op: AndersonOperator) -> np.ndarray:
    """Explicit n x n matrix of the operator in the grid basis (small grids only)."""
    g = op.grid
    n = g.size
    eye = np.eye(n).reshape(g.shape + (n,))
    cols = op.matvec(eye)
    return cols.reshape(n, n)


@dataclass(frozen=True)
class EigenSystem:
    grid: TorusGrid
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # shape (m,) + grid.shape, unit L2 norm
    residuals: np.ndarray
    orthonormality_defect: float

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    def function(self, k: int) -> GridField:
        return GridField(self.grid, self.eigenfunctions[k])

    def clusters(self, rel_gap: float = 1e-6) -> list[list[int]]:
        """Index groups of numerically degenerate eigenvalues."""
        lam = self.eigenvalues
        scale = max(1.0, float(np.max(np.abs(lam))))
        groups = [[0]]
        for k in range(1, len(lam)):
            if lam[k] - lam[k - 1] < rel_gap * scale:
                groups[-1].append(k)
            else:
                groups.append([k])
        return groups


# -- eigensolver -------------------------------------------------------------

class _ShiftedSolver:
    """Block PCG for (A - sigma) X = B with an FFT preconditioner."""

    def __init__(self, op: AndersonOperator, sigma: float):
        self.op = op
        self.sigma = sigma
        g = op.grid
        pot = op.potential
        self.prec = 1.0 / (laplacian_symbol(g) + (pot.mean() - sigma))

    def shifted(self, X):
        return self.op.matvec(X) - self.sigma * X

    def precondition(self, R):
        axes = tuple(range(self.op.grid.d))
        return np.fft.ifftn(self.prec[..., None] * np.fft.fftn(R, axes=axes), axes=axes).real

    def solve(self, B, rtol=1e-10, maxiter=400):
        axes = tuple(range(self.op.grid.d))
        X = self.precondition(B)
        R = B - self.shifted(X)
        Zp = self.precondition(R)
        P = Zp.copy()
        rz = np.sum(R * Zp, axis=axes)
        bnorm = np.sqrt(np.sum(B * B, axis=axes))
        for _ in range(maxiter):
            rnorm = np.sqrt(np.sum(R * R, axis=axes))
            if np.all(rnorm <= rtol * bnorm):
                break
            AP = self.shifted(P)
            alpha = rz / np.sum(P * AP, axis=axes)
            X += alpha * P
            R -= alpha * AP
            Zp = self.precondition(R)
            rz_new = np.sum(R * Zp, axis=axes)
            P = Zp + (rz_new / rz) * P
            rz = rz_new
        return X


def _orthonormalize(W, Q=None):
    """Orthonormalize columns of W against Q (two passes) and among themselves."""
    if Q is not None and Q.shape[1]:
        for _ in range(2):
            W = W - Q @ (Q.T @ W)
    Qw, Rw = np.linalg.qr(W)
    keep = np.abs(np.diag(Rw)) > 1e-10 * max(1.0, np.abs(np.diag(Rw)).max())
    Qw = Qw[:, keep]
    if Q is not None and Q.shape[1]:
        Qw = Qw - Q @ (Q.T @ Qw)
        Qw, _ = np.linalg.qr(Qw)
    return Qw


def eigensolve(
    op: AndersonOperator,
    m: int,
    tol: float = 1e-8,
    block: int | None = None,
    max_blocks: int = 12,
    max_restarts: int = 30,
    seed: int = 0,
) -> EigenSystem:
    """Lowest m eigenpairs by restarted block Krylov iteration on (A - sigma)^{-1}.

    The shift sigma = min(potential) - 1 keeps A - sigma positive definite.
    Krylov blocks are fully reorthogonalized; Ritz pairs are extracted with A
    itself, so the inexact inner solves only affect the quality of the
    search space, never the reported residuals.
    """
    g = op.grid
    n = g.size
    if m < 1 or m > n // 4:
        raise ValueError(f"m must lie in [1, N^d/4], got {m}")
    b = block or max(m + 4, 8)
    b = min(b, n // 2)
    sigma = float(op.potential.min()) - 1.0
    solver = _ShiftedSolver(op, sigma)

    rng = np.random.default_rng([int(seed), int(op.noise.seed) & 0xFFFFFFFF, m, g.N, g.d])
    start = rng.standard_normal((n, b))
    target = 0.1 * tol

    def A_cols(Q):
        return op.matvec(Q.reshape(g.shape + (Q.shape[1],))).reshape(n, Q.shape[1])

    def S_cols(Q):
        return solver.solve(Q.reshape(g.shape + (Q.shape[1],))).reshape(n, Q.shape[1])

    worst = np.inf
    previous = np.inf
    for restart in range(max_restarts):
        # the raw start block carries high frequencies; smooth it once first
        Q = _orthonormalize(S_cols(start))
        AQ = A_cols(Q)
        blk = Q
        last = np.inf
        for j in range(max_blocks):
            W = S_cols(blk)
            blk = _orthonormalize(W, Q)
            if blk.shape[1] == 0:
                break
            Q = np.hstack([Q, blk])
            AQ = np.hstack([AQ, A_cols(blk)])
            H = Q.T @ AQ
            H = 0.5 * (H + H.T)
            theta, Y = sla.eigh(H)
            X = Q @ Y[:, :b]
            AX = AQ @ Y[:, :b]
            res = np.linalg.norm(AX - X * theta[:b], axis=0)
            scale = np.maximum(1.0, np.abs(theta[:b]))
            worst = float(np.max(res[:m] / scale[:m]))
            log.debug("block %d: worst residual %.3e", j, worst)
            if worst <= target or (worst <= tol and worst > 0.5 * last):
                return _finish(op, theta[:m], X[:, :m], res[:m])
            last = worst
        # rounding floor ~ eps * ||A||: accept once within tol and no longer improving
        if worst <= tol and worst > 0.5 * previous:
            return _finish(op, theta[:m], X[:, :m], res[:m])
        previous = worst
        start = X
        log.debug("eigensolve restart %d, worst residual %.3e", restart, worst)
    if worst <= tol:
        return _finish(op, theta[:m], X[:, :m], res[:m])
    raise EigenSolverError("eigensolve did not converge", worst)


def _finish(op, theta, X, res) -> EigenSystem:
    g = op.grid
    m = len(theta)
    # deterministic sign: largest-magnitude entry positive (ground state: positive mean)
    for k in range(m):
        col = X[:, k]
        if k == 0:
            s = np.sign(col.sum()) or 1.0
        else:
            s = np.sign(col[np.argmax(np.abs(col))]) or 1.0
        X[:, k] = s * col
    defect = float(np.max(np.abs(X.T @ X - np.eye(m))))
    funcs = (X.T * np.sqrt(g.size)).reshape((m,) + g.shape)
    return EigenSystem(
        grid=g,
        eigenvalues=np.asarray(theta, dtype=float).copy(),
        eigenfunctions=funcs,
        residuals=np.asarray(res, dtype=float).copy(),
        orthonormality_defect=defect,
    )


def dense_eigenvalues(op: AndersonOperator, m: int) -> np.ndarray:
    return sla.eigh(dense_matrix(op), eigvals_only=True, subset_by_index=[0, m - 1])


# -- ground-state gauge -------------------------------------------------------

@dataclass(frozen=True)
class GroundGauge:
    u0: GridField
    Z: GridField
    lambda0: float

    @property
    def grid(self) -> TorusGrid:
        return self.u0.grid


def ground_gauge(es: EigenSystem, ratio_floor: float = 1e-6) -> GroundGauge:
    if es.m < 1:
        raise ValueError("empty eigensystem")
    u0 = es.eigenfunctions[0].copy()
    if u0.sum() < 0:
        u0 = -u0
    umax = np.max(np.abs(u0))
    if u0.min() <= 0 or u0.min() / umax < ratio_floor:
        raise GroundStateError(
            f"ground state positivity violated (min/max = {u0.min() / umax:.3e})"
        )
    return GroundGauge(GridField(es.grid, u0), GridField(es.grid, np.log(u0)), float(es.eigenvalues[0]))


def weighted_divergence_form(Z: GridField, w: GridField) -> np.ndarray:
    """e^{-2Z} div(e^{2Z} grad w), all derivatives spectral."""
    g = Z.grid
    weight = np.exp(2.0 * Z.values)
    flux = [weight * gw for gw in gradient(w)]
    return divergence(g, flux) / weight


def conjugate_apply(gauge: GroundGauge, w: GridField) -> GridField:
    """Conjugated operator w -> -e^{-2Z} div(e^{2Z} grad w) + lambda0 w."""
    if w.grid != gauge.grid:
        raise ValueError("grid mismatch between gauge and field")
    vals = -weighted_divergence_form(gauge.Z, w) + gauge.lambda0 * w.values
    return GridField(w.grid, vals)


def conjugation_residual(gauge: GroundGauge, es: EigenSystem, k: int) -> float:
    """||H~(u_k/u0) - lambda_k u_k/u0|| / (max(1,|lambda_k|) ||u_k/u0||)."""
    w = GridField(es.grid, es.eigenfunctions[k] / gauge.u0.values)
    r = conjugate_apply(gauge, w).values - es.eigenvalues[k] * w.values
    return es.grid.norm(r) / (max(1.0, abs(es.eigenvalues[k])) * w.norm())


# -- resolvent probe ----------------------------------------------------------

@dataclass(frozen=True)
class ProbeTable:
    eps: np.ndarray
    eigenvalues: np.ndarray  # shape (len(eps), m)
    renormalized: bool

    @property
    def differences(self) -> np.ndarray:
        return np.diff(self.eigenvalues, axis=0)

    def rows(self):
        for e, lam in zip(self.eps, self.eigenvalues):
            yield float(e), [float(x) for x in lam]


def resolvent_probe(
    grid: TorusGrid,
    seed: int,
    eps_list,
    m: int,
    renormalize: bool = True,
    zero_noise: bool = False,
) -> ProbeTable:
    eps_list = np.asarray(eps_list, dtype=float)
    if np.any(np.diff(eps_list) >= 0):
        raise ValueError("eps_list must be strictly decreasing")
    rows = []
    for eps in eps_list:
        noise = enhance(grid, seed, Mollifier(eps))
        if zero_noise:
            from .field import zero_noise as _zero

            noise = _zero(grid)
        op = AndersonOperator(noise, None if renormalize else 0.0)
        rows.append(eigensolve(op, m).eigenvalues)
    return ProbeTable(eps_list, np.array(rows), renormalize)
