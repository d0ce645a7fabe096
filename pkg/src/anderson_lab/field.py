"""Torus grids, spectral transforms, white noise and its renormalized enhancement.

The torus is [0,1)^d sampled at N points per axis.  Fourier coefficients are
normalized so that ``coeff = fftn(values) / N**d``; with that choice the k=0
coefficient is the grid mean and Parseval reads

    N**-d * sum |values|**2 == sum |coeff|**2 .
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusGrid:
    d: int
    N: int

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 8, got {self.N}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N**self.d

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def cell_volume(self) -> float:
        return float(self.N) ** (-self.d)

    @cached_property
    def modes(self) -> tuple[np.ndarray, ...]:
        """Integer wave numbers per axis, broadcast to the grid shape."""
        k = np.fft.fftfreq(self.N, 1.0 / self.N)
        return tuple(np.meshgrid(*([k] * self.d), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        """|k|^2 on the grid (integer valued)."""
        return sum(km**2 for km in self.modes)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.N) / self.N
        return tuple(np.meshgrid(*([x] * self.d), indexing="ij"))

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(a * b) * self.cell_volume)

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(a) ** 2) * self.cell_volume))


@dataclass(frozen=True)
class GridField:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            v = v.reshape(self.grid.shape)
        object.__setattr__(self, "values", v)

    def to_spectral(self) -> "SpectralField":
        return SpectralField(self.grid, np.fft.fftn(self.values) / self.grid.size)

    def mean(self) -> float:
        return float(self.values.mean())

    def norm(self) -> float:
        return self.grid.norm(self.values)


@dataclass(frozen=True)
class SpectralField:
    grid: TorusGrid
    coefficients: np.ndarray

    def to_grid(self) -> GridField:
        vals = np.fft.ifftn(self.coefficients * self.grid.size)
        return GridField(self.grid, vals.real)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coefficients) ** 2)))

    def hermitian_defect(self) -> float:
        c = self.coefficients
        scale = max(np.max(np.abs(c)), 1e-300)
        return float(np.max(np.abs(reflect(c) - np.conj(c))) / scale)


def reflect(c: np.ndarray) -> np.ndarray:
    """c(-k) for an array in FFT layout."""
    out = c
    for ax in range(c.ndim):
        out = np.take(out, (-np.arange(c.shape[ax])) % c.shape[ax], axis=ax)
    return out


@dataclass(frozen=True)
class Mollifier:
    """Gaussian Fourier damping exp(-2 pi^2 |eps k|^2)."""

    eps: float

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("mollification scale must be non-negative")

    def profile(self, k2: np.ndarray) -> np.ndarray:
        return np.exp(-2.0 * np.pi**2 * self.eps**2 * k2)


# -- noise ------------------------------------------------------------------

def _shell_modes(s: int, d: int) -> np.ndarray:
    """Lattice points of the dyadic shell B_s \\ B_{s-1}, B_s = [-2^s, 2^s)^d, in C order."""
    half = 1 << s
    ax = np.arange(-half, half)
    pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    if s == 0:
        return pts
    inner = 1 << (s - 1)
    keep = np.any((pts < -inner) | (pts >= inner), axis=1)
    return pts[keep]


def sample_white_noise(grid: TorusGrid, seed: int) -> SpectralField:
    """Gaussian white noise in Fourier variables.

    Modes are drawn shell by shell, each shell from its own seeded stream, so
    a given lattice mode receives the same draw on every grid that contains
    it.  For an iid complex Gaussian array z (variance 1/2 per real part) the
    coefficients are c_k = (z_k + conj(z_{-k})) / sqrt(2): real N(0,1) on
    self-conjugate modes, Hermitian complex N(0,1/2)+iN(0,1/2) elsewhere.
    """
    N, d = grid.N, grid.d
    z = np.zeros(grid.shape, dtype=complex)
    n_shells = int(np.log2(N))  # shells 0 .. log2(N)-1 tile [-N/2, N/2)^d
    for s in range(n_shells):
        pts = _shell_modes(s, d)
        rng = np.random.default_rng([int(seed), s, d])
        draw = rng.standard_normal((len(pts), 2)) * np.sqrt(0.5)
        idx = tuple((pts[:, a] % N) for a in range(d))
        z[idx] = draw[:, 0] + 1j * draw[:, 1]
    coeff = (z + np.conj(reflect(z))) / np.sqrt(2.0)
    return SpectralField(grid, coeff)


def mollify(xi: SpectralField, m: Mollifier) -> SpectralField:
    return SpectralField(xi.grid, xi.coefficients * m.profile(xi.grid.k2))


def green_apply(f: SpectralField) -> SpectralField:
    """(-Delta)^{-1} on mean-zero fields; constants are sent to 0."""
    k2 = f.grid.k2
    out = np.zeros_like(f.coefficients)
    nz = k2 > 0
    out[nz] = f.coefficients[nz] / (4.0 * np.pi**2 * k2[nz])
    return SpectralField(f.grid, out)


def laplacian_symbol(grid: TorusGrid) -> np.ndarray:
    """Symbol of -Delta."""
    return 4.0 * np.pi**2 * grid.k2


def gradient(f: GridField) -> list[np.ndarray]:
    """Spectral gradient; the Nyquist mode is dropped so the output stays real."""
    g = f.grid
    c = np.fft.fftn(f.values)
    out = []
    for km in g.modes:
        kk = np.where(np.abs(km) == g.N // 2, 0.0, km)
        out.append(np.fft.ifftn(1j * TWO_PI * kk * c).real)
    return out


def divergence(grid: TorusGrid, comps: list[np.ndarray]) -> np.ndarray:
    total = np.zeros(grid.shape, dtype=complex)
    for km, comp in zip(grid.modes, comps):
        kk = np.where(np.abs(km) == grid.N // 2, 0.0, km)
        total += 1j * TWO_PI * kk * np.fft.fftn(comp)
    return np.fft.ifftn(total).real


def renorm_constant(grid: TorusGrid, m: Mollifier) -> float:
    """Lattice sum sum_{k != 0} rho(eps k)^2 / (4 pi^2 |k|^2) over the grid modes."""
    k2 = grid.k2.ravel()
    nz = k2 > 0
    k2 = k2[nz]
    terms = m.profile(k2) ** 2 / (4.0 * np.pi**2 * k2)
    # fixed summation order: ascending |k|^2, stable sort keeps C order within a shell
    order = np.argsort(k2, kind="stable")
    return float(np.sum(terms[order]))


@dataclass(frozen=True)
class EnhancedNoise:
    seed: int
    eps: float
    xi_eps: GridField
    c_eps: float
    second_order: GridField

    @property
    def grid(self) -> TorusGrid:
        return self.xi_eps.grid

    @property
    def d(self) -> int:
        return self.grid.d


def enhance(grid: TorusGrid, seed: int, m: Mollifier) -> EnhancedNoise:
    xi = mollify(sample_white_noise(grid, seed), m)
    xi_grid = xi.to_grid()
    x1 = green_apply(xi).to_grid()
    c = renorm_constant(grid, m)
    second = GridField(grid, xi_grid.values * x1.values - c)
    return EnhancedNoise(seed=int(seed), eps=float(m.eps), xi_eps=xi_grid, c_eps=c, second_order=second)


def zero_noise(grid: TorusGrid) -> EnhancedNoise:
    """Noise-free data: xi = 0, c = 0."""
    z = GridField(grid, np.zeros(grid.shape))
    return EnhancedNoise(seed=-1, eps=0.0, xi_eps=z, c_eps=0.0, second_order=z)


def custom_noise(xi_values: np.ndarray, grid: TorusGrid, c: float = 0.0) -> EnhancedNoise:
    """Wrap a prescribed smooth potential as noise data (used for deterministic checks)."""
    xi = GridField(grid, xi_values)
    x1 = green_apply(xi.to_spectral()).to_grid()
    second = GridField(grid, xi.values * x1.values - c)
    return EnhancedNoise(seed=-1, eps=0.0, xi_eps=xi, c_eps=float(c), second_order=second)


# -- Littlewood-Paley ------------------------------------------------------

def lp_blocks(grid: TorusGrid) -> list[np.ndarray]:
    """Masks of sharp dyadic annuli: j=0 is the zero mode, j>=1 is 2^{j-1} <= |k| < 2^j."""
    kabs = np.sqrt(grid.k2)
    masks = [kabs < 1.0]
    j = 1
    kmax = kabs.max()
    while 2 ** (j - 1) <= kmax:
        masks.append((kabs >= 2 ** (j - 1)) & (kabs < 2**j))
        j += 1
    return masks


def lp_block_norms(f: SpectralField) -> np.ndarray:
    """sup norms of the Littlewood-Paley pieces Delta_j f."""
    out = []
    for mask in lp_blocks(f.grid):
        piece = np.fft.ifftn(np.where(mask, f.coefficients, 0.0) * f.grid.size)
        out.append(np.max(np.abs(piece)))
    return np.array(out)


def besov_regularity(f: SpectralField, gamma: float) -> float:
    """Estimator sup_j 2^{j gamma} ||Delta_j f||_inf of the C^gamma norm."""
    norms = lp_block_norms(f)
    j = np.arange(len(norms))
    return float(np.max(2.0 ** (j * gamma) * norms))
