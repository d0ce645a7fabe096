import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anderson_lab.field import GridField, Mollifier, TorusGrid, enhance
from anderson_lab.quasiconformal import (
    BeltramiError,
    BeltramiField,
    DiscPatch,
    PatchTooLarge,
    adjoint_gauge,
    affine_fit_error,
    beltrami_coefficient,
    dirichlet_eigenvalue,
    factorize,
    mori_estimate,
    nodal_correspondence,
    radial_stretch,
    run_pipeline,
    solve_beltrami,
    stream_function,
    three_circles_check,
    torus_sample,
    wirtinger,
)
from anderson_lab.spectrum import AndersonOperator, eigensolve, ground_gauge


def zero_mu(patch):
    return BeltramiField(patch, np.zeros((patch.M, patch.M), dtype=complex), 0.0)


def harmonic_chain(patch, poly):
    """Z = 0 chain for v = Re poly(z): stream function, mu, chi and factorization."""
    z = patch.z()
    dp = np.polyder(poly)
    v = np.polyval(poly, z).real
    d = np.polyval(dp, z)
    vx, vy = d.real, -d.imag
    Z = np.zeros(v.shape)
    s = stream_function(Z, vx, vy, patch)
    bf = beltrami_coefficient(Z, vx, vy, patch)
    sol = solve_beltrami(bf)
    w = v + 1j * s.s
    return v, s, bf, sol, w, factorize(w, sol)


@pytest.fixture(scope="module")
def pipeline():
    g = TorusGrid(2, 128)
    es = eigensolve(AndersonOperator(enhance(g, 2, Mollifier(4 / 128))), 4)
    gauge = ground_gauge(es)
    return gauge, run_pipeline(es, gauge, 1)


# -- geometry and derivatives ------------------------------------------------------

def test_patch_validation_and_collar():
    with pytest.raises(ValueError):
        DiscPatch((0.5, 0.5), R=0.2)
    with pytest.raises(ValueError):
        DiscPatch((0.5, 0.5), M=48)
    p = DiscPatch((0.5, 0.5), M=64)
    c = p.collar()
    r = np.abs(p.z()) / p.R
    assert np.all(c[r < 0.6] == 1) and np.all(c[r > 0.9] == 0)
    assert np.all((c >= 0) & (c <= 1))


def test_torus_sample_is_exact_on_trig_polynomials():
    g = TorusGrid(2, 32)
    x, y = g.coords
    f = np.sin(2 * np.pi * (3 * x + y)) + np.cos(2 * np.pi * 5 * y)
    xs, ys = np.array([0.013, 0.5, 0.77]), np.array([0.21, 0.9])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    exact = np.sin(2 * np.pi * (3 * X + Y)) + np.cos(2 * np.pi * 5 * Y)
    assert np.allclose(torus_sample(f, xs, ys), exact, atol=1e-12)
    fx = 6 * np.pi * np.cos(2 * np.pi * (3 * X + Y))
    assert np.allclose(torus_sample(f, xs, ys, (1, 0)), fx, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=2, allow_nan=False, allow_infinity=False), min_size=4, max_size=4))
def test_wirtinger_conjugation(coeffs):
    p = DiscPatch((0.5, 0.5), M=64)
    z = p.z() / p.R
    f = sum(c * z**k for k, c in enumerate(coeffs)) + np.exp(0.5 * np.conj(z))
    d, dbar = wirtinger(f, p.h / p.R)
    dc, dbarc = wirtinger(np.conj(f), p.h / p.R)
    scale = np.max(np.abs(d)) + np.max(np.abs(dbar))
    assert np.max(np.abs(dbarc - np.conj(d))) <= 1e-12 * scale
    assert np.max(np.abs(dc - np.conj(dbar))) <= 1e-12 * scale


def test_wirtinger_polynomial():
    p = DiscPatch((0.5, 0.5), M=64)
    z = p.z() / p.R
    d, dbar = wirtinger(z**3, p.h / p.R)
    inner = (slice(2, -2), slice(2, -2))  # the rim uses second-order one-sided stencils
    assert np.max(np.abs(d - 3 * z**2)[inner]) < 1e-10
    assert np.max(np.abs(dbar)[inner]) < 1e-10


# -- adjoint gauge ------------------------------------------------------------------

def test_adjoint_trivial_and_flat():
    g = TorusGrid(2, 64)
    Z = GridField(g, np.zeros(g.shape))
    patch = DiscPatch((0.5, 0.5), M=64)
    assert np.all(adjoint_gauge(Z, 0.0, patch).psi == 1.0)
    psi = adjoint_gauge(Z, 1.0, patch)
    # psi >= 1 by the maximum principle, and stays close to 1 for small kappa
    assert psi.psi.min() > 0.9
    assert 1.0 < psi.psi.max() < 1.01
    with pytest.raises(ValueError):
        adjoint_gauge(Z, -1.0, patch)


def test_adjoint_fails_beyond_dirichlet_eigenvalue():
    g = TorusGrid(2, 64)
    Z = GridField(g, np.zeros(g.shape))
    patch = DiscPatch((0.5, 0.5), M=64)
    lam1 = dirichlet_eigenvalue(Z, patch)
    # square of side 2R: 2 (pi / 2R)^2
    assert lam1 == pytest.approx(2 * (np.pi / (2 * patch.R)) ** 2, rel=1e-3)
    assert adjoint_gauge(Z, 0.5 * lam1, patch).psi.min() > 0
    with pytest.raises(PatchTooLarge):
        adjoint_gauge(Z, 1.1 * lam1, patch)


# -- stream function ------------------------------------------------------------------

@pytest.mark.parametrize("M", [64, 128])
def test_stream_harmonic_conjugates(M):
    p = DiscPatch((0.5, 0.5), M=M)
    z = p.z()
    x, y = z.real, z.imag
    Z = np.zeros(z.shape)
    one = np.ones(z.shape)
    s = stream_function(Z, one, 0 * one, p)
    assert np.max(np.abs(s.s - y)) <= 1e-12
    s = stream_function(Z, 2 * x, -2 * y, p)
    assert np.max(np.abs(s.s - 2 * x * y)) <= 1e-12 * p.R**2 * 1e3
    assert s.s[p.center_index] == 0.0


def test_stream_rejects_non_conservative_field():
    p = DiscPatch((0.5, 0.5), M=64)
    z = p.z()
    with pytest.raises(ValueError, match="curl"):
        stream_function(np.zeros(z.shape), z.real, z.imag, p)


# -- Beltrami coefficient and solver --------------------------------------------------

def test_mu_vanishes_without_weight():
    p = DiscPatch((0.5, 0.5), M=64)
    z = p.z()
    bf = beltrami_coefficient(np.zeros(z.shape), 1 + z.real, z.imag, p)
    assert bf.k_sup == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 2.0))
def test_mu_modulus_bound(seed, amp):
    p = DiscPatch((0.5, 0.5), M=64)
    rng = np.random.default_rng(seed)
    z = p.z() / p.R
    Z = amp * np.tanh(rng.standard_normal() * z.real + rng.standard_normal() * z.imag)
    vx, vy = rng.standard_normal((2,) + z.shape)
    bf = beltrami_coefficient(Z, vx, vy, p)
    assert np.all(np.abs(bf.raw) <= np.tanh(np.max(np.abs(Z))) + 1e-12)
    assert np.all(bf.mu[np.abs(z) > 0.9] == 0)
    assert bf.k_sup < 1


def test_beltrami_field_rejects_unbounded_distortion():
    p = DiscPatch((0.5, 0.5), M=64)
    with pytest.raises(BeltramiError):
        BeltramiField(p, np.ones((64, 64), dtype=complex), 1.0)


def test_identity_for_zero_mu():
    p = DiscPatch((0.3, 0.7), M=64)
    sol = solve_beltrami(zero_mu(p))
    assert np.max(np.abs(sol.chi - p.z())) <= 1e-15
    assert sol.residual == 0.0


def test_radial_stretch_oracle():
    p = DiscPatch((0.5, 0.5), M=256)
    bf, exact = radial_stretch(p, 1.5, 0.5 * p.R)
    sol = solve_beltrami(bf)
    assert affine_fit_error(sol.chi, exact) <= 1e-3
    assert sol.contraction <= bf.k_sup + 0.02
    assert sol.jacobian_min > 0


def test_smooth_mu_solution():
    p = DiscPatch((0.5, 0.5), M=128)
    z = p.z() / p.R
    mu = 0.4 * np.exp(-8 * np.abs(z) ** 2) * np.exp(1j * z.real) * p.collar()
    bf = BeltramiField(p, mu, float(np.max(np.abs(mu))))
    sol = solve_beltrami(bf)
    assert sol.residual <= 1e-6
    assert sol.jacobian_min > 0
    assert sol.contraction <= bf.k_sup + 0.02
    assert abs(sol.chi[p.center_index]) == 0.0
    # independent check of dbar chi = mu d chi by finite differences in the interior
    d, dbar = wirtinger(sol.chi, p.h)
    core = np.abs(z) < 0.8
    assert np.linalg.norm((dbar - mu * d)[core]) <= 1e-5 * np.linalg.norm(d[core])


# -- factorization ---------------------------------------------------------------------

def test_factorize_identity_map():
    p = DiscPatch((0.5, 0.5), M=128)
    sol = solve_beltrami(zero_mu(p))
    z = p.z() / p.R
    w = z**2 + 0.5 * z + 0.3 * np.conj(z)
    fac = factorize(w, sol)
    ZX, ZY = np.meshgrid(fac.zeta_axis, fac.zeta_axis, indexing="ij")
    zeta = (ZX + 1j * ZY) / p.R
    assert np.max(np.abs(fac.h - (zeta**2 + 0.5 * zeta + 0.3 * np.conj(zeta)))) <= 1e-8
    # w's own dbar-to-d ratio is what is reported
    d, dbar = 2 * zeta + 0.5, 0.3
    assert fac.residual_cr == pytest.approx(np.linalg.norm(dbar * np.ones(zeta.shape)[4:-4, 4:-4])
                                            / np.linalg.norm(d[4:-4, 4:-4]), rel=0.05)


def test_flat_chain_is_conformal():
    p = DiscPatch((0.5, 0.5), M=128)
    poly = np.array([1.0, -0.2j, 0.3, 0.0]) / np.array([p.R**3, p.R**2, p.R, 1.0])
    v, s, bf, sol, w, fac = harmonic_chain(p, poly)
    assert bf.k_sup == 0.0
    assert np.max(np.abs(sol.chi - p.z())) <= 1e-15
    assert fac.residual_cr <= 1e-6
    corr = nodal_correspondence(v, sol, fac, 1e-2)
    assert corr.agreement == 1.0 and corr.compared > 0


def test_correspondence_invariant_under_sign():
    p = DiscPatch((0.5, 0.5), M=64)
    sol = solve_beltrami(zero_mu(p))
    z = p.z() / p.R
    w = z**3 - 0.4 * z
    fac = factorize(w, sol)
    fac_neg = factorize(-w, sol)
    a = nodal_correspondence(w.real, sol, fac)
    b = nodal_correspondence(-w.real, sol, fac_neg)
    assert a.agreement == b.agreement == 1.0
    assert a.compared == b.compared


# -- Mori and three circles ------------------------------------------------------------

def test_mori_identity_and_affine():
    p = DiscPatch((0.5, 0.5), M=64)
    z = p.z()
    ident = mori_estimate(z, z)
    assert ident.alpha == 1.0 and ident.C == pytest.approx(1.0, abs=1e-12) and ident.violations == 0
    aff = mori_estimate(z, z + 0.3 * np.conj(z))
    assert aff.alpha == 1.0 and aff.C <= 1.3 / 0.7 and aff.violations == 0


def test_mori_radial_stretch_exponent():
    p = DiscPatch((0.5, 0.5), M=256)
    _, exact = radial_stretch(p, 1.5, 0.5 * p.R)
    z = p.z()
    near = (np.abs(z) < 0.45 * p.R) & (np.abs(z) > 0)  # inside the stretched disc of radius R/2
    # pairs anchored at the origin expose the Hoelder exponent 1/K
    c = p.center_index
    z0 = z[c]
    pts, img = np.append(z[near], z0), np.append(exact[near], exact[c])
    anchor = np.full(near.sum(), pts.size - 1)
    fit = mori_estimate(pts, img, pairs=(anchor, np.arange(near.sum())))
    assert fit.n_pairs >= 10_000
    assert fit.alpha <= 1 / 1.5 + 0.05
    assert fit.violations == 0


@pytest.mark.parametrize("n", [1, 3, 6])
def test_three_circles_equality_for_monomials(n):
    ratio = three_circles_check(lambda z: z**n, 0.0, 0.2, 0.8, 0.4)
    assert ratio == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False), min_size=1, max_size=9),
       st.floats(0.1, 0.9))
def test_three_circles_polynomials(coeffs, theta):
    if all(abs(c) < 1e-6 for c in coeffs):
        return
    ratio = three_circles_check(lambda z: np.polyval(coeffs, z), 0.0, 0.1, 1.0, theta)
    assert ratio <= 1 + 1e-8


def test_three_circles_radii_checked():
    with pytest.raises(ValueError):
        three_circles_check(lambda z: z, 0.0, 0.5, 0.2, 0.5)


# -- end to end ------------------------------------------------------------------------

def test_pipeline_invariants(pipeline):
    gauge, p = pipeline
    f = p.factorization
    assert p.stream_residual <= 1e-3
    assert p.w_beltrami_residual <= 1e-3
    assert f.residual_beltrami <= 1e-6
    assert f.jacobian_min > 0
    assert f.roundtrip_error <= 1e-3
    assert f.residual_cr <= 1e-2 and f.harmonicity <= 1e-2
    assert p.correspondence.agreement >= 0.99
    for fit in (p.mori_chi, p.mori_inverse):
        assert 0 < fit.alpha <= 1 and fit.violations == 0
    assert p.mori_chi.alpha * p.mori_inverse.alpha <= 1 + 1e-6
    assert p.psi.psi.min() > 0
