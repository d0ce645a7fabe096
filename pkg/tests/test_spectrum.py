import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anderson_lab.field import GridField, Mollifier, TorusGrid, custom_noise, enhance, zero_noise
from anderson_lab.spectrum import (
    AndersonOperator,
    EigenSolverError,
    EigenSystem,
    GroundStateError,
    apply,
    conjugate_apply,
    conjugation_residual,
    dense_eigenvalues,
    eigensolve,
    ground_gauge,
    resolvent_probe,
)

FOUR_PI2 = 4 * np.pi**2


def noisy_op(d, N, seed, c=None):
    g = TorusGrid(d, N)
    return AndersonOperator(enhance(g, seed, Mollifier(4 / N)), c)


@pytest.fixture(scope="module")
def system_1d():
    op = noisy_op(1, 128, 2)
    es = eigensolve(op, 8)
    return op, es, ground_gauge(es)


def test_apply_fourier_mode():
    g = TorusGrid(2, 16)
    x, y = g.coords
    v = GridField(g, np.cos(2 * np.pi * (2 * x - 3 * y)))
    out = apply(AndersonOperator(zero_noise(g)), v)
    assert np.allclose(out.values, FOUR_PI2 * 13 * v.values, atol=1e-9)


def test_apply_grid_mismatch():
    op = AndersonOperator(zero_noise(TorusGrid(1, 16)))
    with pytest.raises(ValueError):
        apply(op, GridField(TorusGrid(1, 32), np.zeros(32)))


def test_apply_symmetric():
    op = noisy_op(2, 32, 4)
    g = op.grid
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        u, v = rng.standard_normal((2,) + g.shape)
        lhs = g.inner(op.matvec(u), v)
        rhs = g.inner(u, op.matvec(v))
        worst = max(worst, abs(lhs - rhs) / (g.norm(op.matvec(u)) * g.norm(v)))
    assert worst <= 1e-10


def test_apply_matches_assembled_matrix():
    op = noisy_op(1, 8, 3)
    N = 8
    F = np.exp(-2j * np.pi * np.outer(np.arange(N), np.arange(N)) / N)
    k = np.fft.fftfreq(N, 1 / N)
    lap = (np.conj(F).T @ np.diag(FOUR_PI2 * k**2) @ F / N).real
    A = lap + np.diag(op.potential)
    v = np.random.default_rng(1).standard_normal(N)
    assert np.max(np.abs(A @ v - op.matvec(v))) <= 1e-12 * np.max(np.abs(A @ v))


def test_laplacian_spectrum_1d():
    es = eigensolve(AndersonOperator(zero_noise(TorusGrid(1, 64))), 5)
    expected = FOUR_PI2 * np.array([0, 1, 1, 4, 4])
    assert np.allclose(es.eigenvalues, expected, rtol=1e-8, atol=1e-8)


def test_laplacian_multiplicity_2d():
    es = eigensolve(AndersonOperator(zero_noise(TorusGrid(2, 32))), 6)
    assert np.sum(np.abs(es.eigenvalues - FOUR_PI2) < 1e-6) == 4
    assert es.clusters()[:2] == [[0], [1, 2, 3, 4]]


def test_dense_oracle():
    op = noisy_op(2, 16, 1)
    es = eigensolve(op, 10)
    ref = dense_eigenvalues(op, 10)
    assert np.max(np.abs(es.eigenvalues - ref) / np.maximum(1, np.abs(ref))) <= 1e-8
    assert es.orthonormality_defect < 1e-10


def test_eigensolve_deterministic():
    op = noisy_op(1, 64, 1)
    a, b = eigensolve(op, 5), eigensolve(op, 5)
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.eigenfunctions, b.eigenfunctions)


def test_eigensolve_errors():
    op = noisy_op(1, 16, 1)
    with pytest.raises(ValueError):
        eigensolve(op, 5)
    with pytest.raises(EigenSolverError) as info:
        eigensolve(noisy_op(2, 32, 1), 4, tol=1e-30, max_blocks=1, max_restarts=1)
    assert info.value.worst_residual > 0


def test_rayleigh_quotients(system_1d):
    op, es, _ = system_1d
    g = es.grid
    for k in range(es.m):
        u = es.eigenfunctions[k]
        assert g.inner(op.matvec(u), u) == pytest.approx(es.eigenvalues[k], rel=1e-8, abs=1e-8)


def test_shift_covariance(system_1d):
    op, es, _ = system_1d
    shifted = eigensolve(op.with_shift(op.shift + 2.5), es.m)
    assert np.allclose(shifted.eigenvalues, es.eigenvalues + 2.5, atol=1e-7)
    for k in (0, 1, 2):
        overlap = abs(es.grid.inner(shifted.eigenfunctions[k], es.eigenfunctions[k]))
        assert overlap == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_min_max_monotone(seed):
    g = TorusGrid(1, 32)
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(g.shape)
    bump = rng.uniform(0, 3, g.shape)
    base = dense_eigenvalues(AndersonOperator(custom_noise(xi, g)), 8)
    # lowering xi raises the potential -xi by a nonnegative amount
    raised = dense_eigenvalues(AndersonOperator(custom_noise(xi - bump, g)), 8)
    assert np.all(raised >= base - 1e-10)


def test_ground_gauge_zero_noise():
    es = eigensolve(AndersonOperator(zero_noise(TorusGrid(2, 16))), 1)
    gauge = ground_gauge(es)
    assert np.allclose(gauge.u0.values, 1.0, atol=1e-8)
    assert np.max(np.abs(gauge.Z.values)) < 1e-8
    assert abs(gauge.lambda0) < 1e-8


def test_ground_gauge_cosine_potential():
    g = TorusGrid(1, 64)
    x = g.coords[0]
    es = eigensolve(AndersonOperator(custom_noise(np.cos(2 * np.pi * x), g)), 3)
    assert ground_gauge(es).u0.values.min() > 0


def test_ground_state_positive_over_seeds():
    for seed in range(1, 21):
        es = eigensolve(noisy_op(2, 64, seed), 1)
        assert ground_gauge(es).u0.values.min() > 0


def test_ground_gauge_rejects_sign_change():
    g = TorusGrid(1, 32)
    x = g.coords[0]
    u = np.sqrt(2) * np.sin(2 * np.pi * x)
    es = EigenSystem(g, np.array([0.0]), u[None], np.zeros(1), 0.0)
    with pytest.raises(GroundStateError, match="positivity"):
        ground_gauge(es)


def test_conjugate_apply_constant(system_1d):
    _, _, gauge = system_1d
    g = gauge.grid
    out = conjugate_apply(gauge, GridField(g, np.ones(g.shape)))
    assert np.allclose(out.values, gauge.lambda0, atol=1e-12 * max(1, abs(gauge.lambda0)))


def test_conjugated_eigenfunctions(system_1d):
    _, es, gauge = system_1d
    for k in range(es.m):
        assert conjugation_residual(gauge, es, k) <= 1e-6


def test_conjugation_direct_identity(system_1d):
    op, _, gauge = system_1d
    g = gauge.grid
    x = g.coords[0]
    w = GridField(g, np.sin(2 * np.pi * x) + 0.3 * np.cos(6 * np.pi * x) + 1.0)
    lhs = op.matvec(gauge.u0.values * w.values) / gauge.u0.values
    rhs = conjugate_apply(gauge, w).values
    assert g.norm(lhs - rhs) <= 1e-6 * w.norm()


def test_conjugation_preserves_spectrum(system_1d):
    _, es, gauge = system_1d
    g = es.grid
    weight = gauge.u0.values**2
    for k in range(es.m):
        w = GridField(g, es.eigenfunctions[k] / gauge.u0.values)
        # H~ is symmetric in L2(u0^2 dx)
        rq = g.inner(conjugate_apply(gauge, w).values * weight, w.values) / g.inner(w.values * weight, w.values)
        assert rq == pytest.approx(es.eigenvalues[k], rel=1e-6, abs=1e-6)


def test_probe_zero_noise_constant():
    tab = resolvent_probe(TorusGrid(1, 64), 1, [0.25, 0.125, 0.0625], 4, zero_noise=True)
    assert np.max(np.abs(tab.differences)) < 1e-8


def test_probe_1d_differences_decrease():
    eps = [2.0**-j for j in range(3, 10)]
    tab = resolvent_probe(TorusGrid(1, 1024), 5, eps, 4)
    steps = np.diff(np.abs(tab.differences), axis=0)
    # the three lowest levels settle from j = 3, the fourth once eps resolves it (j = 4)
    assert np.all(steps[:, :3] < 0)
    assert np.all(steps[1:, 3] < 0)
    with pytest.raises(ValueError):
        resolvent_probe(TorusGrid(1, 64), 5, [0.1, 0.2], 2)
