import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from roughmanifold import drivers
from roughmanifold.calculus import (
    OneFormE,
    RdeConfig,
    SmoothMap,
    VectorFieldFamilyE,
    integrate_one_form,
    pushforward_flat,
    solve_rde_flat,
)
from roughmanifold.errors import DimensionError, ExplosionError, UsageError
from roughmanifold.tensor import path_chen_defect, weak_geometricity_defect


def quadratic_map():
    """phi(x) = (x1 x2, sin x1 + x2^2)."""

    def value(x):
        x = np.asarray(x)
        return np.stack([x[..., 0] * x[..., 1], np.sin(x[..., 0]) + x[..., 1] ** 2], -1)

    def jac(x):
        x = np.asarray(x)
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 0], J[..., 0, 1] = x[..., 1], x[..., 0]
        J[..., 1, 0], J[..., 1, 1] = np.cos(x[..., 0]), 2 * x[..., 1]
        return J

    def hess(x):
        x = np.asarray(x)
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 0, 0, 1] = H[..., 0, 1, 0] = 1.0
        H[..., 1, 0, 0] = -np.sin(x[..., 0])
        H[..., 1, 1, 1] = 2.0
        return H

    return SmoothMap(2, 2, value, jac, hess)


def test_smooth_map_derivatives(rng):
    assert quadratic_map().check(rng) < 1e-6


def test_constant_form_is_linear_map():
    X = drivers.brownian(4, 64, dim=3)
    L = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 3.0]])
    Y = integrate_one_form(OneFormE.constant(L), X)
    assert np.allclose(Y.values - Y.values[0], (X.values - X.values[0]) @ L.T, atol=1e-12)
    assert np.allclose(Y.step2, np.einsum("ia,kab,jb->kij", L, X.step2, L), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_area_form_gives_levy_area(seed):
    # alpha(x) = (-x2, x1): int alpha(dX) over [0,T] = X^{12} - X^{21} + x0 terms
    X = drivers.brownian(seed, 64, dim=2).translate(np.array([0.3, -0.2]))
    alpha = OneFormE(
        2,
        1,
        lambda x: np.stack([-np.asarray(x)[..., 1], np.asarray(x)[..., 0]], -1)[..., None, :],
        lambda x: np.broadcast_to(np.array([[[0.0, 1.0], [-1.0, 0.0]]]), np.shape(x)[:-1] + (1, 2, 2)),
    )
    Y = integrate_one_form(alpha, X)
    inc = X.increment_idx(0, 64)
    x0 = X.values[0]
    expect = inc.level2[0, 1] - inc.level2[1, 0] + x0[0] * inc.level1[1] - x0[1] * inc.level1[0]
    assert Y.values[-1, 0] - Y.values[0, 0] == pytest.approx(expect, abs=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_exact_form_chain_rule(seed):
    phi = quadratic_map()
    X = drivers.brownian(seed, 128, dim=2, scale=0.5)
    Y = integrate_one_form(OneFormE.exact(phi), X)
    assert np.allclose(Y.values - Y.values[0], phi.value(X.values) - phi.value(X.values[0]), atol=1e-9)


def test_pushforward_identities():
    X = drivers.lissajous(64)
    L = np.array([[2.0, 1.0], [0.0, -1.0], [1.0, 1.0]])
    P = pushforward_flat(SmoothMap.linear(L), X)
    Q = X.linear_map(L)
    assert np.allclose(P.values, Q.values, atol=1e-12) and np.allclose(P.step2, Q.step2, atol=1e-12)
    Y = pushforward_flat(quadratic_map(), X)
    assert np.allclose(Y.values, quadratic_map().value(X.values), atol=1e-10)
    assert path_chen_defect(Y).max_defect <= 1e-12
    assert weak_geometricity_defect(Y).max_defect <= 1e-10


def test_pushforward_functorial():
    phi = quadratic_map()
    psi = SmoothMap.linear(np.array([[1.0, 2.0], [0.5, -1.0]]))
    X = drivers.lissajous(128)
    a = pushforward_flat(psi, pushforward_flat(phi, X))
    b = pushforward_flat(psi.compose(phi), X)
    assert np.abs(a.values - b.values).max() < 1e-8
    assert np.abs(a.step2 - b.step2).max() < 1e-8


def test_linear_rde_matches_exponential():
    A = np.array([[[0.0, -1.0], [1.0, 0.0]], [[0.3, 0.0], [0.0, 0.3]]])  # commuting
    Y = VectorFieldFamilyE.linear(A)
    Z = drivers.lissajous(256)
    X = solve_rde_flat(Y, Z, [1.0, 0.0])
    for k in range(0, 257, 32):
        z = Z.values[k] - Z.values[0]
        expect = expm(z[0] * A[0] + z[1] * A[1]) @ np.array([1.0, 0.0])
        assert np.allclose(X.values[k], expect, atol=1e-7)


def test_translation_rde_reproduces_driver():
    Z = drivers.brownian(9, 64, dim=3)
    X = solve_rde_flat(VectorFieldFamilyE.translation(3), Z, np.ones(3))
    assert np.allclose(X.values - 1.0, Z.values, atol=1e-12)
    assert np.allclose(X.step2, Z.step2, atol=1e-10)


def test_rde_output_is_weakly_geometric():
    A = np.array([[[0.0, -1.0], [1.0, 0.0]], [[0.0, 0.5], [0.2, 0.0]]])
    Z = drivers.brownian(2, 256, dim=2)
    cfg = RdeConfig()
    X = solve_rde_flat(VectorFieldFamilyE.linear(A), Z, [1.0, 0.5], cfg)
    assert path_chen_defect(X).max_defect <= 1e-12
    assert weak_geometricity_defect(X).max_defect <= 10 * cfg.tol


def test_riccati_and_explosion():
    Y = VectorFieldFamilyE(1, 1, lambda x: np.asarray(x)[..., :, None] ** 2, lambda x: 2 * np.asarray(x)[..., :, None, None])
    Z = drivers.line([1.0], 100, T=0.5)
    X = solve_rde_flat(Y, Z, [1.0])
    assert np.abs(X.values[:, 0] - 1 / (1 - Z.grid)).max() < 1e-6
    with pytest.raises(ExplosionError) as info:
        solve_rde_flat(Y, drivers.line([1.0], 100, T=2.0), [1.0])
    assert info.value.time == pytest.approx(1.0, abs=0.05)


def test_rde_errors():
    with pytest.raises(UsageError):
        RdeConfig(h=-1)
    with pytest.raises(UsageError):
        RdeConfig(rounds=-1)
    Y = VectorFieldFamilyE.translation(2)
    with pytest.raises(DimensionError):
        solve_rde_flat(Y, drivers.line([1.0, 0.0, 0.0], 8), np.zeros(2))
